use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use vbt::bench::{self, BenchConfig};
use vbt::error::{Error, Result};
use vbt::fabric::Fabric;
use vbt::interop::safetensors;
use vbt::train::{self, TrainConfig};
use vbt::vdev::{self, Runtime, RuntimeConfig};
use vbt::{dispatch, ops, parity, plugin, DType, Device, Tensor};

#[derive(Parser)]
#[command(name = "vbt", about = "Eager tensor runtime with a virtual async device")]
struct Cli {
    /// Shared library to load before running the command (repeatable).
    #[arg(long = "plugin", global = true)]
    plugins: Vec<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quick end-to-end checks of every subsystem.
    Selftest,
    /// List registered operators.
    Ops,
    TrainReversal {
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value = "host")]
        device: Device,
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
        #[arg(long)]
        early_stop: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    Bench {
        /// `op:<name>` or `backward_gate`.
        #[arg(long, default_value = "op:add")]
        region: String,
        #[arg(long, default_value = "host")]
        device: Device,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 4096)]
        numel: usize,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long, default_value_t = 100)]
        rounds: usize,
    },
    AllreduceDemo {
        #[arg(long, default_value_t = 4)]
        world: usize,
        #[arg(long, default_value_t = 1024)]
        elems: usize,
        #[arg(long, default_value = "f64")]
        dtype: DType,
    },
    Parity {
        #[arg(long)]
        manifest: PathBuf,
    },
    SnapshotDump {
        #[arg(long)]
        device: usize,
    },
}

fn out(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn emit(v: serde_json::Value) {
    out(&v.to_string());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    for p in &cli.plugins {
        match plugin::load_plugin(p) {
            Ok(m) => emit(json!({"plugin": m.path, "abi": format!("{}.{}", m.abi_major, m.minor_used), "ops": m.ops})),
            Err(e) => {
                emit(json!({"plugin": p, "error": e.to_string()}));
                return ExitCode::FAILURE;
            }
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            emit(json!({"error": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.cmd {
        Cmd::Selftest => selftest(cli.seed),
        Cmd::Ops => {
            let reg = dispatch::registry();
            for name in reg.op_names() {
                let s = reg.snapshot(&name)?;
                let keys: Vec<String> = s.base_kernels.keys().map(|k| format!("{k:?}")).collect();
                emit(json!({
                    "op": name,
                    "inputs": s.schema.num_tensor_inputs,
                    "outputs": s.schema.num_tensor_outputs,
                    "inplace": !s.schema.inplace_alias.is_empty(),
                    "autograd": s.has_autograd_wrapper(),
                    "kernels": keys,
                }));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainReversal { steps, device, eval_every, early_stop, checkpoint } => {
            let cfg = TrainConfig {
                steps: *steps,
                device: *device,
                seed: cli.seed,
                eval_every: *eval_every,
                early_stop_acc: *early_stop,
                checkpoint: checkpoint.clone(),
                ..TrainConfig::default()
            };
            let report = train::train_reversal(&cfg, out)?;
            emit(json!({"final_eval_acc": report.final_eval_acc(), "first_step_99": report.first_step_reaching(0.99)}));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench { region, device, warmup, reps, numel, threads, rounds } => {
            let cfg = BenchConfig {
                region: region.parse()?,
                seed: cli.seed,
                warmup: *warmup,
                reps: *reps,
                numel: *numel,
                device: *device,
                threads: *threads,
                rounds: *rounds,
            };
            out(&bench::run(&cfg)?.to_json());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::AllreduceDemo { world, elems, dtype } => {
            let ok = allreduce_demo(*world, *elems, *dtype, cli.seed)?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Parity { manifest } => {
            let r = parity::check_parity(manifest)?;
            emit(json!({"manifest": manifest, "checked": r.checked, "missing": r.missing, "pass": r.passed()}));
            Ok(ExitCode::from(r.exit_code() as u8))
        }
        Cmd::SnapshotDump { device } => {
            let rt = vdev::current_runtime();
            let alloc = rt.allocator();
            emit(json!({"device": device, "stats": alloc.memory_stats(*device)?}));
            out(&alloc.memory_snapshot(*device)?.to_json());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn allreduce_demo(world: usize, elems: usize, dtype: DType, seed: u64) -> Result<bool> {
    use rand::{Rng, SeedableRng};
    let rt = Runtime::new(RuntimeConfig { num_devices: world, seed, ..RuntimeConfig::default() });
    rt.hazard_check_mode(true);
    let fabric = Fabric::new(rt.clone());
    fabric.enable_all_peers()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..world)
        .map(|_| (0..elems).map(|_| if dtype.is_float() { rng.gen_range(-1.0..1.0) } else { rng.gen_range(-1000..1000) as f64 }).collect())
        .collect();
    let oracle: Vec<f64> = (0..elems).map(|i| data.iter().map(|v| v[i]).sum()).collect();
    let bufs = vdev::with_runtime(&rt, || -> Result<Vec<Tensor>> {
        data.iter()
            .enumerate()
            .map(|(d, v)| Tensor::from_vec(v.clone(), &[elems], Device::Virt(d)).and_then(|t| ops::kernels::cast(&t, dtype)))
            .collect()
    })?;
    let t0 = std::time::Instant::now();
    fabric.ring_allreduce(&bufs)?;
    let mut max_err = 0.0f64;
    for b in &bufs {
        for (x, y) in b.to_f64_vec()?.iter().zip(&oracle) {
            max_err = max_err.max((x - y).abs());
        }
    }
    let tol = match dtype {
        DType::F64 => 1e-12,
        DType::F32 => 1e-4 * world as f64,
        _ => 0.0,
    };
    let hazards = rt.hazard_reports().len();
    let ok = max_err <= tol && hazards == 0;
    out(&fabric.snapshot().to_json());
    emit(json!({
        "world": world, "elems": elems, "dtype": dtype, "max_abs_err": max_err, "tolerance": tol,
        "steps_per_rank": 2 * (world - 1), "hazards": hazards, "ms": t0.elapsed().as_secs_f64() * 1e3,
        "result": if ok { "PASS" } else { "FAIL" },
    }));
    Ok(ok)
}

fn check(name: &str, f: impl FnOnce() -> Result<()>) -> bool {
    let r = f();
    emit(json!({"check": name, "ok": r.is_ok(), "error": r.as_ref().err().map(|e| e.to_string())}));
    r.is_ok()
}

fn expect(cond: bool, what: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Other(what.to_string()))
    }
}

fn selftest(seed: u64) -> Result<ExitCode> {
    let mut ok = true;
    ok &= check("ops", || {
        for dev in [Device::Host, Device::Virt(0)] {
            let a = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3], dev)?;
            let b = Tensor::from_vec(vec![4.0, 5.0, 6.0], &[3], dev)?;
            expect(ops::add(&a, &b)?.to_vec::<f64>()? == vec![5.0, 7.0, 9.0], "add mismatch")?;
        }
        Ok(())
    });
    ok &= check("views", || {
        let a = Tensor::from_vec((0..6).map(|v| v as f64).collect::<Vec<_>>(), &[2, 3], Device::Host)?;
        let t = a.transpose_view(0, 1)?;
        expect(t.contiguous()?.to_vec::<f64>()? == vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0], "transpose mismatch")
    });
    ok &= check("autograd", || {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0], &[3], Device::Host)?.set_requires_grad(true)?;
        ops::sum_all(&ops::mul(&x, &x)?)?.backward(None)?;
        let g = x.grad().ok_or_else(|| Error::Other("no grad".into()))?;
        expect(g.to_vec::<f64>()? == vec![2.0, -4.0, 6.0], "grad mismatch")
    });
    ok &= check("vdev_hazards", || {
        let rt = Runtime::new(RuntimeConfig { num_devices: 1, seed, ..RuntimeConfig::default() });
        rt.hazard_check_mode(true);
        vdev::with_runtime(&rt, || -> Result<()> {
            let a = Tensor::full(&[1024], 1.5, DType::F64, Device::Virt(0))?;
            let b = ops::exp(&ops::mul(&a, &a)?)?;
            b.to_vec::<f64>()?;
            Ok(())
        })?;
        expect(rt.hazard_reports().is_empty(), "hazards reported")
    });
    ok &= check("allocator", || {
        let rt = Runtime::with_devices(1);
        let before = rt.allocator().memory_stats(0)?;
        vdev::with_runtime(&rt, || Tensor::zeros(&[4096], DType::F64, Device::Virt(0)).map(drop))?;
        rt.synchronize_all()?;
        let after = rt.allocator().memory_stats(0)?;
        expect(after.allocated_bytes.current == before.allocated_bytes.current, "allocated bytes not released")?;
        expect(after.reserved_bytes.current >= after.allocated_bytes.current, "reserved below allocated")
    });
    ok &= check("safetensors", || {
        let mut m = safetensors::TensorMap::new();
        m.insert("w".into(), Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], &[2, 2], Device::Host)?);
        m.insert("i".into(), Tensor::from_vec(vec![7i64, -1], &[2], Device::Host)?);
        let bytes = safetensors::serialize_map(&m, &Default::default())?;
        let (back, meta) = safetensors::deserialize(&bytes)?;
        expect(safetensors::serialize_map(&back, &meta)? == bytes, "round trip not byte identical")
    });
    ok &= check("allreduce", || {
        let rt = Runtime::with_devices(3);
        let f = Fabric::new(rt.clone());
        f.enable_all_peers()?;
        let bufs = vdev::with_runtime(&rt, || -> Result<Vec<Tensor>> {
            (0..3).map(|d| Tensor::from_vec(vec![d as i64 + 1; 5], &[5], Device::Virt(d))).collect()
        })?;
        f.ring_allreduce(&bufs)?;
        for b in &bufs {
            expect(b.to_vec::<i64>()? == vec![6; 5], "allreduce mismatch")?;
        }
        Ok(())
    });
    ok &= check("backward_gate", || {
        let cfg = BenchConfig { region: bench::Region::BackwardGate, rounds: 3, seed, ..BenchConfig::default() };
        let bench::BenchReport::Gate(g) = bench::run(&cfg)? else { return Err(Error::Other("unexpected report".into())) };
        expect(g.successes_per_round.iter().all(|&s| s == 1) && g.rejected_per_round.iter().all(|&r| r == 3), "gate admitted wrong count")
    });
    ok &= check("parity", || expect(parity::check_parity(parity::shipped_manifest_path())?.passed(), "shipped manifest has missing symbols"));
    emit(json!({"selftest": if ok { "PASS" } else { "FAIL" }}));
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
