//! One PASS/FAIL line per acceptance criterion.
//!
//!     cargo test --test acceptance -- --nocapture

#[allow(dead_code)]
mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbt::bench::{self, BenchConfig, BenchReport, Region};
use vbt::fabric::Fabric;
use vbt::train::{train_reversal, TrainConfig};
use vbt::vdev::{self, Runtime, RuntimeConfig};
use vbt::{Device, Tensor};

type Outcome = Result<String, String>;

struct Criterion {
    id: &'static str,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

const fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn gradcheck() -> Outcome {
    let _b = common::BACKWARD.lock();
    let covered: std::collections::BTreeSet<&str> = common::gradcheck::cases(0).iter().map(|c| c.op).collect();
    let missing: Vec<&str> = vbt::ops::differentiable_ops().into_iter().filter(|o| !covered.contains(o)).collect();
    if !missing.is_empty() {
        return Err(format!("no case for {missing:?}"));
    }
    let (worst, per) = common::gradcheck::run_all(0)?;
    Ok(format!(
        "{} cases over {} ops, F64, h={:e}, worst rel err {worst:.2e} <= {:e}",
        per.len(),
        covered.len(),
        common::gradcheck::H,
        common::gradcheck::REL_TOL
    ))
}

fn views() -> Outcome {
    let kinds = common::gather::run_cases(20_240, 1000)?;
    let total: usize = kinds.iter().sum();
    if total != 1000 {
        return Err(format!("ran {total} cases"));
    }
    let mix: Vec<String> = common::gather::KINDS.iter().zip(kinds).map(|(k, n)| format!("{k}={n}")).collect();
    Ok(format!("1000 cases bit-identical to the gather oracle ({})", mix.join(" ")))
}

fn allocator() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut ops, mut ooms, mut gcs, mut caps) = (0, 0, 0, 0);
    for seed in 0..100 {
        let len = rng.gen_range(1000..=10_000);
        let s = common::alloc_sim::run_trace(seed, len).map_err(|e| format!("trace {seed} ({len} ops): {e}"))?;
        ops += s.ops;
        ooms += s.ooms;
        gcs += s.gc_passes;
        caps += s.captures;
    }
    Ok(format!("100 traces, {ops} ops, stats+snapshots identical each step ({ooms} ooms, {gcs} gc passes, {caps} captures)"))
}

fn stream_safety() -> Outcome {
    let e = |x: vbt::Error| x.to_string();
    let mut waits = 0;
    for seed in 0..100 {
        let prog = common::streams::random_program(seed, 120);
        let r = common::streams::run_program(&prog, seed, None).map_err(e)?;
        if r.hazards != 0 || !r.values_ok {
            return Err(format!("scheduler seed {seed}: {} hazards, values ok {}", r.hazards, r.values_ok));
        }
        waits += r.waits;
    }
    let prog = common::streams::random_program(3, 120);
    let neg = common::streams::run_program(&prog, 3, Some(0)).map_err(e)?;
    if neg.hazards == 0 {
        return Err("removing the first event wait produced no report".into());
    }
    Ok(format!("100 seeds, {waits} waits, 0 hazards; one wait removed -> {} reports", neg.hazards))
}

fn graphs() -> Outcome {
    let mut cmds = 0;
    for seed in 0..3 {
        let r = common::streams::capture_replay(seed)?;
        cmds += r.captured_commands;
    }
    Ok(format!("3 graphs ({cmds} commands) replayed 3x bitwise identical, graph-pool addresses stable"))
}

fn backward_gate() -> Outcome {
    let _b = common::BACKWARD.lock();
    let cfg = BenchConfig { region: Region::BackwardGate, threads: 4, rounds: 100, ..BenchConfig::default() };
    let BenchReport::Gate(g) = bench::run(&cfg).map_err(|e| e.to_string())? else {
        return Err("not a gate report".into());
    };
    let bad = (0..g.rounds).find(|&r| g.successes_per_round[r] != 1 || g.rejected_per_round[r] != 3);
    if g.rounds != 100 || bad.is_some() || g.other_errors != 0 {
        return Err(format!("round {bad:?}: {:?}", g));
    }
    Ok("K=4, 100 rounds of exactly 1 success + 3 GateBusy".into())
}

fn allreduce() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut runs = 0;
    for n in 2..=5usize {
        for elems in [n * 8, n * 8 + 1, 1001] {
            let rt = Runtime::new(RuntimeConfig { num_devices: n, seed: n as u64, ..RuntimeConfig::default() });
            let f = Fabric::new(rt.clone());
            f.enable_all_peers().map_err(|e| e.to_string())?;
            let ints: Vec<Vec<i64>> = (0..n).map(|_| (0..elems).map(|_| rng.gen_range(-1i64 << 40..1 << 40)).collect()).collect();
            let reals: Vec<Vec<f64>> = (0..n).map(|_| (0..elems).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let isum: Vec<i64> = (0..elems).map(|i| ints.iter().map(|v| v[i]).sum()).collect();
            let fsum: Vec<f64> = (0..elems).map(|i| reals.iter().map(|v| v[i]).sum()).collect();
            let r: Result<(), String> = vdev::with_runtime(&rt, || {
                let e = |x: vbt::Error| x.to_string();
                let ib = ints.iter().enumerate().map(|(d, v)| Tensor::from_vec(v.clone(), &[elems], Device::Virt(d))).collect::<vbt::Result<Vec<_>>>().map_err(e)?;
                let fb = reals.iter().enumerate().map(|(d, v)| Tensor::from_vec(v.clone(), &[elems], Device::Virt(d))).collect::<vbt::Result<Vec<_>>>().map_err(e)?;
                rt.synchronize_all().map_err(e)?;
                rt.set_trace(true);
                f.ring_allreduce(&ib).map_err(e)?;
                rt.synchronize_all().map_err(e)?;
                for d in 0..n {
                    let steps = rt.trace().iter().filter(|t| t.device == d && t.label.contains("copy_p2p")).count();
                    if steps != 2 * (n - 1) {
                        return Err(format!("N={n} E={elems}: rank {d} took {steps} steps"));
                    }
                }
                rt.set_trace(false);
                f.ring_allreduce(&fb).map_err(e)?;
                for d in 0..n {
                    if ib[d].to_vec::<i64>().map_err(e)? != isum {
                        return Err(format!("N={n} E={elems}: I64 rank {d} inexact"));
                    }
                    for (x, y) in fb[d].to_vec::<f64>().map_err(e)?.iter().zip(&fsum) {
                        worst = worst.max((x - y).abs());
                    }
                }
                Ok(())
            });
            r?;
            if worst > 1e-12 {
                return Err(format!("N={n} E={elems}: F64 error {worst:e} > 1e-12"));
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs N=2..5, I64 exact, F64 max err {worst:.1e} <= 1e-12, 2(N-1) steps per rank"))
}

fn safetensors() -> Outcome {
    let n = common::golden::run_all()?;
    Ok(format!("{n} golden fixtures byte-exact; save∘load∘save byte-identical"))
}

fn training() -> Outcome {
    let _b = common::BACKWARD.lock();
    let e = |x: vbt::Error| x.to_string();
    let proxy = TrainConfig { steps: 200, eval_every: 0, ..TrainConfig::default() };
    let r = train_reversal(&proxy, |_| {}).map_err(e)?;
    let sm = r.smoothed_losses(0.9);
    let cut = 1.0 - sm[sm.len() - 1] / sm[0];
    if cut < 0.5 {
        return Err(format!("200-step smoothed loss fell {:.1}% < 50%", 100.0 * cut));
    }
    let full = TrainConfig { steps: 2000, early_stop_acc: Some(0.99), device: Device::Host, ..TrainConfig::default() };
    let r = train_reversal(&full, |_| {}).map_err(e)?;
    match r.first_step_reaching(0.99) {
        Some(step) => Ok(format!("200-step smoothed loss -{:.1}%; 99% token accuracy at step {step}", 100.0 * cut)),
        None => Err(format!("held-out accuracy {:.4} after 2000 steps", r.final_eval_acc().unwrap_or(0.0))),
    }
}

fn parity() -> Outcome {
    let report = vbt::parity::check_parity(vbt::parity::shipped_manifest_path()).map_err(|e| e.to_string())?;
    if !report.passed() {
        return Err(format!("missing {:?}", report.missing));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "[]").map_err(|e| e.to_string())?;
    let bogus = dir.path().join("bogus.json");
    std::fs::write(&bogus, r#"["vbt.zeros", "vbt.no_such_symbol"]"#).map_err(|e| e.to_string())?;
    let (em, bo) = (vbt::parity::check_parity(&empty).map_err(|e| e.to_string())?, vbt::parity::check_parity(&bogus).map_err(|e| e.to_string())?);
    if em.exit_code() != 0 || bo.exit_code() == 0 {
        return Err("exit codes wrong for the empty or the missing-symbol manifest".into());
    }
    Ok(format!("{} symbols present; empty manifest passes, missing symbol exits nonzero", report.checked))
}

const CRITERIA: [Criterion; 10] = [
    Criterion { id: "C1", name: "gradcheck", limit: secs(60), run: gradcheck },
    Criterion { id: "C2", name: "strided views + broadcast", limit: secs(30), run: views },
    Criterion { id: "C3", name: "allocator vs reference simulator", limit: secs(120), run: allocator },
    Criterion { id: "C4", name: "stream safety", limit: None, run: stream_safety },
    Criterion { id: "C5", name: "graph capture/replay", limit: None, run: graphs },
    Criterion { id: "C6", name: "backward gate", limit: None, run: backward_gate },
    Criterion { id: "C7", name: "ring allreduce", limit: None, run: allreduce },
    Criterion { id: "C8", name: "safetensors", limit: None, run: safetensors },
    Criterion { id: "C9", name: "reversal training", limit: secs(300), run: training },
    Criterion { id: "C10", name: "API parity", limit: None, run: parity },
];

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    for c in &CRITERIA {
        let t0 = Instant::now();
        let out = (c.run)();
        let took = t0.elapsed();
        let out = match (out, c.limit) {
            (Ok(_), Some(l)) if took > l => Err(format!("took {:.1} s > {} s", took.as_secs_f64(), l.as_secs())),
            (o, _) => o,
        };
        let limit = c.limit.map(|l| format!(", limit {} s", l.as_secs())).unwrap_or_default();
        let (tag, msg) = match &out {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        println!("{tag} {} {}: {msg} ({:.1} s{limit})", c.id, c.name, took.as_secs_f64());
        if out.is_err() {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
