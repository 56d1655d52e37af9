//! Timing harness. Every measured region is preceded by seeded inputs and
//! an equal number of warmup iterations, and bracketed by device
//! synchronization.

use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd;
use crate::device::Device;
use crate::dispatch::{self, BoxedValue};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;
use crate::vdev;

#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// A dispatcher op on one or two `(n,)` F64 inputs, e.g. `op:add`.
    Op(String),
    BackwardGate,
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Region> {
        if s == "backward_gate" {
            return Ok(Region::BackwardGate);
        }
        match s.strip_prefix("op:") {
            Some(name) if !name.is_empty() => Ok(Region::Op(name.to_string())),
            _ => Err(Error::Other(format!("unknown bench region {s:?}; expected op:<name> or backward_gate"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub region: Region,
    pub seed: u64,
    pub warmup: usize,
    pub reps: usize,
    pub numel: usize,
    pub device: Device,
    pub threads: usize,
    pub rounds: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { region: Region::Op("add".into()), seed: 0, warmup: 10, reps: 100, numel: 4096, device: Device::Host, threads: 4, rounds: 100 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub region: String,
    pub device: String,
    pub numel: usize,
    pub seed: u64,
    pub warmup: usize,
    pub reps: usize,
    pub mean_us: f64,
    pub var_us2: f64,
    pub min_us: f64,
    pub max_us: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GateReport {
    pub region: String,
    pub seed: u64,
    pub threads: usize,
    pub rounds: usize,
    pub successes_per_round: Vec<usize>,
    pub rejected_per_round: Vec<usize>,
    pub other_errors: usize,
    pub rejected_count: usize,
    pub mean_round_us: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum BenchReport {
    Op(OpReport),
    Gate(GateReport),
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn sync_device(device: Device) -> Result<()> {
    if let Device::Virt(d) = device {
        vdev::current_runtime().synchronize_device(d)?;
    }
    Ok(())
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    match &cfg.region {
        Region::Op(name) => bench_op(cfg, name).map(BenchReport::Op),
        Region::BackwardGate => bench_gate(cfg).map(BenchReport::Gate),
    }
}

fn bench_op(cfg: &BenchConfig, name: &str) -> Result<OpReport> {
    let qualified = if name.contains("::") { name.to_string() } else { format!("vt::{name}") };
    let snap = dispatch::registry().snapshot(&qualified).map_err(|_| Error::Other(format!("unknown bench region op:{name}")))?;
    let n_in = snap.schema.num_tensor_inputs;
    if !(1..=2).contains(&n_in) || !snap.schema.inplace_alias.is_empty() {
        return Err(Error::Other(format!("op:{name} is not a plain unary or binary op")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs: Vec<Tensor> = (0..n_in)
        .map(|_| Tensor::from_vec((0..cfg.numel).map(|_| rng.gen_range(0.5..1.5)).collect::<Vec<f64>>(), &[cfg.numel], cfg.device))
        .collect::<Result<_>>()?;
    let args: Vec<BoxedValue> = inputs.iter().map(BoxedValue::from).collect();
    let _ng = autograd::no_grad();
    let call = || -> Result<()> {
        dispatch::registry().call_boxed(&qualified, &args)?;
        Ok(())
    };
    for _ in 0..cfg.warmup {
        call()?;
    }
    sync_device(cfg.device)?;
    let mut samples = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        sync_device(cfg.device)?;
        let t0 = Instant::now();
        call()?;
        sync_device(cfg.device)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let (mean, var) = mean_var(&samples);
    Ok(OpReport {
        region: format!("op:{name}"),
        device: cfg.device.to_string(),
        numel: cfg.numel,
        seed: cfg.seed,
        warmup: cfg.warmup,
        reps: cfg.reps,
        mean_us: mean,
        var_us2: var,
        min_us: samples.iter().cloned().fold(f64::INFINITY, f64::min),
        max_us: samples.iter().cloned().fold(0.0, f64::max),
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Counts rejected backward calls within a round and wakes the winner once
/// every other thread has been turned away.
struct RoundState {
    rejected: Mutex<usize>,
    cv: Condvar,
}

const HOLD_LIMIT: Duration = Duration::from_secs(5);

/// Tiny graph whose backward pass blocks inside its middle node until
/// `expect` other threads have been rejected (or a timeout passes).
fn gate_graph(x: &Tensor, round: &Arc<RoundState>, expect: usize) -> Result<Tensor> {
    let y = ops::mul_scalar(x, 2.0)?;
    let z = {
        let _g = autograd::no_grad();
        y.deep_clone()?
    };
    let st = round.clone();
    autograd::record_forward(
        "bench::hold",
        &[y],
        std::slice::from_ref(&z),
        Box::new(move |grads, _saved| {
            let mut r = st.rejected.lock();
            let deadline = Instant::now() + HOLD_LIMIT;
            while *r < expect {
                if st.cv.wait_until(&mut r, deadline).timed_out() {
                    break;
                }
            }
            Ok(vec![grads[0].clone()])
        }),
        &[],
    );
    ops::sum_all(&z)
}

fn bench_gate(cfg: &BenchConfig) -> Result<GateReport> {
    let k = cfg.threads.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut successes = Vec::with_capacity(cfg.rounds);
    let mut rejected = Vec::with_capacity(cfg.rounds);
    let mut other = 0;
    let mut total = Duration::ZERO;
    for _ in 0..cfg.rounds {
        let round = Arc::new(RoundState { rejected: Mutex::new(0), cv: Condvar::new() });
        let barrier = Arc::new(Barrier::new(k));
        let data: Vec<Vec<f64>> = (0..k).map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let t0 = Instant::now();
        let handles: Vec<_> = data
            .into_iter()
            .map(|d| {
                let (round, barrier) = (round.clone(), barrier.clone());
                std::thread::spawn(move || -> Result<Result<()>> {
                    let x = Tensor::from_vec(d, &[8], Device::Host)?.set_requires_grad(true)?;
                    let loss = gate_graph(&x, &round, k - 1)?;
                    barrier.wait();
                    let r = loss.backward(None);
                    if matches!(r, Err(Error::GateBusy)) {
                        *round.rejected.lock() += 1;
                        round.cv.notify_all();
                    }
                    Ok(r)
                })
            })
            .collect();
        let (mut ok, mut busy) = (0, 0);
        for h in handles {
            match h.join().map_err(|_| Error::Other("bench thread panicked".into()))?? {
                Ok(()) => ok += 1,
                Err(Error::GateBusy) => busy += 1,
                Err(_) => other += 1,
            }
        }
        total += t0.elapsed();
        successes.push(ok);
        rejected.push(busy);
    }
    Ok(GateReport {
        region: "backward_gate".into(),
        seed: cfg.seed,
        threads: k,
        rounds: cfg.rounds,
        rejected_count: rejected.iter().sum(),
        successes_per_round: successes,
        rejected_per_round: rejected,
        other_errors: other,
        mean_round_us: if cfg.rounds == 0 { 0.0 } else { total.as_secs_f64() * 1e6 / cfg.rounds as f64 },
    })
}
