//! Randomized multi-stream tensor programs with explicit event discipline,
//! and tensor-level graph capture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbt::vdev::{self, Runtime, RuntimeConfig, StreamId};
use vbt::{ops, DType, Device, Result, Tensor};

#[derive(Clone, Debug)]
pub enum Step {
    /// New tensor filled with `value` on stream index `s`.
    Alloc { s: usize, value: f64 },
    /// `out = a + b` on stream `s`.
    Add { s: usize, a: usize, b: usize },
    /// `dst += 0.5 * src` on stream `s`.
    AddInPlace { s: usize, dst: usize, src: usize },
    /// Drop the tensor in slot `t`.
    Drop { t: usize },
}

pub const N_STREAMS: usize = 3;
const LEN: usize = 96;

/// A random program over tensor slots. Slots are never reused, so step
/// indices stay stable when the program is replayed.
pub fn random_program(seed: u64, steps: usize) -> Vec<Step> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live: Vec<usize> = Vec::new();
    let mut next = 0;
    let mut prog = Vec::with_capacity(steps);
    for _ in 0..steps {
        let s = rng.gen_range(0..N_STREAMS);
        let pick = |rng: &mut ChaCha8Rng, live: &[usize]| live[rng.gen_range(0..live.len())];
        let step = match rng.gen_range(0..10) {
            0..=2 => Step::Alloc { s, value: rng.gen_range(-4..4) as f64 },
            3..=5 if !live.is_empty() => Step::Add { s, a: pick(&mut rng, &live), b: pick(&mut rng, &live) },
            6 | 7 if live.len() >= 2 => {
                let dst = pick(&mut rng, &live);
                let src = pick(&mut rng, &live);
                if dst == src {
                    continue;
                }
                Step::AddInPlace { s, dst, src }
            }
            8 | 9 if live.len() > 2 => {
                let i = rng.gen_range(0..live.len());
                Step::Drop { t: live.swap_remove(i) }
            }
            _ => Step::Alloc { s, value: rng.gen_range(-4..4) as f64 },
        };
        if matches!(step, Step::Alloc { .. } | Step::Add { .. }) {
            live.push(next);
            next += 1;
        }
        prog.push(step);
    }
    prog
}

struct Slot {
    t: Tensor,
    mirror: Vec<f64>,
    // (stream, op count on that stream) of the last write and of later reads
    writer: (usize, u64),
    readers: Vec<(usize, u64)>,
}

/// Outcome of running a program.
#[derive(Debug)]
pub struct ProgramRun {
    pub hazards: usize,
    pub waits: usize,
    pub values_ok: bool,
}

/// Explicit event ordering between streams as vector clocks. A wait is
/// issued only when the access is not already ordered.
struct Clocks {
    vc: Vec<Vec<u64>>,
    waits: usize,
    skip: Option<usize>,
}

impl Clocks {
    fn tick(&mut self, s: usize) -> (usize, u64) {
        self.vc[s][s] += 1;
        (s, self.vc[s][s])
    }

    fn order(&mut self, rt: &Runtime, streams: &[StreamId], prior: (usize, u64), s: usize) -> Result<()> {
        let (from, count) = prior;
        if self.vc[s][from] >= count {
            return Ok(());
        }
        let k = self.waits;
        self.waits += 1;
        if self.skip != Some(k) {
            let e = rt.event_create(0)?;
            rt.event_record(e, 0, streams[from])?;
            rt.event_wait(e, 0, streams[s])?;
        }
        let src = self.vc[from].clone();
        for (d, v) in self.vc[s].iter_mut().zip(src) {
            *d = (*d).max(v);
        }
        Ok(())
    }
}

/// Runs `prog` on a fresh one-device runtime with scheduler seed `seed`.
/// The `skip`-th event wait (in issue order) is left out when given.
pub fn run_program(prog: &[Step], seed: u64, skip: Option<usize>) -> Result<ProgramRun> {
    let rt = Runtime::new(RuntimeConfig { num_devices: 1, seed, ..RuntimeConfig::default() });
    rt.hazard_check_mode(true);
    let streams: Vec<StreamId> = (0..N_STREAMS).map(|i| if i == 0 { Ok(0) } else { rt.create_stream(0) }).collect::<Result<_>>()?;
    let mut clk = Clocks { vc: vec![vec![0; N_STREAMS]; N_STREAMS], waits: 0, skip };
    let values_ok = vdev::with_runtime(&rt, || -> Result<bool> {
        let mut slots: Vec<Option<Slot>> = Vec::new();
        for step in prog {
            match *step {
                Step::Alloc { s, value } => {
                    let _g = rt.stream_guard(0, streams[s]);
                    let t = Tensor::full(&[LEN], value, DType::F64, Device::Virt(0))?;
                    let w = clk.tick(s);
                    slots.push(Some(Slot { t, mirror: vec![value; LEN], writer: w, readers: vec![] }));
                }
                Step::Add { s, a, b } => {
                    for i in [a, b] {
                        clk.order(&rt, &streams, slots[i].as_ref().unwrap().writer, s)?;
                    }
                    let _g = rt.stream_guard(0, streams[s]);
                    let (sa, sb) = (slots[a].as_ref().unwrap(), slots[b].as_ref().unwrap());
                    let t = ops::add(&sa.t, &sb.t)?;
                    let mirror: Vec<f64> = sa.mirror.iter().zip(&sb.mirror).map(|(x, y)| x + y).collect();
                    let op = clk.tick(s);
                    for i in [a, b] {
                        let sl = slots[i].as_mut().unwrap();
                        sl.t.storage().record_stream(streams[s]);
                        sl.readers.push(op);
                    }
                    slots.push(Some(Slot { t, mirror, writer: op, readers: vec![] }));
                }
                Step::AddInPlace { s, dst, src } => {
                    let d = slots[dst].as_ref().unwrap();
                    let mut prior = vec![slots[src].as_ref().unwrap().writer, d.writer];
                    prior.extend(d.readers.iter().copied());
                    for p in prior {
                        clk.order(&rt, &streams, p, s)?;
                    }
                    let _g = rt.stream_guard(0, streams[s]);
                    let (sd, ss) = (slots[dst].as_ref().unwrap(), slots[src].as_ref().unwrap());
                    ops::add_(&sd.t, &ss.t, 0.5)?;
                    let upd: Vec<f64> = sd.mirror.iter().zip(&ss.mirror).map(|(x, y)| x + 0.5 * y).collect();
                    ss.t.storage().record_stream(streams[s]);
                    sd.t.storage().record_stream(streams[s]);
                    let op = clk.tick(s);
                    slots[src].as_mut().unwrap().readers.push(op);
                    let sd = slots[dst].as_mut().unwrap();
                    sd.mirror = upd;
                    sd.writer = op;
                    sd.readers.clear();
                }
                Step::Drop { t } => {
                    slots[t] = None;
                }
            }
        }
        rt.synchronize_all()?;
        let mut ok = true;
        for sl in slots.iter().flatten() {
            ok &= sl.t.to_vec::<f64>()? == sl.mirror;
        }
        Ok(ok)
    })?;
    rt.synchronize_all()?;
    Ok(ProgramRun { hazards: rt.hazard_reports().len(), waits: clk.waits, values_ok })
}

/// Result of a capture/replay check.
#[derive(Debug)]
pub struct ReplayRun {
    pub replays: usize,
    pub captured_commands: usize,
    pub graph_segments: usize,
}

/// Captures an allocation + kernel sequence on a side stream, replays it
/// three times and checks outputs and graph-pool layout after each replay.
pub fn capture_replay(seed: u64) -> std::result::Result<ReplayRun, String> {
    let e = |x: vbt::Error| x.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rt = Runtime::new(RuntimeConfig { num_devices: 1, seed, ..RuntimeConfig::default() });
    rt.hazard_check_mode(true);
    let xs: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ws: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = |x: &Tensor, w: &Tensor| -> Result<Tensor> {
        let h = ops::tanh(&ops::add(&ops::mul(x, w)?, x)?)?;
        let h = ops::exp(&ops::mul_scalar(&h, 0.5)?)?;
        ops::sum(&ops::reshape(&h, &[8, 8])?, &[1], false)
    };
    vdev::with_runtime(&rt, || {
        let dev = Device::Virt(0);
        let x = Tensor::from_vec(xs.clone(), &[64], dev).map_err(e)?;
        let w = Tensor::from_vec(ws.clone(), &[64], dev).map_err(e)?;
        let eager = f(&x, &w).map_err(e)?.to_vec::<f64>().map_err(e)?;

        let s = rt.create_stream(0).map_err(e)?;
        rt.synchronize_all().map_err(e)?;
        let pool = rt.allocator().graph_pool_create(0).map_err(e)?;
        rt.begin_capture(0, s, pool).map_err(e)?;
        let out = {
            let _g = rt.stream_guard(0, s);
            f(&x, &w)
        };
        let graph = rt.end_capture(0, s).map_err(e)?;
        let out = out.map_err(e)?;
        let tag = format!("graph:{pool}");
        let graph_layout = || -> std::result::Result<Vec<_>, String> {
            Ok(rt.allocator().memory_snapshot(0).map_err(e)?.segments.into_iter().filter(|g| g.pool == tag).collect())
        };
        let layout0 = graph_layout()?;
        if layout0.is_empty() {
            return Err("capture allocated nothing from the graph pool".into());
        }
        let addr = out.data_ptr() as usize;
        let reserved0 = rt.allocator().memory_stats(0).map_err(e)?.reserved_bytes.current;
        let mut first: Option<Vec<u64>> = None;
        for r in 0..3 {
            rt.replay(&graph, s).map_err(e)?;
            rt.synchronize_all().map_err(e)?;
            let got = out.to_vec::<f64>().map_err(e)?;
            let bits: Vec<u64> = got.iter().map(|v| v.to_bits()).collect();
            if got != eager {
                return Err(format!("replay {r} differs from eager execution"));
            }
            match &first {
                None => first = Some(bits),
                Some(b) if *b != bits => return Err(format!("replay {r} not bitwise identical")),
                _ => {}
            }
            if out.data_ptr() as usize != addr || graph_layout()? != layout0 {
                return Err(format!("graph-pool layout moved on replay {r}"));
            }
            if rt.allocator().memory_stats(0).map_err(e)?.reserved_bytes.current != reserved0 {
                return Err(format!("replay {r} reserved new memory"));
            }
        }
        if !rt.hazard_reports().is_empty() {
            return Err(format!("hazards: {}", rt.hazard_reports_json()));
        }
        let n = graph.num_commands;
        drop(out);
        rt.destroy_graph(&graph).map_err(e)?;
        rt.allocator().graph_pool_release(pool).map_err(e)?;
        Ok(ReplayRun { replays: 3, captured_commands: n, graph_segments: layout0.len() })
    })
}
