//! Single-process multi-device fabric over virtual devices: peer access,
//! explicit P2P copies, a chunked ring allreduce and observability
//! snapshots.
//!
//! The ring runs in pull mode. In every step each rank copies one chunk
//! from its left neighbour into a scratch buffer (or straight into its own
//! buffer during the allgather phase) on its own current stream, then
//! reduces locally. Per-rank events, double buffered by step parity, order
//! each copy after the producer's previous step and each overwrite after
//! the consumer's previous read.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;
use serde::Serialize;

use crate::device::Device;
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::{make_tensor, Tensor};
use crate::vdev::{self, Command, CopyKind, EventId, MemRange, Runtime, StreamId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub bytes_sent: u64,
    pub transfers: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    ReduceScatter,
    Allgather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RingStep {
    pub step: usize,
    pub phase: Phase,
    pub src: usize,
    pub dst: usize,
    pub chunk: usize,
}

/// Chunk boundaries and the send schedule for an `n`-rank ring over `elems`
/// elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RingPlan {
    pub world_size: usize,
    pub chunks: Vec<(usize, usize)>,
    pub steps: Vec<RingStep>,
}

impl RingPlan {
    pub fn new(world_size: usize, elems: usize) -> Result<RingPlan> {
        if world_size < 2 {
            return Err(Error::Fabric(format!("ring needs at least 2 ranks, got {world_size}")));
        }
        let n = world_size;
        let (base, extra) = (elems / n, elems % n);
        let mut chunks = Vec::with_capacity(n);
        let mut start = 0;
        for c in 0..n {
            let len = base + usize::from(c < extra);
            chunks.push((start, start + len));
            start += len;
        }
        let mut steps = Vec::with_capacity(2 * (n - 1) * n);
        for k in 0..2 * (n - 1) {
            let phase = if k < n - 1 { Phase::ReduceScatter } else { Phase::Allgather };
            for src in 0..n {
                // reduce-scatter step k sends chunk (r - k); allgather step j sends chunk (r + 1 - j)
                let chunk = match phase {
                    Phase::ReduceScatter => (src + n * k - k) % n,
                    Phase::Allgather => (src + 1 + n * k - (k - (n - 1))) % n,
                };
                steps.push(RingStep { step: k, phase, src, dst: (src + 1) % n, chunk });
            }
        }
        Ok(RingPlan { world_size: n, chunks, steps })
    }

    pub fn chunk_len(&self, c: usize) -> usize {
        self.chunks[c].1 - self.chunks[c].0
    }

    pub fn num_steps(&self) -> usize {
        2 * (self.world_size - 1)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkEntry {
    pub src: usize,
    pub dst: usize,
    pub bytes_sent: u64,
    pub transfers: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FabricSnapshot {
    pub world_size: usize,
    pub peer_matrix: Vec<Vec<bool>>,
    pub links: Vec<LinkEntry>,
    pub in_flight_events: usize,
    pub completed_collectives: u64,
}

impl FabricSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }
}

struct State {
    peer: Vec<Vec<bool>>,
    links: BTreeMap<(usize, usize), LinkStats>,
    events: Vec<EventId>,
    completed: u64,
}

pub struct Fabric {
    rt: Arc<Runtime>,
    state: Mutex<State>,
    collective: Mutex<()>,
}

impl Fabric {
    pub fn new(rt: Arc<Runtime>) -> Fabric {
        let n = rt.num_devices();
        let peer = (0..n).map(|i| (0..n).map(|j| i == j).collect()).collect();
        Fabric { rt, state: Mutex::new(State { peer, links: BTreeMap::new(), events: Vec::new(), completed: 0 }), collective: Mutex::new(()) }
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.rt
    }

    pub fn world_size(&self) -> usize {
        self.rt.num_devices()
    }

    pub fn enable_peer(&self, a: usize, b: usize) -> Result<()> {
        self.rt.check_device(a)?;
        self.rt.check_device(b)?;
        if a == b {
            return Err(Error::Fabric(format!("device {a} cannot peer with itself")));
        }
        let mut st = self.state.lock();
        st.peer[a][b] = true;
        st.peer[b][a] = true;
        Ok(())
    }

    /// Enable every pair.
    pub fn enable_all_peers(&self) -> Result<()> {
        let n = self.world_size();
        for a in 0..n {
            for b in a + 1..n {
                self.enable_peer(a, b)?;
            }
        }
        Ok(())
    }

    pub fn peer_enabled(&self, a: usize, b: usize) -> bool {
        self.state.lock().peer.get(a).and_then(|r| r.get(b)).copied().unwrap_or(false)
    }

    pub fn link_stats(&self, src: usize, dst: usize) -> LinkStats {
        self.state.lock().links.get(&(src, dst)).copied().unwrap_or_default()
    }

    fn new_event(&self, device: usize) -> Result<EventId> {
        let e = self.rt.event_create(device)?;
        self.state.lock().events.push(e);
        Ok(e)
    }

    fn account(&self, src: usize, dst: usize, bytes: usize) {
        let mut st = self.state.lock();
        let l = st.links.entry((src, dst)).or_default();
        l.bytes_sent += bytes as u64;
        l.transfers += 1;
    }

    fn virt_index(&self, t: &Tensor) -> Result<usize> {
        let d = t.device().virt_index().ok_or_else(|| Error::Fabric(format!("fabric tensors must be virtual, got {}", t.device())))?;
        match t.storage().runtime() {
            Some(rt) if Arc::ptr_eq(rt, &self.rt) => Ok(d),
            _ => Err(Error::Fabric("tensor belongs to a different runtime".into())),
        }
    }

    /// Copy `src` into `dst` across a peer link. Both must be contiguous
    /// with equal shape and dtype. Ordered after pending work on `src`'s
    /// current stream and runs on `dst`'s current stream.
    pub fn p2p_copy(&self, dst: &Tensor, src: &Tensor) -> Result<()> {
        let (s, d) = (self.virt_index(src)?, self.virt_index(dst)?);
        if !self.peer_enabled(s, d) {
            return Err(Error::PeerDisabled(s, d));
        }
        if src.sizes() != dst.sizes() {
            return Err(Error::ShapeMismatch(format!("p2p copy {:?} into {:?}", src.sizes(), dst.sizes())));
        }
        if src.dtype() != dst.dtype() {
            return Err(Error::DTypeMismatch { expected: dst.dtype(), got: src.dtype() });
        }
        if !src.is_contiguous() || !dst.is_contiguous() {
            return Err(Error::Fabric("p2p copy needs contiguous tensors".into()));
        }
        let bytes = src.numel() * src.dtype().size_bytes();
        let (ss, ds) = (self.rt.current_stream(s), self.rt.current_stream(d));
        let ready = self.new_event(s)?;
        self.rt.event_record(ready, s, ss)?;
        self.rt.event_wait(ready, d, ds)?;
        self.rt.launch(
            d,
            ds,
            Command::Copy {
                src: MemRange::new(Some(s), src.data_ptr(), bytes),
                dst: MemRange::new(Some(d), dst.data_ptr(), bytes),
                kind: if s == d { CopyKind::D2D } else { CopyKind::P2P },
            },
        )?;
        // the source must outlive the read and not be overwritten before it
        let done = self.new_event(d)?;
        self.rt.event_record(done, d, ds)?;
        self.rt.event_wait(done, s, ss)?;
        dst.bump_version();
        if s != d {
            self.account(s, d, bytes);
        }
        Ok(())
    }

    /// Sum `buffers` (one per device, rank = device index order given)
    /// in place across a ring.
    pub fn ring_allreduce(&self, buffers: &[Tensor]) -> Result<()> {
        let _one = self.collective.lock();
        let n = buffers.len();
        if n < 2 {
            return Err(Error::Fabric(format!("allreduce needs at least 2 ranks, got {n}")));
        }
        let devs: Vec<usize> = buffers.iter().map(|b| self.virt_index(b)).collect::<Result<_>>()?;
        let mut seen = devs.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != n {
            return Err(Error::Fabric(format!("one buffer per device expected, got devices {devs:?}")));
        }
        let (shape, dtype) = (buffers[0].sizes().to_vec(), buffers[0].dtype());
        for b in buffers {
            if b.sizes() != shape.as_slice() {
                return Err(Error::ShapeMismatch(format!("allreduce buffers {:?} vs {:?}", shape, b.sizes())));
            }
            if b.dtype() != dtype {
                return Err(Error::DTypeMismatch { expected: dtype, got: b.dtype() });
            }
            if !b.is_contiguous() {
                return Err(Error::Fabric("allreduce buffers must be contiguous".into()));
            }
        }
        if matches!(dtype, DType::Bool) {
            return Err(Error::UnsupportedDType(dtype, "allreduce"));
        }
        for r in 0..n {
            let (a, b) = (devs[r], devs[(r + 1) % n]);
            if !self.peer_enabled(a, b) {
                return Err(Error::PeerDisabled(a, b));
            }
        }

        let elems = buffers[0].numel();
        let plan = RingPlan::new(n, elems)?;
        let esz = dtype.size_bytes();
        let streams: Vec<StreamId> = devs.iter().map(|&d| self.rt.current_stream(d)).collect();
        let max_chunk = (0..n).map(|c| plan.chunk_len(c)).max().unwrap_or(0);
        let scratch: Vec<Tensor> = devs
            .iter()
            .map(|&d| vdev::with_runtime(&self.rt, || make_tensor(&[max_chunk], dtype, Device::Virt(d))))
            .collect::<Result<_>>()?;
        let events: [Vec<EventId>; 2] = [
            devs.iter().map(|&d| self.new_event(d)).collect::<Result<_>>()?,
            devs.iter().map(|&d| self.new_event(d)).collect::<Result<_>>()?,
        ];
        // step -1: capture prior work on every rank
        for r in 0..n {
            self.rt.event_record(events[1][r], devs[r], streams[r])?;
        }
        for k in 0..plan.num_steps() {
            let (prev, cur) = (&events[(k + 1) % 2], &events[k % 2]);
            for q in 0..n {
                let r = (q + n - 1) % n;
                let st = plan.steps[k * n + r];
                debug_assert_eq!((st.src, st.dst), (r, q));
                let (lo, hi) = plan.chunks[st.chunk];
                let len = (hi - lo) * esz;
                let (dq, sq) = (devs[q], streams[q]);
                // left neighbour finished writing this chunk; right neighbour finished reading ours
                self.rt.event_wait(prev[r], dq, sq)?;
                self.rt.event_wait(prev[(q + 1) % n], dq, sq)?;
                if len > 0 {
                    let src_ptr = unsafe { buffers[r].data_ptr().add(lo * esz) };
                    let own = unsafe { buffers[q].data_ptr().add(lo * esz) };
                    let src = MemRange::new(Some(devs[r]), src_ptr, len);
                    match st.phase {
                        Phase::ReduceScatter => {
                            let tmp = scratch[q].data_ptr();
                            self.rt.launch(dq, sq, Command::Copy { src, dst: MemRange::new(Some(dq), tmp, len), kind: CopyKind::P2P })?;
                            self.rt.launch(dq, sq, reduce_kernel(dq, own, tmp, hi - lo, dtype))?;
                        }
                        Phase::Allgather => {
                            self.rt.launch(dq, sq, Command::Copy { src, dst: MemRange::new(Some(dq), own, len), kind: CopyKind::P2P })?;
                        }
                    }
                }
                self.rt.event_record(cur[q], dq, sq)?;
                self.account(devs[r], dq, len);
            }
        }
        // later work on rank r must not overwrite what rank r+1 is still reading
        let last = &events[(plan.num_steps() + 1) % 2];
        for r in 0..n {
            self.rt.event_wait(last[(r + 1) % n], devs[r], streams[r])?;
        }
        for b in buffers {
            b.bump_version();
        }
        drop(scratch);
        self.state.lock().completed += 1;
        Ok(())
    }

    pub fn snapshot(&self) -> FabricSnapshot {
        let (peer, links, events, completed) = {
            let st = self.state.lock();
            (st.peer.clone(), st.links.clone(), st.events.clone(), st.completed)
        };
        let in_flight = events.iter().filter(|&&e| matches!(self.rt.event_query(e), Ok(false))).count();
        {
            // forget completed events so the list stays short
            let mut st = self.state.lock();
            st.events.retain(|&e| matches!(self.rt.event_query(e), Ok(false)));
        }
        FabricSnapshot {
            world_size: self.world_size(),
            peer_matrix: peer,
            links: links.into_iter().map(|((src, dst), l)| LinkEntry { src, dst, bytes_sent: l.bytes_sent, transfers: l.transfers }).collect(),
            in_flight_events: in_flight,
            completed_collectives: completed,
        }
    }
}

fn reduce_kernel(device: usize, acc: *mut u8, inc: *mut u8, n: usize, dtype: DType) -> Command {
    let bytes = n * dtype.size_bytes();
    let (a, b) = (acc as usize, inc as usize);
    let reads = vec![MemRange::new(Some(device), acc, bytes), MemRange::new(Some(device), inc, bytes)];
    let writes = vec![MemRange::new(Some(device), acc, bytes)];
    Command::kernel("allreduce_sum", reads, writes, move || {
        // SAFETY: both ranges are live device buffers ordered by the ring's events.
        unsafe {
            match dtype {
                DType::F64 => add_into::<f64>(a, b, n),
                DType::F32 => add_into::<f32>(a, b, n),
                DType::I64 => add_into::<i64>(a, b, n),
                DType::I32 => add_into::<i32>(a, b, n),
                DType::Bool => unreachable!("rejected before launch"),
            }
        }
    })
}

unsafe fn add_into<T: Copy + std::ops::Add<Output = T>>(acc: usize, inc: usize, n: usize) {
    let acc = std::slice::from_raw_parts_mut(acc as *mut T, n);
    let inc = std::slice::from_raw_parts(inc as *const T, n);
    for (x, y) in acc.iter_mut().zip(inc) {
        *x = *x + *y;
    }
}

/// Fabric over the global runtime.
pub fn global() -> &'static Fabric {
    static F: OnceLock<Fabric> = OnceLock::new();
    F.get_or_init(|| Fabric::new(vdev::global().clone()))
}
