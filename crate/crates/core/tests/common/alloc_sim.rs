//! Naive reference model of the caching allocator: flat vectors, linear
//! scans, no indexes. Used to cross-check stats and snapshots on random
//! traces.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbt::alloc::{
    AllocatedBytes, AllocatorConfig, AllocatorStats, BlockId, BlockSnapshot, CachingAllocator, DeviceHooks, MemorySnapshot, PoolId,
    ReservedBytes, SegmentSnapshot,
};
use vbt::vdev::{EventId, StreamId};

pub const KIB: usize = 1024;
pub const MIB: usize = 1024 * KIB;

const ROUND: usize = 512;
const SMALL_MAX: usize = MIB;
const SMALL_SEG: usize = 2 * MIB;
const LARGE_MULT: usize = 20 * MIB;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Pool {
    Small,
    Large,
    Graph(u64),
}

impl Pool {
    fn tag(self) -> String {
        match self {
            Pool::Small => "small".into(),
            Pool::Large => "large".into(),
            Pool::Graph(p) => format!("graph:{p}"),
        }
    }
}

#[derive(Clone, Debug)]
struct Blk {
    handle: u64,
    offset: usize,
    size: usize,
    allocated: bool,
    stream: usize,
    pending: Vec<(usize, usize)>,
}

#[derive(Debug)]
struct Seg {
    pool: Pool,
    size: usize,
    blocks: Vec<Blk>,
}

pub struct NaiveSim {
    capacity: usize,
    cap: usize,
    segs: Vec<Seg>,
    // (stream, complete)
    events: Vec<(usize, bool)>,
    capturing: HashMap<usize, u64>,
    released: HashMap<u64, bool>,
    next_pool: u64,
    next_handle: u64,
    allocated: usize,
    allocated_peak: usize,
    allocated_total: usize,
    freed_total: usize,
    reserved: usize,
    reserved_peak: usize,
    retries: usize,
    ooms: usize,
    gc_passes: usize,
    pub gc_log: Vec<(u8, usize)>,
}

impl NaiveSim {
    pub fn new(capacity: usize) -> Self {
        NaiveSim {
            capacity,
            cap: capacity,
            segs: Vec::new(),
            events: Vec::new(),
            capturing: HashMap::new(),
            released: HashMap::new(),
            next_pool: 1,
            next_handle: 1,
            allocated: 0,
            allocated_peak: 0,
            allocated_total: 0,
            freed_total: 0,
            reserved: 0,
            reserved_peak: 0,
            retries: 0,
            ooms: 0,
            gc_passes: 0,
            gc_log: Vec::new(),
        }
    }

    pub fn complete_stream(&mut self, s: usize) {
        for e in self.events.iter_mut().filter(|e| e.0 == s) {
            e.1 = true;
        }
    }

    pub fn complete_all(&mut self) {
        for e in &mut self.events {
            e.1 = true;
        }
    }

    pub fn set_fraction(&mut self, f: f64) {
        self.cap = (f * self.capacity as f64).floor() as usize;
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn begin_capture(&mut self, s: usize) -> u64 {
        let p = self.next_pool;
        self.next_pool += 1;
        self.released.insert(p, false);
        self.capturing.insert(s, p);
        p
    }

    pub fn end_capture(&mut self, s: usize) {
        self.capturing.remove(&s);
    }

    pub fn release_pool(&mut self, p: u64) {
        self.released.insert(p, true);
    }

    fn reusable(&self, b: &Blk, stream: usize) -> bool {
        b.pending.iter().all(|&(s, e)| self.events[e].1 || s == stream)
    }

    /// Returns (handle, offset) or None on OOM.
    pub fn alloc(&mut self, size: usize, stream: usize) -> Option<(u64, usize)> {
        let req = size.div_ceil(ROUND) * ROUND;
        let pool = match self.capturing.get(&stream) {
            Some(&p) => Pool::Graph(p),
            None if req <= SMALL_MAX => Pool::Small,
            None => Pool::Large,
        };
        let seg_size = if req <= SMALL_MAX { SMALL_SEG } else { req.div_ceil(LARGE_MULT) * LARGE_MULT };
        if let Some(r) = self.serve(pool, req, seg_size, stream) {
            return Some(r);
        }
        self.retries += 1;
        let pools: Vec<Pool> = if matches!(pool, Pool::Graph(_)) { vec![] } else { vec![pool] };
        self.ladder(seg_size, &pools);
        if let Some(r) = self.serve(pool, req, seg_size, stream) {
            return Some(r);
        }
        self.ooms += 1;
        None
    }

    fn serve(&mut self, pool: Pool, req: usize, seg_size: usize, stream: usize) -> Option<(u64, usize)> {
        let mut best: Option<(usize, usize, usize, usize)> = None; // (size, seg, offset, blk)
        for (si, seg) in self.segs.iter().enumerate() {
            if seg.pool != pool {
                continue;
            }
            for (bi, b) in seg.blocks.iter().enumerate() {
                if !b.allocated && b.size >= req && self.reusable(b, stream) {
                    let key = (b.size, si, b.offset, bi);
                    if best.is_none_or(|k| (key.0, key.1, key.2) < (k.0, k.1, k.2)) {
                        best = Some(key);
                    }
                }
            }
        }
        let (si, bi) = match best {
            Some((_, si, _, bi)) => (si, bi),
            None if self.reserved + seg_size <= self.cap => {
                let h = self.fresh();
                self.segs.push(Seg { pool, size: seg_size, blocks: vec![Blk { handle: h, offset: 0, size: seg_size, allocated: false, stream, pending: vec![] }] });
                self.reserved += seg_size;
                self.reserved_peak = self.reserved_peak.max(self.reserved);
                (self.segs.len() - 1, 0)
            }
            None => return None,
        };
        let h = self.fresh();
        let blocks = &mut self.segs[si].blocks;
        let b = blocks[bi].clone();
        if b.size > req {
            let rem = Blk { handle: h, offset: b.offset + req, size: b.size - req, allocated: false, stream: b.stream, pending: b.pending.clone() };
            blocks.insert(bi + 1, rem);
        }
        let t = &mut blocks[bi];
        t.size = req;
        t.allocated = true;
        t.stream = stream;
        t.pending.clear();
        self.allocated += req;
        self.allocated_total += req;
        self.allocated_peak = self.allocated_peak.max(self.allocated);
        Some((t.handle, t.offset))
    }

    fn fresh(&mut self) -> u64 {
        self.next_handle += 1;
        self.next_handle
    }

    pub fn free(&mut self, handle: u64, uses: &[usize]) {
        let (si, mut bi) = self
            .segs
            .iter()
            .enumerate()
            .find_map(|(si, s)| s.blocks.iter().position(|b| b.handle == handle).map(|bi| (si, bi)))
            .expect("sim handle is live");
        let own = self.segs[si].blocks[bi].stream;
        let streams: BTreeSet<usize> = uses.iter().copied().chain([own]).collect();
        let mut pending = vec![];
        for s in streams {
            if self.capturing.contains_key(&s) {
                continue;
            }
            self.events.push((s, false));
            pending.push((s, self.events.len() - 1));
        }
        let blocks = &mut self.segs[si].blocks;
        let b = &mut blocks[bi];
        assert!(b.allocated);
        b.allocated = false;
        b.pending = pending;
        self.allocated -= b.size;
        self.freed_total += b.size;
        while bi > 0 && !blocks[bi - 1].allocated && blocks[bi - 1].stream == blocks[bi].stream {
            let cur = blocks.remove(bi);
            bi -= 1;
            blocks[bi].size += cur.size;
            blocks[bi].pending.extend(cur.pending);
        }
        while bi + 1 < blocks.len() && !blocks[bi + 1].allocated && blocks[bi + 1].stream == blocks[bi].stream {
            let nxt = blocks.remove(bi + 1);
            blocks[bi].size += nxt.size;
            blocks[bi].pending.extend(nxt.pending);
        }
    }

    fn release(&mut self, pools: &[Pool]) -> usize {
        let mut freed = 0;
        let mut keep = Vec::new();
        for seg in std::mem::take(&mut self.segs) {
            let empty = seg.blocks.iter().all(|b| !b.allocated);
            let settled = seg.blocks.iter().flat_map(|b| &b.pending).all(|&(_, e)| self.events[e].1);
            if pools.contains(&seg.pool) && empty && settled {
                freed += seg.size;
                self.reserved -= seg.size;
            } else {
                keep.push(seg);
            }
        }
        self.segs = keep;
        freed
    }

    fn reclaimable(&self) -> Vec<Pool> {
        let mut v = vec![Pool::Small, Pool::Large];
        for s in &self.segs {
            if let Pool::Graph(p) = s.pool {
                if *self.released.get(&p).unwrap_or(&true) && !v.contains(&s.pool) {
                    v.push(s.pool);
                }
            }
        }
        v
    }

    fn ladder(&mut self, needed: usize, pools: &[Pool]) -> usize {
        self.gc_passes += 1;
        let f1 = self.release(pools);
        self.gc_log.push((1, f1));
        if self.reserved + needed <= self.cap {
            return f1;
        }
        self.gc_passes += 1;
        self.complete_all();
        let f2 = self.release(pools);
        self.gc_log.push((2, f2));
        if self.reserved + needed <= self.cap {
            return f1 + f2;
        }
        self.gc_passes += 1;
        let all = self.reclaimable();
        let f3 = self.release(&all);
        self.gc_log.push((3, f3));
        f1 + f2 + f3
    }

    pub fn gc_ladder(&mut self, needed: usize) -> usize {
        self.ladder(needed, &[Pool::Small, Pool::Large])
    }

    pub fn empty_cache(&mut self) -> usize {
        self.complete_all();
        let all = self.reclaimable();
        self.release(&all)
    }

    pub fn stats(&self) -> AllocatorStats {
        let blocks = || self.segs.iter().flat_map(|s| &s.blocks);
        AllocatorStats {
            allocated_bytes: AllocatedBytes {
                current: self.allocated,
                peak: self.allocated_peak,
                allocated_total: self.allocated_total,
                freed_total: self.freed_total,
            },
            reserved_bytes: ReservedBytes { current: self.reserved, peak: self.reserved_peak },
            active_blocks: blocks().filter(|b| b.allocated).count(),
            inactive_split_blocks: self.segs.iter().filter(|s| s.blocks.len() > 1).flat_map(|s| &s.blocks).filter(|b| !b.allocated).count(),
            num_alloc_retries: self.retries,
            num_ooms: self.ooms,
            num_gc_passes: self.gc_passes,
        }
    }

    pub fn snapshot(&self, device: usize) -> MemorySnapshot {
        MemorySnapshot {
            device,
            segments: self
                .segs
                .iter()
                .map(|s| SegmentSnapshot {
                    pool: s.pool.tag(),
                    size: s.size,
                    blocks: s
                        .blocks
                        .iter()
                        .map(|b| BlockSnapshot {
                            offset: b.offset,
                            size: b.size,
                            state: if b.allocated { "allocated" } else { "free" }.into(),
                            stream: b.stream,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Device hooks with scripted event completion and capture state.
#[derive(Default)]
pub struct ScriptHooks {
    events: Mutex<Vec<(StreamId, bool)>>,
    capturing: Mutex<HashMap<StreamId, PoolId>>,
}

impl ScriptHooks {
    pub fn complete_stream(&self, s: StreamId) {
        for e in self.events.lock().iter_mut().filter(|e| e.0 == s) {
            e.1 = true;
        }
    }

    pub fn complete_all(&self) {
        for e in self.events.lock().iter_mut() {
            e.1 = true;
        }
    }

    pub fn set_capture(&self, s: StreamId, pool: Option<PoolId>) {
        let mut c = self.capturing.lock();
        match pool {
            Some(p) => c.insert(s, p),
            None => c.remove(&s),
        };
    }
}

impl DeviceHooks for ScriptHooks {
    fn record_event(&self, _device: usize, stream: StreamId) -> EventId {
        let mut ev = self.events.lock();
        ev.push((stream, false));
        ev.len() as EventId
    }
    fn event_complete(&self, event: EventId) -> bool {
        self.events.lock()[event as usize - 1].1
    }
    fn synchronize(&self, _device: usize) {
        self.complete_all();
    }
    fn capture_pool(&self, _device: usize, stream: StreamId) -> Option<PoolId> {
        self.capturing.lock().get(&stream).copied()
    }
}

pub const TRACE_CAPACITY: usize = 128 * MIB;
const STREAMS: usize = 4;

fn check_invariants(snap: &MemorySnapshot, st: &AllocatorStats) -> Result<(), String> {
    let mut reserved = 0;
    let mut allocated = 0;
    let mut active = 0;
    for seg in &snap.segments {
        let mut off = 0;
        for b in &seg.blocks {
            if b.offset != off {
                return Err(format!("gap or overlap at offset {off} in segment of size {}", seg.size));
            }
            off += b.size;
            if b.state == "allocated" {
                allocated += b.size;
                active += 1;
            }
        }
        if off != seg.size {
            return Err(format!("blocks cover {off} of a {} byte segment", seg.size));
        }
        reserved += seg.size;
    }
    let a = &st.allocated_bytes;
    if st.reserved_bytes.current != reserved || a.current != allocated || st.active_blocks != active {
        return Err(format!("stats disagree with layout: {st:?}, reserved {reserved}, allocated {allocated}"));
    }
    if a.allocated_total - a.freed_total != a.current || a.current > st.reserved_bytes.current {
        return Err(format!("allocated bytes not conserved: {a:?}"));
    }
    if a.peak < a.current || st.reserved_bytes.peak < st.reserved_bytes.current {
        return Err("peak below current".into());
    }
    Ok(())
}

/// Summary of one trace run.
#[derive(Debug, Default, Clone, Copy)]
pub struct TraceSummary {
    pub ops: usize,
    pub ooms: usize,
    pub gc_passes: usize,
    pub captures: usize,
}

/// Drives the allocator and the naive model with the same random trace of
/// `ops` operations, comparing after every step.
pub fn run_trace(seed: u64, ops: usize) -> Result<TraceSummary, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hooks = Arc::new(ScriptHooks::default());
    let real = CachingAllocator::new(1, TRACE_CAPACITY, AllocatorConfig::default(), hooks.clone());
    let mut sim = NaiveSim::new(TRACE_CAPACITY);
    let mut live: Vec<(BlockId, u64)> = Vec::new();
    let mut capture: Option<(StreamId, PoolId)> = None;
    let mut ended_pools: Vec<PoolId> = Vec::new();
    let mut summary = TraceSummary { ops, ..Default::default() };
    let mut prev = real.memory_stats(0).unwrap();

    for step in 0..ops {
        let fail = |what: String| Err(format!("seed {seed} step {step}: {what}"));
        let roll = rng.gen_range(0..1000);
        match roll {
            0..=459 => {
                let size = match rng.gen_range(0..100) {
                    0..=69 => rng.gen_range(1..64 * KIB),
                    70..=84 => rng.gen_range(64 * KIB..=MIB),
                    85..=94 => rng.gen_range(MIB + 1..8 * MIB),
                    _ => rng.gen_range(8 * MIB..40 * MIB),
                };
                let s = rng.gen_range(0..STREAMS);
                let r = real.allocate(0, size, s);
                let m = sim.alloc(size, s);
                match (r, m) {
                    (Ok(b), Some((h, off))) => {
                        if b.offset != off {
                            return fail(format!("alloc {size} on {s}: offset {} vs model {off}", b.offset));
                        }
                        live.push((b.id, h));
                    }
                    (Err(vbt::Error::OutOfMemory { .. }), None) => summary.ooms += 1,
                    (r, m) => return fail(format!("alloc {size} on {s}: {:?} vs model {m:?}", r.map(|b| b.offset))),
                }
            }
            460..=859 if !live.is_empty() => {
                let (id, h) = live.swap_remove(rng.gen_range(0..live.len()));
                let uses: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(0..STREAMS)).collect();
                if let Err(e) = real.free_with_uses(id, &uses) {
                    return fail(format!("free: {e}"));
                }
                sim.free(h, &uses);
            }
            860..=929 => {
                let s = rng.gen_range(0..STREAMS);
                hooks.complete_stream(s);
                sim.complete_stream(s);
            }
            930..=939 => {
                hooks.complete_all();
                sim.complete_all();
            }
            940..=949 => {
                let a = real.empty_cache(0).unwrap();
                let b = sim.empty_cache();
                if a != b {
                    return fail(format!("empty_cache freed {a} vs model {b}"));
                }
            }
            950..=959 => {
                let needed = rng.gen_range(1..64) * MIB;
                let a = real.gc_ladder(0, needed).unwrap();
                let b = sim.gc_ladder(needed);
                if a != b {
                    return fail(format!("gc_ladder freed {a} vs model {b}"));
                }
            }
            960..=969 => {
                let f = [0.25, 0.5, 0.75, 1.0][rng.gen_range(0..4)];
                real.set_per_process_memory_fraction(0, f).unwrap();
                sim.set_fraction(f);
            }
            970..=989 => match capture.take() {
                None => {
                    let s = rng.gen_range(0..STREAMS);
                    let p = real.graph_pool_create(0).unwrap();
                    let q = sim.begin_capture(s);
                    if p != q {
                        return fail(format!("pool id {p} vs model {q}"));
                    }
                    hooks.set_capture(s, Some(p));
                    capture = Some((s, p));
                    summary.captures += 1;
                }
                Some((s, p)) => {
                    hooks.set_capture(s, None);
                    sim.end_capture(s);
                    ended_pools.push(p);
                }
            },
            990..=999 if !ended_pools.is_empty() => {
                let p = ended_pools.swap_remove(rng.gen_range(0..ended_pools.len()));
                real.graph_pool_release(p).unwrap();
                sim.release_pool(p);
            }
            _ => {}
        }
        let st = real.memory_stats(0).unwrap();
        let want = sim.stats();
        if st != want {
            return fail(format!("stats differ\n  real  {st:?}\n  model {want:?}"));
        }
        let snap = real.memory_snapshot(0).unwrap();
        if snap != sim.snapshot(0) {
            return fail("snapshots differ".into());
        }
        if let Err(e) = check_invariants(&snap, &st) {
            return fail(e);
        }
        let cap = real.cap_bytes(0).unwrap();
        if cap != sim.cap() || (st.reserved_bytes.current > prev.reserved_bytes.current && st.reserved_bytes.current > cap) {
            return fail(format!("reservation grew past the cap: {} > {cap}", st.reserved_bytes.current));
        }
        prev = st;
    }
    let log: Vec<(u8, usize)> = real.gc_log(0).iter().map(|r| (r.rung, r.freed_bytes)).collect();
    if log != sim.gc_log {
        return Err(format!("seed {seed}: GC logs differ"));
    }
    summary.gc_passes = prev.num_gc_passes;
    Ok(summary)
}
