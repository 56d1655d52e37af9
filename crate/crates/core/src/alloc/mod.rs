//! Stream-ordered caching allocator for the virtual devices.
//!
//! Requests are rounded to 512 bytes and routed to a small pool (<= 1 MiB,
//! 2 MiB segments) or a large pool (segments rounded up to 20 MiB
//! multiples). A freed block goes back on a free list with one event per
//! stream that used it; it is reusable on stream `S` once every pending
//! event recorded on a stream other than `S` has completed. Allocation
//! tries, in order: best fit among reusable free blocks (splitting the
//! remainder off), a fresh segment, the GC ladder followed by one retry,
//! and finally OOM.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vdev::{EventId, StreamId};

pub type BlockId = u64;
pub type PoolId = u64;
type SegmentId = u64;

const KIB: usize = 1024;
const MIB: usize = 1024 * KIB;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocatorConfig {
    pub round_bytes: usize,
    pub small_threshold: usize,
    pub small_segment: usize,
    pub large_segment_multiple: usize,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        AllocatorConfig { round_bytes: 512, small_threshold: MIB, small_segment: 2 * MIB, large_segment_multiple: 20 * MIB }
    }
}

impl AllocatorConfig {
    pub fn round(&self, size: usize) -> usize {
        size.div_ceil(self.round_bytes) * self.round_bytes
    }

    pub fn segment_size(&self, rounded: usize) -> usize {
        if rounded <= self.small_threshold {
            self.small_segment
        } else {
            rounded.div_ceil(self.large_segment_multiple) * self.large_segment_multiple
        }
    }
}

/// What the allocator needs from the device it manages.
pub trait DeviceHooks: Send + Sync {
    /// Record a fresh event on `stream` and return it.
    fn record_event(&self, device: usize, stream: StreamId) -> EventId;
    fn event_complete(&self, event: EventId) -> bool;
    /// Block the host until the device is idle.
    fn synchronize(&self, device: usize);
    /// The allocator no longer references `event`.
    fn release_event(&self, _event: EventId) {}
    /// Graph pool that allocations on `stream` must come from, if it is capturing.
    fn capture_pool(&self, _device: usize, _stream: StreamId) -> Option<PoolId> {
        None
    }
    fn on_alloc(&self, _device: usize, _stream: StreamId, _ptr: *mut u8, _len: usize) {}
    fn on_free(&self, _device: usize, _ptr: *mut u8, _len: usize, _events: &[EventId]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoolKind {
    Small,
    Large,
    Graph(PoolId),
}

impl PoolKind {
    pub fn tag(self) -> String {
        match self {
            PoolKind::Small => "small".into(),
            PoolKind::Large => "large".into(),
            PoolKind::Graph(id) => format!("graph:{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatedBytes {
    pub current: usize,
    pub peak: usize,
    pub allocated_total: usize,
    pub freed_total: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservedBytes {
    pub current: usize,
    pub peak: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocatorStats {
    pub allocated_bytes: AllocatedBytes,
    pub reserved_bytes: ReservedBytes,
    pub active_blocks: usize,
    pub inactive_split_blocks: usize,
    pub num_alloc_retries: usize,
    pub num_ooms: usize,
    pub num_gc_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSnapshot {
    pub offset: usize,
    pub size: usize,
    pub state: String,
    pub stream: StreamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSnapshot {
    pub pool: String,
    pub size: usize,
    pub blocks: Vec<BlockSnapshot>,
}

/// Point-in-time layout of one device's segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub device: usize,
    pub segments: Vec<SegmentSnapshot>,
}

impl MemorySnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }
}

/// One executed GC rung.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GcRung {
    pub rung: u8,
    pub freed_bytes: usize,
}

/// Result of a successful allocation.
#[derive(Debug, Clone, Copy)]
pub struct BlockInfo {
    pub id: BlockId,
    pub ptr: *mut u8,
    pub size: usize,
    pub device: usize,
    pub offset: usize,
    pub pool: PoolKind,
}

unsafe impl Send for BlockInfo {}

#[derive(Debug, Clone)]
struct Block {
    segment: SegmentId,
    offset: usize,
    size: usize,
    allocated: bool,
    alloc_stream: StreamId,
    pending: Vec<(StreamId, EventId)>,
    #[allow(dead_code)]
    split_parent: Option<BlockId>,
}

struct Segment {
    pool: PoolKind,
    size: usize,
    base: *mut u8,
    _mem: Vec<u64>,
    // offset -> block
    blocks: BTreeMap<usize, BlockId>,
}

struct DeviceAlloc {
    device: usize,
    segments: BTreeMap<SegmentId, Segment>,
    blocks: HashMap<BlockId, Block>,
    // (size, segment, offset, block) per pool, free blocks only
    free: BTreeMap<PoolKind, BTreeSet<(usize, SegmentId, usize, BlockId)>>,
    event_refs: HashMap<EventId, usize>,
    stats: AllocatorStats,
    cap_bytes: usize,
    gc_log: Vec<GcRung>,
}

unsafe impl Send for DeviceAlloc {}

#[derive(Debug, Clone, Copy)]
struct PoolState {
    device: usize,
    live_graphs: usize,
    released: bool,
}

/// Per-device caching allocator. One lock per device.
pub struct CachingAllocator {
    config: AllocatorConfig,
    capacity_bytes: usize,
    devices: Vec<Mutex<DeviceAlloc>>,
    pools: Mutex<HashMap<PoolId, PoolState>>,
    hooks: Arc<dyn DeviceHooks>,
    next_block: AtomicU64,
    next_segment: AtomicU64,
    next_pool: AtomicU64,
}

const DEVICE_SHIFT: u32 = 48;

impl CachingAllocator {
    pub fn new(num_devices: usize, capacity_bytes: usize, config: AllocatorConfig, hooks: Arc<dyn DeviceHooks>) -> Self {
        CachingAllocator {
            devices: (0..num_devices)
                .map(|d| {
                    Mutex::new(DeviceAlloc {
                        device: d,
                        segments: BTreeMap::new(),
                        blocks: HashMap::new(),
                        free: BTreeMap::new(),
                        event_refs: HashMap::new(),
                        stats: AllocatorStats::default(),
                        cap_bytes: capacity_bytes,
                        gc_log: Vec::new(),
                    })
                })
                .collect(),
            config,
            capacity_bytes,
            pools: Mutex::new(HashMap::new()),
            hooks,
            next_block: AtomicU64::new(1),
            next_segment: AtomicU64::new(1),
            next_pool: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    fn dev(&self, device: usize) -> Result<&Mutex<DeviceAlloc>> {
        self.devices.get(device).ok_or_else(|| Error::InvalidDevice(format!("virt:{device}")))
    }

    pub fn allocate(&self, device: usize, size_bytes: usize, stream: StreamId) -> Result<BlockInfo> {
        if size_bytes == 0 {
            return Err(Error::Other("allocation of zero bytes".into()));
        }
        let mut st = self.dev(device)?.lock();
        let req = self.config.round(size_bytes);
        let pool = match self.hooks.capture_pool(device, stream) {
            Some(p) => PoolKind::Graph(p),
            None if req <= self.config.small_threshold => PoolKind::Small,
            None => PoolKind::Large,
        };
        let seg_size = self.config.segment_size(req);

        if let Some(info) = self.try_serve(&mut st, pool, req, seg_size, stream) {
            self.hooks.on_alloc(device, stream, info.ptr, info.size);
            return Ok(info);
        }
        st.stats.num_alloc_retries += 1;
        // live graph pools are never reclaimed by the first two rungs
        let same_pool: &[PoolKind] = if matches!(pool, PoolKind::Graph(_)) { &[] } else { std::slice::from_ref(&pool) };
        self.ladder(&mut st, seg_size, same_pool);
        if let Some(info) = self.try_serve(&mut st, pool, req, seg_size, stream) {
            self.hooks.on_alloc(device, stream, info.ptr, info.size);
            return Ok(info);
        }
        st.stats.num_ooms += 1;
        let stats = self.stats_locked(&st);
        Err(Error::OutOfMemory {
            device,
            requested: req,
            reserved: st.stats.reserved_bytes.current,
            cap: st.cap_bytes,
            stats: Box::new(stats),
        })
    }

    fn try_serve(&self, st: &mut DeviceAlloc, pool: PoolKind, req: usize, seg_size: usize, stream: StreamId) -> Option<BlockInfo> {
        if let Some(id) = self.find_fit(st, pool, req, stream) {
            return Some(self.take(st, id, req, stream));
        }
        if st.stats.reserved_bytes.current + seg_size <= st.cap_bytes {
            let id = self.new_segment(st, pool, seg_size, stream);
            return Some(self.take(st, id, req, stream));
        }
        None
    }

    fn reusable(&self, st: &mut DeviceAlloc, id: BlockId, stream: StreamId) -> bool {
        let pending = st.blocks[&id].pending.clone();
        let mut ok = true;
        let mut done = Vec::new();
        for (s, e) in pending {
            if self.hooks.event_complete(e) {
                done.push(e);
            } else if s != stream {
                ok = false;
            }
        }
        if !done.is_empty() {
            st.blocks.get_mut(&id).unwrap().pending.retain(|(_, e)| !done.contains(e));
            for e in done {
                self.unref_event(st, e);
            }
        }
        ok
    }

    fn find_fit(&self, st: &mut DeviceAlloc, pool: PoolKind, req: usize, stream: StreamId) -> Option<BlockId> {
        let candidates: Vec<BlockId> = st
            .free
            .get(&pool)?
            .range((req, 0, 0, 0)..)
            .map(|&(_, _, _, id)| id)
            .collect();
        candidates.into_iter().find(|&id| self.reusable(st, id, stream))
    }

    fn new_segment(&self, st: &mut DeviceAlloc, pool: PoolKind, size: usize, stream: StreamId) -> BlockId {
        let seg_id = self.next_segment.fetch_add(1, Ordering::Relaxed);
        let mut mem = vec![0u64; size / 8];
        let base = mem.as_mut_ptr() as *mut u8;
        let bid = self.fresh_block_id(st.device);
        st.blocks.insert(
            bid,
            Block { segment: seg_id, offset: 0, size, allocated: false, alloc_stream: stream, pending: Vec::new(), split_parent: None },
        );
        st.segments.insert(seg_id, Segment { pool, size, base, _mem: mem, blocks: BTreeMap::from([(0, bid)]) });
        st.free.entry(pool).or_default().insert((size, seg_id, 0, bid));
        st.stats.reserved_bytes.current += size;
        st.stats.reserved_bytes.peak = st.stats.reserved_bytes.peak.max(st.stats.reserved_bytes.current);
        bid
    }

    fn fresh_block_id(&self, device: usize) -> BlockId {
        ((device as u64) << DEVICE_SHIFT) | self.next_block.fetch_add(1, Ordering::Relaxed)
    }

    fn take(&self, st: &mut DeviceAlloc, id: BlockId, req: usize, stream: StreamId) -> BlockInfo {
        let b = st.blocks[&id].clone();
        let pool = st.segments[&b.segment].pool;
        st.free.get_mut(&pool).unwrap().remove(&(b.size, b.segment, b.offset, id));
        if b.size > req {
            let rid = self.fresh_block_id(st.device);
            let rem = Block {
                segment: b.segment,
                offset: b.offset + req,
                size: b.size - req,
                allocated: false,
                alloc_stream: b.alloc_stream,
                pending: b.pending.clone(),
                split_parent: Some(id),
            };
            for &(_, e) in &rem.pending {
                *st.event_refs.entry(e).or_insert(0) += 1;
            }
            st.free.get_mut(&pool).unwrap().insert((rem.size, rem.segment, rem.offset, rid));
            st.segments.get_mut(&b.segment).unwrap().blocks.insert(rem.offset, rid);
            st.blocks.insert(rid, rem);
        }
        let old_pending = {
            let blk = st.blocks.get_mut(&id).unwrap();
            blk.size = req;
            blk.allocated = true;
            blk.alloc_stream = stream;
            std::mem::take(&mut blk.pending)
        };
        for (_, e) in old_pending {
            self.unref_event(st, e);
        }
        let s = &mut st.stats.allocated_bytes;
        s.current += req;
        s.allocated_total += req;
        s.peak = s.peak.max(s.current);
        let seg = &st.segments[&b.segment];
        BlockInfo {
            id,
            // SAFETY: offset + req lies within the segment buffer.
            ptr: unsafe { seg.base.add(b.offset) },
            size: req,
            device: st.device,
            offset: b.offset,
            pool,
        }
    }

    fn unref_event(&self, st: &mut DeviceAlloc, e: EventId) {
        if let Some(n) = st.event_refs.get_mut(&e) {
            *n -= 1;
            if *n == 0 {
                st.event_refs.remove(&e);
                self.hooks.release_event(e);
            }
        }
    }

    /// Free `block` whose last use was on `stream_of_last_use`.
    pub fn free(&self, block: BlockId, stream_of_last_use: StreamId) -> Result<()> {
        self.free_with_uses(block, &[stream_of_last_use])
    }

    /// Free `block`, ordering reuse after every stream in `uses`.
    pub fn free_with_uses(&self, block: BlockId, uses: &[StreamId]) -> Result<()> {
        let device = (block >> DEVICE_SHIFT) as usize;
        let mut st = self.dev(device)?.lock();
        let b = st.blocks.get(&block).cloned().ok_or(Error::UnknownBlock(block))?;
        if !b.allocated {
            return Err(Error::DoubleFree(block));
        }
        let mut streams: BTreeSet<StreamId> = uses.iter().copied().collect();
        streams.insert(b.alloc_stream);
        let mut pending = Vec::new();
        let mut captured = false;
        for s in streams {
            if self.hooks.capture_pool(device, s).is_some() {
                captured = true;
                continue;
            }
            let e = self.hooks.record_event(device, s);
            *st.event_refs.entry(e).or_insert(0) += 1;
            pending.push((s, e));
        }
        let seg = &st.segments[&b.segment];
        // SAFETY: block lies inside its segment.
        let ptr = unsafe { seg.base.add(b.offset) };
        let events: Vec<EventId> = pending.iter().map(|&(_, e)| e).collect();
        if !captured {
            self.hooks.on_free(device, ptr, b.size, &events);
        }

        {
            let blk = st.blocks.get_mut(&block).unwrap();
            blk.allocated = false;
            blk.pending = pending;
        }
        let s = &mut st.stats.allocated_bytes;
        s.current -= b.size;
        s.freed_total += b.size;
        self.merge_and_index(&mut st, block);
        Ok(())
    }

    fn merge_and_index(&self, st: &mut DeviceAlloc, mut id: BlockId) {
        let seg_id = st.blocks[&id].segment;
        let pool = st.segments[&seg_id].pool;
        // merge with the previous neighbor
        loop {
            let b = st.blocks[&id].clone();
            let prev = st.segments[&seg_id].blocks.range(..b.offset).next_back().map(|(_, &p)| p);
            match prev {
                Some(p) if !st.blocks[&p].allocated && st.blocks[&p].alloc_stream == b.alloc_stream => {
                    let pb = st.blocks[&p].clone();
                    st.free.get_mut(&pool).unwrap().remove(&(pb.size, seg_id, pb.offset, p));
                    st.segments.get_mut(&seg_id).unwrap().blocks.remove(&b.offset);
                    let merged = st.blocks.get_mut(&p).unwrap();
                    merged.size += b.size;
                    merged.pending.extend(b.pending);
                    st.blocks.remove(&id);
                    id = p;
                }
                _ => break,
            }
        }
        // and with the following one
        loop {
            let b = st.blocks[&id].clone();
            let next = st.segments[&seg_id].blocks.range(b.offset + 1..).next().map(|(_, &n)| n);
            match next {
                Some(n) if !st.blocks[&n].allocated && st.blocks[&n].alloc_stream == b.alloc_stream => {
                    let nb = st.blocks[&n].clone();
                    st.free.get_mut(&pool).unwrap().remove(&(nb.size, seg_id, nb.offset, n));
                    st.segments.get_mut(&seg_id).unwrap().blocks.remove(&nb.offset);
                    let merged = st.blocks.get_mut(&id).unwrap();
                    merged.size += nb.size;
                    merged.pending.extend(nb.pending);
                    st.blocks.remove(&n);
                }
                _ => break,
            }
        }
        let b = &st.blocks[&id];
        let key = (b.size, seg_id, b.offset, id);
        st.free.entry(pool).or_default().insert(key);
    }

    fn segment_empty(st: &DeviceAlloc, seg: &Segment) -> bool {
        seg.blocks.values().all(|b| !st.blocks[b].allocated)
    }

    fn release_segments(&self, st: &mut DeviceAlloc, pools: &[PoolKind], require_events: bool) -> usize {
        let ids: Vec<SegmentId> = st
            .segments
            .iter()
            .filter(|(_, s)| pools.contains(&s.pool) && Self::segment_empty(st, s))
            .map(|(&id, _)| id)
            .collect();
        let mut freed = 0;
        for sid in ids {
            let block_ids: Vec<BlockId> = st.segments[&sid].blocks.values().copied().collect();
            if require_events {
                let all_done = block_ids
                    .iter()
                    .flat_map(|b| st.blocks[b].pending.iter())
                    .all(|&(_, e)| self.hooks.event_complete(e));
                if !all_done {
                    continue;
                }
            }
            let seg = st.segments.remove(&sid).unwrap();
            for b in block_ids {
                let blk = st.blocks.remove(&b).unwrap();
                st.free.get_mut(&seg.pool).unwrap().remove(&(blk.size, sid, blk.offset, b));
                for (_, e) in blk.pending {
                    self.unref_event(st, e);
                }
            }
            st.stats.reserved_bytes.current -= seg.size;
            freed += seg.size;
        }
        freed
    }

    fn ladder(&self, st: &mut DeviceAlloc, needed: usize, pools: &[PoolKind]) -> usize {
        let satisfiable = |st: &DeviceAlloc| st.stats.reserved_bytes.current + needed <= st.cap_bytes;
        let mut freed = 0;

        st.stats.num_gc_passes += 1;
        let f = self.release_segments(st, pools, true);
        st.gc_log.push(GcRung { rung: 1, freed_bytes: f });
        freed += f;
        if satisfiable(st) {
            return freed;
        }

        st.stats.num_gc_passes += 1;
        self.hooks.synchronize(st.device);
        let f = self.release_segments(st, pools, true);
        st.gc_log.push(GcRung { rung: 2, freed_bytes: f });
        freed += f;
        if satisfiable(st) {
            return freed;
        }

        st.stats.num_gc_passes += 1;
        let all = self.reclaimable_pools(st);
        let f = self.release_segments(st, &all, true);
        st.gc_log.push(GcRung { rung: 3, freed_bytes: f });
        freed + f
    }

    fn reclaimable_pools(&self, st: &DeviceAlloc) -> Vec<PoolKind> {
        let pools = self.pools.lock();
        let mut out = vec![PoolKind::Small, PoolKind::Large];
        for s in st.segments.values() {
            if let PoolKind::Graph(p) = s.pool {
                let expired = pools.get(&p).map(|ps| ps.released).unwrap_or(true);
                if expired && !out.contains(&s.pool) {
                    out.push(s.pool);
                }
            }
        }
        out
    }

    /// Run the three-rung GC ladder over the small and large pools, as if an
    /// allocation needed `needed_bytes` of new reservation.
    pub fn gc_ladder(&self, device: usize, needed_bytes: usize) -> Result<usize> {
        let mut st = self.dev(device)?.lock();
        Ok(self.ladder(&mut st, needed_bytes, &[PoolKind::Small, PoolKind::Large]))
    }

    pub fn gc_log(&self, device: usize) -> Vec<GcRung> {
        self.devices.get(device).map(|d| d.lock().gc_log.clone()).unwrap_or_default()
    }

    /// Synchronize and release every empty segment outside live graph pools.
    pub fn empty_cache(&self, device: usize) -> Result<usize> {
        let mut st = self.dev(device)?.lock();
        self.hooks.synchronize(device);
        let pools = self.reclaimable_pools(&st);
        Ok(self.release_segments(&mut st, &pools, true))
    }

    fn stats_locked(&self, st: &DeviceAlloc) -> AllocatorStats {
        let mut stats = st.stats;
        stats.active_blocks = st.blocks.values().filter(|b| b.allocated).count();
        stats.inactive_split_blocks = st
            .segments
            .values()
            .filter(|s| s.blocks.len() > 1)
            .flat_map(|s| s.blocks.values())
            .filter(|b| !st.blocks[b].allocated)
            .count();
        stats
    }

    pub fn memory_stats(&self, device: usize) -> Result<AllocatorStats> {
        let st = self.dev(device)?.lock();
        Ok(self.stats_locked(&st))
    }

    pub fn memory_snapshot(&self, device: usize) -> Result<MemorySnapshot> {
        let st = self.dev(device)?.lock();
        let segments = st
            .segments
            .values()
            .map(|seg| SegmentSnapshot {
                pool: seg.pool.tag(),
                size: seg.size,
                blocks: seg
                    .blocks
                    .values()
                    .map(|b| {
                        let blk = &st.blocks[b];
                        BlockSnapshot {
                            offset: blk.offset,
                            size: blk.size,
                            state: if blk.allocated { "allocated" } else { "free" }.into(),
                            stream: blk.alloc_stream,
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(MemorySnapshot { device, segments })
    }

    pub fn set_per_process_memory_fraction(&self, device: usize, fraction: f64) -> Result<()> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::FractionRange(fraction));
        }
        let mut st = self.dev(device)?.lock();
        st.cap_bytes = (fraction * self.capacity_bytes as f64).floor() as usize;
        Ok(())
    }

    pub fn cap_bytes(&self, device: usize) -> Result<usize> {
        Ok(self.dev(device)?.lock().cap_bytes)
    }

    pub fn graph_pool_create(&self, device: usize) -> Result<PoolId> {
        self.dev(device)?;
        let id = self.next_pool.fetch_add(1, Ordering::Relaxed);
        self.pools.lock().insert(id, PoolState { device, live_graphs: 0, released: false });
        Ok(id)
    }

    /// Hand a pool's segments back to rung-3 reclamation.
    pub fn graph_pool_release(&self, pool: PoolId) -> Result<()> {
        let mut pools = self.pools.lock();
        let ps = pools.get_mut(&pool).ok_or(Error::UnknownPool(pool))?;
        if ps.live_graphs > 0 {
            return Err(Error::PoolInUse(pool));
        }
        ps.released = true;
        Ok(())
    }

    pub fn pool_device(&self, pool: PoolId) -> Option<usize> {
        self.pools.lock().get(&pool).map(|p| p.device)
    }

    pub fn pool_is_live(&self, pool: PoolId) -> bool {
        self.pools.lock().get(&pool).map(|p| !p.released).unwrap_or(false)
    }

    pub(crate) fn pool_attach_graph(&self, pool: PoolId) -> Result<()> {
        let mut pools = self.pools.lock();
        let ps = pools.get_mut(&pool).ok_or(Error::UnknownPool(pool))?;
        if ps.released {
            return Err(Error::PoolReleased(pool));
        }
        ps.live_graphs += 1;
        Ok(())
    }

    pub(crate) fn pool_detach_graph(&self, pool: PoolId) -> Result<()> {
        let mut pools = self.pools.lock();
        let ps = pools.get_mut(&pool).ok_or(Error::UnknownPool(pool))?;
        ps.live_graphs = ps.live_graphs.saturating_sub(1);
        Ok(())
    }

    /// (segment id, offset, size) of a live block.
    pub fn block_location(&self, block: BlockId) -> Option<(u64, usize, usize)> {
        let device = (block >> DEVICE_SHIFT) as usize;
        let st = self.devices.get(device)?.lock();
        st.blocks.get(&block).map(|b| (b.segment, b.offset, b.size))
    }
}

#[cfg(test)]
mod tests;
