use super::*;

#[derive(Default)]
struct Script {
    events: Mutex<Vec<bool>>,
    syncs: AtomicU64,
}

impl Script {
    fn complete_all(&self) {
        self.events.lock().iter_mut().for_each(|e| *e = true);
    }
}

impl DeviceHooks for Script {
    fn record_event(&self, _device: usize, _stream: StreamId) -> EventId {
        let mut ev = self.events.lock();
        ev.push(false);
        ev.len() as EventId
    }
    fn event_complete(&self, event: EventId) -> bool {
        self.events.lock()[event as usize - 1]
    }
    fn synchronize(&self, _device: usize) {
        self.syncs.fetch_add(1, Ordering::Relaxed);
        self.complete_all();
    }
}

fn alloc() -> (CachingAllocator, Arc<Script>) {
    let hooks = Arc::new(Script::default());
    (CachingAllocator::new(1, 64 * MIB, AllocatorConfig::default(), hooks.clone()), hooks)
}

fn check_tiling(a: &CachingAllocator) {
    let snap = a.memory_snapshot(0).unwrap();
    let stats = a.memory_stats(0).unwrap();
    let mut reserved = 0;
    let mut allocated = 0;
    for seg in &snap.segments {
        let mut off = 0;
        for b in &seg.blocks {
            assert_eq!(b.offset, off);
            off += b.size;
            if b.state == "allocated" {
                allocated += b.size;
            }
        }
        assert_eq!(off, seg.size);
        reserved += seg.size;
    }
    assert_eq!(stats.reserved_bytes.current, reserved);
    assert_eq!(stats.allocated_bytes.current, allocated);
}

#[test]
fn rounds_to_512() {
    let (a, _) = alloc();
    let b = a.allocate(0, 1000, 0).unwrap();
    assert_eq!(b.size, 1024);
    let s = a.memory_stats(0).unwrap();
    assert_eq!(s.allocated_bytes.current, 1024);
    assert_eq!(s.allocated_bytes.peak, 1024);
    assert_eq!(s.reserved_bytes.current, 2 * MIB);
    assert_eq!(s.active_blocks, 1);
    assert_eq!(s.inactive_split_blocks, 1);
    assert!(a.allocate(0, 0, 0).is_err());
}

#[test]
fn fresh_device_stats_are_zero() {
    let (a, _) = alloc();
    assert_eq!(a.memory_stats(0).unwrap(), AllocatorStats::default());
    assert!(a.memory_snapshot(0).unwrap().segments.is_empty());
}

#[test]
fn free_then_realloc_same_stream_reuses() {
    let (a, _) = alloc();
    let b = a.allocate(0, 4096, 0).unwrap();
    a.free(b.id, 0).unwrap();
    let s = a.memory_stats(0).unwrap();
    assert_eq!(s.allocated_bytes.current, 0);
    assert_eq!(s.allocated_bytes.peak, 4096);
    assert_eq!(s.allocated_bytes.freed_total, 4096);
    let c = a.allocate(0, 4096, 0).unwrap();
    assert_eq!(c.ptr, b.ptr);
    assert_eq!(a.memory_stats(0).unwrap().reserved_bytes.current, 2 * MIB);
    check_tiling(&a);
}

#[test]
fn double_free_rejected() {
    let (a, _) = alloc();
    let b = a.allocate(0, 512, 0).unwrap();
    a.free(b.id, 0).unwrap();
    assert!(matches!(a.free(b.id, 0), Err(Error::DoubleFree(_)) | Err(Error::UnknownBlock(_))));
}

#[test]
fn cross_stream_free_not_reused_until_event() {
    let (a, h) = alloc();
    let b = a.allocate(0, 4096, 1).unwrap();
    let _keep = a.allocate(0, 512, 1).unwrap();
    a.free(b.id, 2).unwrap();
    let c = a.allocate(0, 4096, 1).unwrap();
    assert_ne!(c.ptr, b.ptr);
    a.free(c.id, 1).unwrap();
    h.complete_all();
    let d = a.allocate(0, 4096, 1).unwrap();
    assert_eq!(d.ptr, b.ptr);
    check_tiling(&a);
}

#[test]
fn adjacent_splits_merge() {
    let (a, _) = alloc();
    let x = a.allocate(0, 1024, 0).unwrap();
    let y = a.allocate(0, 1024, 0).unwrap();
    let z = a.allocate(0, 1024, 0).unwrap();
    a.free(x.id, 0).unwrap();
    a.free(y.id, 0).unwrap();
    let snap = a.memory_snapshot(0).unwrap();
    let blocks = &snap.segments[0].blocks;
    assert_eq!(blocks[0].size, 2048);
    assert_eq!(blocks[0].state, "free");
    assert_eq!(blocks[1].state, "allocated");
    a.free(z.id, 0).unwrap();
    let snap = a.memory_snapshot(0).unwrap();
    assert_eq!(snap.segments[0].blocks.len(), 1);
    check_tiling(&a);
}

#[test]
fn snapshot_json_schema() {
    let (a, _) = alloc();
    a.allocate(0, 512, 3).unwrap();
    let v: serde_json::Value = serde_json::from_str(&a.memory_snapshot(0).unwrap().to_json()).unwrap();
    assert_eq!(v["device"], 0);
    let seg = &v["segments"][0];
    assert_eq!(seg["pool"], "small");
    assert_eq!(seg["size"], 2 * MIB);
    assert_eq!(seg["blocks"][0]["offset"], 0);
    assert_eq!(seg["blocks"][0]["size"], 512);
    assert_eq!(seg["blocks"][0]["state"], "allocated");
    assert_eq!(seg["blocks"][0]["stream"], 3);
    assert_eq!(seg["blocks"][1]["state"], "free");
}

#[test]
fn large_pool_segments() {
    let (a, _) = alloc();
    let b = a.allocate(0, MIB + 1, 0).unwrap();
    assert_eq!(b.pool, PoolKind::Large);
    assert_eq!(a.memory_stats(0).unwrap().reserved_bytes.current, 20 * MIB);
    a.allocate(0, 21 * MIB, 0).unwrap();
    assert_eq!(a.memory_stats(0).unwrap().reserved_bytes.current, 60 * MIB);
}

#[test]
fn fraction_caps() {
    let (a, _) = alloc();
    a.set_per_process_memory_fraction(0, 1.0).unwrap();
    assert_eq!(a.cap_bytes(0).unwrap(), 64 * MIB);
    a.set_per_process_memory_fraction(0, 0.25).unwrap();
    assert_eq!(a.cap_bytes(0).unwrap(), 16 * MIB);
    assert!(a.set_per_process_memory_fraction(0, 0.0).is_err());
    assert!(a.set_per_process_memory_fraction(0, 1.5).is_err());
}

#[test]
fn cap_half_then_oversized_ooms() {
    let (a, _) = alloc();
    a.set_per_process_memory_fraction(0, 0.5).unwrap();
    let err = a.allocate(0, 33 * MIB, 0).unwrap_err();
    match err {
        Error::OutOfMemory { cap, stats, .. } => {
            assert_eq!(cap, 32 * MIB);
            assert_eq!(stats.num_ooms, 1);
        }
        e => panic!("unexpected {e}"),
    }
    let s = a.memory_stats(0).unwrap();
    assert_eq!(s.num_ooms, 1);
    assert_eq!(s.num_gc_passes, 3);
    assert_eq!(s.reserved_bytes.current, 0);
}

#[test]
fn ladder_rung_one_suffices() {
    let (a, h) = alloc();
    a.set_per_process_memory_fraction(0, 0.75).unwrap();
    let b = a.allocate(0, 20 * MIB, 0).unwrap();
    a.free(b.id, 0).unwrap();
    h.complete_all();
    a.allocate(0, 40 * MIB, 0).unwrap();
    let s = a.memory_stats(0).unwrap();
    assert_eq!(s.num_gc_passes, 1);
    assert_eq!(a.gc_log(0), vec![GcRung { rung: 1, freed_bytes: 20 * MIB }]);
    assert_eq!(s.reserved_bytes.current, 40 * MIB);
    assert_eq!(h.syncs.load(Ordering::Relaxed), 0);
}

#[test]
fn ladder_rung_two_needs_sync() {
    let (a, h) = alloc();
    a.set_per_process_memory_fraction(0, 0.75).unwrap();
    let b = a.allocate(0, 20 * MIB, 0).unwrap();
    a.free(b.id, 1).unwrap();
    a.allocate(0, 40 * MIB, 0).unwrap();
    let s = a.memory_stats(0).unwrap();
    assert_eq!(s.num_gc_passes, 2);
    assert_eq!(h.syncs.load(Ordering::Relaxed), 1);
    assert_eq!(a.gc_log(0), vec![GcRung { rung: 1, freed_bytes: 0 }, GcRung { rung: 2, freed_bytes: 20 * MIB }]);
}

#[test]
fn ladder_nothing_reclaimable() {
    let (a, _) = alloc();
    assert_eq!(a.gc_ladder(0, 1).unwrap(), 0);
    let _b = a.allocate(0, 512, 0).unwrap();
    assert_eq!(a.gc_ladder(0, 64 * MIB).unwrap(), 0);
}

#[test]
fn graph_pool_lifecycle() {
    struct Capturing(Script, PoolId);
    impl DeviceHooks for Capturing {
        fn record_event(&self, d: usize, s: StreamId) -> EventId {
            self.0.record_event(d, s)
        }
        fn event_complete(&self, e: EventId) -> bool {
            self.0.event_complete(e)
        }
        fn synchronize(&self, d: usize) {
            self.0.synchronize(d)
        }
        fn capture_pool(&self, _d: usize, s: StreamId) -> Option<PoolId> {
            (s == 7).then_some(self.1)
        }
    }
    // pool ids start at 1
    let a = CachingAllocator::new(1, 64 * MIB, AllocatorConfig::default(), Arc::new(Capturing(Script::default(), 1)));
    let pool = a.graph_pool_create(0).unwrap();
    assert_eq!(pool, 1);
    a.pool_attach_graph(pool).unwrap();
    let b = a.allocate(0, 4096, 7).unwrap();
    assert_eq!(b.pool, PoolKind::Graph(pool));
    a.free(b.id, 7).unwrap();
    let snap = a.memory_snapshot(0).unwrap();
    assert_eq!(snap.segments[0].pool, "graph:1");
    // live pools survive the ladder
    assert_eq!(a.gc_ladder(0, 64 * MIB).unwrap(), 0);
    assert!(a.graph_pool_release(pool).is_err());
    a.pool_detach_graph(pool).unwrap();
    a.graph_pool_release(pool).unwrap();
    assert_eq!(a.gc_ladder(0, 64 * MIB).unwrap(), 2 * MIB);
    assert!(a.memory_snapshot(0).unwrap().segments.is_empty());
}

#[test]
fn peaks_monotone_and_conservation() {
    use rand::{Rng, SeedableRng};
    let (a, h) = alloc();
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut live: Vec<BlockId> = Vec::new();
    let (mut pa, mut pr) = (0, 0);
    for _ in 0..2000 {
        if r.gen_bool(0.55) || live.is_empty() {
            let size = if r.gen_bool(0.05) { r.gen_range(MIB..4 * MIB) } else { r.gen_range(1..64 * KIB) };
            if let Ok(b) = a.allocate(0, size, r.gen_range(0..3)) {
                live.push(b.id);
            }
        } else {
            let i = r.gen_range(0..live.len());
            a.free(live.swap_remove(i), r.gen_range(0..3)).unwrap();
        }
        if r.gen_bool(0.1) {
            h.complete_all();
        }
        let s = a.memory_stats(0).unwrap();
        assert!(s.allocated_bytes.peak >= pa && s.reserved_bytes.peak >= pr);
        pa = s.allocated_bytes.peak;
        pr = s.reserved_bytes.peak;
        assert!(s.allocated_bytes.current <= s.reserved_bytes.current);
        assert_eq!(s.allocated_bytes.current, s.allocated_bytes.allocated_total - s.allocated_bytes.freed_total);
        check_tiling(&a);
    }
}
