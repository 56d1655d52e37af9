//! Deterministic virtual asynchronous device.
//!
//! Each virtual device owns a set of FIFO streams. Commands are queued on
//! the host and executed lazily by a scheduler that interleaves runnable
//! stream heads. With seed 0 the scheduler runs commands in enqueue order;
//! any other seed picks among runnable streams pseudo-randomly, which
//! exercises every reordering that stream/event semantics permit. Device
//! memory is ordinary host memory handed out by the caching allocator, so
//! kernels are plain closures over raw pointers.

mod clock;
mod hazard;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::alloc::{AllocatorConfig, CachingAllocator, DeviceHooks, PoolId};
use crate::error::{Error, Result};

pub use clock::{Lane, VClock};
pub use hazard::{HazardKind, HazardReport};

pub type StreamId = usize;
pub type EventId = u64;
pub type CommandId = u64;
pub type GraphId = u64;

pub const DEFAULT_CAPACITY_BYTES: usize = 64 << 20;

/// A byte range in some device's memory. Host ranges (`device == None`)
/// are never tracked by the hazard detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemRange {
    pub device: Option<usize>,
    pub start: usize,
    pub len: usize,
}

impl MemRange {
    pub fn new(device: Option<usize>, ptr: *const u8, len: usize) -> Self {
        MemRange { device, start: ptr as usize, len }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CopyKind {
    H2D,
    D2H,
    D2D,
    P2P,
}

pub type KernelBody = Arc<dyn Fn() + Send + Sync>;

/// One unit of device work.
#[derive(Clone)]
pub enum Command {
    Kernel { name: Arc<str>, reads: Vec<MemRange>, writes: Vec<MemRange>, body: KernelBody },
    Copy { src: MemRange, dst: MemRange, kind: CopyKind },
    EventRecord(EventId),
    EventWait(EventId),
    AllocMarker(MemRange),
    FreeMarker(MemRange),
}

impl Command {
    pub fn kernel(name: &str, reads: Vec<MemRange>, writes: Vec<MemRange>, body: impl Fn() + Send + Sync + 'static) -> Command {
        Command::Kernel { name: Arc::from(name), reads, writes, body: Arc::new(body) }
    }

    pub fn label(&self) -> String {
        match self {
            Command::Kernel { name, .. } => name.to_string(),
            Command::Copy { kind, .. } => format!("copy_{kind:?}").to_lowercase(),
            Command::EventRecord(e) => format!("event_record({e})"),
            Command::EventWait(e) => format!("event_wait({e})"),
            Command::AllocMarker(_) => "alloc".into(),
            Command::FreeMarker(_) => "free".into(),
        }
    }
}

impl fmt::Debug for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub id: CommandId,
    pub seq: u64,
    pub device: usize,
    pub stream: StreamId,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub num_devices: usize,
    pub capacity_bytes: usize,
    pub seed: u64,
    pub allocator: AllocatorConfig,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig { num_devices: 4, capacity_bytes: DEFAULT_CAPACITY_BYTES, seed: 0, allocator: AllocatorConfig::default() }
    }
}

impl RuntimeConfig {
    /// Defaults overridden by `VBT_VIRT_DEVICES` and `VBT_VIRT_SEED`.
    pub fn from_env() -> Self {
        let mut cfg = RuntimeConfig::default();
        if let Some(n) = std::env::var("VBT_VIRT_DEVICES").ok().and_then(|v| v.parse().ok()) {
            cfg.num_devices = n;
        }
        if let Some(s) = std::env::var("VBT_VIRT_SEED").ok().and_then(|v| v.parse().ok()) {
            cfg.seed = s;
        }
        cfg
    }
}

struct Queued {
    id: CommandId,
    cmd: Command,
    // record/wait generation resolved at enqueue time
    gen: u64,
    host_clock: VClock,
}

#[derive(Default)]
struct StreamState {
    queue: VecDeque<Queued>,
    capture: Option<(GraphId, PoolId, Vec<Command>)>,
    clock: VClock,
    local: u64,
}

struct EventState {
    record_gen: u64,
    completed_gen: u64,
    lanes: BTreeMap<u64, Lane>,
    clock: VClock,
    in_capture: bool,
    orphan: bool,
    waiters: Vec<u64>,
}

struct FloatingFree {
    range: MemRange,
    remaining: usize,
    clock: VClock,
}

struct GraphState {
    device: usize,
    pool: PoolId,
    commands: Vec<Command>,
    destroyed: bool,
}

struct SchedState {
    streams: Vec<Vec<StreamState>>,
    executed_per_device: Vec<u64>,
    events: HashMap<EventId, EventState>,
    next_event: EventId,
    next_command: CommandId,
    next_graph: GraphId,
    next_free: u64,
    floating: HashMap<u64, FloatingFree>,
    seq: u64,
    seed: u64,
    rng: ChaCha8Rng,
    host_clock: VClock,
    hazard: hazard::HazardDetector,
    trace: Option<Vec<TraceEntry>>,
    graphs: HashMap<GraphId, GraphState>,
}

enum Goal {
    Drain(Lane),
    Event(EventId, u64),
}

impl SchedState {
    fn new(num_devices: usize, seed: u64) -> Self {
        SchedState {
            streams: (0..num_devices).map(|_| vec![StreamState::default()]).collect(),
            executed_per_device: vec![0; num_devices],
            events: HashMap::new(),
            next_event: 1,
            next_command: 1,
            next_graph: 1,
            next_free: 1,
            floating: HashMap::new(),
            seq: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            host_clock: VClock::default(),
            hazard: hazard::HazardDetector::default(),
            trace: None,
            graphs: HashMap::new(),
        }
    }

    fn lane(&self, lane: Lane) -> Result<&StreamState> {
        self.streams
            .get(lane.device)
            .and_then(|d| d.get(lane.stream))
            .ok_or(Error::UnknownStream { device: lane.device, stream: lane.stream })
    }

    fn lane_mut(&mut self, lane: Lane) -> Result<&mut StreamState> {
        self.streams
            .get_mut(lane.device)
            .and_then(|d| d.get_mut(lane.stream))
            .ok_or(Error::UnknownStream { device: lane.device, stream: lane.stream })
    }

    fn enqueue(&mut self, lane: Lane, cmd: Command) -> Result<CommandId> {
        let id = self.next_command;
        self.next_command += 1;
        if let Some((_, _, list)) = self.lane_mut(lane)?.capture.as_mut() {
            if let Command::Copy { kind: CopyKind::D2H | CopyKind::H2D, .. } = cmd {
                return Err(Error::CaptureViolation("host copies synchronize with the host".into()));
            }
            list.push(cmd.clone());
            if let Command::EventRecord(e) = cmd {
                let ev = self.events.get_mut(&e).ok_or(Error::EventNotRecorded(e))?;
                ev.in_capture = true;
            }
            return Ok(id);
        }
        let gen = match &cmd {
            Command::EventRecord(e) => {
                let ev = self.events.get_mut(e).ok_or(Error::EventNotRecorded(*e))?;
                ev.record_gen += 1;
                ev.lanes.insert(ev.record_gen, lane);
                ev.in_capture = false;
                ev.record_gen
            }
            Command::EventWait(e) => {
                let ev = self.events.get(e).ok_or(Error::EventNotRecorded(*e))?;
                if ev.record_gen == 0 && !ev.in_capture {
                    return Err(Error::EventNotRecorded(*e));
                }
                ev.record_gen
            }
            _ => 0,
        };
        let host_clock = self.host_clock.clone();
        self.lane_mut(lane)?.queue.push_back(Queued { id, cmd, gen, host_clock });
        Ok(id)
    }

    fn head_runnable(&self, lane: Lane) -> Option<bool> {
        let q = self.lane(lane).ok()?.queue.front()?;
        Some(match &q.cmd {
            Command::EventWait(e) => self.events.get(e).map(|ev| ev.completed_gen >= q.gen).unwrap_or(true),
            _ => true,
        })
    }

    fn runnable_lanes(&self) -> (Vec<(Lane, CommandId)>, bool) {
        let mut out = Vec::new();
        let mut any = false;
        for (d, streams) in self.streams.iter().enumerate() {
            for (s, st) in streams.iter().enumerate() {
                if let Some(front) = st.queue.front() {
                    any = true;
                    let lane = Lane { device: d, stream: s };
                    if self.head_runnable(lane) == Some(true) {
                        out.push((lane, front.id));
                    }
                }
            }
        }
        (out, any)
    }

    /// Execute one command chosen by the interleaver. Returns false when
    /// every queue is empty.
    fn step(&mut self) -> Result<bool> {
        let (lanes, any) = self.runnable_lanes();
        if lanes.is_empty() {
            if any {
                return Err(Error::Other("virtual device deadlock: every queued stream waits on an unrecorded event".into()));
            }
            return Ok(false);
        }
        let pick = if self.seed == 0 {
            lanes.iter().min_by_key(|(_, id)| *id).map(|(l, _)| *l).unwrap()
        } else {
            let i = self.rng.gen_range(0..lanes.len());
            lanes[i].0
        };
        self.exec_head(pick)?;
        Ok(true)
    }

    fn exec_head(&mut self, lane: Lane) -> Result<()> {
        let st = self.lane_mut(lane)?;
        let q = st.queue.pop_front().expect("exec_head on empty stream");
        st.local += 1;
        st.clock.join(&q.host_clock);
        st.clock.set(lane, st.local);
        let mut clock = st.clock.clone();
        self.seq += 1;
        self.executed_per_device[lane.device] += 1;
        let seq = self.seq;
        let label = format!("stream {}:{}: {}", lane.device, lane.stream, q.cmd.label());
        match &q.cmd {
            Command::Kernel { reads, writes, body, .. } => {
                for r in reads {
                    self.hazard.access(r, false, &clock, &label, seq);
                }
                for w in writes {
                    self.hazard.access(w, true, &clock, &label, seq);
                }
                body();
            }
            Command::Copy { src, dst, .. } => {
                self.hazard.access(src, false, &clock, &label, seq);
                self.hazard.access(dst, true, &clock, &label, seq);
                let n = src.len.min(dst.len);
                if n > 0 {
                    // SAFETY: both ranges were produced from live buffers by the
                    // enqueuing code and are ordered by stream semantics.
                    unsafe { std::ptr::copy(src.start as *const u8, dst.start as *mut u8, n) };
                }
            }
            Command::EventRecord(e) => {
                let e = *e;
                let mut done_waiters = Vec::new();
                let mut remove = false;
                if let Some(ev) = self.events.get_mut(&e) {
                    ev.completed_gen = ev.completed_gen.max(q.gen);
                    ev.clock = clock.clone();
                    if ev.completed_gen >= ev.record_gen {
                        done_waiters = std::mem::take(&mut ev.waiters);
                        remove = ev.orphan;
                    }
                }
                if remove {
                    self.events.remove(&e);
                }
                for w in done_waiters {
                    self.floating_event_done(w, &clock, seq);
                }
            }
            Command::EventWait(e) => {
                if let Some(ev) = self.events.get(e) {
                    clock.join(&ev.clock.clone());
                }
                self.lane_mut(lane)?.clock = clock.clone();
            }
            Command::AllocMarker(r) => self.hazard.alloc(r, &clock, &label, seq),
            Command::FreeMarker(r) => self.hazard.free(r, &clock, &label, seq),
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry { id: q.id, seq, device: lane.device, stream: lane.stream, label: q.cmd.label() });
        }
        Ok(())
    }

    fn floating_event_done(&mut self, id: u64, clock: &VClock, seq: u64) {
        let fire = match self.floating.get_mut(&id) {
            Some(f) => {
                f.clock.join(clock);
                f.remaining -= 1;
                f.remaining == 0
            }
            None => false,
        };
        if fire {
            let f = self.floating.remove(&id).unwrap();
            self.hazard.free(&f.range, &f.clock, "allocator free", seq);
        }
    }

    fn run_goals(&mut self, mut goals: Vec<Goal>) -> Result<()> {
        while let Some(goal) = goals.last() {
            let lane = match goal {
                Goal::Drain(l) => {
                    if self.lane(*l)?.queue.is_empty() {
                        let c = self.lane(*l)?.clock.clone();
                        self.host_clock.join(&c);
                        goals.pop();
                        continue;
                    }
                    *l
                }
                Goal::Event(e, g) => {
                    let ev = self.events.get(e).ok_or(Error::EventNotRecorded(*e))?;
                    if ev.completed_gen >= *g {
                        let c = ev.clock.clone();
                        self.host_clock.join(&c);
                        goals.pop();
                        continue;
                    }
                    match ev.lanes.range(*g..).next() {
                        Some((_, l)) => *l,
                        None => return Err(Error::Other(format!("event {e} generation {g} was never enqueued"))),
                    }
                }
            };
            match self.head_runnable(lane) {
                Some(true) => self.exec_head(lane)?,
                Some(false) => {
                    let q = self.lane(lane)?.queue.front().unwrap();
                    if let Command::EventWait(e) = q.cmd {
                        goals.push(Goal::Event(e, q.gen));
                    }
                }
                None => {
                    return Err(Error::Other(format!(
                        "virtual device deadlock: stream {}:{} cannot make progress",
                        lane.device, lane.stream
                    )))
                }
            }
        }
        Ok(())
    }

    fn check_not_capturing(&self, lane: Lane) -> Result<()> {
        if self.lane(lane)?.capture.is_some() {
            return Err(Error::CaptureViolation(format!(
                "host synchronization on capturing stream {}:{}",
                lane.device, lane.stream
            )));
        }
        Ok(())
    }
}

/// Scheduler state shared with the allocator through [`DeviceHooks`].
pub struct Sched {
    state: Mutex<SchedState>,
    num_devices: usize,
}

impl DeviceHooks for Sched {
    fn record_event(&self, device: usize, stream: StreamId) -> EventId {
        let mut st = self.state.lock();
        let e = st.next_event;
        st.next_event += 1;
        st.events.insert(
            e,
            EventState {
                record_gen: 0,
                completed_gen: 0,
                lanes: BTreeMap::new(),
                clock: VClock::default(),
                in_capture: false,
                orphan: false,
                waiters: Vec::new(),
            },
        );
        st.enqueue(Lane { device, stream }, Command::EventRecord(e)).expect("record on known stream");
        e
    }

    fn event_complete(&self, event: EventId) -> bool {
        let mut st = self.state.lock();
        let Some(ev) = st.events.get(&event) else { return true };
        if ev.in_capture {
            return false;
        }
        let done = ev.record_gen > 0 && ev.completed_gen >= ev.record_gen;
        if done {
            let c = ev.clock.clone();
            st.host_clock.join(&c);
        }
        done
    }

    fn synchronize(&self, device: usize) {
        let mut st = self.state.lock();
        let n = st.streams[device].len();
        let goals = (0..n)
            .filter(|&s| st.streams[device][s].capture.is_none())
            .map(|s| Goal::Drain(Lane { device, stream: s }))
            .collect();
        st.run_goals(goals).expect("device synchronize");
    }

    fn release_event(&self, event: EventId) {
        let mut st = self.state.lock();
        if let Some(ev) = st.events.get_mut(&event) {
            if ev.completed_gen >= ev.record_gen && ev.waiters.is_empty() {
                st.events.remove(&event);
            } else {
                ev.orphan = true;
            }
        }
    }

    fn capture_pool(&self, device: usize, stream: StreamId) -> Option<PoolId> {
        let st = self.state.lock();
        st.lane(Lane { device, stream }).ok()?.capture.as_ref().map(|(_, p, _)| *p)
    }

    fn on_alloc(&self, device: usize, stream: StreamId, ptr: *mut u8, len: usize) {
        let mut st = self.state.lock();
        let lane = Lane { device, stream };
        if !st.hazard.enabled {
            return;
        }
        let range = MemRange::new(Some(device), ptr, len);
        match st.lane(lane).map(|s| s.capture.is_some()) {
            Ok(false) => {
                let _ = st.enqueue(lane, Command::AllocMarker(range));
            }
            Ok(true) => {
                // graph-pool memory stays owned by the graph for every replay
                let (clock, seq) = (st.host_clock.clone(), st.seq);
                st.hazard.alloc(&range, &clock, "graph pool alloc", seq);
            }
            Err(_) => {}
        }
    }

    fn on_free(&self, device: usize, ptr: *mut u8, len: usize, events: &[EventId]) {
        let mut st = self.state.lock();
        if !st.hazard.enabled {
            return;
        }
        let id = st.next_free;
        st.next_free += 1;
        let mut ff = FloatingFree { range: MemRange::new(Some(device), ptr, len), remaining: 0, clock: st.host_clock.clone() };
        for e in events {
            if let Some(ev) = st.events.get_mut(e) {
                if ev.in_capture {
                    return;
                }
                if ev.completed_gen >= ev.record_gen && ev.record_gen > 0 {
                    ff.clock.join(&ev.clock);
                } else {
                    ev.waiters.push(id);
                    ff.remaining += 1;
                }
            }
        }
        if ff.remaining == 0 {
            let seq = st.seq;
            st.hazard.free(&ff.range, &ff.clock, "allocator free", seq);
        } else {
            st.floating.insert(id, ff);
        }
    }
}

/// Handle to a captured command graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapturedGraph {
    pub id: GraphId,
    pub device: usize,
    pub pool: PoolId,
    pub num_commands: usize,
}

static NEXT_RUNTIME: AtomicU64 = AtomicU64::new(1);

/// A set of virtual devices, their scheduler and their caching allocator.
pub struct Runtime {
    id: u64,
    config: RuntimeConfig,
    sched: Arc<Sched>,
    allocator: CachingAllocator,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime").field("id", &self.id).field("devices", &self.config.num_devices).finish()
    }
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Arc<Runtime> {
        let sched = Arc::new(Sched {
            state: Mutex::new(SchedState::new(config.num_devices, config.seed)),
            num_devices: config.num_devices,
        });
        let allocator = CachingAllocator::new(
            config.num_devices,
            config.capacity_bytes,
            config.allocator.clone(),
            sched.clone() as Arc<dyn DeviceHooks>,
        );
        Arc::new(Runtime { id: NEXT_RUNTIME.fetch_add(1, Ordering::Relaxed), config, sched, allocator })
    }

    pub fn with_devices(n: usize) -> Arc<Runtime> {
        Runtime::new(RuntimeConfig { num_devices: n, ..RuntimeConfig::default() })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn num_devices(&self) -> usize {
        self.sched.num_devices
    }

    pub fn allocator(&self) -> &CachingAllocator {
        &self.allocator
    }

    pub fn check_device(&self, device: usize) -> Result<()> {
        if device >= self.num_devices() {
            return Err(Error::InvalidDevice(format!("virt:{device} (runtime has {} devices)", self.num_devices())));
        }
        Ok(())
    }

    pub fn create_stream(&self, device: usize) -> Result<StreamId> {
        self.check_device(device)?;
        let mut st = self.sched.state.lock();
        st.streams[device].push(StreamState::default());
        Ok(st.streams[device].len() - 1)
    }

    pub fn is_capturing(&self, device: usize, stream: StreamId) -> bool {
        self.sched.capture_pool(device, stream).is_some()
    }

    pub fn num_streams(&self, device: usize) -> usize {
        self.sched.state.lock().streams.get(device).map(|s| s.len()).unwrap_or(0)
    }

    pub fn launch(&self, device: usize, stream: StreamId, cmd: Command) -> Result<CommandId> {
        self.sched.state.lock().enqueue(Lane { device, stream }, cmd)
    }

    /// Queue a zero fill of `len` bytes at `ptr`.
    pub fn memset_zero(&self, device: usize, stream: StreamId, ptr: *mut u8, len: usize) -> Result<()> {
        let addr = ptr as usize;
        let range = MemRange::new(Some(device), ptr, len);
        self.launch(
            device,
            stream,
            Command::kernel("memset", vec![], vec![range], move || {
                // SAFETY: range belongs to a live allocator block.
                unsafe { std::ptr::write_bytes(addr as *mut u8, 0, len) };
            }),
        )?;
        Ok(())
    }

    pub fn event_create(&self, device: usize) -> Result<EventId> {
        self.check_device(device)?;
        let mut st = self.sched.state.lock();
        let e = st.next_event;
        st.next_event += 1;
        st.events.insert(
            e,
            EventState {
                record_gen: 0,
                completed_gen: 0,
                lanes: BTreeMap::new(),
                clock: VClock::default(),
                in_capture: false,
                orphan: false,
                waiters: Vec::new(),
            },
        );
        Ok(e)
    }

    pub fn event_record(&self, event: EventId, device: usize, stream: StreamId) -> Result<CommandId> {
        self.launch(device, stream, Command::EventRecord(event))
    }

    pub fn event_wait(&self, event: EventId, device: usize, stream: StreamId) -> Result<CommandId> {
        self.launch(device, stream, Command::EventWait(event))
    }

    /// Non-blocking completion check.
    pub fn event_query(&self, event: EventId) -> Result<bool> {
        let mut st = self.sched.state.lock();
        let ev = st.events.get(&event).ok_or(Error::EventNotRecorded(event))?;
        if ev.in_capture {
            return Err(Error::CaptureViolation(format!("query of event {event} recorded inside a capture")));
        }
        if ev.record_gen == 0 {
            return Err(Error::EventNotRecorded(event));
        }
        let done = ev.completed_gen >= ev.record_gen;
        if done {
            let c = ev.clock.clone();
            st.host_clock.join(&c);
        }
        Ok(done)
    }

    pub fn event_synchronize(&self, event: EventId) -> Result<()> {
        let mut st = self.sched.state.lock();
        let ev = st.events.get(&event).ok_or(Error::EventNotRecorded(event))?;
        if ev.in_capture {
            return Err(Error::CaptureViolation(format!("synchronize on event {event} recorded inside a capture")));
        }
        if ev.record_gen == 0 {
            return Err(Error::EventNotRecorded(event));
        }
        let g = ev.record_gen;
        st.run_goals(vec![Goal::Event(event, g)])
    }

    /// Drain one stream (and whatever it waits on).
    pub fn synchronize_stream(&self, device: usize, stream: StreamId) -> Result<()> {
        let mut st = self.sched.state.lock();
        let lane = Lane { device, stream };
        st.check_not_capturing(lane)?;
        st.run_goals(vec![Goal::Drain(lane)])
    }

    pub fn synchronize_device(&self, device: usize) -> Result<()> {
        self.check_device(device)?;
        let mut st = self.sched.state.lock();
        let n = st.streams[device].len();
        for s in 0..n {
            st.check_not_capturing(Lane { device, stream: s })?;
        }
        let goals = (0..n).rev().map(|s| Goal::Drain(Lane { device, stream: s })).collect();
        st.run_goals(goals)
    }

    /// Run the interleaver until every queue is empty.
    pub fn synchronize_all(&self) -> Result<()> {
        let mut st = self.sched.state.lock();
        for (d, streams) in st.streams.iter().enumerate() {
            for (s, ss) in streams.iter().enumerate() {
                if ss.capture.is_some() {
                    return Err(Error::CaptureViolation(format!("host synchronization on capturing stream {d}:{s}")));
                }
            }
        }
        while st.step()? {}
        let lanes: Vec<VClock> = st.streams.iter().flatten().map(|s| s.clock.clone()).collect();
        for c in lanes {
            st.host_clock.join(&c);
        }
        Ok(())
    }

    /// Execute up to `n` commands; returns how many ran.
    pub fn step(&self, n: usize) -> Result<usize> {
        let mut st = self.sched.state.lock();
        let mut ran = 0;
        while ran < n && st.step()? {
            ran += 1;
        }
        Ok(ran)
    }

    pub fn pending_commands(&self) -> usize {
        self.sched.state.lock().streams.iter().flatten().map(|s| s.queue.len()).sum()
    }

    pub fn executed_count(&self, device: usize) -> u64 {
        self.sched.state.lock().executed_per_device.get(device).copied().unwrap_or(0)
    }

    /// Reseed the cross-stream interleaver. Seed 0 is enqueue order.
    pub fn set_scheduler_seed(&self, seed: u64) {
        let mut st = self.sched.state.lock();
        st.seed = seed;
        st.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn set_trace(&self, enabled: bool) {
        let mut st = self.sched.state.lock();
        st.trace = if enabled { Some(Vec::new()) } else { None };
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.sched.state.lock().trace.clone().unwrap_or_default()
    }

    /// Global execution sequence number of a traced command.
    pub fn executed_seq(&self, id: CommandId) -> Option<u64> {
        self.sched.state.lock().trace.as_ref()?.iter().find(|t| t.id == id).map(|t| t.seq)
    }

    pub fn hazard_check_mode(&self, enabled: bool) {
        let mut st = self.sched.state.lock();
        st.hazard.enabled = enabled;
        if !enabled {
            st.hazard.clear();
        }
    }

    pub fn hazard_reports(&self) -> Vec<HazardReport> {
        self.sched.state.lock().hazard.reports.clone()
    }

    pub fn hazard_reports_json(&self) -> String {
        serde_json::to_string(&self.hazard_reports()).expect("reports serialize")
    }

    pub fn clear_hazard_reports(&self) {
        self.sched.state.lock().hazard.reports.clear();
    }

    pub fn begin_capture(&self, device: usize, stream: StreamId, pool: PoolId) -> Result<GraphId> {
        self.allocator.pool_attach_graph(pool)?;
        let mut st = self.sched.state.lock();
        let lane = Lane { device, stream };
        let result = (|| {
            let ss = st.lane(lane)?;
            if ss.capture.is_some() {
                return Err(Error::NestedCapture { device, stream });
            }
            let g = st.next_graph;
            st.next_graph += 1;
            st.lane_mut(lane)?.capture = Some((g, pool, Vec::new()));
            Ok(g)
        })();
        drop(st);
        if result.is_err() {
            let _ = self.allocator.pool_detach_graph(pool);
        }
        result
    }

    pub fn end_capture(&self, device: usize, stream: StreamId) -> Result<CapturedGraph> {
        let mut st = self.sched.state.lock();
        let lane = Lane { device, stream };
        let (id, pool, commands) = st.lane_mut(lane)?.capture.take().ok_or(Error::NotCapturing { device, stream })?;
        let num_commands = commands.len();
        st.graphs.insert(id, GraphState { device, pool, commands, destroyed: false });
        Ok(CapturedGraph { id, device, pool, num_commands })
    }

    pub fn replay(&self, graph: &CapturedGraph, stream: StreamId) -> Result<()> {
        if !self.allocator.pool_is_live(graph.pool) {
            return Err(Error::PoolReleased(graph.pool));
        }
        let mut st = self.sched.state.lock();
        let g = st.graphs.get(&graph.id).ok_or(Error::GraphDestroyed(graph.id))?;
        if g.destroyed {
            return Err(Error::GraphDestroyed(graph.id));
        }
        let device = g.device;
        let cmds = g.commands.clone();
        let lane = Lane { device, stream };
        for c in cmds {
            st.enqueue(lane, c)?;
        }
        Ok(())
    }

    /// Drop the graph's hold on its pool. Replays afterwards fail.
    pub fn destroy_graph(&self, graph: &CapturedGraph) -> Result<()> {
        let mut st = self.sched.state.lock();
        let g = st.graphs.get_mut(&graph.id).ok_or(Error::GraphDestroyed(graph.id))?;
        if g.destroyed {
            return Ok(());
        }
        g.destroyed = true;
        g.commands.clear();
        let pool = g.pool;
        drop(st);
        self.allocator.pool_detach_graph(pool)
    }

    pub fn graph_commands(&self, graph: &CapturedGraph) -> Vec<String> {
        let st = self.sched.state.lock();
        st.graphs.get(&graph.id).map(|g| g.commands.iter().map(|c| c.label()).collect()).unwrap_or_default()
    }

    pub fn current_stream(&self, device: usize) -> StreamId {
        CURRENT_STREAMS.with(|m| m.borrow().get(&(self.id, device)).copied().unwrap_or(0))
    }

    /// Make `stream` current for `device` on this thread until the guard drops.
    pub fn stream_guard(&self, device: usize, stream: StreamId) -> StreamGuard {
        let prev = CURRENT_STREAMS.with(|m| m.borrow_mut().insert((self.id, device), stream));
        StreamGuard { key: (self.id, device), prev }
    }
}

thread_local! {
    static CURRENT_STREAMS: RefCell<HashMap<(u64, usize), StreamId>> = RefCell::new(HashMap::new());
    static CURRENT_RUNTIME: RefCell<Option<Arc<Runtime>>> = const { RefCell::new(None) };
}

pub struct StreamGuard {
    key: (u64, usize),
    prev: Option<StreamId>,
}

impl Drop for StreamGuard {
    fn drop(&mut self) {
        CURRENT_STREAMS.with(|m| {
            let mut m = m.borrow_mut();
            match self.prev {
                Some(p) => m.insert(self.key, p),
                None => m.remove(&self.key),
            };
        });
    }
}

static GLOBAL: OnceLock<Arc<Runtime>> = OnceLock::new();

/// Process-wide runtime configured from the environment.
pub fn global() -> &'static Arc<Runtime> {
    GLOBAL.get_or_init(|| Runtime::new(RuntimeConfig::from_env()))
}

/// Runtime used by factories on this thread: the innermost
/// [`with_runtime`] scope, else the global one.
pub fn current_runtime() -> Arc<Runtime> {
    CURRENT_RUNTIME.with(|c| c.borrow().clone()).unwrap_or_else(|| global().clone())
}

pub fn with_runtime<R>(rt: &Arc<Runtime>, f: impl FnOnce() -> R) -> R {
    struct Restore(Option<Arc<Runtime>>);
    impl Drop for Restore {
        fn drop(&mut self) {
            let prev = self.0.take();
            CURRENT_RUNTIME.with(|c| *c.borrow_mut() = prev);
        }
    }
    let prev = CURRENT_RUNTIME.with(|c| c.borrow_mut().replace(rt.clone()));
    let _restore = Restore(prev);
    f()
}
