use thiserror::Error;

use crate::alloc::AllocatorStats;
use crate::device::Device;
use crate::dtype::DType;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // storage / views
    #[error("size overflow computing storage for sizes {0:?}")]
    SizeOverflow(Vec<usize>),
    #[error("view out of bounds: max element {max_index} but storage holds {capacity} elements")]
    ViewOutOfBounds { max_index: usize, capacity: usize },
    #[error("negative stride {0} is not supported")]
    NegativeStride(i64),
    #[error("sizes and strides rank differ ({sizes} vs {strides})")]
    RankMismatch { sizes: usize, strides: usize },
    #[error("invalid dimension {dim} for tensor of rank {rank}")]
    InvalidDim { dim: i64, rank: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: expected {expected:?}, got {got:?}")]
    DTypeMismatch { expected: DType, got: DType },
    #[error("unsupported dtype {0:?} for {1}")]
    UnsupportedDType(DType, &'static str),
    #[error("index {index} out of range for dimension of size {size}")]
    IndexOutOfRange { index: i64, size: usize },
    #[error("invalid device {0}")]
    InvalidDevice(String),

    // iterator
    #[error("output operand {0} partially overlaps an input")]
    PartialOverlap(usize),
    #[error("output operand {0} aliases an input but in-place aliasing was not allowed")]
    UnexpectedAlias(usize),
    #[error("operands are on different devices: {0} vs {1}")]
    DeviceMismatch(Device, Device),

    // dispatcher
    #[error("operator name {0:?} is not of the form ns::op")]
    BadOperatorName(String),
    #[error("operator {0} is already registered")]
    DuplicateOperator(String),
    #[error("unknown operator {0}")]
    UnknownOperator(String),
    #[error("kernel slot {key:?} for {op} is already filled")]
    KernelSlotFilled { op: String, key: crate::dispatch::DispatchKey },
    #[error("no kernel for {key:?} registered on {op}")]
    NoKernel { op: String, key: crate::dispatch::DispatchKey },
    #[error("{op}: expected {expected} tensor inputs, got {got}")]
    ArityMismatch { op: String, expected: usize, got: usize },
    #[error("{op}: all tensor inputs must be on the same device (argument {arg} is on {found}, expected {expected})")]
    DevicePolicy { op: String, arg: usize, expected: Device, found: Device },
    #[error("{op}: override recursion exceeded depth {depth}")]
    OverrideRecursion { op: String, depth: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("bad argument {index} for {op}: {msg}")]
    BadArgument { op: String, index: usize, msg: String },

    // autograd
    #[error("one of the tensors saved by {op} was modified in place (saved version {saved}, current version {current}) [{tensor}]")]
    VersionMismatch { op: String, tensor: String, saved: u64, current: u64 },
    #[error("tensor does not require grad and has no grad_fn")]
    NoGradFn,
    #[error("grad can be implicitly created only for scalar outputs (got shape {0:?})")]
    NonScalarRoot(Vec<usize>),
    #[error("gradient seed shape {seed:?} does not match root shape {root:?}")]
    SeedShape { seed: Vec<usize>, root: Vec<usize> },
    #[error("backward gate busy: another backward is running")]
    GateBusy,
    #[error("trying to backward through {0} a second time; its buffers were already freed")]
    GraphFreed(String),

    // virtual device
    #[error("capture violation: {0}")]
    CaptureViolation(String),
    #[error("event {0} waited on or queried before being recorded")]
    EventNotRecorded(u64),
    #[error("stream {stream} on device {device} is already capturing")]
    NestedCapture { device: usize, stream: usize },
    #[error("stream {stream} on device {device} is not capturing")]
    NotCapturing { device: usize, stream: usize },
    #[error("graph pool {0} was released")]
    PoolReleased(u64),
    #[error("graph {0} was destroyed")]
    GraphDestroyed(u64),
    #[error("unknown stream {stream} on device {device}")]
    UnknownStream { device: usize, stream: usize },

    // allocator
    #[error("out of memory on device {device}: requested {requested} bytes, reserved {reserved} of cap {cap}")]
    OutOfMemory { device: usize, requested: usize, reserved: usize, cap: usize, stats: Box<AllocatorStats> },
    #[error("double free of block {0}")]
    DoubleFree(u64),
    #[error("unknown block {0}")]
    UnknownBlock(u64),
    #[error("memory fraction {0} out of range (0, 1]")]
    FractionRange(f64),
    #[error("graph pool {0} still has live graphs")]
    PoolInUse(u64),
    #[error("unknown graph pool {0}")]
    UnknownPool(u64),

    // interop
    #[error("unknown exchange device type code {0}")]
    UnknownDeviceType(i32),
    #[error("unknown exchange dtype code={code} bits={bits} lanes={lanes}")]
    UnknownExchangeDType { code: u8, bits: u8, lanes: u16 },
    #[error("safetensors format error: {0}")]
    Format(String),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),

    // plugin
    #[error("plugin ABI version mismatch: plugin {plugin_major}.{plugin_minor}, host {host_major}.{host_minor}")]
    AbiMismatch { plugin_major: u32, plugin_minor: u32, host_major: u32, host_minor: u32 },
    #[error("plugin symbol {0} not found")]
    MissingSymbol(String),
    #[error("plugin error (code {code}): {message}")]
    Plugin { code: i32, message: String },
    #[error("plugin load failed: {0}")]
    PluginLoad(String),

    // fabric
    #[error("peer access between devices {0} and {1} is not enabled")]
    PeerDisabled(usize, usize),
    #[error("fabric error: {0}")]
    Fabric(String),

    #[error("{0}")]
    Other(String),
}
