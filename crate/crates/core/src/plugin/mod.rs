//! Host side of the C plugin ABI (`include/vbt_plugin.h`).
//!
//! Plugins see tensors, calls and iterators only through opaque handles and
//! the [`HostApi`] function table. Every table function returns a status
//! code; panics are caught at the boundary. Registration during
//! `vbt_plugin_init` is transactional.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::ffi::{c_char, c_void, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;

use crate::dispatch::{self, kernel, valid_op_name, BoxedValue, DispatchKey, OpSchemaLite};
use crate::error::{Error, Result};
use crate::interop::exchange::{ExchangeDType, ExchangeDevice};
use crate::iter::{build_iter, IterPlan, OperandSpec};
use crate::tensor::{make_tensor, Tensor};
use crate::vdev::{self, Runtime};

pub const HOST_ABI_MAJOR: u32 = 1;
pub const HOST_ABI_MINOR: u32 = 1;

pub const ENTRY_SYMBOL: &str = "vbt_plugin_init";
pub const VERSION_SYMBOL: &str = "vbt_plugin_abi_version";

pub type Status = i32;
pub const VBT_OK: Status = 0;
pub const VBT_ERR_INVALID_ARGUMENT: Status = 1;
pub const VBT_ERR_INVALID_HANDLE: Status = 2;
pub const VBT_ERR_OVERLAP: Status = 3;
pub const VBT_ERR_DTYPE: Status = 4;
pub const VBT_ERR_DEVICE: Status = 5;
pub const VBT_ERR_SHAPE: Status = 6;
pub const VBT_ERR_OUT_OF_MEMORY: Status = 7;
pub const VBT_ERR_DUPLICATE: Status = 8;
pub const VBT_ERR_NOT_FOUND: Status = 9;
pub const VBT_ERR_INTERNAL: Status = 10;

pub const VBT_KEY_HOST: u32 = 1;
pub const VBT_KEY_VIRT: u32 = 2;
pub const VBT_ITER_ALLOW_INPLACE: u32 = 1;

pub const VBT_ARG_TENSOR: i32 = 0;
pub const VBT_ARG_INT: i32 = 1;
pub const VBT_ARG_FLOAT: i32 = 2;
pub const VBT_ARG_BOOL: i32 = 3;
pub const VBT_ARG_OTHER: i32 = 4;

pub const fn abi_encode(major: u32, minor: u32) -> u32 {
    (major << 16) | (minor & 0xffff)
}

pub const fn abi_decode(v: u32) -> (u32, u32) {
    (v >> 16, v & 0xffff)
}

#[repr(C)]
pub struct TensorHandle {
    _p: [u8; 0],
}
#[repr(C)]
pub struct CallHandle {
    _p: [u8; 0],
}
#[repr(C)]
pub struct IterHandle {
    _p: [u8; 0],
}

pub type KernelFn = unsafe extern "C" fn(*mut CallHandle, *mut c_void) -> Status;
pub type ElementFn = unsafe extern "C" fn(*mut *mut c_char, *mut c_void);
pub type InitFn = unsafe extern "C" fn(*const HostApi, u32, u32) -> i32;
pub type VersionFn = unsafe extern "C" fn() -> u32;

/// Mirror of `vbt_host_api`.
#[repr(C)]
pub struct HostApi {
    pub abi_major: u32,
    pub abi_minor: u32,
    pub struct_size: u64,
    pub register_op: unsafe extern "C" fn(*const c_char, i32, i32, Option<KernelFn>, *mut c_void, u32, i32) -> Status,
    pub tensor_ndim: unsafe extern "C" fn(*mut TensorHandle) -> i32,
    pub tensor_sizes: unsafe extern "C" fn(*mut TensorHandle, *mut i64) -> Status,
    pub tensor_strides: unsafe extern "C" fn(*mut TensorHandle, *mut i64) -> Status,
    pub tensor_dtype: unsafe extern "C" fn(*mut TensorHandle, *mut ExchangeDType) -> Status,
    pub tensor_device: unsafe extern "C" fn(*mut TensorHandle, *mut ExchangeDevice) -> Status,
    pub tensor_data: unsafe extern "C" fn(*mut TensorHandle, *mut *mut c_void) -> Status,
    pub iter_build: unsafe extern "C" fn(*const *mut TensorHandle, i32, i32, u32, *mut *mut IterHandle) -> Status,
    pub iter_common_shape: unsafe extern "C" fn(*mut IterHandle, *mut i64, *mut i32) -> Status,
    pub iter_for_each: unsafe extern "C" fn(*mut IterHandle, Option<ElementFn>, *mut c_void) -> Status,
    pub iter_free: unsafe extern "C" fn(*mut IterHandle) -> Status,
    pub alloc: unsafe extern "C" fn(i32, u64, i64, *mut *mut c_void) -> Status,
    pub dealloc: unsafe extern "C" fn(*mut c_void) -> Status,
    pub report_error: unsafe extern "C" fn(i32, *const c_char),
    pub call_num_args: unsafe extern "C" fn(*mut CallHandle) -> i32,
    pub call_arg_kind: unsafe extern "C" fn(*mut CallHandle, i32) -> i32,
    pub call_arg_tensor: unsafe extern "C" fn(*mut CallHandle, i32, *mut *mut TensorHandle) -> Status,
    pub call_arg_double: unsafe extern "C" fn(*mut CallHandle, i32, *mut f64) -> Status,
    pub call_arg_int: unsafe extern "C" fn(*mut CallHandle, i32, *mut i64) -> Status,
    pub call_set_output: unsafe extern "C" fn(*mut CallHandle, i32, *mut TensorHandle) -> Status,
    pub tensor_new: unsafe extern "C" fn(*const i64, i32, ExchangeDType, ExchangeDevice, *mut *mut TensorHandle) -> Status,
    pub tensor_release: unsafe extern "C" fn(*mut TensorHandle) -> Status,
    // minor 1
    pub tensor_numel: unsafe extern "C" fn(*mut TensorHandle, *mut i64) -> Status,
}

/// Slot names in table order, with the minor version that introduced each.
pub const HOST_API_SLOTS: &[(&str, u32)] = &[
    ("register_op", 0),
    ("tensor_ndim", 0),
    ("tensor_sizes", 0),
    ("tensor_strides", 0),
    ("tensor_dtype", 0),
    ("tensor_device", 0),
    ("tensor_data", 0),
    ("iter_build", 0),
    ("iter_common_shape", 0),
    ("iter_for_each", 0),
    ("iter_free", 0),
    ("alloc", 0),
    ("dealloc", 0),
    ("report_error", 0),
    ("call_num_args", 0),
    ("call_arg_kind", 0),
    ("call_arg_tensor", 0),
    ("call_arg_double", 0),
    ("call_arg_int", 0),
    ("call_set_output", 0),
    ("tensor_new", 0),
    ("tensor_release", 0),
    ("tensor_numel", 1),
];

/// Byte offsets of every table field, in declaration order.
pub fn host_api_layout() -> Vec<(&'static str, usize)> {
    use std::mem::offset_of;
    let mut v = vec![
        ("abi_major", offset_of!(HostApi, abi_major)),
        ("abi_minor", offset_of!(HostApi, abi_minor)),
        ("struct_size", offset_of!(HostApi, struct_size)),
    ];
    let slots = [
        offset_of!(HostApi, register_op),
        offset_of!(HostApi, tensor_ndim),
        offset_of!(HostApi, tensor_sizes),
        offset_of!(HostApi, tensor_strides),
        offset_of!(HostApi, tensor_dtype),
        offset_of!(HostApi, tensor_device),
        offset_of!(HostApi, tensor_data),
        offset_of!(HostApi, iter_build),
        offset_of!(HostApi, iter_common_shape),
        offset_of!(HostApi, iter_for_each),
        offset_of!(HostApi, iter_free),
        offset_of!(HostApi, alloc),
        offset_of!(HostApi, dealloc),
        offset_of!(HostApi, report_error),
        offset_of!(HostApi, call_num_args),
        offset_of!(HostApi, call_arg_kind),
        offset_of!(HostApi, call_arg_tensor),
        offset_of!(HostApi, call_arg_double),
        offset_of!(HostApi, call_arg_int),
        offset_of!(HostApi, call_set_output),
        offset_of!(HostApi, tensor_new),
        offset_of!(HostApi, tensor_release),
        offset_of!(HostApi, tensor_numel),
    ];
    v.extend(HOST_API_SLOTS.iter().zip(slots).map(|(&(n, _), o)| (n, o)));
    v
}

/// FNV-1a over `name:offset;` for every field present at `minor`. A table
/// built for an older minor hashes the same as the prefix of a newer one.
pub fn host_api_layout_hash(minor: u32) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let layout = host_api_layout();
    for (name, off) in layout.iter().filter(|(n, _)| HOST_API_SLOTS.iter().find(|s| s.0 == *n).is_none_or(|s| s.1 <= minor)) {
        for b in format!("{name}:{off};").bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Negotiation {
    Accept { minor_used: u32 },
    Reject { reason: &'static str },
}

/// Version agreement between a plugin and a host.
pub fn negotiate(plugin: (u32, u32), host: (u32, u32)) -> Negotiation {
    if plugin.0 != host.0 {
        return Negotiation::Reject { reason: "major version differs" };
    }
    Negotiation::Accept { minor_used: plugin.1.min(host.1) }
}

/// [`negotiate`] against this host's ABI version.
pub fn abi_negotiate(plugin_major: u32, plugin_minor: u32) -> Negotiation {
    negotiate((plugin_major, plugin_minor), (HOST_ABI_MAJOR, HOST_ABI_MINOR))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluginManifest {
    pub path: PathBuf,
    pub entry: String,
    pub abi_major: u32,
    pub abi_minor: u32,
    pub minor_used: u32,
    pub ops: Vec<String>,
}

// ---------------------------------------------------------------- state

thread_local! {
    static LAST_ERROR: RefCell<Option<(i32, String)>> = const { RefCell::new(None) };
    static LOADING: RefCell<Option<Vec<String>>> = const { RefCell::new(None) };
}

struct IterState {
    plan: IterPlan,
    _tensors: Vec<Tensor>,
}

struct PluginAlloc {
    runtime: Arc<Runtime>,
    block: u64,
    stream: usize,
}

#[derive(Default)]
struct Handles {
    owned_tensors: HashSet<usize>,
    iters: HashSet<usize>,
    allocs: HashMap<usize, PluginAlloc>,
}

fn handles() -> &'static Mutex<Handles> {
    static H: OnceLock<Mutex<Handles>> = OnceLock::new();
    H.get_or_init(|| Mutex::new(Handles::default()))
}

fn load_lock() -> &'static Mutex<Vec<libloading::Library>> {
    static L: OnceLock<Mutex<Vec<libloading::Library>>> = OnceLock::new();
    L.get_or_init(|| Mutex::new(Vec::new()))
}

fn set_error(code: i32, msg: impl Into<String>) -> Status {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some((code, msg.into())));
    code
}

fn take_error() -> Option<(i32, String)> {
    LAST_ERROR.with(|e| e.borrow_mut().take())
}

fn status_of(e: &Error) -> Status {
    match e {
        Error::PartialOverlap(_) | Error::UnexpectedAlias(_) => VBT_ERR_OVERLAP,
        Error::DTypeMismatch { .. } | Error::UnsupportedDType(..) | Error::UnknownExchangeDType { .. } => VBT_ERR_DTYPE,
        Error::DeviceMismatch(..) | Error::InvalidDevice(_) | Error::UnknownDeviceType(_) => VBT_ERR_DEVICE,
        Error::ShapeMismatch(_) => VBT_ERR_SHAPE,
        Error::OutOfMemory { .. } => VBT_ERR_OUT_OF_MEMORY,
        Error::DuplicateOperator(_) => VBT_ERR_DUPLICATE,
        _ => VBT_ERR_INVALID_ARGUMENT,
    }
}

fn fail(e: Error) -> Status {
    let code = status_of(&e);
    set_error(code, e.to_string())
}

fn guard(f: impl FnOnce() -> Status) -> Status {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| set_error(VBT_ERR_INTERNAL, "host panicked"))
}

unsafe fn tensor_ref<'a>(t: *mut TensorHandle) -> Option<&'a Tensor> {
    (t as *const Tensor).as_ref()
}

// ---------------------------------------------------------------- calls

struct CallCtx<'a> {
    args: &'a [BoxedValue],
    outputs: Vec<Option<Tensor>>,
}

unsafe fn call_ref<'a, 'b>(c: *mut CallHandle) -> Option<&'a mut CallCtx<'b>> {
    (c as *mut CallCtx<'b>).as_mut()
}

unsafe extern "C" fn h_call_num_args(c: *mut CallHandle) -> i32 {
    call_ref(c).map(|c| c.args.len() as i32).unwrap_or(-1)
}

unsafe extern "C" fn h_call_arg_kind(c: *mut CallHandle, i: i32) -> i32 {
    let Some(c) = call_ref(c) else { return -1 };
    match c.args.get(i as usize) {
        Some(BoxedValue::Tensor(_)) => VBT_ARG_TENSOR,
        Some(BoxedValue::Int(_)) => VBT_ARG_INT,
        Some(BoxedValue::Float(_)) => VBT_ARG_FLOAT,
        Some(BoxedValue::Bool(_)) => VBT_ARG_BOOL,
        Some(_) => VBT_ARG_OTHER,
        None => -1,
    }
}

unsafe extern "C" fn h_call_arg_tensor(c: *mut CallHandle, i: i32, out: *mut *mut TensorHandle) -> Status {
    guard(|| {
        let (Some(c), false) = (call_ref(c), out.is_null()) else { return set_error(VBT_ERR_INVALID_HANDLE, "null call or output") };
        match c.args.get(i as usize) {
            Some(BoxedValue::Tensor(t)) => {
                *out = t as *const Tensor as *mut TensorHandle;
                VBT_OK
            }
            _ => set_error(VBT_ERR_INVALID_ARGUMENT, format!("argument {i} is not a tensor")),
        }
    })
}

unsafe extern "C" fn h_call_arg_double(c: *mut CallHandle, i: i32, out: *mut f64) -> Status {
    guard(|| {
        let (Some(c), false) = (call_ref(c), out.is_null()) else { return set_error(VBT_ERR_INVALID_HANDLE, "null call or output") };
        match c.args.get(i as usize).and_then(|a| a.as_f64()) {
            Some(v) => {
                *out = v;
                VBT_OK
            }
            None => set_error(VBT_ERR_INVALID_ARGUMENT, format!("argument {i} is not a number")),
        }
    })
}

unsafe extern "C" fn h_call_arg_int(c: *mut CallHandle, i: i32, out: *mut i64) -> Status {
    guard(|| {
        let (Some(c), false) = (call_ref(c), out.is_null()) else { return set_error(VBT_ERR_INVALID_HANDLE, "null call or output") };
        match c.args.get(i as usize).and_then(|a| a.as_i64()) {
            Some(v) => {
                *out = v;
                VBT_OK
            }
            None => set_error(VBT_ERR_INVALID_ARGUMENT, format!("argument {i} is not an integer")),
        }
    })
}

unsafe extern "C" fn h_call_set_output(c: *mut CallHandle, i: i32, t: *mut TensorHandle) -> Status {
    guard(|| {
        let (Some(c), Some(t)) = (call_ref(c), tensor_ref(t)) else { return set_error(VBT_ERR_INVALID_HANDLE, "null call or tensor") };
        match c.outputs.get_mut(i as usize) {
            Some(slot) => {
                *slot = Some(t.clone());
                VBT_OK
            }
            None => set_error(VBT_ERR_INVALID_ARGUMENT, format!("output index {i} out of range")),
        }
    })
}

// -------------------------------------------------------------- tensors

unsafe extern "C" fn h_tensor_ndim(t: *mut TensorHandle) -> i32 {
    tensor_ref(t).map(|t| t.dim() as i32).unwrap_or(-1)
}

unsafe extern "C" fn h_tensor_sizes(t: *mut TensorHandle, out: *mut i64) -> Status {
    guard(|| {
        let Some(t) = tensor_ref(t) else { return set_error(VBT_ERR_INVALID_HANDLE, "null tensor") };
        if out.is_null() && t.dim() > 0 {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "null output");
        }
        for (i, &s) in t.sizes().iter().enumerate() {
            *out.add(i) = s as i64;
        }
        VBT_OK
    })
}

unsafe extern "C" fn h_tensor_strides(t: *mut TensorHandle, out: *mut i64) -> Status {
    guard(|| {
        let Some(t) = tensor_ref(t) else { return set_error(VBT_ERR_INVALID_HANDLE, "null tensor") };
        if out.is_null() && t.dim() > 0 {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "null output");
        }
        for (i, &s) in t.strides().iter().enumerate() {
            *out.add(i) = s as i64;
        }
        VBT_OK
    })
}

unsafe extern "C" fn h_tensor_dtype(t: *mut TensorHandle, out: *mut ExchangeDType) -> Status {
    guard(|| {
        let (Some(t), false) = (tensor_ref(t), out.is_null()) else { return set_error(VBT_ERR_INVALID_HANDLE, "null tensor or output") };
        *out = ExchangeDType::from_dtype(t.dtype());
        VBT_OK
    })
}

unsafe extern "C" fn h_tensor_device(t: *mut TensorHandle, out: *mut ExchangeDevice) -> Status {
    guard(|| {
        let (Some(t), false) = (tensor_ref(t), out.is_null()) else { return set_error(VBT_ERR_INVALID_HANDLE, "null tensor or output") };
        *out = ExchangeDevice::from_device(t.device());
        VBT_OK
    })
}

unsafe extern "C" fn h_tensor_data(t: *mut TensorHandle, out: *mut *mut c_void) -> Status {
    guard(|| {
        let (Some(t), false) = (tensor_ref(t), out.is_null()) else { return set_error(VBT_ERR_INVALID_HANDLE, "null tensor or output") };
        if let Err(e) = t.synchronize() {
            return fail(e);
        }
        *out = t.data_ptr() as *mut c_void;
        VBT_OK
    })
}

unsafe extern "C" fn h_tensor_numel(t: *mut TensorHandle, out: *mut i64) -> Status {
    guard(|| {
        let (Some(t), false) = (tensor_ref(t), out.is_null()) else { return set_error(VBT_ERR_INVALID_HANDLE, "null tensor or output") };
        *out = t.numel() as i64;
        VBT_OK
    })
}

unsafe extern "C" fn h_tensor_new(sizes: *const i64, ndim: i32, dtype: ExchangeDType, device: ExchangeDevice, out: *mut *mut TensorHandle) -> Status {
    guard(|| {
        if out.is_null() || ndim < 0 || (ndim > 0 && sizes.is_null()) {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "bad tensor_new arguments");
        }
        let dims: Vec<i64> = (0..ndim as usize).map(|i| *sizes.add(i)).collect();
        if dims.iter().any(|&d| d < 0) {
            return set_error(VBT_ERR_SHAPE, format!("negative size in {dims:?}"));
        }
        let dims: Vec<usize> = dims.into_iter().map(|d| d as usize).collect();
        let made = dtype.to_dtype().and_then(|dt| device.to_device().and_then(|dev| make_tensor(&dims, dt, dev)));
        match made {
            Ok(t) => {
                let p = Box::into_raw(Box::new(t));
                handles().lock().owned_tensors.insert(p as usize);
                *out = p as *mut TensorHandle;
                VBT_OK
            }
            Err(e) => fail(e),
        }
    })
}

unsafe extern "C" fn h_tensor_release(t: *mut TensorHandle) -> Status {
    guard(|| {
        if !handles().lock().owned_tensors.remove(&(t as usize)) {
            return set_error(VBT_ERR_INVALID_HANDLE, "tensor handle not owned by the plugin");
        }
        drop(Box::from_raw(t as *mut Tensor));
        VBT_OK
    })
}

// ------------------------------------------------------------ iterators

unsafe extern "C" fn h_iter_build(ops: *const *mut TensorHandle, n: i32, n_out: i32, flags: u32, out: *mut *mut IterHandle) -> Status {
    guard(|| {
        if ops.is_null() || out.is_null() || n <= 0 || n_out < 0 || n_out > n {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "bad iter_build arguments");
        }
        let mut tensors = Vec::with_capacity(n as usize);
        for i in 0..n as usize {
            match tensor_ref(*ops.add(i)) {
                Some(t) => tensors.push(t.clone()),
                None => return set_error(VBT_ERR_INVALID_HANDLE, format!("operand {i} is null")),
            }
        }
        let specs: Vec<OperandSpec> = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if (i as i32) < n_out {
                    if flags & VBT_ITER_ALLOW_INPLACE != 0 {
                        OperandSpec::inplace_output(t)
                    } else {
                        OperandSpec::output(t)
                    }
                } else {
                    OperandSpec::input(t)
                }
            })
            .collect();
        match build_iter(&specs, &BTreeSet::new()) {
            Ok(plan) => {
                let p = Box::into_raw(Box::new(IterState { plan, _tensors: tensors }));
                handles().lock().iters.insert(p as usize);
                *out = p as *mut IterHandle;
                VBT_OK
            }
            Err(e) => fail(e),
        }
    })
}

fn with_iter<R>(it: *mut IterHandle, f: impl FnOnce(&IterState) -> R) -> Option<R> {
    if !handles().lock().iters.contains(&(it as usize)) {
        return None;
    }
    // SAFETY: registered handles point at live IterStates; a handle is used
    // by one thread at a time per the ABI contract.
    Some(f(unsafe { &*(it as *const IterState) }))
}

unsafe extern "C" fn h_iter_common_shape(it: *mut IterHandle, out: *mut i64, ndim: *mut i32) -> Status {
    guard(|| {
        if ndim.is_null() {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "null ndim");
        }
        with_iter(it, |s| {
            *ndim = s.plan.common_shape.len() as i32;
            if !out.is_null() {
                for (i, &d) in s.plan.common_shape.iter().enumerate() {
                    *out.add(i) = d as i64;
                }
            }
            VBT_OK
        })
        .unwrap_or_else(|| set_error(VBT_ERR_INVALID_HANDLE, "unknown iterator handle"))
    })
}

unsafe extern "C" fn h_iter_for_each(it: *mut IterHandle, f: Option<ElementFn>, ctx: *mut c_void) -> Status {
    guard(|| {
        let Some(f) = f else { return set_error(VBT_ERR_INVALID_ARGUMENT, "null element function") };
        with_iter(it, |s| {
            for t in &s._tensors {
                if let Err(e) = t.synchronize() {
                    return fail(e);
                }
            }
            s.plan.for_each(|ptrs| f(ptrs.as_ptr() as *mut *mut c_char, ctx));
            VBT_OK
        })
        .unwrap_or_else(|| set_error(VBT_ERR_INVALID_HANDLE, "unknown iterator handle"))
    })
}

unsafe extern "C" fn h_iter_free(it: *mut IterHandle) -> Status {
    guard(|| {
        if !handles().lock().iters.remove(&(it as usize)) {
            return set_error(VBT_ERR_INVALID_HANDLE, "unknown iterator handle");
        }
        drop(Box::from_raw(it as *mut IterState));
        VBT_OK
    })
}

// ---------------------------------------------------------------- memory

unsafe extern "C" fn h_alloc(device: i32, bytes: u64, stream: i64, out: *mut *mut c_void) -> Status {
    guard(|| {
        if out.is_null() || device < 0 || stream < 0 || bytes == 0 {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "bad alloc arguments");
        }
        let rt = vdev::current_runtime();
        let (d, s) = (device as usize, stream as usize);
        if let Err(e) = rt.check_device(d) {
            return fail(e);
        }
        if s >= rt.num_streams(d) {
            return set_error(VBT_ERR_INVALID_ARGUMENT, format!("unknown stream {s}"));
        }
        if rt.is_capturing(d, s) {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "plugins may not allocate from graph pools");
        }
        match rt.allocator().allocate(d, bytes as usize, s) {
            Ok(b) => {
                handles().lock().allocs.insert(b.ptr as usize, PluginAlloc { runtime: rt.clone(), block: b.id, stream: s });
                *out = b.ptr as *mut c_void;
                VBT_OK
            }
            Err(e) => fail(e),
        }
    })
}

unsafe extern "C" fn h_dealloc(ptr: *mut c_void) -> Status {
    guard(|| {
        let Some(a) = handles().lock().allocs.remove(&(ptr as usize)) else {
            return set_error(VBT_ERR_INVALID_HANDLE, "pointer was not allocated through the plugin API");
        };
        match a.runtime.allocator().free(a.block, a.stream) {
            Ok(()) => VBT_OK,
            Err(e) => fail(e),
        }
    })
}

unsafe extern "C" fn h_report_error(code: i32, msg: *const c_char) {
    let text = if msg.is_null() { String::new() } else { CStr::from_ptr(msg).to_string_lossy().into_owned() };
    set_error(code, text);
}

// ----------------------------------------------------------- registration

#[derive(Clone, Copy)]
struct PluginKernel {
    f: KernelFn,
    user: usize,
    num_outputs: usize,
    inplace_input: Option<usize>,
}

fn run_plugin_kernel(name: &str, pk: PluginKernel, args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    for a in args {
        if let BoxedValue::Tensor(t) = a {
            t.synchronize()?;
        }
    }
    let mut ctx = CallCtx { args, outputs: vec![None; pk.num_outputs] };
    take_error();
    // SAFETY: ctx outlives the call; the plugin only reaches it through the table.
    let status = unsafe { (pk.f)(&mut ctx as *mut CallCtx as *mut CallHandle, pk.user as *mut c_void) };
    if status != VBT_OK {
        let (code, message) = take_error().unwrap_or((status, format!("{name} failed")));
        return Err(Error::Plugin { code: if code == 0 { status } else { code }, message });
    }
    let tensor_args: Vec<&Tensor> = args.iter().filter_map(|a| a.as_tensor()).collect();
    let mut outs = Vec::with_capacity(pk.num_outputs);
    for (i, o) in ctx.outputs.into_iter().enumerate() {
        let t = match (o, pk.inplace_input) {
            (Some(t), _) => t,
            (None, Some(k)) if i == 0 => tensor_args.get(k).map(|t| (*t).clone()).ok_or_else(|| Error::Other(format!("{name}: aliased input missing")))?,
            (None, _) => return Err(Error::Plugin { code: VBT_ERR_INVALID_ARGUMENT, message: format!("{name} did not set output {i}") }),
        };
        if i == 0 {
            if let Some(k) = pk.inplace_input {
                if tensor_args.get(k).is_some_and(|a| a.storage().ptr_eq(t.storage())) {
                    t.bump_version();
                }
            }
        }
        outs.push(BoxedValue::Tensor(t));
    }
    Ok(outs)
}

fn register_plugin_op(name: &str, n_in: i32, n_out: i32, f: KernelFn, user: usize, keys: u32, inplace_input: i32) -> Result<()> {
    if !valid_op_name(name) {
        return Err(Error::BadArgument { op: name.into(), index: 0, msg: "operator names look like ns::name".into() });
    }
    if name.starts_with("vt::") {
        return Err(Error::BadArgument { op: name.into(), index: 0, msg: "plugins may not register in the vt namespace".into() });
    }
    if n_in < 0 || n_out < 1 || keys & (VBT_KEY_HOST | VBT_KEY_VIRT) == 0 {
        return Err(Error::BadArgument { op: name.into(), index: 1, msg: "bad arity or device keys".into() });
    }
    let mut schema = OpSchemaLite::new(name, n_in as usize, n_out as usize);
    let inplace = (inplace_input >= 0).then_some(inplace_input as usize);
    if let Some(k) = inplace {
        schema = schema.with_alias(0, k);
    }
    let r = dispatch::registry();
    let h = r.register_op(schema)?;
    LOADING.with(|l| {
        if let Some(v) = l.borrow_mut().as_mut() {
            v.push(name.to_string());
        }
    });
    let pk = PluginKernel { f, user, num_outputs: n_out as usize, inplace_input: inplace };
    let owned = name.to_string();
    let k = kernel(move |args| run_plugin_kernel(&owned, pk, args));
    if keys & VBT_KEY_HOST != 0 {
        r.register_kernel(&h, DispatchKey::HostKernel, k.clone())?;
    }
    if keys & VBT_KEY_VIRT != 0 {
        r.register_kernel(&h, DispatchKey::VirtKernel, k)?;
    }
    Ok(())
}

unsafe extern "C" fn h_register_op(name: *const c_char, n_in: i32, n_out: i32, f: Option<KernelFn>, user: *mut c_void, keys: u32, inplace: i32) -> Status {
    guard(|| {
        let Some(f) = f else { return set_error(VBT_ERR_INVALID_ARGUMENT, "null kernel") };
        if name.is_null() {
            return set_error(VBT_ERR_INVALID_ARGUMENT, "null name");
        }
        let Ok(name) = CStr::from_ptr(name).to_str() else { return set_error(VBT_ERR_INVALID_ARGUMENT, "name is not UTF-8") };
        match register_plugin_op(name, n_in, n_out, f, user as usize, keys, inplace) {
            Ok(()) => VBT_OK,
            Err(e) => fail(e),
        }
    })
}

static HOST_API: HostApi = HostApi {
    abi_major: HOST_ABI_MAJOR,
    abi_minor: HOST_ABI_MINOR,
    struct_size: std::mem::size_of::<HostApi>() as u64,
    register_op: h_register_op,
    tensor_ndim: h_tensor_ndim,
    tensor_sizes: h_tensor_sizes,
    tensor_strides: h_tensor_strides,
    tensor_dtype: h_tensor_dtype,
    tensor_device: h_tensor_device,
    tensor_data: h_tensor_data,
    iter_build: h_iter_build,
    iter_common_shape: h_iter_common_shape,
    iter_for_each: h_iter_for_each,
    iter_free: h_iter_free,
    alloc: h_alloc,
    dealloc: h_dealloc,
    report_error: h_report_error,
    call_num_args: h_call_num_args,
    call_arg_kind: h_call_arg_kind,
    call_arg_tensor: h_call_arg_tensor,
    call_arg_double: h_call_arg_double,
    call_arg_int: h_call_arg_int,
    call_set_output: h_call_set_output,
    tensor_new: h_tensor_new,
    tensor_release: h_tensor_release,
    tensor_numel: h_tensor_numel,
};

/// The table handed to plugins.
pub fn host_api() -> &'static HostApi {
    &HOST_API
}

fn run_entry(path: &Path, version: u32, init: InitFn) -> Result<PluginManifest> {
    let (major, minor) = abi_decode(version);
    let minor_used = match abi_negotiate(major, minor) {
        Negotiation::Accept { minor_used } => minor_used,
        Negotiation::Reject { .. } => {
            return Err(Error::AbiMismatch { plugin_major: major, plugin_minor: minor, host_major: HOST_ABI_MAJOR, host_minor: HOST_ABI_MINOR })
        }
    };
    LOADING.with(|l| *l.borrow_mut() = Some(Vec::new()));
    take_error();
    // SAFETY: the caller vouches that `init` follows the documented signature.
    let rc = catch_unwind(|| unsafe { init(&HOST_API, HOST_ABI_MAJOR, HOST_ABI_MINOR) }).unwrap_or(VBT_ERR_INTERNAL);
    let ops = LOADING.with(|l| l.borrow_mut().take()).unwrap_or_default();
    if rc != 0 {
        let r = dispatch::registry();
        for name in &ops {
            r.unregister_op(name);
        }
        let message = take_error().map(|(_, m)| m).unwrap_or_else(|| "plugin init failed".into());
        return Err(Error::Plugin { code: rc, message });
    }
    Ok(PluginManifest { path: path.to_path_buf(), entry: ENTRY_SYMBOL.into(), abi_major: major, abi_minor: minor, minor_used, ops })
}

/// Run an entry point that is already linked into the process.
///
/// # Safety
/// `init` must honor the plugin ABI.
pub unsafe fn load_plugin_entry(label: &str, abi_version: u32, init: InitFn) -> Result<PluginManifest> {
    let _serial = load_lock().lock();
    run_entry(Path::new(label), abi_version, init)
}

/// Load a plugin shared library and run its entry point. The library stays
/// mapped for the life of the process.
pub fn load_plugin(path: impl AsRef<Path>) -> Result<PluginManifest> {
    let path = path.as_ref();
    let mut libs = load_lock().lock();
    // SAFETY: loading runs the library's initializers; plugins are trusted code.
    let lib = unsafe { libloading::Library::new(path) }.map_err(|e| Error::PluginLoad(format!("{}: {e}", path.display())))?;
    let version: VersionFn = unsafe {
        *lib.get::<VersionFn>(VERSION_SYMBOL.as_bytes()).map_err(|_| Error::MissingSymbol(VERSION_SYMBOL.into()))?
    };
    let init: InitFn = unsafe { *lib.get::<InitFn>(ENTRY_SYMBOL.as_bytes()).map_err(|_| Error::MissingSymbol(ENTRY_SYMBOL.into()))? };
    let v = unsafe { version() };
    let manifest = run_entry(path, v, init)?;
    libs.push(lib);
    Ok(manifest)
}

/// Number of plugin allocations and tensor handles still outstanding.
pub fn outstanding_handles() -> (usize, usize, usize) {
    let h = handles().lock();
    (h.owned_tensors.len(), h.iters.len(), h.allocs.len())
}
