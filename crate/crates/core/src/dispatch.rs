//! Schema-lite operator registry.
//!
//! Operators are keyed by `ns::op` names and carry only arity, an optional
//! in-place alias map and a device policy. Every registration change
//! publishes a fresh immutable [`OperatorSnapshot`]; callers load the
//! current snapshot without taking a lock. Calls run the wrapper chain in a
//! fixed order: override, then autograd, then the base kernel selected by
//! dispatch key.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, OnceLock};

use arc_swap::ArcSwap;
use parking_lot::Mutex;

use crate::device::Device;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DispatchKey {
    HostKernel,
    VirtKernel,
}

impl DispatchKey {
    pub fn for_device(d: Device) -> DispatchKey {
        match d {
            Device::Host => DispatchKey::HostKernel,
            Device::Virt(_) => DispatchKey::VirtKernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DevicePolicy {
    AllSameDevice,
    FabricMultiDevice,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSchemaLite {
    pub name: String,
    pub num_tensor_inputs: usize,
    pub num_tensor_outputs: usize,
    /// output index -> input index
    pub inplace_alias: BTreeMap<usize, usize>,
    pub device_policy: DevicePolicy,
}

impl OpSchemaLite {
    pub fn new(name: &str, num_tensor_inputs: usize, num_tensor_outputs: usize) -> Self {
        OpSchemaLite {
            name: name.to_string(),
            num_tensor_inputs,
            num_tensor_outputs,
            inplace_alias: BTreeMap::new(),
            device_policy: DevicePolicy::AllSameDevice,
        }
    }

    pub fn with_alias(mut self, output: usize, input: usize) -> Self {
        self.inplace_alias.insert(output, input);
        self
    }

    pub fn with_policy(mut self, policy: DevicePolicy) -> Self {
        self.device_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !valid_op_name(&self.name) {
            return Err(Error::BadOperatorName(self.name.clone()));
        }
        for (&o, &i) in &self.inplace_alias {
            if o >= self.num_tensor_outputs || i >= self.num_tensor_inputs {
                return Err(Error::InvalidSchema(format!("{}: alias {o}->{i} outside declared arity", self.name)));
            }
        }
        Ok(())
    }
}

/// `^[a-z_][a-z0-9_]*::[a-z_][a-z0-9_]*$`
pub fn valid_op_name(name: &str) -> bool {
    fn ident(s: &str) -> bool {
        let mut chars = s.chars();
        match chars.next() {
            Some(c) if c.is_ascii_lowercase() || c == '_' => {}
            _ => return false,
        }
        chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    }
    match name.split_once("::") {
        Some((ns, op)) => ident(ns) && ident(op),
        None => false,
    }
}

#[derive(Clone)]
pub enum BoxedValue {
    Tensor(Tensor),
    Int(i64),
    Float(f64),
    Bool(bool),
    IntList(Vec<i64>),
    Str(String),
}

impl fmt::Debug for BoxedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoxedValue::Tensor(t) => write!(f, "Tensor({:?}, {}, {})", t.sizes(), t.dtype(), t.device()),
            BoxedValue::Int(v) => write!(f, "Int({v})"),
            BoxedValue::Float(v) => write!(f, "Float({v})"),
            BoxedValue::Bool(v) => write!(f, "Bool({v})"),
            BoxedValue::IntList(v) => write!(f, "IntList({v:?})"),
            BoxedValue::Str(v) => write!(f, "Str({v:?})"),
        }
    }
}

impl BoxedValue {
    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            BoxedValue::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn into_tensor(self) -> Option<Tensor> {
        match self {
            BoxedValue::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            BoxedValue::Float(v) => Some(*v),
            BoxedValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            BoxedValue::Int(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<Tensor> for BoxedValue {
    fn from(t: Tensor) -> Self {
        BoxedValue::Tensor(t)
    }
}

impl From<&Tensor> for BoxedValue {
    fn from(t: &Tensor) -> Self {
        BoxedValue::Tensor(t.clone())
    }
}

impl From<f64> for BoxedValue {
    fn from(v: f64) -> Self {
        BoxedValue::Float(v)
    }
}

impl From<i64> for BoxedValue {
    fn from(v: i64) -> Self {
        BoxedValue::Int(v)
    }
}

impl From<bool> for BoxedValue {
    fn from(v: bool) -> Self {
        BoxedValue::Bool(v)
    }
}

impl From<Vec<i64>> for BoxedValue {
    fn from(v: Vec<i64>) -> Self {
        BoxedValue::IntList(v)
    }
}

pub type Kernel = Arc<dyn Fn(&[BoxedValue]) -> Result<Vec<BoxedValue>> + Send + Sync>;
/// Continuation handed to wrapper layers: runs the rest of the chain.
pub type Next<'a> = &'a dyn Fn(&[BoxedValue]) -> Result<Vec<BoxedValue>>;
pub type AutogradWrapper = Arc<dyn Fn(&[BoxedValue], Next<'_>) -> Result<Vec<BoxedValue>> + Send + Sync>;

pub fn kernel(f: impl Fn(&[BoxedValue]) -> Result<Vec<BoxedValue>> + Send + Sync + 'static) -> Kernel {
    Arc::new(f)
}

/// Immutable published state of one operator.
#[derive(Clone)]
pub struct OperatorSnapshot {
    pub schema: OpSchemaLite,
    pub base_kernels: BTreeMap<DispatchKey, Kernel>,
    pub autograd: Option<AutogradWrapper>,
    pub override_fn: Option<Kernel>,
    pub generation: u64,
}

impl OperatorSnapshot {
    pub fn has_autograd_wrapper(&self) -> bool {
        self.autograd.is_some()
    }

    pub fn has_override_wrapper(&self) -> bool {
        self.override_fn.is_some()
    }
}

impl fmt::Debug for OperatorSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorSnapshot")
            .field("schema", &self.schema)
            .field("kernels", &self.base_kernels.keys().collect::<Vec<_>>())
            .field("autograd", &self.autograd.is_some())
            .field("override", &self.override_fn.is_some())
            .field("generation", &self.generation)
            .finish()
    }
}

struct OpEntry {
    snapshot: ArcSwap<OperatorSnapshot>,
}

/// Handle returned by [`Registry::register_op`].
#[derive(Clone)]
pub struct OpHandle {
    entry: Arc<OpEntry>,
}

impl OpHandle {
    pub fn name(&self) -> String {
        self.entry.snapshot.load().schema.name.clone()
    }

    pub fn snapshot(&self) -> Arc<OperatorSnapshot> {
        self.entry.snapshot.load_full()
    }
}

pub const MAX_OVERRIDE_DEPTH: usize = 64;

thread_local! {
    static OVERRIDE_DEPTH: RefCell<HashMap<String, usize>> = RefCell::new(HashMap::new());
}

pub struct Registry {
    ops: ArcSwap<BTreeMap<String, Arc<OpEntry>>>,
    writer: Mutex<()>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry::new()
    }
}

impl Registry {
    pub fn new() -> Self {
        Registry { ops: ArcSwap::from_pointee(BTreeMap::new()), writer: Mutex::new(()) }
    }

    pub fn register_op(&self, schema: OpSchemaLite) -> Result<OpHandle> {
        schema.validate()?;
        let _w = self.writer.lock();
        let current = self.ops.load_full();
        if current.contains_key(&schema.name) {
            return Err(Error::DuplicateOperator(schema.name));
        }
        let entry = Arc::new(OpEntry {
            snapshot: ArcSwap::from_pointee(OperatorSnapshot {
                schema: schema.clone(),
                base_kernels: BTreeMap::new(),
                autograd: None,
                override_fn: None,
                generation: 0,
            }),
        });
        let mut next = (*current).clone();
        next.insert(schema.name.clone(), entry.clone());
        self.ops.store(Arc::new(next));
        Ok(OpHandle { entry })
    }

    /// Remove an operator entirely (used to roll back failed plugin loads).
    pub(crate) fn unregister_op(&self, name: &str) {
        let _w = self.writer.lock();
        let mut next = (*self.ops.load_full()).clone();
        next.remove(name);
        self.ops.store(Arc::new(next));
    }

    fn publish(&self, entry: &OpEntry, f: impl FnOnce(&mut OperatorSnapshot) -> Result<()>) -> Result<()> {
        let _w = self.writer.lock();
        let mut snap = (**entry.snapshot.load()).clone();
        f(&mut snap)?;
        snap.generation += 1;
        entry.snapshot.store(Arc::new(snap));
        Ok(())
    }

    pub fn register_kernel(&self, op: &OpHandle, key: DispatchKey, k: Kernel) -> Result<()> {
        self.publish(&op.entry, |s| {
            if s.base_kernels.contains_key(&key) {
                return Err(Error::KernelSlotFilled { op: s.schema.name.clone(), key });
            }
            s.base_kernels.insert(key, k);
            Ok(())
        })
    }

    pub fn replace_kernel(&self, op: &OpHandle, key: DispatchKey, k: Kernel) -> Result<()> {
        self.publish(&op.entry, |s| {
            s.base_kernels.insert(key, k);
            Ok(())
        })
    }

    pub fn set_autograd(&self, op: &OpHandle, w: AutogradWrapper) -> Result<()> {
        self.publish(&op.entry, |s| {
            s.autograd = Some(w);
            Ok(())
        })
    }

    fn entry(&self, name: &str) -> Result<Arc<OpEntry>> {
        self.ops.load().get(name).cloned().ok_or_else(|| Error::UnknownOperator(name.to_string()))
    }

    pub fn handle(&self, name: &str) -> Result<OpHandle> {
        Ok(OpHandle { entry: self.entry(name)? })
    }

    pub fn set_python_style_override(&self, name: &str, f: Kernel) -> Result<()> {
        let e = self.entry(name)?;
        self.publish(&e, |s| {
            s.override_fn = Some(f);
            Ok(())
        })
    }

    pub fn clear_override(&self, name: &str) -> Result<()> {
        let e = self.entry(name)?;
        self.publish(&e, |s| {
            s.override_fn = None;
            Ok(())
        })
    }

    pub fn snapshot(&self, name: &str) -> Result<Arc<OperatorSnapshot>> {
        Ok(self.entry(name)?.snapshot.load_full())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ops.load().contains_key(name)
    }

    pub fn op_names(&self) -> Vec<String> {
        self.ops.load().keys().cloned().collect()
    }

    pub fn call_boxed(&self, name: &str, args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
        self.call_inner(name, args, false)
    }

    /// Run the chain below the override layer (for overrides that delegate).
    pub fn call_skip_override(&self, name: &str, args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
        self.call_inner(name, args, true)
    }

    fn call_inner(&self, name: &str, args: &[BoxedValue], skip_override: bool) -> Result<Vec<BoxedValue>> {
        let snap = self.snapshot(name)?;
        let n_tensors = args.iter().filter(|a| matches!(a, BoxedValue::Tensor(_))).count();
        if n_tensors != snap.schema.num_tensor_inputs {
            return Err(Error::ArityMismatch { op: name.to_string(), expected: snap.schema.num_tensor_inputs, got: n_tensors });
        }
        device_policy_check(&snap.schema, args)?;

        if let (Some(ov), false) = (&snap.override_fn, skip_override) {
            let depth = OVERRIDE_DEPTH.with(|d| {
                let mut d = d.borrow_mut();
                let e = d.entry(name.to_string()).or_insert(0);
                *e += 1;
                *e
            });
            struct Dec<'a>(&'a str);
            impl Drop for Dec<'_> {
                fn drop(&mut self) {
                    OVERRIDE_DEPTH.with(|d| {
                        if let Some(e) = d.borrow_mut().get_mut(self.0) {
                            *e -= 1;
                        }
                    });
                }
            }
            let _dec = Dec(name);
            if depth > MAX_OVERRIDE_DEPTH {
                return Err(Error::OverrideRecursion { op: name.to_string(), depth: MAX_OVERRIDE_DEPTH });
            }
            return ov(args);
        }

        let key = args
            .iter()
            .find_map(|a| a.as_tensor().map(|t| DispatchKey::for_device(t.device())))
            .unwrap_or(DispatchKey::HostKernel);
        let base = snap.base_kernels.get(&key).cloned().ok_or_else(|| Error::NoKernel { op: name.to_string(), key })?;
        match &snap.autograd {
            Some(w) => w(args, &|a: &[BoxedValue]| base(a)),
            None => base(args),
        }
    }
}

pub fn device_policy_check(schema: &OpSchemaLite, args: &[BoxedValue]) -> Result<()> {
    let mut first: Option<Device> = None;
    for (i, a) in args.iter().enumerate() {
        let Some(t) = a.as_tensor() else { continue };
        let d = t.device();
        match (schema.device_policy, first) {
            (_, None) => first = Some(d),
            (DevicePolicy::AllSameDevice, Some(f)) if f != d => {
                return Err(Error::DevicePolicy { op: schema.name.clone(), arg: i, expected: f, found: d });
            }
            (DevicePolicy::FabricMultiDevice, Some(f)) if f.is_host() != d.is_host() => {
                return Err(Error::DevicePolicy { op: schema.name.clone(), arg: i, expected: f, found: d });
            }
            _ => {}
        }
    }
    Ok(())
}

static GLOBAL: OnceLock<Registry> = OnceLock::new();

/// Process-wide registry, pre-populated with the built-in operator library.
pub fn registry() -> &'static Registry {
    GLOBAL.get_or_init(|| {
        let r = Registry::new();
        crate::ops::register_library(&r).expect("built-in operator library registers");
        r
    })
}
