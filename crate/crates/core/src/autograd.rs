//! Reverse-mode autograd: graph nodes and edges recorded by the operator
//! wrapper layer, a dependency-counted FIFO engine, version checks on saved
//! tensors, event ordering for gradients that cross streams, and a global
//! non-reentrant backward gate.

use std::cell::Cell;
use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use crate::device::Device;
use crate::dispatch::{AutogradWrapper, BoxedValue, Next};
use crate::error::{Error, Result};
use crate::ops::kernels;
use crate::tensor::{make_like_device, Tensor};
use crate::vdev::{Runtime, StreamId};

/// Gradient function: incoming output gradients and unpacked saved tensors
/// in, one optional gradient per input edge out.
pub type BackwardFn = Box<dyn FnOnce(&[Option<Tensor>], &[Tensor]) -> Result<Vec<Option<Tensor>>> + Send>;

#[derive(Default)]
pub struct AutogradMeta {
    pub requires_grad: bool,
    pub grad: Option<Tensor>,
    pub grad_fn: Option<Arc<GradNode>>,
    pub output_nr: usize,
    accumulator: Weak<GradNode>,
}

impl fmt::Debug for AutogradMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AutogradMeta")
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .field("grad_fn", &self.grad_fn.as_ref().map(|n| n.name()))
            .field("output_nr", &self.output_nr)
            .finish()
    }
}

#[derive(Clone)]
pub struct GradEdge {
    pub node: Arc<GradNode>,
    pub input_nr: usize,
}

struct SavedTensor {
    tensor: Tensor,
    version: u64,
}

/// Where a node's forward ran; its backward runs there too.
#[derive(Clone)]
pub struct StreamHint {
    pub runtime: Arc<Runtime>,
    pub device: usize,
    pub stream: StreamId,
}

impl fmt::Debug for StreamHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "virt:{}/stream {}", self.device, self.stream)
    }
}

enum NodeKind {
    Function { apply: Mutex<Option<BackwardFn>>, saved: Mutex<Vec<SavedTensor>> },
    Accumulate { leaf: Tensor },
}

pub struct GradNode {
    id: u64,
    name: String,
    next_edges: Vec<Option<GradEdge>>,
    num_outputs: usize,
    stream_hint: Option<StreamHint>,
    kind: NodeKind,
}

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

impl GradNode {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn next_edges(&self) -> &[Option<GradEdge>] {
        &self.next_edges
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn stream_hint(&self) -> Option<&StreamHint> {
        self.stream_hint.as_ref()
    }

    pub fn is_accumulator(&self) -> bool {
        matches!(self.kind, NodeKind::Accumulate { .. })
    }

    fn accumulator(leaf: &Tensor) -> Arc<GradNode> {
        Arc::new(GradNode {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            name: "AccumulateGrad".into(),
            next_edges: Vec::new(),
            num_outputs: 1,
            stream_hint: None,
            kind: NodeKind::Accumulate { leaf: leaf.clone() },
        })
    }
}

impl fmt::Debug for GradNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradNode").field("id", &self.id).field("name", &self.name).field("edges", &self.next_edges.len()).finish()
    }
}

// ------------------------------------------------------------- grad mode

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub fn set_grad_enabled(enabled: bool) {
    GRAD_ENABLED.with(|g| g.set(enabled));
}

/// Restores the previous grad mode on drop.
pub struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        set_grad_enabled(self.0);
    }
}

pub fn no_grad() -> GradModeGuard {
    let prev = is_grad_enabled();
    set_grad_enabled(false);
    GradModeGuard(prev)
}

pub fn enable_grad() -> GradModeGuard {
    let prev = is_grad_enabled();
    set_grad_enabled(true);
    GradModeGuard(prev)
}

// ------------------------------------------------------------------ gate

static GATE: AtomicBool = AtomicBool::new(false);

/// Held while a backward pass runs; releases the gate on drop.
pub struct GateToken(());

impl Drop for GateToken {
    fn drop(&mut self) {
        GATE.store(false, Ordering::Release);
    }
}

/// Try to take the process-wide backward gate without blocking.
pub fn acquire_backward_gate() -> Result<GateToken> {
    GATE.compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed).map(|_| GateToken(())).map_err(|_| Error::GateBusy)
}

pub fn gate_held() -> bool {
    GATE.load(Ordering::Acquire)
}

// ---------------------------------------------------------- tensor hooks

impl Tensor {
    pub fn requires_grad(&self) -> bool {
        self.inner.autograd.lock().as_ref().map(|m| m.requires_grad).unwrap_or(false)
    }

    /// Mark a leaf as requiring grad. Returns `self` for chaining.
    pub fn set_requires_grad(self, requires_grad: bool) -> Result<Tensor> {
        if requires_grad && !self.dtype().is_float() {
            return Err(Error::UnsupportedDType(self.dtype(), "requires_grad"));
        }
        {
            let mut m = self.inner.autograd.lock();
            let meta = m.get_or_insert_with(AutogradMeta::default);
            if meta.grad_fn.is_some() && !requires_grad {
                return Err(Error::Other("cannot clear requires_grad on a non-leaf tensor; use detach()".into()));
            }
            meta.requires_grad = requires_grad;
        }
        Ok(self)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.inner.autograd.lock().as_ref().and_then(|m| m.grad.clone())
    }

    pub fn set_grad(&self, grad: Option<Tensor>) {
        self.inner.autograd.lock().get_or_insert_with(AutogradMeta::default).grad = grad;
    }

    pub fn zero_grad(&self) {
        if let Some(m) = self.inner.autograd.lock().as_mut() {
            m.grad = None;
        }
    }

    pub fn grad_fn(&self) -> Option<Arc<GradNode>> {
        self.inner.autograd.lock().as_ref().and_then(|m| m.grad_fn.clone())
    }

    pub fn output_nr(&self) -> usize {
        self.inner.autograd.lock().as_ref().map(|m| m.output_nr).unwrap_or(0)
    }

    pub fn is_leaf(&self) -> bool {
        self.grad_fn().is_none()
    }

    /// Run backward from this tensor. See [`backward`].
    pub fn backward(&self, grad_seed: Option<&Tensor>) -> Result<()> {
        backward(self, grad_seed)
    }
}

/// Edge that a gradient for `t` should flow along, creating the leaf's
/// accumulator on first use.
fn gradient_edge(t: &Tensor) -> Option<GradEdge> {
    let mut m = t.inner.autograd.lock();
    let meta = m.as_mut()?;
    if let Some(f) = &meta.grad_fn {
        return Some(GradEdge { node: f.clone(), input_nr: meta.output_nr });
    }
    if !meta.requires_grad {
        return None;
    }
    if let Some(acc) = meta.accumulator.upgrade() {
        return Some(GradEdge { node: acc, input_nr: 0 });
    }
    let acc = GradNode::accumulator(&Tensor { inner: t.inner.clone() });
    meta.accumulator = Arc::downgrade(&acc);
    Some(GradEdge { node: acc, input_nr: 0 })
}

fn stream_hint_for(outputs: &[Tensor]) -> Option<StreamHint> {
    let t = outputs.first()?;
    let Device::Virt(d) = t.device() else { return None };
    let rt = t.storage().runtime()?.clone();
    let stream = rt.current_stream(d);
    Some(StreamHint { runtime: rt, device: d, stream })
}

/// Attach a new node to `outputs`. `saved` tensors are stored as detached
/// aliases together with their current versions.
pub fn record_forward(op_name: &str, inputs: &[Tensor], outputs: &[Tensor], backward_fn: BackwardFn, saved: &[Tensor]) -> Option<Arc<GradNode>> {
    let next_edges: Vec<Option<GradEdge>> = inputs.iter().map(gradient_edge).collect();
    if next_edges.iter().all(|e| e.is_none()) {
        return None;
    }
    let node = Arc::new(GradNode {
        id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
        name: op_name.to_string(),
        next_edges,
        num_outputs: outputs.len(),
        stream_hint: stream_hint_for(outputs),
        kind: NodeKind::Function {
            apply: Mutex::new(Some(backward_fn)),
            saved: Mutex::new(saved.iter().map(|t| SavedTensor { tensor: t.detach(), version: t.version() }).collect()),
        },
    });
    for (i, o) in outputs.iter().enumerate() {
        let mut m = o.inner.autograd.lock();
        let meta = m.get_or_insert_with(AutogradMeta::default);
        meta.requires_grad = true;
        meta.grad_fn = Some(node.clone());
        meta.output_nr = i;
    }
    Some(node)
}

/// A backward formula: given the boxed call arguments and the forward
/// outputs, produce the tensors to save and the gradient function.
pub type Formula = fn(&[BoxedValue], &[Tensor]) -> Result<(Vec<Tensor>, BackwardFn)>;

/// Autograd wrapper layer for one operator. Runs the rest of the chain with
/// grad mode off, then records a node if any tensor input requires grad.
pub fn wrapper(op_name: &'static str, formula: Formula) -> AutogradWrapper {
    Arc::new(move |args: &[BoxedValue], next: Next<'_>| {
        let track = is_grad_enabled() && args.iter().any(|a| a.as_tensor().is_some_and(|t| t.requires_grad()));
        let outs = {
            let _g = no_grad();
            next(args)?
        };
        if track {
            let inputs: Vec<Tensor> = args.iter().filter_map(|a| a.as_tensor().cloned()).collect();
            let outputs: Vec<Tensor> = outs.iter().filter_map(|o| o.as_tensor().cloned()).collect();
            let (saved, bw) = formula(args, &outputs)?;
            record_forward(op_name, &inputs, &outputs, bw, &saved);
        }
        Ok(outs)
    })
}

// ---------------------------------------------------------------- engine

fn exec_stream(node: &GradNode, fallback: &Option<StreamHint>) -> Option<StreamHint> {
    node.stream_hint.clone().or_else(|| fallback.clone())
}

/// Make `consumer` wait for work queued on `producer` before reading `grad`.
pub fn sync_cross_stream_grad(producer: &StreamHint, consumer: &StreamHint, grad: &Tensor) -> Result<()> {
    if grad.device().is_host() || producer.device != consumer.device || producer.stream == consumer.stream {
        return Ok(());
    }
    let rt = &producer.runtime;
    let e = rt.event_create(producer.device)?;
    rt.event_record(e, producer.device, producer.stream)?;
    rt.event_wait(e, consumer.device, consumer.stream)?;
    grad.storage().record_stream(consumer.stream);
    Ok(())
}

fn with_hint<R>(hint: &Option<StreamHint>, f: impl FnOnce() -> R) -> R {
    match hint {
        Some(h) => {
            let _g = h.runtime.stream_guard(h.device, h.stream);
            f()
        }
        None => f(),
    }
}

fn ones_like(t: &Tensor) -> Result<Tensor> {
    let o = make_like_device(t.sizes(), t.dtype(), t)?;
    kernels::fill(&o, 1.0)?;
    Ok(o)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => kernels::binary(kernels::BinaryOp::Add, &prev, &g)?,
    });
    Ok(())
}

fn accumulate_leaf(leaf: &Tensor, g: &Tensor) -> Result<()> {
    let existing = leaf.grad();
    let buf = match existing {
        Some(b) => b,
        None => {
            let b = make_like_device(leaf.sizes(), leaf.dtype(), leaf)?;
            leaf.set_grad(Some(b.clone()));
            b
        }
    };
    let g = if g.sizes() == leaf.sizes() { g.clone() } else { kernels::sum_to_shape(g, leaf.sizes())? };
    kernels::axpy_(&buf, &g, 1.0)?;
    buf.bump_version();
    Ok(())
}

fn node_key(n: &Arc<GradNode>) -> usize {
    Arc::as_ptr(n) as usize
}

/// Reverse-mode pass from `root`. Leaf gradients accumulate into
/// `Tensor::grad`; the graph's buffers are freed as nodes run.
pub fn backward(root: &Tensor, grad_seed: Option<&Tensor>) -> Result<()> {
    let _gate = acquire_backward_gate()?;
    let _ng = no_grad();

    let edge = if root.requires_grad() { gradient_edge(root) } else { None };
    let Some(root_edge) = edge else { return Err(Error::NoGradFn) };
    let seed = match grad_seed {
        Some(s) => {
            if s.sizes() != root.sizes() {
                return Err(Error::SeedShape { seed: s.sizes().to_vec(), root: root.sizes().to_vec() });
            }
            s.clone()
        }
        None => {
            if root.numel() != 1 {
                return Err(Error::NonScalarRoot(root.sizes().to_vec()));
            }
            ones_like(root)?
        }
    };

    let caller = match root.device() {
        Device::Virt(d) => root.storage().runtime().map(|rt| StreamHint { runtime: rt.clone(), device: d, stream: rt.current_stream(d) }),
        Device::Host => None,
    };

    // dependency counts by reverse reachability
    let mut deps: HashMap<usize, usize> = HashMap::new();
    let mut seen: HashSet<usize> = HashSet::new();
    let mut stack = vec![root_edge.node.clone()];
    seen.insert(node_key(&root_edge.node));
    while let Some(n) = stack.pop() {
        for e in n.next_edges.iter().flatten() {
            *deps.entry(node_key(&e.node)).or_insert(0) += 1;
            if seen.insert(node_key(&e.node)) {
                stack.push(e.node.clone());
            }
        }
    }

    let mut buffers: HashMap<usize, (Vec<Option<Tensor>>, Option<StreamHint>)> = HashMap::new();
    {
        let mut slots = vec![None; root_edge.node.num_outputs];
        let consumer = exec_stream(&root_edge.node, &caller);
        if let (Some(p), Some(c)) = (&caller, &consumer) {
            sync_cross_stream_grad(p, c, &seed)?;
        }
        slots[root_edge.input_nr] = Some(seed);
        buffers.insert(node_key(&root_edge.node), (slots, caller.clone()));
    }
    let mut ready: VecDeque<Arc<GradNode>> = VecDeque::from([root_edge.node.clone()]);

    while let Some(node) = ready.pop_front() {
        let (grads, _) = buffers.remove(&node_key(&node)).unwrap_or_else(|| (vec![None; node.num_outputs], None));
        let hint = exec_stream(&node, &caller);
        let outputs: Vec<Option<Tensor>> = match &node.kind {
            NodeKind::Accumulate { leaf } => {
                if let Some(g) = &grads[0] {
                    with_hint(&hint, || accumulate_leaf(leaf, g))?;
                }
                Vec::new()
            }
            NodeKind::Function { apply, saved } => {
                let f = apply.lock().take().ok_or_else(|| Error::GraphFreed(node.name.clone()))?;
                let saved = std::mem::take(&mut *saved.lock());
                for (i, s) in saved.iter().enumerate() {
                    let cur = s.tensor.version();
                    if cur != s.version {
                        return Err(Error::VersionMismatch {
                            op: node.name.clone(),
                            tensor: format!("saved tensor {i} of shape {:?}", s.tensor.sizes()),
                            saved: s.version,
                            current: cur,
                        });
                    }
                }
                let unpacked: Vec<Tensor> = saved.into_iter().map(|s| s.tensor).collect();
                let out = with_hint(&hint, || f(&grads, &unpacked))?;
                if out.len() != node.next_edges.len() {
                    return Err(Error::Other(format!(
                        "{} backward returned {} gradients for {} inputs",
                        node.name,
                        out.len(),
                        node.next_edges.len()
                    )));
                }
                out
            }
        };
        for (edge, g) in node.next_edges.iter().zip(outputs) {
            let Some(edge) = edge else { continue };
            let key = node_key(&edge.node);
            if let Some(g) = g {
                let consumer = exec_stream(&edge.node, &caller);
                if let (Some(p), Some(c)) = (&hint, &consumer) {
                    sync_cross_stream_grad(p, c, &g)?;
                }
                let entry = buffers.entry(key).or_insert_with(|| (vec![None; edge.node.num_outputs], consumer.clone()));
                with_hint(&consumer, || accumulate(&mut entry.0[edge.input_nr], g))?;
            }
            let d = deps.get_mut(&key).expect("edge target was counted");
            *d -= 1;
            if *d == 0 {
                ready.push_back(edge.node.clone());
            }
        }
    }
    Ok(())
}

/// Gradients of `outputs` (scalar, summed) with respect to `inputs`, without
/// touching any existing `.grad`. Convenience built on [`backward`].
pub fn grad(output: &Tensor, inputs: &[Tensor]) -> Result<Vec<Option<Tensor>>> {
    let saved: Vec<Option<Tensor>> = inputs.iter().map(|t| t.grad()).collect();
    for t in inputs {
        t.zero_grad();
    }
    let r = backward(output, None);
    let out = inputs.iter().map(|t| t.grad()).collect();
    for (t, g) in inputs.iter().zip(saved) {
        t.set_grad(g);
    }
    r.map(|_| out)
}

#[cfg(test)]
pub(crate) static TEST_SERIAL: Mutex<()> = parking_lot::const_mutex(());
