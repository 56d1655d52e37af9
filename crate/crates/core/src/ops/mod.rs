//! Operator library. Every public function here routes through the
//! dispatcher (`vt::*` names), so overrides and the autograd layer apply.

pub mod kernels;
mod formulas;

use std::collections::BTreeSet;

use crate::autograd::{self, Formula};
use crate::device::Device;
use crate::dispatch::{self, kernel, BoxedValue, DispatchKey, OpSchemaLite, Registry};
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::{normalize_dim, numel_of, Tensor};

use kernels::{BinaryOp, UnaryOp};

pub use kernels::AdamParams;

type Base = fn(&[BoxedValue]) -> Result<Vec<BoxedValue>>;

pub(crate) struct Args<'a> {
    op: &'static str,
    args: &'a [BoxedValue],
}

impl<'a> Args<'a> {
    pub(crate) fn new(op: &'static str, args: &'a [BoxedValue]) -> Self {
        Args { op, args }
    }

    fn bad(&self, index: usize, msg: &str) -> Error {
        Error::BadArgument { op: self.op.to_string(), index, msg: msg.to_string() }
    }

    pub(crate) fn tensor(&self, i: usize) -> Result<&'a Tensor> {
        self.args.get(i).and_then(|a| a.as_tensor()).ok_or_else(|| self.bad(i, "expected a tensor"))
    }

    pub(crate) fn int(&self, i: usize) -> Result<i64> {
        self.args.get(i).and_then(|a| a.as_i64()).ok_or_else(|| self.bad(i, "expected an integer"))
    }

    pub(crate) fn float(&self, i: usize) -> Result<f64> {
        self.args.get(i).and_then(|a| a.as_f64()).ok_or_else(|| self.bad(i, "expected a number"))
    }

    pub(crate) fn boolean(&self, i: usize) -> Result<bool> {
        match self.args.get(i) {
            Some(BoxedValue::Bool(b)) => Ok(*b),
            _ => Err(self.bad(i, "expected a boolean")),
        }
    }

    pub(crate) fn ints(&self, i: usize) -> Result<&'a [i64]> {
        match self.args.get(i) {
            Some(BoxedValue::IntList(v)) => Ok(v),
            _ => Err(self.bad(i, "expected an integer list")),
        }
    }
}

fn one(t: Tensor) -> Result<Vec<BoxedValue>> {
    Ok(vec![BoxedValue::Tensor(t)])
}

fn first(out: Vec<BoxedValue>) -> Result<Tensor> {
    out.into_iter().next().and_then(|v| v.into_tensor()).ok_or_else(|| Error::Other("operator returned no tensor".into()))
}

/// Call a registered operator and return its first output.
pub fn call(name: &str, args: Vec<BoxedValue>) -> Result<Tensor> {
    first(dispatch::registry().call_boxed(name, &args)?)
}

fn call_all(name: &str, args: Vec<BoxedValue>) -> Result<Vec<Tensor>> {
    Ok(dispatch::registry().call_boxed(name, &args)?.into_iter().filter_map(|v| v.into_tensor()).collect())
}

pub(crate) fn reduce_dims(a: &Tensor, dims: &[i64]) -> Result<BTreeSet<usize>> {
    dims.iter().map(|&d| normalize_dim(d, a.dim())).collect()
}

fn check_inplace(op: &str, dst: &Tensor) -> Result<()> {
    if autograd::is_grad_enabled() && dst.requires_grad() {
        return Err(Error::Other(format!("{op}: in-place update of a tensor that requires grad while grad mode is enabled")));
    }
    Ok(())
}

pub(crate) fn resolve_shape(numel: usize, shape: &[i64]) -> Result<Vec<usize>> {
    let infer: Vec<usize> = shape.iter().enumerate().filter(|(_, &s)| s == -1).map(|(i, _)| i).collect();
    if infer.len() > 1 || shape.iter().any(|&s| s < -1) {
        return Err(Error::ShapeMismatch(format!("invalid shape {shape:?}")));
    }
    let known: usize = shape.iter().filter(|&&s| s >= 0).map(|&s| s as usize).product();
    let mut out: Vec<usize> = shape.iter().map(|&s| s.max(0) as usize).collect();
    if let Some(&i) = infer.first() {
        if known == 0 || numel % known != 0 {
            return Err(Error::ShapeMismatch(format!("cannot infer -1 in {shape:?} for {numel} elements")));
        }
        out[i] = numel / known;
    }
    if numel_of(&out) != numel {
        return Err(Error::ShapeMismatch(format!("shape {shape:?} is invalid for {numel} elements")));
    }
    Ok(out)
}

// ------------------------------------------------------------ base kernels

fn k_binary(op: BinaryOp, name: &'static str, args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new(name, args);
    one(kernels::binary(op, a.tensor(0)?, a.tensor(1)?)?)
}

fn k_unary(op: UnaryOp, name: &'static str, args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    one(kernels::unary(op, Args::new(name, args).tensor(0)?)?)
}

fn k_add(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_binary(BinaryOp::Add, "vt::add", args)
}
fn k_sub(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_binary(BinaryOp::Sub, "vt::sub", args)
}
fn k_mul(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_binary(BinaryOp::Mul, "vt::mul", args)
}
fn k_div(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_binary(BinaryOp::Div, "vt::div", args)
}
fn k_neg(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_unary(UnaryOp::Neg, "vt::neg", args)
}
fn k_exp(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_unary(UnaryOp::Exp, "vt::exp", args)
}
fn k_log(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_unary(UnaryOp::Log, "vt::log", args)
}
fn k_tanh(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_unary(UnaryOp::Tanh, "vt::tanh", args)
}
fn k_relu(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_unary(UnaryOp::Relu, "vt::relu", args)
}
fn k_abs(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    k_unary(UnaryOp::Abs, "vt::abs", args)
}

fn k_mul_scalar(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::mul_scalar", args);
    one(kernels::unary(UnaryOp::MulScalar(a.float(1)?), a.tensor(0)?)?)
}

fn k_add_scalar(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::add_scalar", args);
    one(kernels::unary(UnaryOp::AddScalar(a.float(1)?), a.tensor(0)?)?)
}

fn k_matmul(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::matmul", args);
    one(kernels::matmul(a.tensor(0)?, a.tensor(1)?)?)
}

fn k_softmax(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::softmax", args);
    one(kernels::softmax(a.tensor(0)?, a.int(1)?, false)?)
}

fn k_log_softmax(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::log_softmax", args);
    one(kernels::softmax(a.tensor(0)?, a.int(1)?, true)?)
}

fn k_sum(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::sum", args);
    let t = a.tensor(0)?;
    one(kernels::sum_dims(t, &reduce_dims(t, a.ints(1)?)?, a.boolean(2)?)?)
}

fn k_mean(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::mean", args);
    let t = a.tensor(0)?;
    let dims = reduce_dims(t, a.ints(1)?)?;
    let count: usize = if dims.is_empty() { t.numel() } else { dims.iter().map(|&d| t.sizes()[d]).product() };
    let s = kernels::sum_dims(t, &dims, a.boolean(2)?)?;
    one(kernels::unary(UnaryOp::MulScalar(1.0 / count.max(1) as f64), &s)?)
}

fn k_reshape(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::reshape", args);
    let t = a.tensor(0)?;
    let shape = resolve_shape(t.numel(), a.ints(1)?)?;
    let c = if t.is_contiguous() { t.alias() } else { t.contiguous()? };
    one(c.view(&shape)?)
}

fn k_transpose(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::transpose", args);
    one(a.tensor(0)?.transpose_view(a.int(1)?, a.int(2)?)?)
}

fn k_flip(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::flip", args);
    one(kernels::flip(a.tensor(0)?, a.int(1)?)?)
}

fn k_index_select(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::index_select", args);
    one(kernels::index_select(a.tensor(0)?, a.int(1)?, a.tensor(2)?)?)
}

fn k_embedding(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::embedding", args);
    let (table, idx) = (a.tensor(0)?, a.tensor(1)?);
    if table.dim() != 2 {
        return Err(Error::ShapeMismatch(format!("embedding table must be 2-D, got {:?}", table.sizes())));
    }
    let flat = if idx.is_contiguous() { idx.alias() } else { idx.contiguous()? }.view(&[idx.numel()])?;
    let rows = kernels::index_select(table, 0, &flat)?;
    let mut shape = idx.sizes().to_vec();
    shape.push(table.sizes()[1]);
    one(rows.view(&shape)?)
}

fn k_layer_norm(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::layer_norm", args);
    let x = a.tensor(0)?;
    let ns = a.ints(1)?;
    let k = ns.len();
    if k == 0 || k > x.dim() || x.sizes()[x.dim() - k..].iter().zip(ns).any(|(&s, &n)| s as i64 != n) {
        return Err(Error::ShapeMismatch(format!("normalized_shape {ns:?} does not match the trailing dims of {:?}", x.sizes())));
    }
    let (y, mean, rstd) = kernels::layer_norm(x, k, a.float(2)?)?;
    Ok(vec![y.into(), mean.into(), rstd.into()])
}

fn k_cross_entropy(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::cross_entropy", args);
    let (loss, probs) = kernels::cross_entropy(a.tensor(0)?, a.tensor(1)?)?;
    Ok(vec![loss.into(), probs.into()])
}

fn k_attention(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::attention", args);
    let (out, lse) = kernels::attention(a.tensor(0)?, a.tensor(1)?, a.tensor(2)?, a.boolean(3)?)?;
    Ok(vec![out.into(), lse.into()])
}

fn k_argmax(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    one(kernels::argmax_last(Args::new("vt::argmax", args).tensor(0)?)?)
}

fn k_copy_(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::copy_", args);
    let (dst, src) = (a.tensor(0)?, a.tensor(1)?);
    check_inplace("vt::copy_", dst)?;
    kernels::copy_into(dst, src)?;
    dst.bump_version();
    one(dst.clone())
}

fn k_add_(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::add_", args);
    let (dst, src) = (a.tensor(0)?, a.tensor(1)?);
    check_inplace("vt::add_", dst)?;
    let alpha = if args.len() > 2 { a.float(2)? } else { 1.0 };
    kernels::axpy_(dst, src, alpha)?;
    dst.bump_version();
    one(dst.clone())
}

fn k_fill_(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::fill_", args);
    let dst = a.tensor(0)?;
    check_inplace("vt::fill_", dst)?;
    kernels::fill(dst, a.float(1)?)?;
    dst.bump_version();
    one(dst.clone())
}

fn k_adam_step(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::adam_step", args);
    let (p, g, m, v) = (a.tensor(0)?, a.tensor(1)?, a.tensor(2)?, a.tensor(3)?);
    check_inplace("vt::adam_step", p)?;
    let step = a.int(4)?;
    if step < 1 {
        return Err(Error::BadArgument { op: "vt::adam_step".into(), index: 4, msg: "step is 1-based".into() });
    }
    let hp = AdamParams { step: step as u64, lr: a.float(5)?, beta1: a.float(6)?, beta2: a.float(7)?, eps: a.float(8)? };
    kernels::adam_step(p, g, m, v, hp)?;
    for t in [p, m, v] {
        t.bump_version();
    }
    one(p.clone())
}

fn k_sgd_step(args: &[BoxedValue]) -> Result<Vec<BoxedValue>> {
    let a = Args::new("vt::sgd_step", args);
    let (p, g) = (a.tensor(0)?, a.tensor(1)?);
    check_inplace("vt::sgd_step", p)?;
    kernels::sgd_step(p, g, a.float(2)?)?;
    p.bump_version();
    one(p.clone())
}

struct OpDef {
    name: &'static str,
    inputs: usize,
    outputs: usize,
    alias: &'static [(usize, usize)],
    base: Base,
    formula: Option<Formula>,
}

const fn op(name: &'static str, inputs: usize, outputs: usize, base: Base, formula: Option<Formula>) -> OpDef {
    OpDef { name, inputs, outputs, alias: &[], base, formula }
}

const fn inplace(name: &'static str, inputs: usize, base: Base) -> OpDef {
    OpDef { name, inputs, outputs: 1, alias: &[(0, 0)], base, formula: None }
}

use formulas as f;

const LIBRARY: &[OpDef] = &[
    op("vt::add", 2, 1, k_add, Some(f::add)),
    op("vt::sub", 2, 1, k_sub, Some(f::sub)),
    op("vt::mul", 2, 1, k_mul, Some(f::mul)),
    op("vt::div", 2, 1, k_div, Some(f::div)),
    op("vt::neg", 1, 1, k_neg, Some(f::neg)),
    op("vt::exp", 1, 1, k_exp, Some(f::exp)),
    op("vt::log", 1, 1, k_log, Some(f::log)),
    op("vt::tanh", 1, 1, k_tanh, Some(f::tanh)),
    op("vt::relu", 1, 1, k_relu, Some(f::relu)),
    op("vt::abs", 1, 1, k_abs, Some(f::abs)),
    op("vt::mul_scalar", 1, 1, k_mul_scalar, Some(f::mul_scalar)),
    op("vt::add_scalar", 1, 1, k_add_scalar, Some(f::add_scalar)),
    op("vt::matmul", 2, 1, k_matmul, Some(f::matmul)),
    op("vt::softmax", 1, 1, k_softmax, Some(f::softmax)),
    op("vt::log_softmax", 1, 1, k_log_softmax, Some(f::log_softmax)),
    op("vt::sum", 1, 1, k_sum, Some(f::sum)),
    op("vt::mean", 1, 1, k_mean, Some(f::mean)),
    op("vt::reshape", 1, 1, k_reshape, Some(f::reshape)),
    op("vt::transpose", 1, 1, k_transpose, Some(f::transpose)),
    op("vt::flip", 1, 1, k_flip, Some(f::flip)),
    op("vt::index_select", 2, 1, k_index_select, Some(f::index_select)),
    op("vt::embedding", 2, 1, k_embedding, Some(f::embedding)),
    op("vt::layer_norm", 1, 3, k_layer_norm, Some(f::layer_norm)),
    op("vt::cross_entropy", 2, 2, k_cross_entropy, Some(f::cross_entropy)),
    op("vt::attention", 3, 2, k_attention, Some(f::attention)),
    op("vt::argmax", 1, 1, k_argmax, None),
    inplace("vt::copy_", 2, k_copy_),
    inplace("vt::add_", 2, k_add_),
    inplace("vt::fill_", 1, k_fill_),
    OpDef { name: "vt::adam_step", inputs: 4, outputs: 1, alias: &[(0, 0)], base: k_adam_step, formula: None },
    inplace("vt::sgd_step", 2, k_sgd_step),
];

/// Names of every operator with a registered backward formula.
pub fn differentiable_ops() -> Vec<&'static str> {
    LIBRARY.iter().filter(|d| d.formula.is_some()).map(|d| d.name).collect()
}

/// Register the built-in operator library into `r`.
pub fn register_library(r: &Registry) -> Result<()> {
    for d in LIBRARY {
        let mut schema = OpSchemaLite::new(d.name, d.inputs, d.outputs);
        for &(o, i) in d.alias {
            schema = schema.with_alias(o, i);
        }
        let h = r.register_op(schema)?;
        let base = d.base;
        let k = kernel(move |args| base(args));
        r.register_kernel(&h, DispatchKey::HostKernel, k.clone())?;
        r.register_kernel(&h, DispatchKey::VirtKernel, k)?;
        if let Some(f) = d.formula {
            r.set_autograd(&h, autograd::wrapper(d.name, f))?;
        }
    }
    Ok(())
}

// ------------------------------------------------------------- public API

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    call("vt::add", vec![a.into(), b.into()])
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    call("vt::sub", vec![a.into(), b.into()])
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    call("vt::mul", vec![a.into(), b.into()])
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    call("vt::div", vec![a.into(), b.into()])
}

pub fn neg(a: &Tensor) -> Result<Tensor> {
    call("vt::neg", vec![a.into()])
}

pub fn exp(a: &Tensor) -> Result<Tensor> {
    call("vt::exp", vec![a.into()])
}

pub fn log(a: &Tensor) -> Result<Tensor> {
    call("vt::log", vec![a.into()])
}

pub fn tanh(a: &Tensor) -> Result<Tensor> {
    call("vt::tanh", vec![a.into()])
}

pub fn relu(a: &Tensor) -> Result<Tensor> {
    call("vt::relu", vec![a.into()])
}

pub fn abs(a: &Tensor) -> Result<Tensor> {
    call("vt::abs", vec![a.into()])
}

pub fn mul_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    call("vt::mul_scalar", vec![a.into(), c.into()])
}

pub fn add_scalar(a: &Tensor, c: f64) -> Result<Tensor> {
    call("vt::add_scalar", vec![a.into(), c.into()])
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    call("vt::matmul", vec![a.into(), b.into()])
}

pub fn softmax(a: &Tensor, dim: i64) -> Result<Tensor> {
    call("vt::softmax", vec![a.into(), dim.into()])
}

pub fn log_softmax(a: &Tensor, dim: i64) -> Result<Tensor> {
    call("vt::log_softmax", vec![a.into(), dim.into()])
}

/// Sum over `dims`; an empty list reduces every dimension.
pub fn sum(a: &Tensor, dims: &[i64], keepdim: bool) -> Result<Tensor> {
    call("vt::sum", vec![a.into(), dims.to_vec().into(), keepdim.into()])
}

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    sum(a, &[], false)
}

pub fn mean(a: &Tensor, dims: &[i64], keepdim: bool) -> Result<Tensor> {
    call("vt::mean", vec![a.into(), dims.to_vec().into(), keepdim.into()])
}

/// Reshape; one entry may be -1. Views when `a` is contiguous.
pub fn reshape(a: &Tensor, shape: &[i64]) -> Result<Tensor> {
    call("vt::reshape", vec![a.into(), shape.to_vec().into()])
}

pub fn transpose(a: &Tensor, d0: i64, d1: i64) -> Result<Tensor> {
    call("vt::transpose", vec![a.into(), d0.into(), d1.into()])
}

pub fn flip(a: &Tensor, dim: i64) -> Result<Tensor> {
    call("vt::flip", vec![a.into(), dim.into()])
}

pub fn index_select(a: &Tensor, dim: i64, idx: &Tensor) -> Result<Tensor> {
    call("vt::index_select", vec![a.into(), dim.into(), idx.into()])
}

pub fn embedding(table: &Tensor, idx: &Tensor) -> Result<Tensor> {
    call("vt::embedding", vec![table.into(), idx.into()])
}

/// Pre-affine layer norm over the trailing `normalized_shape` dims.
pub fn layer_norm(x: &Tensor, normalized_shape: &[usize], eps: f64) -> Result<Tensor> {
    let ns: Vec<i64> = normalized_shape.iter().map(|&s| s as i64).collect();
    call("vt::layer_norm", vec![x.into(), ns.into(), eps.into()])
}

/// Mean cross entropy of `(N, C)` logits against `(N,)` I64 targets.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    call("vt::cross_entropy", vec![logits.into(), targets.into()])
}

/// Fused stabilized attention over `(B, H, T, D)` operands.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    call("vt::attention", vec![q.into(), k.into(), v.into(), causal.into()])
}

/// Additive causal mask `(t, t)`: 0 on and below the diagonal, -inf above.
pub fn causal_mask(t: usize, dtype: DType, device: Device) -> Result<Tensor> {
    let mut m = vec![0.0f64; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = f64::NEG_INFINITY;
        }
    }
    let host = Tensor::from_vec(m, &[t, t], Device::Host)?;
    let host = if dtype == DType::F64 { host } else { kernels::cast(&host, dtype)? };
    if device.is_host() {
        Ok(host)
    } else {
        host.to_device(device)
    }
}

/// Attention composed from primitive ops: `softmax(q·kᵀ/√d + mask)·v`.
pub fn attention_reference(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let d = *q.sizes().last().ok_or_else(|| Error::ShapeMismatch("attention on a 0-d tensor".into()))?;
    let kt = transpose(k, -2, -1)?;
    let mut s = mul_scalar(&matmul(q, &kt)?, 1.0 / (d as f64).sqrt())?;
    if causal {
        let t = q.sizes()[q.dim() - 2];
        s = add(&s, &causal_mask(t, q.dtype(), q.device())?)?;
    }
    matmul(&softmax(&s, -1)?, v)
}

pub fn argmax(a: &Tensor) -> Result<Tensor> {
    call("vt::argmax", vec![a.into()])
}

pub fn copy_(dst: &Tensor, src: &Tensor) -> Result<Tensor> {
    call("vt::copy_", vec![dst.into(), src.into()])
}

pub fn add_(dst: &Tensor, src: &Tensor, alpha: f64) -> Result<Tensor> {
    call("vt::add_", vec![dst.into(), src.into(), alpha.into()])
}

pub fn fill_(dst: &Tensor, value: f64) -> Result<Tensor> {
    call("vt::fill_", vec![dst.into(), value.into()])
}

pub fn adam_step(param: &Tensor, grad: &Tensor, m: &Tensor, v: &Tensor, hp: AdamParams) -> Result<Tensor> {
    call(
        "vt::adam_step",
        vec![
            param.into(),
            grad.into(),
            m.into(),
            v.into(),
            (hp.step as i64).into(),
            hp.lr.into(),
            hp.beta1.into(),
            hp.beta2.into(),
            hp.eps.into(),
        ],
    )
}

pub fn sgd_step(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    call("vt::sgd_step", vec![param.into(), grad.into(), lr.into()])
}

/// All outputs of a multi-output operator (e.g. `vt::layer_norm` also
/// returns mean and rstd).
pub fn call_multi(name: &str, args: Vec<BoxedValue>) -> Result<Vec<Tensor>> {
    call_all(name, args)
}
