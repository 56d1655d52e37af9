//! Raw kernels: no autograd, no dispatcher. Each kernel runs immediately on
//! the host, or is queued on the current stream of its virtual device with
//! a body that captures plain addresses.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::device::Device;
use crate::dtype::{DType, Element, Float, Num};
use crate::error::{Error, Result};
use crate::iter::{build_iter, IterPlan, OperandSpec};
use crate::tensor::{contiguous_strides, make_like_device, make_tensor, normalize_dim, numel_of, Tensor};
use crate::vdev::{Command, CopyKind, MemRange, Runtime};

macro_rules! with_num {
    ($dt:expr, $what:expr, |$T:ident| $body:expr) => {
        match $dt {
            DType::F32 => {
                type $T = f32;
                $body
            }
            DType::F64 => {
                type $T = f64;
                $body
            }
            DType::I64 => {
                type $T = i64;
                $body
            }
            DType::I32 => {
                type $T = i32;
                $body
            }
            d => Err(Error::UnsupportedDType(d, $what)),
        }
    };
}

macro_rules! with_float {
    ($dt:expr, $what:expr, |$T:ident| $body:expr) => {
        match $dt {
            DType::F32 => {
                type $T = f32;
                $body
            }
            DType::F64 => {
                type $T = f64;
                $body
            }
            d => Err(Error::UnsupportedDType(d, $what)),
        }
    };
}


fn runtime_of(t: &Tensor) -> Result<Arc<Runtime>> {
    t.storage().runtime().cloned().ok_or_else(|| Error::InvalidDevice(format!("{} tensor without a runtime", t.device())))
}

/// Run `body` now (host) or queue it on the current stream of the device
/// that owns the first written tensor.
pub fn launch(name: &str, reads: &[&Tensor], writes: &[&Tensor], body: impl Fn() + Send + Sync + 'static) -> Result<()> {
    let Some(first) = writes.first().or(reads.first()) else {
        body();
        return Ok(());
    };
    match first.device() {
        Device::Host => {
            body();
            Ok(())
        }
        Device::Virt(d) => {
            let rt = runtime_of(first)?;
            let stream = rt.current_stream(d);
            for t in reads.iter().chain(writes) {
                if t.device() != first.device() {
                    return Err(Error::DeviceMismatch(first.device(), t.device()));
                }
                t.storage().record_stream(stream);
            }
            let r = reads.iter().map(|t| t.mem_range()).collect();
            let w = writes.iter().map(|t| t.mem_range()).collect();
            rt.launch(d, stream, Command::kernel(name, r, w, body))?;
            Ok(())
        }
    }
}

fn plan(ops: &[OperandSpec]) -> Result<IterPlan> {
    build_iter(ops, &BTreeSet::new())
}

// ---------------------------------------------------------------- fill/copy

pub fn fill(t: &Tensor, value: f64) -> Result<()> {
    if t.numel() == 0 {
        return Ok(());
    }
    let p = plan(&[OperandSpec::output(t)])?;
    match t.dtype() {
        DType::Bool => {
            let v = value != 0.0;
            launch("fill", &[], &[t], move || fill_plan(&p, v))
        }
        dt => with_num!(dt, "fill", |T| {
            let v = T::from_f64(value);
            launch("fill", &[], &[t], move || fill_plan(&p, v))
        }),
    }
}

fn fill_plan<T: Element>(p: &IterPlan, v: T) {
    p.for_each_strip(|b, s, n| {
        let o = b[0] as *mut T;
        for i in 0..n {
            // SAFETY: plan addresses are in bounds of the output view.
            unsafe { *o.add(i * s[0]) = v };
        }
    });
}

fn copy_plan(p: &IterPlan, es: usize) {
    p.for_each_strip(|b, s, n| {
        let (o, x) = (b[0] as *mut u8, b[1] as *const u8);
        if s[0] == 1 && s[1] == 1 {
            // SAFETY: contiguous runs of n elements in both operands.
            unsafe { std::ptr::copy(x, o, n * es) };
        } else {
            for i in 0..n {
                unsafe { std::ptr::copy_nonoverlapping(x.add(i * s[1] * es), o.add(i * s[0] * es), es) };
            }
        }
    });
}

fn strided_copy_same_device(dst: &Tensor, src: &Tensor) -> Result<()> {
    let p = plan(&[OperandSpec::output(dst), OperandSpec::input(src)])?;
    let es = dst.dtype().size_bytes();
    launch("copy", &[src], &[dst], move || copy_plan(&p, es))
}

/// Copy `src` into `dst`, broadcasting `src` to `dst`'s shape. Host/device
/// transfers are synchronous with the host.
pub fn copy_into(dst: &Tensor, src: &Tensor) -> Result<()> {
    if dst.dtype() != src.dtype() {
        return Err(Error::DTypeMismatch { expected: dst.dtype(), got: src.dtype() });
    }
    let src = if src.sizes() == dst.sizes() { src.clone() } else { src.expand_view(dst.sizes())? };
    if dst.numel() == 0 {
        return Ok(());
    }
    match (src.device(), dst.device()) {
        (Device::Host, Device::Host) => strided_copy_same_device(dst, &src),
        (Device::Virt(a), Device::Virt(b)) if a == b => {
            if dst.is_contiguous() && src.is_contiguous() {
                let rt = runtime_of(dst)?;
                let stream = rt.current_stream(a);
                src.storage().record_stream(stream);
                dst.storage().record_stream(stream);
                rt.launch(a, stream, Command::Copy { src: src.mem_range(), dst: dst.mem_range(), kind: CopyKind::D2D })?;
                Ok(())
            } else {
                strided_copy_same_device(dst, &src)
            }
        }
        (Device::Host, Device::Virt(d)) => {
            let host = if src.is_contiguous() { src.clone() } else { src.contiguous()? };
            let rt = runtime_of(dst)?;
            let stream = rt.current_stream(d);
            let target = if dst.is_contiguous() { dst.clone() } else { make_like_device(dst.sizes(), dst.dtype(), dst)? };
            target.storage().record_stream(stream);
            let hr = MemRange::new(None, host.data_ptr(), host.numel() * host.dtype().size_bytes());
            rt.launch(d, stream, Command::Copy { src: hr, dst: target.mem_range(), kind: CopyKind::H2D })?;
            rt.synchronize_stream(d, stream)?;
            if !target.ptr_eq(dst) {
                strided_copy_same_device(dst, &target)?;
            }
            Ok(())
        }
        (Device::Virt(d), Device::Host) => {
            let dev = if src.is_contiguous() { src.clone() } else { src.contiguous()? };
            let rt = runtime_of(&dev)?;
            let stream = rt.current_stream(d);
            dev.storage().record_stream(stream);
            let staging = if dst.is_contiguous() { dst.clone() } else { make_tensor(dst.sizes(), dst.dtype(), Device::Host)? };
            let hr = MemRange::new(None, staging.data_ptr(), staging.numel() * staging.dtype().size_bytes());
            rt.launch(d, stream, Command::Copy { src: dev.mem_range(), dst: hr, kind: CopyKind::D2H })?;
            rt.synchronize_stream(d, stream)?;
            if !staging.ptr_eq(dst) {
                strided_copy_same_device(dst, &staging)?;
            }
            Ok(())
        }
        (Device::Virt(_), Device::Virt(_)) => {
            let host = make_tensor(src.sizes(), src.dtype(), Device::Host)?;
            copy_into(&host, &src)?;
            copy_into(dst, &host)
        }
    }
}

/// Elementwise dtype conversion into a fresh contiguous tensor.
pub fn cast(a: &Tensor, dtype: DType) -> Result<Tensor> {
    if a.dtype() == dtype {
        return a.deep_clone();
    }
    let src = a.contiguous()?;
    let out = make_like_device(a.sizes(), dtype, a)?;
    let (sp, op, n, sd) = (src.data_ptr() as usize, out.data_ptr() as usize, a.numel(), a.dtype());
    launch("cast", &[&src], &[&out], move || {
        for i in 0..n {
            // SAFETY: both buffers hold n contiguous elements.
            unsafe {
                let v = read_f64(sp as *const u8, sd, i);
                write_f64(op as *mut u8, dtype, i, v);
            }
        }
    })?;
    Ok(out)
}

unsafe fn read_f64(p: *const u8, dt: DType, i: usize) -> f64 {
    match dt {
        DType::F32 => (*(p as *const f32).add(i)) as f64,
        DType::F64 => *(p as *const f64).add(i),
        DType::I64 => (*(p as *const i64).add(i)) as f64,
        DType::I32 => (*(p as *const i32).add(i)) as f64,
        DType::Bool => (*(p as *const u8).add(i) != 0) as u8 as f64,
    }
}

unsafe fn write_f64(p: *mut u8, dt: DType, i: usize, v: f64) {
    match dt {
        DType::F32 => *(p as *mut f32).add(i) = v as f32,
        DType::F64 => *(p as *mut f64).add(i) = v,
        DType::I64 => *(p as *mut i64).add(i) = v as i64,
        DType::I32 => *(p as *mut i32).add(i) = v as i32,
        DType::Bool => *p.add(i) = (v != 0.0) as u8,
    }
}

/// Reverse the order of elements along `dim` (copying).
pub fn flip(a: &Tensor, dim: i64) -> Result<Tensor> {
    let d = normalize_dim(dim, a.dim())?;
    let out = make_like_device(a.sizes(), a.dtype(), a)?;
    let n = a.sizes()[d];
    for i in 0..n {
        copy_into(&out.narrow_view(d as i64, i, 1)?, &a.narrow_view(d as i64, n - 1 - i, 1)?)?;
    }
    Ok(out)
}

// ------------------------------------------------------------- elementwise

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn run_binary<T: Num>(p: &IterPlan, f: impl Fn(T, T) -> T) {
    p.for_each_strip(|b, s, n| {
        let (o, x, y) = (b[0] as *mut T, b[1] as *const T, b[2] as *const T);
        for i in 0..n {
            // SAFETY: plan addresses are in bounds for every operand.
            unsafe { *o.add(i * s[0]) = f(*x.add(i * s[1]), *y.add(i * s[2])) };
        }
    });
}

fn binary_body<T: Num>(op: BinaryOp, p: IterPlan) -> impl Fn() + Send + Sync + 'static {
    move || match op {
        BinaryOp::Add => run_binary::<T>(&p, |a, b| a + b),
        BinaryOp::Sub => run_binary::<T>(&p, |a, b| a - b),
        BinaryOp::Mul => run_binary::<T>(&p, |a, b| a * b),
        BinaryOp::Div => run_binary::<T>(&p, |a, b| a / b),
    }
}

fn broadcast_out(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = crate::iter::broadcast_shapes([a.sizes(), b.sizes()])
        .ok_or_else(|| Error::ShapeMismatch(format!("cannot broadcast {:?} with {:?}", a.sizes(), b.sizes())))?;
    make_like_device(&shape, a.dtype(), a)
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.device() != b.device() {
        return Err(Error::DeviceMismatch(a.device(), b.device()));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch { expected: a.dtype(), got: b.dtype() });
    }
    let out = broadcast_out(a, b)?;
    binary_into(op, &out, a, b)?;
    Ok(out)
}

/// `out = a op b`; `out` may exactly alias `a` or `b`.
pub fn binary_into(op: BinaryOp, out: &Tensor, a: &Tensor, b: &Tensor) -> Result<()> {
    let p = build_iter(&[OperandSpec::inplace_output(out), OperandSpec::input(a), OperandSpec::input(b)], &BTreeSet::new())?;
    if p.numel() == 0 {
        return Ok(());
    }
    with_num!(out.dtype(), "binary op", |T| launch(op_name(op), &[a, b], &[out], binary_body::<T>(op, p)))
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "vt::add",
        BinaryOp::Sub => "vt::sub",
        BinaryOp::Mul => "vt::mul",
        BinaryOp::Div => "vt::div",
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Sqrt,
    Abs,
    MulScalar(f64),
    AddScalar(f64),
    /// 1 where x > 0, else 0
    Step,
    Square,
    Reciprocal,
}

impl UnaryOp {
    fn float_only(self) -> bool {
        matches!(self, UnaryOp::Exp | UnaryOp::Log | UnaryOp::Tanh | UnaryOp::Sqrt | UnaryOp::Reciprocal)
    }
}

fn run_unary<T: Num>(p: &IterPlan, f: impl Fn(T) -> T) {
    p.for_each_strip(|b, s, n| {
        let (o, x) = (b[0] as *mut T, b[1] as *const T);
        for i in 0..n {
            // SAFETY: plan addresses are in bounds for every operand.
            unsafe { *o.add(i * s[0]) = f(*x.add(i * s[1])) };
        }
    });
}

fn num_unary_body<T: Num>(op: UnaryOp, p: IterPlan) -> impl Fn() + Send + Sync + 'static {
    move || match op {
        UnaryOp::Neg => run_unary::<T>(&p, |x| -x),
        UnaryOp::Relu => run_unary::<T>(&p, |x| if x > T::zero() { x } else { T::zero() }),
        UnaryOp::Abs => run_unary::<T>(&p, |x| if x < T::zero() { -x } else { x }),
        UnaryOp::Step => run_unary::<T>(&p, |x| if x > T::zero() { T::one() } else { T::zero() }),
        UnaryOp::Square => run_unary::<T>(&p, |x| x * x),
        UnaryOp::MulScalar(c) => {
            let c = T::from_f64(c);
            run_unary::<T>(&p, |x| x * c)
        }
        UnaryOp::AddScalar(c) => {
            let c = T::from_f64(c);
            run_unary::<T>(&p, |x| x + c)
        }
        _ => unreachable!("float op routed to integer body"),
    }
}

fn float_unary_body<T: Float>(op: UnaryOp, p: IterPlan) -> impl Fn() + Send + Sync + 'static {
    move || match op {
        UnaryOp::Exp => run_unary::<T>(&p, |x| x.exp()),
        UnaryOp::Log => run_unary::<T>(&p, |x| x.ln()),
        UnaryOp::Tanh => run_unary::<T>(&p, |x| x.tanh()),
        UnaryOp::Sqrt => run_unary::<T>(&p, |x| x.sqrt()),
        UnaryOp::Reciprocal => run_unary::<T>(&p, |x| T::one() / x),
        other => num_unary_body::<T>(other, p.clone())(),
    }
}

pub fn unary(op: UnaryOp, a: &Tensor) -> Result<Tensor> {
    let out = make_like_device(a.sizes(), a.dtype(), a)?;
    unary_into(op, &out, a)?;
    Ok(out)
}

/// `out = op(a)`; `out` may exactly alias `a`.
pub fn unary_into(op: UnaryOp, out: &Tensor, a: &Tensor) -> Result<()> {
    let p = build_iter(&[OperandSpec::inplace_output(out), OperandSpec::input(a)], &BTreeSet::new())?;
    if p.numel() == 0 {
        return Ok(());
    }
    if op.float_only() {
        with_float!(a.dtype(), "floating unary op", |T| launch("unary", &[a], &[out], float_unary_body::<T>(op, p)))
    } else {
        with_num!(a.dtype(), "unary op", |T| launch("unary", &[a], &[out], num_unary_body::<T>(op, p)))
    }
}

/// `dst += alpha * src` in place (src broadcast to dst).
pub fn axpy_(dst: &Tensor, src: &Tensor, alpha: f64) -> Result<()> {
    let p = build_iter(&[OperandSpec::inplace_output(dst), OperandSpec::input(dst), OperandSpec::input(src)], &BTreeSet::new())?;
    if p.numel() == 0 {
        return Ok(());
    }
    with_num!(dst.dtype(), "add_", |T| {
        let a = T::from_f64(alpha);
        let unit = alpha == 1.0;
        launch("vt::add_", &[dst, src], &[dst], move || {
            if unit {
                run_binary::<T>(&p, |x, y| x + y)
            } else {
                run_binary::<T>(&p, |x, y| x + a * y)
            }
        })
    })
}

/// `grad * (1 - y^2)`: tanh backward from the forward output.
pub fn tanh_backward(grad: &Tensor, y: &Tensor) -> Result<Tensor> {
    let out = make_like_device(grad.sizes(), grad.dtype(), grad)?;
    let p = plan(&[OperandSpec::output(&out), OperandSpec::input(grad), OperandSpec::input(y)])?;
    with_float!(grad.dtype(), "tanh backward", |T| launch("tanh_backward", &[grad, y], &[&out], move || run_binary::<T>(
        &p,
        |g, y| g * (T::one() - y * y)
    )))?;
    Ok(out)
}

// -------------------------------------------------------------- reductions

/// Sum over `dims` (empty set reduces everything).
pub fn sum_dims(a: &Tensor, dims: &BTreeSet<usize>, keepdim: bool) -> Result<Tensor> {
    let all: BTreeSet<usize> = if dims.is_empty() { (0..a.dim()).collect() } else { dims.clone() };
    if let Some(&d) = all.iter().find(|&&d| d >= a.dim()) {
        return Err(Error::InvalidDim { dim: d as i64, rank: a.dim() });
    }
    let kept: Vec<usize> = a.sizes().iter().enumerate().map(|(i, &s)| if all.contains(&i) { 1 } else { s }).collect();
    let out = make_like_device(&kept, a.dtype(), a)?;
    if a.numel() > 0 {
        let p = build_iter(&[OperandSpec::output(&out), OperandSpec::input(a)], &all)?;
        with_num!(a.dtype(), "sum", |T| launch("vt::sum", &[a], &[&out], move || {
            p.for_each_strip(|b, s, n| {
                let (o, x) = (b[0] as *mut T, b[1] as *const T);
                // SAFETY: plan addresses are in bounds for every operand.
                unsafe {
                    if s[0] == 0 {
                        let mut acc = *o;
                        for i in 0..n {
                            acc += *x.add(i * s[1]);
                        }
                        *o = acc;
                    } else {
                        for i in 0..n {
                            *o.add(i * s[0]) += *x.add(i * s[1]);
                        }
                    }
                }
            })
        }))?;
    }
    if keepdim {
        return Ok(out);
    }
    let squeezed: Vec<usize> = a.sizes().iter().enumerate().filter(|(i, _)| !all.contains(i)).map(|(_, &s)| s).collect();
    out.view(&squeezed)
}

/// Reduce a broadcast gradient back to `shape`.
pub fn sum_to_shape(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.sizes() == shape {
        return Ok(g.clone());
    }
    let lead = g.dim() - shape.len();
    let mut dims = BTreeSet::new();
    for i in 0..g.dim() {
        if i < lead || (shape[i - lead] == 1 && g.sizes()[i] != 1) {
            dims.insert(i);
        }
    }
    let s = if dims.is_empty() { g.clone() } else { sum_dims(g, &dims, true)? };
    s.contiguous()?.view(shape)
}

/// Index of the largest element along the last dimension.
pub fn argmax_last(a: &Tensor) -> Result<Tensor> {
    let n = *a.sizes().last().ok_or_else(|| Error::ShapeMismatch("argmax of a 0-d tensor".into()))?;
    let c = a.contiguous()?;
    let rows = if n == 0 { 0 } else { a.numel() / n };
    let out = make_like_device(&a.sizes()[..a.dim() - 1], DType::I64, a)?;
    let (cp, op) = (c.data_ptr() as usize, out.data_ptr() as usize);
    with_num!(a.dtype(), "argmax", |T| launch("argmax", &[&c], &[&out], move || {
        for r in 0..rows {
            // SAFETY: c holds rows*n contiguous elements, out holds rows.
            unsafe {
                let row = (cp as *const T).add(r * n);
                let mut best = 0;
                for j in 1..n {
                    if *row.add(j) > *row.add(best) {
                        best = j;
                    }
                }
                *(op as *mut i64).add(r) = best as i64;
            }
        }
    }))?;
    Ok(out)
}

// ----------------------------------------------------------------- softmax

fn outer_inner(sizes: &[usize], d: usize) -> (usize, usize, usize) {
    (numel_of(&sizes[..d]), sizes[d], numel_of(&sizes[d + 1..]))
}

/// Max-subtracted softmax (or log-softmax) along `dim`.
pub fn softmax(a: &Tensor, dim: i64, log: bool) -> Result<Tensor> {
    let d = normalize_dim(dim, a.dim().max(1))?;
    let c = a.contiguous()?;
    let out = make_like_device(a.sizes(), a.dtype(), a)?;
    if a.numel() == 0 {
        return Ok(out);
    }
    let (outer, n, inner) = if a.dim() == 0 { (1, 1, 1) } else { outer_inner(a.sizes(), d) };
    let (cp, op) = (c.data_ptr() as usize, out.data_ptr() as usize);
    with_float!(a.dtype(), "softmax", |T| launch("vt::softmax", &[&c], &[&out], move || {
        let (x, y) = (cp as *const T, op as *mut T);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                // SAFETY: base + j*inner < outer*n*inner for all j < n.
                unsafe {
                    let mut m = T::neg_infinity();
                    for j in 0..n {
                        m = m.max(*x.add(base + j * inner));
                    }
                    let mut z = T::zero();
                    for j in 0..n {
                        z += (*x.add(base + j * inner) - m).exp();
                    }
                    if log {
                        let lz = z.ln();
                        for j in 0..n {
                            *y.add(base + j * inner) = *x.add(base + j * inner) - m - lz;
                        }
                    } else {
                        for j in 0..n {
                            *y.add(base + j * inner) = (*x.add(base + j * inner) - m).exp() / z;
                        }
                    }
                }
            }
        }
    }))?;
    Ok(out)
}

/// Gradient of softmax/log-softmax from the forward output `y`.
pub fn softmax_backward(g: &Tensor, y: &Tensor, dim: i64, log: bool) -> Result<Tensor> {
    let d = normalize_dim(dim, y.dim().max(1))?;
    let (gc, yc) = (g.contiguous()?, y.contiguous()?);
    let out = make_like_device(y.sizes(), y.dtype(), y)?;
    if y.numel() == 0 {
        return Ok(out);
    }
    let (outer, n, inner) = if y.dim() == 0 { (1, 1, 1) } else { outer_inner(y.sizes(), d) };
    let (gp, yp, op) = (gc.data_ptr() as usize, yc.data_ptr() as usize, out.data_ptr() as usize);
    with_float!(y.dtype(), "softmax backward", |T| launch("softmax_backward", &[&gc, &yc], &[&out], move || {
        let (g, y, dx) = (gp as *const T, yp as *const T, op as *mut T);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                // SAFETY: same indexing as the forward kernel.
                unsafe {
                    if log {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += *g.add(base + j * inner);
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            *dx.add(k) = *g.add(k) - (*y.add(k)).exp() * s;
                        }
                    } else {
                        let mut s = T::zero();
                        for j in 0..n {
                            let k = base + j * inner;
                            s += *g.add(k) * *y.add(k);
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            *dx.add(k) = *y.add(k) * (*g.add(k) - s);
                        }
                    }
                }
            }
        }
    }))?;
    Ok(out)
}

// ------------------------------------------------------------------ matmul

trait Gemm: Float {
    /// `c = a·b + beta·c` with arbitrary element strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(m: usize, k: usize, n: usize, a: *const Self, ra: isize, ca: isize, b: *const Self, rb: isize, cb: isize, beta: Self, c: *mut Self, rc: isize, cc: isize);
}

impl Gemm for f64 {
    unsafe fn gemm(m: usize, k: usize, n: usize, a: *const f64, ra: isize, ca: isize, b: *const f64, rb: isize, cb: isize, beta: f64, c: *mut f64, rc: isize, cc: isize) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, ra, ca, b, rb, cb, beta, c, rc, cc);
    }
}

impl Gemm for f32 {
    unsafe fn gemm(m: usize, k: usize, n: usize, a: *const f32, ra: isize, ca: isize, b: *const f32, rb: isize, cb: isize, beta: f32, c: *mut f32, rc: isize, cc: isize) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, ra, ca, b, rb, cb, beta, c, rc, cc);
    }
}

/// Batched matrix product of `(..., m, k)` and `(..., k, n)`; batch
/// dimensions broadcast.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dim() < 2 || b.dim() < 2 {
        return Err(Error::ShapeMismatch(format!("matmul needs operands of rank >= 2, got {:?} and {:?}", a.sizes(), b.sizes())));
    }
    if a.dtype() != b.dtype() {
        return Err(Error::DTypeMismatch { expected: a.dtype(), got: b.dtype() });
    }
    if a.device() != b.device() {
        return Err(Error::DeviceMismatch(a.device(), b.device()));
    }
    let (m, k) = (a.sizes()[a.dim() - 2], a.sizes()[a.dim() - 1]);
    let (k2, n) = (b.sizes()[b.dim() - 2], b.sizes()[b.dim() - 1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!("matmul inner dimensions differ: {:?} @ {:?}", a.sizes(), b.sizes())));
    }
    let (ab, bb) = (&a.sizes()[..a.dim() - 2], &b.sizes()[..b.dim() - 2]);
    let batch = crate::iter::broadcast_shapes([ab, bb])
        .ok_or_else(|| Error::ShapeMismatch(format!("matmul batch dims {ab:?} and {bb:?} do not broadcast")))?;
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    let out = make_like_device(&out_shape, a.dtype(), a)?;
    if out.numel() == 0 {
        return Ok(out);
    }

    let bstr = |t: &Tensor| -> Vec<usize> {
        let tb = &t.sizes()[..t.dim() - 2];
        let lead = batch.len() - tb.len();
        (0..batch.len()).map(|i| if i < lead || tb[i - lead] == 1 { 0 } else { t.strides()[i - lead] }).collect()
    };
    let (sa, sb) = (bstr(a), bstr(b));
    let so = contiguous_strides(&batch);
    let mut offs = Vec::new();
    let mut idx = vec![0usize; batch.len()];
    for _ in 0..numel_of(&batch) {
        let dot = |s: &[usize]| idx.iter().zip(s).map(|(i, s)| i * s).sum::<usize>();
        offs.push((dot(&sa), dot(&sb), dot(&so) * m * n));
        for d in (0..batch.len()).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let (ra, ca) = (a.strides()[a.dim() - 2] as isize, a.strides()[a.dim() - 1] as isize);
    let (rb, cb) = (b.strides()[b.dim() - 2] as isize, b.strides()[b.dim() - 1] as isize);
    let (ap, bp, op) = (a.data_ptr() as usize, b.data_ptr() as usize, out.data_ptr() as usize);
    with_float!(a.dtype(), "matmul", |T| launch("vt::matmul", &[a, b], &[&out], move || {
        for &(oa, ob, oo) in &offs {
            // SAFETY: offsets and strides come from in-bounds views.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    (ap as *const T).add(oa),
                    ra,
                    ca,
                    (bp as *const T).add(ob),
                    rb,
                    cb,
                    T::zero(),
                    (op as *mut T).add(oo),
                    n as isize,
                    1,
                )
            };
        }
    }))?;
    Ok(out)
}

// ---------------------------------------------------------------- indexing

fn index_values(idx: &Tensor, size: usize) -> Result<Vec<usize>> {
    if idx.dtype() != DType::I64 {
        return Err(Error::DTypeMismatch { expected: DType::I64, got: idx.dtype() });
    }
    idx.to_vec::<i64>()?
        .into_iter()
        .map(|i| if i < 0 || i as usize >= size { Err(Error::IndexOutOfRange { index: i, size }) } else { Ok(i as usize) })
        .collect()
}

/// Gather slices of `t` along `dim` at the positions in the 1-D `idx`.
pub fn index_select(t: &Tensor, dim: i64, idx: &Tensor) -> Result<Tensor> {
    if idx.dim() != 1 {
        return Err(Error::ShapeMismatch(format!("index must be 1-D, got {:?}", idx.sizes())));
    }
    let d = normalize_dim(dim, t.dim())?;
    let ids = index_values(idx, t.sizes()[d])?;
    let mut shape = t.sizes().to_vec();
    shape[d] = ids.len();
    let out = make_like_device(&shape, t.dtype(), t)?;
    if out.numel() == 0 {
        return Ok(out);
    }
    let c = t.contiguous()?;
    let (outer, n, inner) = outer_inner(t.sizes(), d);
    let es = t.dtype().size_bytes();
    let (cp, op) = (c.data_ptr() as usize, out.data_ptr() as usize);
    launch("vt::index_select", &[&c], &[&out], move || {
        let chunk = inner * es;
        for o in 0..outer {
            for (j, &src) in ids.iter().enumerate() {
                // SAFETY: src < n and j < ids.len() by validation.
                unsafe {
                    std::ptr::copy_nonoverlapping(
                        (cp as *const u8).add((o * n + src) * chunk),
                        (op as *mut u8).add((o * ids.len() + j) * chunk),
                        chunk,
                    )
                };
            }
        }
    })?;
    Ok(out)
}

/// Zeros of `shape` with `src` scatter-added along `dim` at `idx`
/// (the adjoint of [`index_select`]).
pub fn index_add(shape: &[usize], dim: i64, idx: &Tensor, src: &Tensor) -> Result<Tensor> {
    let d = normalize_dim(dim, shape.len())?;
    let ids = index_values(idx, shape[d])?;
    let out = make_like_device(shape, src.dtype(), src)?;
    if src.numel() == 0 {
        return Ok(out);
    }
    let c = src.contiguous()?;
    let (outer, n, inner) = outer_inner(shape, d);
    let (cp, op) = (c.data_ptr() as usize, out.data_ptr() as usize);
    with_num!(src.dtype(), "index_add", |T| launch("index_add", &[&c], &[&out], move || {
        let (s, o) = (cp as *const T, op as *mut T);
        for a in 0..outer {
            for (j, &dst) in ids.iter().enumerate() {
                for i in 0..inner {
                    // SAFETY: indices validated against shape.
                    unsafe { *o.add((a * n + dst) * inner + i) += *s.add((a * ids.len() + j) * inner + i) };
                }
            }
        }
    }))?;
    Ok(out)
}

// -------------------------------------------------------------- layer norm

/// Normalize over the trailing `norm_dims` dimensions. Returns
/// `(y, mean, rstd)` with one mean/rstd per normalized row.
pub fn layer_norm(x: &Tensor, norm_dims: usize, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    if norm_dims == 0 || norm_dims > x.dim() {
        return Err(Error::ShapeMismatch(format!("cannot normalize the last {norm_dims} dims of {:?}", x.sizes())));
    }
    let rows_shape = &x.sizes()[..x.dim() - norm_dims];
    let m = numel_of(&x.sizes()[x.dim() - norm_dims..]);
    let rows = numel_of(rows_shape);
    let c = x.contiguous()?;
    let y = make_like_device(x.sizes(), x.dtype(), x)?;
    let mean = make_like_device(rows_shape, x.dtype(), x)?;
    let rstd = make_like_device(rows_shape, x.dtype(), x)?;
    if m == 0 {
        return Ok((y, mean, rstd));
    }
    let (xp, yp, mp, rp) = (c.data_ptr() as usize, y.data_ptr() as usize, mean.data_ptr() as usize, rstd.data_ptr() as usize);
    with_float!(x.dtype(), "layer_norm", |T| launch("vt::layer_norm", &[&c], &[&y, &mean, &rstd], move || {
        let inv_m = T::from_f64(1.0 / m as f64);
        let e = T::from_f64(eps);
        for r in 0..rows {
            // SAFETY: row r spans [r*m, (r+1)*m) of contiguous buffers.
            unsafe {
                let xr = (xp as *const T).add(r * m);
                let yr = (yp as *mut T).add(r * m);
                let mut mu = T::zero();
                for i in 0..m {
                    mu += *xr.add(i);
                }
                mu = mu * inv_m;
                let mut var = T::zero();
                for i in 0..m {
                    let dv = *xr.add(i) - mu;
                    var += dv * dv;
                }
                var = var * inv_m;
                let rs = T::one() / (var + e).sqrt();
                for i in 0..m {
                    *yr.add(i) = (*xr.add(i) - mu) * rs;
                }
                *(mp as *mut T).add(r) = mu;
                *(rp as *mut T).add(r) = rs;
            }
        }
    }))?;
    Ok((y, mean, rstd))
}

/// Input gradient of the pre-affine layer norm.
pub fn layer_norm_backward(g: &Tensor, x: &Tensor, mean: &Tensor, rstd: &Tensor, norm_dims: usize) -> Result<Tensor> {
    let m = numel_of(&x.sizes()[x.dim() - norm_dims..]);
    let rows = numel_of(&x.sizes()[..x.dim() - norm_dims]);
    let (gc, xc, mc, rc) = (g.contiguous()?, x.contiguous()?, mean.contiguous()?, rstd.contiguous()?);
    let dx = make_like_device(x.sizes(), x.dtype(), x)?;
    if m == 0 {
        return Ok(dx);
    }
    let (gp, xp, mp, rp, dp) =
        (gc.data_ptr() as usize, xc.data_ptr() as usize, mc.data_ptr() as usize, rc.data_ptr() as usize, dx.data_ptr() as usize);
    with_float!(x.dtype(), "layer_norm backward", |T| launch(
        "layer_norm_backward",
        &[&gc, &xc, &mc, &rc],
        &[&dx],
        move || {
            let inv_m = T::from_f64(1.0 / m as f64);
            for r in 0..rows {
                // SAFETY: row r spans [r*m, (r+1)*m) of contiguous buffers.
                unsafe {
                    let (gr, xr, dr) = ((gp as *const T).add(r * m), (xp as *const T).add(r * m), (dp as *mut T).add(r * m));
                    let mu = *(mp as *const T).add(r);
                    let rs = *(rp as *const T).add(r);
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for i in 0..m {
                        let xh = (*xr.add(i) - mu) * rs;
                        sg += *gr.add(i);
                        sgx += *gr.add(i) * xh;
                    }
                    let (mg, mgx) = (sg * inv_m, sgx * inv_m);
                    for i in 0..m {
                        let xh = (*xr.add(i) - mu) * rs;
                        *dr.add(i) = rs * (*gr.add(i) - mg - xh * mgx);
                    }
                }
            }
        }
    ))?;
    Ok(dx)
}

// ----------------------------------------------------------- cross entropy

/// Mean over rows of `-log softmax(logits)[target]`. Returns the scalar
/// loss and the row-wise softmax for the backward pass.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(Tensor, Tensor)> {
    if logits.dim() != 2 || targets.dim() != 1 || targets.sizes()[0] != logits.sizes()[0] {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy expects logits (N, C) and targets (N), got {:?} and {:?}",
            logits.sizes(),
            targets.sizes()
        )));
    }
    let (rows, c) = (logits.sizes()[0], logits.sizes()[1]);
    let t = index_values(targets, c)?;
    let probs = softmax(logits, 1, false)?;
    let loss = make_like_device(&[], logits.dtype(), logits)?;
    let pp = probs.data_ptr() as usize;
    let lp = loss.data_ptr() as usize;
    with_float!(logits.dtype(), "cross_entropy", |T| launch("vt::cross_entropy", &[&probs], &[&loss], move || {
        let mut acc = T::zero();
        for (r, &tr) in t.iter().enumerate() {
            // SAFETY: tr < c by validation.
            acc += -(unsafe { *(pp as *const T).add(r * c + tr) }).ln();
        }
        let n = T::from_f64(rows.max(1) as f64);
        unsafe { *(lp as *mut T) = acc / n };
    }))?;
    Ok((loss, probs))
}

/// `g * (softmax - onehot(target)) / N`.
pub fn cross_entropy_backward(g: &Tensor, probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (rows, c) = (probs.sizes()[0], probs.sizes()[1]);
    let t = index_values(targets, c)?;
    let gc = g.contiguous()?;
    let dx = make_like_device(probs.sizes(), probs.dtype(), probs)?;
    let (gp, pp, dp) = (gc.data_ptr() as usize, probs.data_ptr() as usize, dx.data_ptr() as usize);
    with_float!(probs.dtype(), "cross_entropy backward", |T| launch(
        "cross_entropy_backward",
        &[&gc, probs],
        &[&dx],
        move || {
            // SAFETY: g is a scalar; probs/dx hold rows*c contiguous elements.
            unsafe {
                let scale = *(gp as *const T) / T::from_f64(rows.max(1) as f64);
                for r in 0..rows {
                    for j in 0..c {
                        let k = r * c + j;
                        let mut v = *(pp as *const T).add(k);
                        if j == t[r] {
                            v = v - T::one();
                        }
                        *(dp as *mut T).add(k) = v * scale;
                    }
                }
            }
        }
    ))?;
    Ok(dx)
}

// -------------------------------------------------------------- optimizers

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 1-based step number used for bias correction.
    pub step: u64,
}

pub fn adam_step(param: &Tensor, grad: &Tensor, m: &Tensor, v: &Tensor, hp: AdamParams) -> Result<()> {
    let p = build_iter(
        &[
            OperandSpec::inplace_output(param),
            OperandSpec::inplace_output(m),
            OperandSpec::inplace_output(v),
            OperandSpec::input(grad),
        ],
        &BTreeSet::new(),
    )?;
    if p.numel() == 0 {
        return Ok(());
    }
    with_float!(param.dtype(), "adam_step", |T| {
        let bc1 = 1.0 - hp.beta1.powi(hp.step as i32);
        let bc2 = 1.0 - hp.beta2.powi(hp.step as i32);
        let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
        let (lr, eps) = (T::from_f64(hp.lr), T::from_f64(hp.eps));
        let (ibc1, ibc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        launch("vt::adam_step", &[grad, param, m, v], &[param, m, v], move || {
            p.for_each_strip(|b, s, n| {
                let (pp, mp, vp, gp) = (b[0] as *mut T, b[1] as *mut T, b[2] as *mut T, b[3] as *const T);
                for i in 0..n {
                    // SAFETY: plan addresses are in bounds for every operand.
                    unsafe {
                        let g = *gp.add(i * s[3]);
                        let mi = b1 * *mp.add(i * s[1]) + (T::one() - b1) * g;
                        let vi = b2 * *vp.add(i * s[2]) + (T::one() - b2) * g * g;
                        *mp.add(i * s[1]) = mi;
                        *vp.add(i * s[2]) = vi;
                        let upd = lr * (mi * ibc1) / ((vi * ibc2).sqrt() + eps);
                        *pp.add(i * s[0]) = *pp.add(i * s[0]) - upd;
                    }
                }
            })
        })
    })
}

pub fn sgd_step(param: &Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    axpy_(param, grad, -lr)
}

// --------------------------------------------------------------- attention

/// Fused attention over `(B, H, T, D)` operands with a running-max softmax.
/// Returns the output and the per-row log-sum-exp used by the backward.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<(Tensor, Tensor)> {
    let (b, h, tq, d, tk, dv) = attention_dims(q, k, v, causal)?;
    let (qc, kc, vc) = (q.contiguous()?, k.contiguous()?, v.contiguous()?);
    let out = make_like_device(&[b, h, tq, dv], q.dtype(), q)?;
    let lse = make_like_device(&[b, h, tq], q.dtype(), q)?;
    if out.numel() == 0 {
        return Ok((out, lse));
    }
    let (qp, kp, vp, op, lp) =
        (qc.data_ptr() as usize, kc.data_ptr() as usize, vc.data_ptr() as usize, out.data_ptr() as usize, lse.data_ptr() as usize);
    with_float!(q.dtype(), "attention", |T| launch("vt::attention", &[&qc, &kc, &vc], &[&out, &lse], move || {
        let scale = T::from_f64(1.0 / (d as f64).sqrt());
        let mut acc = vec![T::zero(); dv];
        for bh in 0..b * h {
            // SAFETY: every index stays inside the (B,H,T,D) contiguous buffers.
            unsafe {
                let qb = (qp as *const T).add(bh * tq * d);
                let kb = (kp as *const T).add(bh * tk * d);
                let vb = (vp as *const T).add(bh * tk * dv);
                let ob = (op as *mut T).add(bh * tq * dv);
                for i in 0..tq {
                    let mut m = T::neg_infinity();
                    let mut l = T::zero();
                    acc.iter_mut().for_each(|a| *a = T::zero());
                    let jmax = if causal { i + 1 } else { tk };
                    for j in 0..jmax {
                        let mut s = T::zero();
                        for x in 0..d {
                            s += *qb.add(i * d + x) * *kb.add(j * d + x);
                        }
                        s = s * scale;
                        let m_new = m.max(s);
                        let c = (m - m_new).exp();
                        let p = (s - m_new).exp();
                        for x in 0..dv {
                            acc[x] = acc[x] * c + p * *vb.add(j * dv + x);
                        }
                        l = l * c + p;
                        m = m_new;
                    }
                    for x in 0..dv {
                        *ob.add(i * dv + x) = acc[x] / l;
                    }
                    *(lp as *mut T).add(bh * tq + i) = m + l.ln();
                }
            }
        }
    }))?;
    Ok((out, lse))
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if q.dim() != 4 || k.dim() != 4 || v.dim() != 4 {
        return Err(Error::ShapeMismatch("attention expects (B, H, T, D) operands".into()));
    }
    let (qs, ks, vs) = (q.sizes(), k.sizes(), v.sizes());
    if qs[..2] != ks[..2] || ks[..3] != vs[..3] || qs[3] != ks[3] {
        return Err(Error::ShapeMismatch(format!("attention shapes q {qs:?}, k {ks:?}, v {vs:?} are inconsistent")));
    }
    if causal && qs[2] != ks[2] {
        return Err(Error::ShapeMismatch("causal attention needs equal query and key lengths".into()));
    }
    for t in [k, v] {
        if t.dtype() != q.dtype() {
            return Err(Error::DTypeMismatch { expected: q.dtype(), got: t.dtype() });
        }
        if t.device() != q.device() {
            return Err(Error::DeviceMismatch(q.device(), t.device()));
        }
    }
    Ok((qs[0], qs[1], qs[2], qs[3], ks[2], vs[3]))
}

/// Gradients `(dq, dk, dv)` of fused attention, recomputing the
/// probabilities from the saved log-sum-exp.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    out: &Tensor,
    lse: &Tensor,
    causal: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, h, tq, d, tk, dv) = attention_dims(q, k, v, causal)?;
    let (gc, qc, kc, vc, oc, lc) = (dout.contiguous()?, q.contiguous()?, k.contiguous()?, v.contiguous()?, out.contiguous()?, lse.contiguous()?);
    let dq = make_like_device(q.sizes(), q.dtype(), q)?;
    let dk = make_like_device(k.sizes(), k.dtype(), k)?;
    let dvt = make_like_device(v.sizes(), v.dtype(), v)?;
    if out.numel() == 0 {
        return Ok((dq, dk, dvt));
    }
    let ptrs = [gc.data_ptr(), qc.data_ptr(), kc.data_ptr(), vc.data_ptr(), oc.data_ptr(), lc.data_ptr(), dq.data_ptr(), dk.data_ptr(), dvt.data_ptr()]
        .map(|p| p as usize);
    with_float!(q.dtype(), "attention backward", |T| launch(
        "attention_backward",
        &[&gc, &qc, &kc, &vc, &oc, &lc],
        &[&dq, &dk, &dvt],
        move || {
            let scale = T::from_f64(1.0 / (d as f64).sqrt());
            let [gp, qp, kp, vp, op, lp, dqp, dkp, dvp] = ptrs;
            for bh in 0..b * h {
                // SAFETY: every index stays inside the contiguous buffers.
                unsafe {
                    let g = (gp as *const T).add(bh * tq * dv);
                    let qb = (qp as *const T).add(bh * tq * d);
                    let kb = (kp as *const T).add(bh * tk * d);
                    let vb = (vp as *const T).add(bh * tk * dv);
                    let ob = (op as *const T).add(bh * tq * dv);
                    let lb = (lp as *const T).add(bh * tq);
                    let dqb = (dqp as *mut T).add(bh * tq * d);
                    let dkb = (dkp as *mut T).add(bh * tk * d);
                    let dvb = (dvp as *mut T).add(bh * tk * dv);
                    for i in 0..tq {
                        let mut delta = T::zero();
                        for x in 0..dv {
                            delta += *g.add(i * dv + x) * *ob.add(i * dv + x);
                        }
                        let jmax = if causal { i + 1 } else { tk };
                        for j in 0..jmax {
                            let mut s = T::zero();
                            for x in 0..d {
                                s += *qb.add(i * d + x) * *kb.add(j * d + x);
                            }
                            let p = (s * scale - *lb.add(i)).exp();
                            let mut dp = T::zero();
                            for x in 0..dv {
                                dp += *g.add(i * dv + x) * *vb.add(j * dv + x);
                                *dvb.add(j * dv + x) += p * *g.add(i * dv + x);
                            }
                            let ds = p * (dp - delta) * scale;
                            for x in 0..d {
                                *dqb.add(i * d + x) += ds * *kb.add(j * d + x);
                                *dkb.add(j * d + x) += ds * *qb.add(i * d + x);
                            }
                        }
                    }
                }
            }
        }
    ))?;
    Ok((dq, dk, dvt))
}
