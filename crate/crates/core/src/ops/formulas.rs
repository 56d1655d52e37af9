//! Backward formulas for the differentiable operators. Gradients are
//! computed with the raw kernels so overrides never see backward traffic.

use std::collections::BTreeSet;

use super::kernels::{self, BinaryOp, UnaryOp};
use super::{reduce_dims, Args};
use crate::autograd::BackwardFn;
use crate::dispatch::BoxedValue;
use crate::error::Result;
use crate::tensor::{normalize_dim, Tensor};

type Out = Result<(Vec<Tensor>, BackwardFn)>;

fn bw(f: impl FnOnce(&Tensor, &[Tensor]) -> Result<Vec<Option<Tensor>>> + Send + 'static, n_inputs: usize) -> BackwardFn {
    Box::new(move |grads: &[Option<Tensor>], saved: &[Tensor]| match grads.first().and_then(|g| g.as_ref()) {
        Some(g) => f(g, saved),
        None => Ok(vec![None; n_inputs]),
    })
}

fn float_or_none(t: &Tensor, g: Result<Tensor>) -> Result<Option<Tensor>> {
    if t.dtype().is_float() {
        g.map(Some)
    } else {
        Ok(None)
    }
}

fn sizes(args: &[BoxedValue], i: usize) -> Vec<usize> {
    args.iter().filter_map(|a| a.as_tensor()).nth(i).map(|t| t.sizes().to_vec()).unwrap_or_default()
}

pub(super) fn add(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let (sa, sb) = (sizes(args, 0), sizes(args, 1));
    Ok((vec![], bw(move |g, _| Ok(vec![Some(kernels::sum_to_shape(g, &sa)?), Some(kernels::sum_to_shape(g, &sb)?)]), 2)))
}

pub(super) fn sub(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let (sa, sb) = (sizes(args, 0), sizes(args, 1));
    Ok((
        vec![],
        bw(
            move |g, _| {
                let ng = kernels::unary(UnaryOp::Neg, g)?;
                Ok(vec![Some(kernels::sum_to_shape(g, &sa)?), Some(kernels::sum_to_shape(&ng, &sb)?)])
            },
            2,
        ),
    ))
}

pub(super) fn mul(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::mul", args);
    let (x, y) = (a.tensor(0)?.clone(), a.tensor(1)?.clone());
    Ok((
        vec![x, y],
        bw(
            |g, s| {
                let ga = kernels::sum_to_shape(&kernels::binary(BinaryOp::Mul, g, &s[1])?, s[0].sizes())?;
                let gb = kernels::sum_to_shape(&kernels::binary(BinaryOp::Mul, g, &s[0])?, s[1].sizes())?;
                Ok(vec![Some(ga), Some(gb)])
            },
            2,
        ),
    ))
}

pub(super) fn div(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::div", args);
    let (x, y) = (a.tensor(0)?.clone(), a.tensor(1)?.clone());
    Ok((
        vec![x, y],
        bw(
            |g, s| {
                let ga = kernels::binary(BinaryOp::Div, g, &s[1])?;
                let num = kernels::binary(BinaryOp::Mul, &ga, &s[0])?;
                let gb = kernels::unary(UnaryOp::Neg, &kernels::binary(BinaryOp::Div, &num, &s[1])?)?;
                Ok(vec![Some(kernels::sum_to_shape(&ga, s[0].sizes())?), Some(kernels::sum_to_shape(&gb, s[1].sizes())?)])
            },
            2,
        ),
    ))
}

pub(super) fn neg(_args: &[BoxedValue], _out: &[Tensor]) -> Out {
    Ok((vec![], bw(|g, _| Ok(vec![Some(kernels::unary(UnaryOp::Neg, g)?)]), 1)))
}

pub(super) fn exp(_args: &[BoxedValue], out: &[Tensor]) -> Out {
    Ok((vec![out[0].clone()], bw(|g, s| Ok(vec![Some(kernels::binary(BinaryOp::Mul, g, &s[0])?)]), 1)))
}

pub(super) fn log(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let x = Args::new("vt::log", args).tensor(0)?.clone();
    Ok((vec![x], bw(|g, s| Ok(vec![Some(kernels::binary(BinaryOp::Div, g, &s[0])?)]), 1)))
}

pub(super) fn tanh(_args: &[BoxedValue], out: &[Tensor]) -> Out {
    Ok((vec![out[0].clone()], bw(|g, s| Ok(vec![Some(kernels::tanh_backward(g, &s[0])?)]), 1)))
}

pub(super) fn relu(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let x = Args::new("vt::relu", args).tensor(0)?.clone();
    Ok((
        vec![x],
        bw(|g, s| Ok(vec![Some(kernels::binary(BinaryOp::Mul, g, &kernels::unary(UnaryOp::Step, &s[0])?)?)]), 1),
    ))
}

pub(super) fn abs(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let x = Args::new("vt::abs", args).tensor(0)?.clone();
    Ok((
        vec![x],
        bw(
            |g, s| {
                // sign(x) = step(x) - step(-x)
                let pos = kernels::unary(UnaryOp::Step, &s[0])?;
                let neg = kernels::unary(UnaryOp::Step, &kernels::unary(UnaryOp::Neg, &s[0])?)?;
                let sign = kernels::binary(BinaryOp::Sub, &pos, &neg)?;
                Ok(vec![Some(kernels::binary(BinaryOp::Mul, g, &sign)?)])
            },
            1,
        ),
    ))
}

pub(super) fn mul_scalar(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let c = Args::new("vt::mul_scalar", args).float(1)?;
    Ok((vec![], bw(move |g, _| Ok(vec![Some(kernels::unary(UnaryOp::MulScalar(c), g)?)]), 1)))
}

pub(super) fn add_scalar(_args: &[BoxedValue], _out: &[Tensor]) -> Out {
    Ok((vec![], bw(|g, _| Ok(vec![Some(g.clone())]), 1)))
}

pub(super) fn matmul(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::matmul", args);
    let (x, y) = (a.tensor(0)?.clone(), a.tensor(1)?.clone());
    Ok((
        vec![x, y],
        bw(
            |g, s| {
                let bt = s[1].transpose_view(-2, -1)?;
                let at = s[0].transpose_view(-2, -1)?;
                let ga = kernels::sum_to_shape(&kernels::matmul(g, &bt)?, s[0].sizes())?;
                let gb = kernels::sum_to_shape(&kernels::matmul(&at, g)?, s[1].sizes())?;
                Ok(vec![Some(ga), Some(gb)])
            },
            2,
        ),
    ))
}

fn softmax_like(args: &[BoxedValue], out: &[Tensor], log: bool) -> Out {
    let dim = Args::new("vt::softmax", args).int(1)?;
    Ok((vec![out[0].clone()], bw(move |g, s| Ok(vec![Some(kernels::softmax_backward(g, &s[0], dim, log)?)]), 1)))
}

pub(super) fn softmax(args: &[BoxedValue], out: &[Tensor]) -> Out {
    softmax_like(args, out, false)
}

pub(super) fn log_softmax(args: &[BoxedValue], out: &[Tensor]) -> Out {
    softmax_like(args, out, true)
}

/// Broadcast a reduced gradient back over the reduced dims.
fn expand_reduced(g: &Tensor, input: &[usize], dims: &BTreeSet<usize>, keepdim: bool, scale: f64) -> Result<Tensor> {
    let all = dims.is_empty();
    let kept: Vec<usize> = input.iter().enumerate().map(|(i, &s)| if all || dims.contains(&i) { 1 } else { s }).collect();
    let gk = if keepdim { g.clone() } else { g.contiguous()?.view(&kept)? };
    kernels::unary(UnaryOp::MulScalar(scale), &gk.expand_view(input)?)
}

pub(super) fn sum(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::sum", args);
    let x = a.tensor(0)?;
    let (shape, dims, keepdim) = (x.sizes().to_vec(), reduce_dims(x, a.ints(1)?)?, a.boolean(2)?);
    Ok((vec![], bw(move |g, _| Ok(vec![Some(expand_reduced(g, &shape, &dims, keepdim, 1.0)?)]), 1)))
}

pub(super) fn mean(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::mean", args);
    let x = a.tensor(0)?;
    let (shape, dims, keepdim) = (x.sizes().to_vec(), reduce_dims(x, a.ints(1)?)?, a.boolean(2)?);
    let count: usize = if dims.is_empty() { x.numel() } else { dims.iter().map(|&d| shape[d]).product() };
    let scale = 1.0 / count.max(1) as f64;
    Ok((vec![], bw(move |g, _| Ok(vec![Some(expand_reduced(g, &shape, &dims, keepdim, scale)?)]), 1)))
}

pub(super) fn reshape(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let shape = sizes(args, 0);
    Ok((vec![], bw(move |g, _| Ok(vec![Some(g.contiguous()?.view(&shape)?)]), 1)))
}

pub(super) fn transpose(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::transpose", args);
    let (d0, d1) = (a.int(1)?, a.int(2)?);
    Ok((vec![], bw(move |g, _| Ok(vec![Some(g.transpose_view(d0, d1)?)]), 1)))
}

pub(super) fn flip(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let dim = Args::new("vt::flip", args).int(1)?;
    Ok((vec![], bw(move |g, _| Ok(vec![Some(kernels::flip(g, dim)?)]), 1)))
}

pub(super) fn index_select(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::index_select", args);
    let (x, dim, idx) = (a.tensor(0)?, a.int(1)?, a.tensor(2)?.clone());
    let shape = x.sizes().to_vec();
    normalize_dim(dim, shape.len())?;
    Ok((vec![idx], bw(move |g, s| Ok(vec![Some(kernels::index_add(&shape, dim, &s[0], g)?), None]), 2)))
}

pub(super) fn embedding(args: &[BoxedValue], _out: &[Tensor]) -> Out {
    let a = Args::new("vt::embedding", args);
    let (table, idx) = (a.tensor(0)?, a.tensor(1)?.clone());
    let shape = table.sizes().to_vec();
    Ok((
        vec![idx],
        bw(
            move |g, s| {
                let n = s[0].numel();
                let flat = s[0].contiguous()?.view(&[n])?;
                let g2 = g.contiguous()?.view(&[n, shape[1]])?;
                Ok(vec![Some(kernels::index_add(&shape, 0, &flat, &g2)?), None])
            },
            2,
        ),
    ))
}

pub(super) fn layer_norm(args: &[BoxedValue], out: &[Tensor]) -> Out {
    let a = Args::new("vt::layer_norm", args);
    let x = a.tensor(0)?.clone();
    let k = a.ints(1)?.len();
    Ok((vec![x, out[1].clone(), out[2].clone()], bw(move |g, s| Ok(vec![Some(kernels::layer_norm_backward(g, &s[0], &s[1], &s[2], k)?)]), 1)))
}

pub(super) fn cross_entropy(args: &[BoxedValue], out: &[Tensor]) -> Out {
    let targets = Args::new("vt::cross_entropy", args).tensor(1)?.clone();
    Ok((
        vec![out[1].clone(), targets],
        bw(|g, s| Ok(vec![Some(kernels::cross_entropy_backward(g, &s[0], &s[1])?), None]), 2),
    ))
}

pub(super) fn attention(args: &[BoxedValue], out: &[Tensor]) -> Out {
    let a = Args::new("vt::attention", args);
    let (q, k, v, causal) = (a.tensor(0)?.clone(), a.tensor(1)?.clone(), a.tensor(2)?.clone(), a.boolean(3)?);
    Ok((
        vec![q, k, v, out[0].clone(), out[1].clone()],
        bw(
            move |g, s| {
                let (dq, dk, dv) = kernels::attention_backward(g, &s[0], &s[1], &s[2], &s[3], &s[4], causal)?;
                Ok(vec![float_or_none(&s[0], Ok(dq))?, float_or_none(&s[1], Ok(dk))?, float_or_none(&s[2], Ok(dv))?])
            },
            3,
        ),
    ))
}
