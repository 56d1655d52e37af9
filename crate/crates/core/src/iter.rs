//! Shared iteration engine: broadcast shape computation, per-operand
//! strides, dimension coalescing and aliasing checks for elementwise and
//! reduction kernels.

use std::collections::BTreeSet;

use crate::device::Device;
use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct OperandSpec {
    pub tensor: Tensor,
    pub is_output: bool,
    pub allow_inplace_alias: bool,
}

impl OperandSpec {
    pub fn input(t: &Tensor) -> Self {
        OperandSpec { tensor: t.clone(), is_output: false, allow_inplace_alias: false }
    }

    pub fn output(t: &Tensor) -> Self {
        OperandSpec { tensor: t.clone(), is_output: true, allow_inplace_alias: false }
    }

    /// Output that may exactly alias one of the inputs.
    pub fn inplace_output(t: &Tensor) -> Self {
        OperandSpec { tensor: t.clone(), is_output: true, allow_inplace_alias: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overlap {
    Disjoint,
    ExactAlias,
    Partial,
}

/// Classify how two views share memory. Conservative: anything that is not
/// an exact alias and whose byte intervals intersect counts as partial.
pub fn check_overlap(a: &Tensor, b: &Tensor) -> Overlap {
    if !a.storage().ptr_eq(b.storage()) {
        return Overlap::Disjoint;
    }
    let (Some((alo, ahi)), Some((blo, bhi))) = (a.byte_extent(), b.byte_extent()) else {
        return Overlap::Disjoint;
    };
    if a.offset() == b.offset() && a.sizes() == b.sizes() && a.strides() == b.strides() {
        return Overlap::ExactAlias;
    }
    if ahi <= blo || bhi <= alo {
        Overlap::Disjoint
    } else {
        Overlap::Partial
    }
}

/// Trailing-aligned broadcast of `shapes`, or `None` if two non-1 sizes differ.
pub fn broadcast_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Option<Vec<usize>> {
    let mut out: Vec<usize> = Vec::new();
    for s in shapes {
        if s.len() > out.len() {
            let mut grown = vec![1; s.len() - out.len()];
            grown.extend_from_slice(&out);
            out = grown;
        }
        let lead = out.len() - s.len();
        for (i, &d) in s.iter().enumerate() {
            let o = &mut out[lead + i];
            if *o == d || d == 1 {
                continue;
            }
            if *o == 1 {
                *o = d;
            } else {
                return None;
            }
        }
    }
    Some(out)
}

/// Immutable iteration plan. Holds raw base addresses of its operands, so
/// it must not outlive the memory it was built over.
#[derive(Debug, Clone)]
pub struct IterPlan {
    pub common_shape: Vec<usize>,
    pub per_operand_strides: Vec<Vec<usize>>,
    pub coalesced_shape: Vec<usize>,
    pub coalesced_strides: Vec<Vec<usize>>,
    pub reduction_dims: BTreeSet<usize>,
    pub num_outputs: usize,
    pub dtype: DType,
    pub device: Device,
    bases: Vec<usize>,
}

// SAFETY: bases are plain addresses; dereferencing them is the caller's
// responsibility under stream ordering.
unsafe impl Send for IterPlan {}
unsafe impl Sync for IterPlan {}

/// Build an iteration plan. Outputs come first in `operands` by
/// convention but any order is accepted.
pub fn build_iter(operands: &[OperandSpec], reduction_dims: &BTreeSet<usize>) -> Result<IterPlan> {
    let first = operands.first().ok_or_else(|| Error::ShapeMismatch("iterator needs at least one operand".into()))?;
    let device = first.tensor.device();
    let dtype = first.tensor.dtype();
    for op in operands {
        if op.tensor.device() != device {
            return Err(Error::DeviceMismatch(device, op.tensor.device()));
        }
        if op.tensor.dtype() != dtype {
            return Err(Error::DTypeMismatch { expected: dtype, got: op.tensor.dtype() });
        }
    }

    let inputs: Vec<&OperandSpec> = operands.iter().filter(|o| !o.is_output).collect();
    let outputs: Vec<&OperandSpec> = operands.iter().filter(|o| o.is_output).collect();
    let common_shape = if inputs.is_empty() {
        outputs[0].tensor.sizes().to_vec()
    } else {
        broadcast_shapes(inputs.iter().map(|o| o.tensor.sizes())).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "cannot broadcast {:?}",
                inputs.iter().map(|o| o.tensor.sizes().to_vec()).collect::<Vec<_>>()
            ))
        })?
    };
    if let Some(&d) = reduction_dims.iter().find(|&&d| d >= common_shape.len()) {
        return Err(Error::InvalidDim { dim: d as i64, rank: common_shape.len() });
    }

    let mut per_operand_strides = Vec::with_capacity(operands.len());
    for (k, op) in operands.iter().enumerate() {
        let t = &op.tensor;
        if op.is_output {
            let expected: Vec<usize> = common_shape
                .iter()
                .enumerate()
                .map(|(i, &s)| if reduction_dims.contains(&i) { 1 } else { s })
                .collect();
            if t.sizes() != expected.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "output {k} has shape {:?} but iteration shape requires {:?}",
                    t.sizes(),
                    expected
                )));
            }
            let strides =
                t.strides().iter().enumerate().map(|(i, &s)| if reduction_dims.contains(&i) { 0 } else { s }).collect();
            per_operand_strides.push(strides);
        } else {
            let lead = common_shape.len() - t.dim();
            let mut strides = vec![0; common_shape.len()];
            for i in 0..t.dim() {
                strides[lead + i] = if t.sizes()[i] == 1 { 0 } else { t.strides()[i] };
            }
            per_operand_strides.push(strides);
        }
    }

    for (k, out) in operands.iter().enumerate().filter(|(_, o)| o.is_output) {
        for inp in operands.iter().filter(|o| !o.is_output) {
            match check_overlap(&out.tensor, &inp.tensor) {
                Overlap::Disjoint => {}
                Overlap::ExactAlias if out.allow_inplace_alias => {}
                Overlap::ExactAlias => return Err(Error::UnexpectedAlias(k)),
                Overlap::Partial => return Err(Error::PartialOverlap(k)),
            }
        }
    }

    let (coalesced_shape, coalesced_strides) = coalesce(&common_shape, &per_operand_strides, reduction_dims);
    Ok(IterPlan {
        common_shape,
        per_operand_strides,
        coalesced_shape,
        coalesced_strides,
        reduction_dims: reduction_dims.clone(),
        num_outputs: outputs.len(),
        dtype,
        device,
        bases: operands.iter().map(|o| o.tensor.data_ptr() as usize).collect(),
    })
}

fn coalesce(shape: &[usize], strides: &[Vec<usize>], red: &BTreeSet<usize>) -> (Vec<usize>, Vec<Vec<usize>>) {
    if shape.iter().any(|&s| s == 0) {
        return (vec![0], vec![vec![0]; strides.len()]);
    }
    // drop size-1 dims; they contribute nothing to addressing
    let keep: Vec<usize> = (0..shape.len()).filter(|&d| shape[d] != 1).collect();
    let mut out_shape: Vec<usize> = Vec::new();
    let mut out_strides: Vec<Vec<usize>> = vec![Vec::new(); strides.len()];
    let mut out_red: Vec<bool> = Vec::new();
    for &d in &keep {
        if !out_shape.is_empty() {
            // merge d into the previous kept dim when every operand steps uniformly
            let mergeable = strides.iter().enumerate().all(|(k, s)| *out_strides[k].last().unwrap() == s[d] * shape[d])
                && *out_red.last().unwrap() == red.contains(&d);
            if mergeable {
                let n = out_shape.len() - 1;
                out_shape[n] *= shape[d];
                for (k, s) in strides.iter().enumerate() {
                    let m = out_strides[k].len() - 1;
                    out_strides[k][m] = s[d];
                }
                continue;
            }
        }
        out_shape.push(shape[d]);
        for (k, s) in strides.iter().enumerate() {
            out_strides[k].push(s[d]);
        }
        out_red.push(red.contains(&d));
    }
    if out_shape.is_empty() {
        return (vec![1], vec![vec![0]; strides.len()]);
    }
    (out_shape, out_strides)
}

impl IterPlan {
    pub fn num_operands(&self) -> usize {
        self.bases.len()
    }

    pub fn numel(&self) -> usize {
        self.coalesced_shape.iter().product()
    }

    /// Call `body` once per element in row-major order of the coalesced
    /// shape with the address of that element in each operand.
    pub fn for_each(&self, mut body: impl FnMut(&[*mut u8])) {
        let es = self.dtype.size_bytes();
        let n_ops = self.bases.len();
        let mut ptrs = vec![std::ptr::null_mut::<u8>(); n_ops];
        self.for_each_strip(|base, steps, n| {
            for i in 0..n {
                for k in 0..n_ops {
                    ptrs[k] = (base[k] + i * steps[k] * es) as *mut u8;
                }
                body(&ptrs);
            }
        });
    }

    /// Strip-mined driver: `body(bases, element_strides, len)` for each run
    /// along the innermost coalesced dimension. Addresses are in bytes,
    /// strides in elements.
    pub fn for_each_strip(&self, mut body: impl FnMut(&[usize], &[usize], usize)) {
        let shape = &self.coalesced_shape;
        if shape.iter().any(|&s| s == 0) {
            return;
        }
        let nd = shape.len();
        let es = self.dtype.size_bytes();
        let n_ops = self.bases.len();
        let inner = shape[nd - 1];
        let steps: Vec<usize> = self.coalesced_strides.iter().map(|s| s[nd - 1]).collect();
        let mut idx = vec![0usize; nd];
        let mut cur: Vec<usize> = self.bases.clone();
        loop {
            body(&cur, &steps, inner);
            let mut d = nd - 1;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                idx[d] += 1;
                for k in 0..n_ops {
                    cur[k] += self.coalesced_strides[k][d] * es;
                }
                if idx[d] < shape[d] {
                    break;
                }
                for k in 0..n_ops {
                    cur[k] -= self.coalesced_strides[k][d] * es * idx[d];
                }
                idx[d] = 0;
            }
        }
    }
}
