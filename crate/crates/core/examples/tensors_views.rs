//! Strided views share storage with their base; writes through a view land in the base.
//!
//!     cargo run --example tensors_views

use vbt::{ops, Device, Tensor};

fn main() -> vbt::Result<()> {
    let base = Tensor::from_vec((0..6).map(|v| v as f64).collect::<Vec<_>>(), &[6], Device::Host)?;
    let v = base.as_strided(&[2, 2], &[3, 1], 0)?;
    println!("as_strided [2,2]/[3,1] -> {:?}", v.to_vec::<f64>()?);

    let m = base.view(&[2, 3])?;
    let t = m.transpose_view(0, 1)?;
    println!("transpose sizes {:?} strides {:?} contiguous {}", t.sizes(), t.strides(), t.is_contiguous());

    let col = m.narrow_view(1, 2, 1)?;
    ops::fill_(&col, -1.0)?;
    println!("after fill_ of the last column: {:?}", base.to_vec::<f64>()?);

    let row = Tensor::from_vec(vec![10.0, 20.0, 30.0], &[1, 3], Device::Host)?;
    let b = ops::add(&m, &row.expand_view(&[2, 3])?)?;
    println!("broadcast add {:?} -> {:?}", b.sizes(), b.to_vec::<f64>()?);
    Ok(())
}
