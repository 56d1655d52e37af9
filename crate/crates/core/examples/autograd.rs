//! Reverse-mode gradients, no_grad, and the global backward gate.
//!
//!     cargo run --example autograd

use vbt::{autograd, ops, Device, Tensor};

fn main() -> vbt::Result<()> {
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3], Device::Host)?.set_requires_grad(true)?;
    let w = Tensor::from_vec(vec![1.5, 0.25, -0.5], &[3], Device::Host)?.set_requires_grad(true)?;
    let y = ops::sum_all(&ops::tanh(&ops::mul(&x, &w)?)?)?;
    y.backward(None)?;
    println!("y = {:.6}", y.item()?);
    println!("dy/dx = {:?}", x.grad().unwrap().to_vec::<f64>()?);
    println!("dy/dw = {:?}", w.grad().unwrap().to_vec::<f64>()?);

    let z = {
        let _g = autograd::no_grad();
        ops::mul(&x, &w)?
    };
    println!("under no_grad requires_grad = {}", z.requires_grad());

    let q = Tensor::from_vec(vec![0.1; 8], &[1, 1, 4, 2], Device::Host)?.set_requires_grad(true)?;
    let out = ops::attention(&q, &q, &q, true)?;
    ops::sum_all(&out)?.backward(None)?;
    println!("attention grad norm {:.6}", q.grad().unwrap().to_vec::<f64>()?.iter().map(|g| g * g).sum::<f64>().sqrt());
    Ok(())
}
