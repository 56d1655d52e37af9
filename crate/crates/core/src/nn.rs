//! Minimal layers and an Adam optimizer on top of the op library.

use rand::Rng;

use crate::autograd;
use crate::device::Device;
use crate::dtype::DType;
use crate::error::Result;
use crate::ops::{self, AdamParams};
use crate::tensor::Tensor;

/// Named trainable tensors in registration order.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uniform in `[-bound, bound]`, F64.
    pub fn uniform(&mut self, name: &str, sizes: &[usize], bound: f64, rng: &mut impl Rng, device: Device) -> Result<Tensor> {
        let n: usize = sizes.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_vec(data, sizes, device)?)
    }

    pub fn constant(&mut self, name: &str, sizes: &[usize], value: f64, device: Device) -> Result<Tensor> {
        self.insert(name, Tensor::full(sizes, value, DType::F64, device)?)
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        let t = t.set_requires_grad(true)?;
        self.params.push((name.to_string(), t.clone()));
        Ok(t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }
}

pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng, device: Device) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound, rng, device)?;
        let bias = if bias { Some(store.constant(&format!("{name}.bias"), &[fan_out], 0.0, device)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => ops::add(&y, b),
            None => Ok(y),
        }
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, device: Device) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0, device)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0, device)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = *x.sizes().last().unwrap_or(&1);
        let y = ops::layer_norm(x, &[d], self.eps)?;
        ops::add(&ops::mul(&y, &self.gamma)?, &self.beta)
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    state: Vec<(Tensor, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Result<Adam> {
        let state = store
            .iter()
            .map(|(_, p)| {
                let m = Tensor::zeros(p.sizes(), p.dtype(), p.device())?;
                let v = Tensor::zeros(p.sizes(), p.dtype(), p.device())?;
                Ok((p.clone(), m, v))
            })
            .collect::<Result<_>>()?;
        Ok(Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, state })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update for every parameter that has a gradient.
    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        let hp = AdamParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, step: self.step };
        let _g = autograd::no_grad();
        for (p, m, v) in &self.state {
            if let Some(g) = p.grad() {
                ops::adam_step(p, &g, m, v, hp)?;
            }
        }
        Ok(())
    }
}
