//! Central finite-difference gradient checker and the op case table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbt::{autograd, ops, Device, Result, Tensor};

pub const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;

/// Input of a case: F64 values with a shape, or fixed I64 indices.
#[derive(Clone)]
pub enum Arg {
    Real(Vec<f64>, Vec<usize>),
    Index(Vec<i64>, Vec<usize>),
}

impl Arg {
    fn tensor(&self, grad: bool) -> Result<Tensor> {
        match self {
            Arg::Real(v, s) => Tensor::from_vec(v.clone(), s, Device::Host)?.set_requires_grad(grad),
            Arg::Index(v, s) => Tensor::from_vec(v.clone(), s, Device::Host),
        }
    }
}

pub type CaseFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

pub struct Case {
    pub name: &'static str,
    /// Operator name in the dispatcher, for coverage accounting.
    pub op: &'static str,
    pub args: Vec<Arg>,
    pub f: CaseFn,
}

/// Relative error ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂) for every real input.
pub fn check(case: &Case, seed: u64) -> std::result::Result<f64, String> {
    let err = |e: vbt::Error| format!("{}: {e}", case.name);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |args: &[Arg]| -> Result<Vec<f64>> {
        let _g = autograd::no_grad();
        let ts = args.iter().map(|a| a.tensor(false)).collect::<Result<Vec<_>>>()?;
        (case.f)(&ts)?.to_f64_vec()
    };
    let out0 = eval(&case.args).map_err(err)?;
    let w: Vec<f64> = (0..out0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let project = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();

    let ts = case.args.iter().map(|a| a.tensor(true)).collect::<Result<Vec<_>>>().map_err(err)?;
    let out = (case.f)(&ts).map_err(err)?;
    let seed_t = Tensor::from_vec(w.clone(), out.sizes(), Device::Host).map_err(err)?;
    out.backward(Some(&seed_t)).map_err(err)?;

    let mut worst = 0.0f64;
    for (i, a) in case.args.iter().enumerate() {
        let Arg::Real(vals, shape) = a else { continue };
        let analytic = match ts[i].grad() {
            Some(g) => g.to_f64_vec().map_err(err)?,
            None => vec![0.0; vals.len()],
        };
        let mut numeric = Vec::with_capacity(vals.len());
        for j in 0..vals.len() {
            let mut plus = case.args.clone();
            let mut minus = case.args.clone();
            if let Arg::Real(v, _) = &mut plus[i] {
                v[j] += H;
            }
            if let Arg::Real(v, _) = &mut minus[i] {
                v[j] -= H;
            }
            let fp = project(&eval(&plus).map_err(err)?);
            let fm = project(&eval(&minus).map_err(err)?);
            numeric.push((fp - fm) / (2.0 * H));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        if !rel.is_finite() {
            return Err(format!("{}: input {i} ({shape:?}) gave non-finite error", case.name));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arg {
    let n = shape.iter().product();
    Arg::Real((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape.to_vec())
}

/// Magnitudes in [0.1, 1) with random sign, so kinks at zero are avoided.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arg {
    let n = shape.iter().product();
    Arg::Real((0..n).map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(), shape.to_vec())
}

fn idx(v: &[i64]) -> Arg {
    Arg::Index(v.to_vec(), vec![v.len()])
}

macro_rules! case {
    ($name:expr, $op:expr, [$($arg:expr),*], |$t:ident| $body:expr) => {
        Case { name: $name, op: $op, args: vec![$($arg),*], f: Box::new(move |$t: &[Tensor]| $body) }
    };
}

/// Every differentiable operator, with broadcasting and reduction variants.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    vec![
        case!("add", "vt::add", [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t| ops::add(&t[0], &t[1])),
        case!("add_broadcast", "vt::add", [uniform(r, &[2, 1, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t| ops::add(&t[0], &t[1])),
        case!("sub", "vt::sub", [uniform(r, &[4, 1], -1.0, 1.0), uniform(r, &[1, 5], -1.0, 1.0)], |t| ops::sub(&t[0], &t[1])),
        case!("mul", "vt::mul", [uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)], |t| ops::mul(&t[0], &t[1])),
        case!("div", "vt::div", [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 1], 0.5, 2.0)], |t| ops::div(&t[0], &t[1])),
        case!("neg", "vt::neg", [uniform(r, &[5], -1.0, 1.0)], |t| ops::neg(&t[0])),
        case!("exp", "vt::exp", [uniform(r, &[2, 5], -1.0, 1.0)], |t| ops::exp(&t[0])),
        case!("log", "vt::log", [uniform(r, &[2, 5], 0.5, 2.0)], |t| ops::log(&t[0])),
        case!("tanh", "vt::tanh", [uniform(r, &[2, 5], -2.0, 2.0)], |t| ops::tanh(&t[0])),
        case!("relu", "vt::relu", [off_zero(r, &[3, 4])], |t| ops::relu(&t[0])),
        case!("abs", "vt::abs", [off_zero(r, &[3, 4])], |t| ops::abs(&t[0])),
        case!("mul_scalar", "vt::mul_scalar", [uniform(r, &[6], -1.0, 1.0)], |t| ops::mul_scalar(&t[0], -1.7)),
        case!("add_scalar", "vt::add_scalar", [uniform(r, &[6], -1.0, 1.0)], |t| ops::add_scalar(&t[0], 0.3)),
        case!("matmul", "vt::matmul", [uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)], |t| ops::matmul(&t[0], &t[1])),
        case!("matmul_batched", "vt::matmul", [uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)], |t| ops::matmul(&t[0], &t[1])),
        case!("softmax", "vt::softmax", [uniform(r, &[3, 5], -2.0, 2.0)], |t| ops::softmax(&t[0], -1)),
        case!("softmax_dim0", "vt::softmax", [uniform(r, &[3, 5], -2.0, 2.0)], |t| ops::softmax(&t[0], 0)),
        case!("log_softmax", "vt::log_softmax", [uniform(r, &[3, 5], -2.0, 2.0)], |t| ops::log_softmax(&t[0], -1)),
        case!("sum_all", "vt::sum", [uniform(r, &[3, 4], -1.0, 1.0)], |t| ops::sum_all(&t[0])),
        case!("sum_dims_keepdim", "vt::sum", [uniform(r, &[2, 3, 4], -1.0, 1.0)], |t| ops::sum(&t[0], &[0, 2], true)),
        case!("mean", "vt::mean", [uniform(r, &[2, 3, 4], -1.0, 1.0)], |t| ops::mean(&t[0], &[1], false)),
        case!("reshape", "vt::reshape", [uniform(r, &[2, 6], -1.0, 1.0)], |t| ops::reshape(&t[0], &[3, -1])),
        case!("transpose", "vt::transpose", [uniform(r, &[2, 3, 4], -1.0, 1.0)], |t| ops::transpose(&t[0], 0, 2)),
        case!("flip", "vt::flip", [uniform(r, &[3, 4], -1.0, 1.0)], |t| ops::flip(&t[0], 1)),
        case!("index_select", "vt::index_select", [uniform(r, &[4, 3], -1.0, 1.0), idx(&[3, 0, 3, 1])], |t| ops::index_select(&t[0], 0, &t[1])),
        case!("embedding", "vt::embedding", [uniform(r, &[5, 3], -1.0, 1.0), Arg::Index(vec![4, 0, 4, 2, 1, 4], vec![2, 3])], |t| ops::embedding(&t[0], &t[1])),
        case!("layer_norm", "vt::layer_norm", [uniform(r, &[3, 6], -2.0, 2.0)], |t| ops::layer_norm(&t[0], &[6], 1e-5)),
        case!("layer_norm_2d", "vt::layer_norm", [uniform(r, &[2, 3, 4], -2.0, 2.0)], |t| ops::layer_norm(&t[0], &[3, 4], 1e-5)),
        case!("cross_entropy", "vt::cross_entropy", [uniform(r, &[4, 5], -2.0, 2.0), idx(&[0, 4, 2, 2])], |t| ops::cross_entropy(&t[0], &t[1])),
        case!(
            "attention",
            "vt::attention",
            [uniform(r, &[1, 2, 4, 3], -1.0, 1.0), uniform(r, &[1, 2, 4, 3], -1.0, 1.0), uniform(r, &[1, 2, 4, 3], -1.0, 1.0)],
            |t| ops::attention(&t[0], &t[1], &t[2], false)
        ),
        case!(
            "attention_causal",
            "vt::attention",
            [uniform(r, &[2, 1, 5, 2], -1.0, 1.0), uniform(r, &[2, 1, 5, 2], -1.0, 1.0), uniform(r, &[2, 1, 5, 2], -1.0, 1.0)],
            |t| ops::attention(&t[0], &t[1], &t[2], true)
        ),
    ]
}

/// Runs every case; returns (worst error, per-case errors) or the first failure.
pub fn run_all(seed: u64) -> std::result::Result<(f64, Vec<(&'static str, f64)>), String> {
    let mut per = Vec::new();
    let mut worst = 0.0f64;
    for c in cases(seed) {
        let e = check(&c, seed)?;
        if e > REL_TOL {
            return Err(format!("{}: relative error {e:.3e} > {REL_TOL:e}", c.name));
        }
        worst = worst.max(e);
        per.push((c.name, e));
    }
    Ok((worst, per))
}
