//! Sequence-reversal training harness: a 2-layer causal transformer learns
//! to emit its input tokens in reverse order.
//!
//! Each example is `[BOS, x_1..x_L, x_L..x_1]`. The model reads every token
//! but the X tokens are random, so loss and accuracy cover only the L
//! positions whose next token is part of the reversed half.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd;
use crate::device::Device;
use crate::error::{Error, Result};
use crate::interop::safetensors::{save_safetensors, Metadata};
use crate::nn::{Adam, LayerNorm, Linear, ParamStore};
use crate::ops;
use crate::tensor::Tensor;

pub const BOS: i64 = 0;

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub task: String,
    pub vocab: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub batch: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub device: Device,
    /// Evaluate on a held-out batch every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Stop once held-out accuracy reaches this value.
    pub early_stop_acc: Option<f64>,
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: "reversal".into(),
            vocab: 16,
            seq_len: 16,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4,
            batch: 16,
            lr: 3e-3,
            steps: 2000,
            seed: 0,
            device: Device::Host,
            eval_every: 100,
            eval_batch: 128,
            early_stop_acc: None,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Other(format!("invalid train config: {m}")));
        if self.task != "reversal" {
            return bad("only the reversal task exists");
        }
        if self.vocab < 2 {
            return bad("vocab must be at least 2 (token 0 is BOS)");
        }
        if self.seq_len == 0 || self.d_model == 0 || self.n_layers == 0 || self.batch == 0 || self.eval_batch == 0 {
            return bad("sizes must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    fn context(&self) -> usize {
        2 * self.seq_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub eval_loss: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub num_params: usize,
}

impl TrainReport {
    pub fn final_eval_acc(&self) -> Option<f64> {
        self.evals.last().map(|e| e.eval_acc)
    }

    /// First step at which held-out accuracy reached `acc`.
    pub fn first_step_reaching(&self, acc: f64) -> Option<usize> {
        self.evals.iter().find(|e| e.eval_acc >= acc).map(|e| e.step)
    }

    /// Exponential moving average of the loss with factor `alpha`.
    pub fn smoothed_losses(&self, alpha: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps.len());
        let mut s = None;
        for r in &self.steps {
            let v = match s {
                None => r.loss,
                Some(p) => alpha * p + (1.0 - alpha) * r.loss,
            };
            s = Some(v);
            out.push(v);
        }
        out
    }
}

struct Block {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

pub struct ReversalModel {
    cfg: TrainConfig,
    pub params: ParamStore,
    tok: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl ReversalModel {
    pub fn new(cfg: &TrainConfig, rng: &mut impl Rng) -> Result<ReversalModel> {
        cfg.validate()?;
        let (d, dev) = (cfg.d_model, cfg.device);
        let mut ps = ParamStore::new();
        let tok = ps.uniform("tok_emb", &[cfg.vocab, d], 0.5, rng, dev)?;
        let pos = ps.uniform("pos_emb", &[cfg.context(), d], 0.5, rng, dev)?;
        let mut blocks = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut ps, &format!("{p}.ln1"), d, dev)?,
                wq: Linear::new(&mut ps, &format!("{p}.attn.wq"), d, d, false, rng, dev)?,
                wk: Linear::new(&mut ps, &format!("{p}.attn.wk"), d, d, false, rng, dev)?,
                wv: Linear::new(&mut ps, &format!("{p}.attn.wv"), d, d, false, rng, dev)?,
                wo: Linear::new(&mut ps, &format!("{p}.attn.wo"), d, d, true, rng, dev)?,
                ln2: LayerNorm::new(&mut ps, &format!("{p}.ln2"), d, dev)?,
                fc1: Linear::new(&mut ps, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, true, rng, dev)?,
                fc2: Linear::new(&mut ps, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, true, rng, dev)?,
            });
        }
        let ln_f = LayerNorm::new(&mut ps, "ln_f", d, dev)?;
        let head = Linear::new(&mut ps, "head", d, cfg.vocab, true, rng, dev)?;
        Ok(ReversalModel { cfg: cfg.clone(), params: ps, tok, pos, blocks, ln_f, head })
    }

    fn heads(&self, x: &Tensor, b: usize, t: usize) -> Result<Tensor> {
        let (h, dh) = (self.cfg.n_heads as i64, (self.cfg.d_model / self.cfg.n_heads) as i64);
        ops::transpose(&ops::reshape(x, &[b as i64, t as i64, h, dh])?, 1, 2)
    }

    /// Logits `(B, T, V)` for input tokens `(B, T)`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, t) = (tokens.sizes()[0], tokens.sizes()[1]);
        let pos = if t == self.cfg.context() { self.pos.clone() } else { ops::index_select(&self.pos, 0, &arange(t, self.cfg.device)?)? };
        let mut h = ops::add(&ops::embedding(&self.tok, tokens)?, &pos)?;
        for blk in &self.blocks {
            let a = blk.ln1.forward(&h)?;
            let (q, k, v) = (self.heads(&blk.wq.forward(&a)?, b, t)?, self.heads(&blk.wk.forward(&a)?, b, t)?, self.heads(&blk.wv.forward(&a)?, b, t)?);
            let o = ops::attention(&q, &k, &v, true)?;
            let o = ops::reshape(&ops::transpose(&o, 1, 2)?, &[b as i64, t as i64, self.cfg.d_model as i64])?;
            h = ops::add(&h, &blk.wo.forward(&o)?)?;
            let m = blk.ln2.forward(&h)?;
            let m = blk.fc2.forward(&ops::relu(&blk.fc1.forward(&m)?)?)?;
            h = ops::add(&h, &m)?;
        }
        self.head.forward(&self.ln_f.forward(&h)?)
    }

    /// Mean cross-entropy over the reversed half and the fraction of
    /// correctly predicted tokens there.
    pub fn loss_and_acc(&self, batch: &Batch) -> Result<(Tensor, f64)> {
        let logits = self.forward(&batch.inputs)?;
        let l = self.cfg.seq_len;
        let sel = ops::index_select(&logits, 1, &batch.predict_at)?;
        let flat = ops::reshape(&sel, &[(batch.size * l) as i64, self.cfg.vocab as i64])?;
        let loss = ops::cross_entropy(&flat, &batch.targets)?;
        let pred = {
            let _g = autograd::no_grad();
            ops::argmax(&flat)?.to_vec::<i64>()?
        };
        let tgt = batch.targets.to_vec::<i64>()?;
        let hits = pred.iter().zip(&tgt).filter(|(a, b)| a == b).count();
        Ok((loss, hits as f64 / tgt.len() as f64))
    }

    pub fn save(&self, path: &std::path::Path, meta: &Metadata) -> Result<()> {
        save_safetensors(path, self.params.iter(), meta)
    }
}

fn arange(n: usize, device: Device) -> Result<Tensor> {
    Tensor::from_vec((0..n as i64).collect::<Vec<_>>(), &[n], device)
}

pub struct Batch {
    pub size: usize,
    /// `(B, 2L)` model inputs.
    pub inputs: Tensor,
    /// Positions whose next token is in the reversed half.
    pub predict_at: Tensor,
    /// `(B*L,)` expected tokens.
    pub targets: Tensor,
}

/// Sample `size` reversal examples with tokens in `1..vocab`.
pub fn sample_batch(cfg: &TrainConfig, size: usize, rng: &mut impl Rng) -> Result<Batch> {
    let l = cfg.seq_len;
    let mut inputs = Vec::with_capacity(size * 2 * l);
    let mut targets = Vec::with_capacity(size * l);
    for _ in 0..size {
        let x: Vec<i64> = (0..l).map(|_| rng.gen_range(1..cfg.vocab as i64)).collect();
        let rev: Vec<i64> = x.iter().rev().copied().collect();
        inputs.push(BOS);
        inputs.extend_from_slice(&x);
        inputs.extend_from_slice(&rev[..l - 1]);
        targets.extend_from_slice(&rev);
    }
    let predict_at: Vec<i64> = (l as i64..2 * l as i64).collect();
    Ok(Batch {
        size,
        inputs: Tensor::from_vec(inputs, &[size, 2 * l], cfg.device)?,
        predict_at: Tensor::from_vec(predict_at, &[l], cfg.device)?,
        targets: Tensor::from_vec(targets, &[size * l], cfg.device)?,
    })
}

#[derive(Serialize)]
struct Header<'a> {
    header: &'a TrainConfig,
    num_params: usize,
}

/// Train and stream JSON lines to `emit`: one header, one record per step,
/// and an eval record every `eval_every` steps and at the end.
pub fn train_reversal(cfg: &TrainConfig, mut emit: impl FnMut(&str)) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ReversalModel::new(cfg, &mut rng)?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let eval = sample_batch(cfg, cfg.eval_batch, &mut eval_rng)?;
    let mut opt = Adam::new(&model.params, cfg.lr)?;
    let mut report = TrainReport { num_params: model.params.num_elements(), ..Default::default() };
    emit(&serde_json::to_string(&Header { header: cfg, num_params: report.num_params })?);
    if cfg.steps == 0 {
        return Ok(report);
    }
    let start = Instant::now();
    let do_eval = |step: usize, report: &mut TrainReport, emit: &mut dyn FnMut(&str)| -> Result<()> {
        let _g = autograd::no_grad();
        let (loss, acc) = model.loss_and_acc(&eval)?;
        let rec = EvalRecord { step, eval_loss: loss.item()?, eval_acc: acc };
        emit(&serde_json::to_string(&rec)?);
        report.evals.push(rec);
        Ok(())
    };
    for step in 1..=cfg.steps {
        let batch = sample_batch(cfg, cfg.batch, &mut rng)?;
        model.params.zero_grad();
        let (loss, acc) = model.loss_and_acc(&batch)?;
        loss.backward(None)?;
        opt.step()?;
        let rec = StepRecord { step, loss: loss.item()?, token_acc: acc, wallclock_ms: start.elapsed().as_secs_f64() * 1e3 };
        emit(&serde_json::to_string(&rec)?);
        report.steps.push(rec);
        let last = step == cfg.steps;
        if last || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            do_eval(step, &mut report, &mut emit)?;
            if let (Some(target), Some(e)) = (cfg.early_stop_acc, report.evals.last()) {
                if e.eval_acc >= target {
                    break;
                }
            }
        }
    }
    if let Some(path) = &cfg.checkpoint {
        let mut meta = Metadata::new();
        meta.insert("task".into(), cfg.task.clone());
        meta.insert("steps".into(), report.steps.len().to_string());
        meta.insert("seed".into(), cfg.seed.to_string());
        model.save(path, &meta)?;
    }
    Ok(report)
}
