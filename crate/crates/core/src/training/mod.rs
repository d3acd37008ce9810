//! Loss, optimizer, learning-rate schedule and the training loop.

mod data;
pub mod loss;

use std::f64::consts::PI;
use std::io::Write;

pub use data::{RenderedSample, Renderer, Sample, SampleStream};

use crate::dataset::{negative_mask, MaskConfig};
use crate::error::{Error, Result};
use crate::mining::MinedBatches;
use crate::model::{loss_and_grads, ModelParams};
use loss::in_batch_recall_at1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_b: usize,
    pub iterations: usize,
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub temperature_tau: f64,
    pub label_smoothing_eps: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_b: 8,
            iterations: 5000,
            lr_peak: 1e-3,
            warmup_iters: 1000,
            temperature_tau: 1.0 / 36.0,
            label_smoothing_eps: 0.1,
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.batch_b < 2 {
            return bad(format!("batch size {} < 2", self.batch_b));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_eps) {
            return bad(format!("label smoothing {}", self.label_smoothing_eps));
        }
        if !(self.temperature_tau > 0.0 && self.temperature_tau.is_finite()) {
            return bad(format!("temperature {}", self.temperature_tau));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("learning rate {}", self.lr_peak));
        }
        if self.iterations == 0 || self.warmup_iters >= self.iterations {
            return bad(format!(
                "need 0 <= warmup ({}) < iterations ({})",
                self.warmup_iters, self.iterations
            ));
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay reaching 0 at the last iteration.
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_iters;
    if iteration < w {
        return cfg.lr_peak * iteration as f64 / w as f64;
    }
    let span = cfg.iterations.saturating_sub(1 + w).max(1);
    let progress = ((iteration - w) as f64 / span as f64).min(1.0);
    cfg.lr_peak * 0.5 * (1.0 + (PI * progress).cos())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.config != grads.config || params.config != state.m.config {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("gradient of {name}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let g_all = grads.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in params
        .tensors_mut()
        .into_iter()
        .zip(g_all)
        .zip(m_all)
        .zip(v_all)
    {
        ndarray::Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub lr: f64,
    /// NaN when the batch was degenerate and the step was skipped.
    pub loss: f64,
    pub batch_recall_at1: f64,
    pub pool_size_s: usize,
}

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(w, "iteration,lr,loss,batch_recall_at1,pool_size_s")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:.9},{:.6},{}",
            r.iteration, r.lr, r.loss, r.batch_recall_at1, r.pool_size_s
        )?;
    }
    Ok(())
}

/// Where training batches come from.
pub enum BatchPlan {
    /// Consecutive stream batches.
    Random,
    /// Hard-example mining with the given pool size cap.
    Mined { s_max: usize },
}

/// Runs the training loop, updating `params` in place. `on_checkpoint` is
/// called with the number of completed iterations every
/// `cfg.checkpoint_every` iterations and after the last one.
pub fn train(
    params: &mut ModelParams,
    renderer: &Renderer,
    stream: &mut SampleStream,
    cfg: &TrainConfig,
    mask_cfg: &MaskConfig,
    plan: BatchPlan,
    mut on_checkpoint: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let b = cfg.batch_b;
    let mut mined = match plan {
        BatchPlan::Random => None,
        BatchPlan::Mined { s_max } => Some(MinedBatches::new(b, s_max, cfg.seed ^ 0x6d696e65)?),
    };
    let mut adam = AdamState::new(params);
    let mut rows = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (batch, s) = match &mut mined {
            None => (stream.take_samples(b)?, b),
            Some(m) => m.next_batch(params, renderer, stream)?,
        };
        let pairs: Vec<_> = batch.iter().map(|x| x.pair).collect();
        let mask = negative_mask(&pairs, mask_cfg);
        let (streets, cells) = renderer.render_batch(&batch)?;
        let lr = lr_at(it, cfg);
        let (loss, recall) = match loss_and_grads(
            params,
            &streets,
            &cells,
            &mask,
            cfg.temperature_tau,
            cfg.label_smoothing_eps,
        ) {
            Ok(out) => {
                adam_step(params, &out.grads, &mut adam, lr)?;
                (out.loss, in_batch_recall_at1(&out.similarity, &mask))
            }
            Err(Error::DegenerateBatch(_)) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        rows.push(MetricsRow {
            iteration: it,
            lr,
            loss,
            batch_recall_at1: recall,
            pool_size_s: s,
        });
        let done = it + 1;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.iterations {
            on_checkpoint(done, params)?;
        }
    }
    Ok(rows)
}
