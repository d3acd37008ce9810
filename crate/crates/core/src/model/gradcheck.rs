//! Central finite-difference check of the full model + loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, init_params, loss_and_grads, ModelConfig, ModelParams};
use crate::dataset::BatchMask;
use crate::error::Result;
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub batch: usize,
    pub step: f64,
    pub tau: f64,
    pub eps: f64,
}

impl Default for GradcheckConfig {
    /// Small enough to difference every parameter entry.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                street_image_size: 16,
                aerial_image_size: 16,
                patch_size: 8,
                token_dim: 8,
                heads: 2,
                embed_dim: 8,
                n_lods: 2,
                lod_embedding: true,
            },
            batch: 3,
            step: 1e-4,
            tau: 1.0 / 36.0,
            eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: &'static str,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random_image<R: Rng>(size: usize, rng: &mut R) -> Image {
    let data = (0..size * size * 3).map(|_| rng.random::<f64>()).collect();
    Image::from_data(size, size, data).expect("values in [0, 1)")
}

/// Random batch for a config: street images, LOD images, and a mask with
/// one extra negative dropped so masking is exercised.
pub fn random_batch(
    cfg: &ModelConfig,
    b: usize,
    seed: u64,
) -> (Vec<Image>, Vec<Vec<Image>>, BatchMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streets = (0..b)
        .map(|_| random_image(cfg.street_image_size, &mut rng))
        .collect();
    let cells = (0..b)
        .map(|_| {
            (0..cfg.n_lods)
                .map(|_| random_image(cfg.aerial_image_size, &mut rng))
                .collect()
        })
        .collect();
    let mut mask = BatchMask::full(b);
    if b >= 3 {
        mask.set(0, 1, false);
    }
    (streets, cells, mask)
}

/// Initialized parameters with every tensor (including the zero-initialized
/// ones) perturbed, so no gradient is trivially zero.
pub fn perturbed_params(cfg: ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut params = init_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (_, mut t) in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    Ok(params)
}

/// Differences every parameter entry.
pub fn gradcheck(seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut params = perturbed_params(cfg.model, seed)?;
    let (streets, cells, mask) = random_batch(&cfg.model, cfg.batch, seed.wrapping_add(2));
    let analytic = loss_and_grads(&params, &streets, &cells, &mask, cfg.tau, cfg.eps)?.grads;
    let loss = |p: &ModelParams| batch_loss(p, &streets, &cells, &mask, cfg.tau, cfg.eps);

    let names: Vec<(&'static str, usize)> = params.tensors().iter().map(|(n, t)| (*n, t.len())).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let grad: Vec<f64> = analytic.tensors()[ti].1.iter().copied().collect();
        let mut worst_err = 0.0f64;
        let mut worst = (0.0, 0.0);
        for k in 0..len {
            let original = entry(&mut params, ti, k, None);
            let mut at = |x: f64| -> Result<f64> {
                entry(&mut params, ti, k, Some(x));
                loss(&params)
            };
            let h = cfg.step;
            // Fourth-order central stencil.
            let numeric = (8.0 * (at(original + h)? - at(original - h)?)
                - (at(original + 2.0 * h)? - at(original - 2.0 * h)?))
                / (12.0 * h);
            entry(&mut params, ti, k, Some(original));
            let err = relative_error(grad[k], numeric);
            if err > worst_err {
                worst_err = err;
                worst = (grad[k], numeric);
            }
        }
        tensors.push(TensorCheck {
            name,
            entries: len,
            max_rel_error: worst_err,
            worst,
        });
    }
    Ok(GradcheckReport { seed, tensors })
}

/// Reads entry `k` of tensor `ti`, optionally writing `value` first.
fn entry(params: &mut ModelParams, ti: usize, k: usize, value: Option<f64>) -> f64 {
    let mut all = params.tensors_mut();
    let slot = &mut all[ti].1.as_slice_mut().expect("tensors are contiguous")[k];
    if let Some(v) = value {
        *slot = v;
    }
    *slot
}
