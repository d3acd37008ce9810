//! Symmetric decoupled contrastive loss with label smoothing.
//!
//! For one direction and row `i`, with logits `z = S[i][.] / tau` and the
//! active negatives `A` taken from the mask:
//!
//! `L_i = -((1 - eps) z_i + eps / |A| * sum_A z_j) + log sum_A exp(z_j)`
//!
//! The positive never enters the log-partition. The batch loss is the mean
//! over rows of both directions.

use ndarray::Array2;

use crate::dataset::BatchMask;
use crate::error::{Error, Result};
use crate::model::Embedding;

const UNIT_TOL: f64 = 1e-4;

/// `S[i][j] = q_i . r_j`. Inputs must be unit vectors.
pub fn similarity_matrix(street: &[Embedding], cells: &[Embedding]) -> Result<Array2<f64>> {
    if street.len() != cells.len() {
        return Err(Error::Validation(format!(
            "{} street embeddings but {} cell embeddings",
            street.len(),
            cells.len()
        )));
    }
    for (side, set) in [("street", street), ("cell", cells)] {
        for (k, e) in set.iter().enumerate() {
            if (e.norm() - 1.0).abs() > UNIT_TOL {
                return Err(Error::Validation(format!(
                    "{side} embedding {k} has norm {}",
                    e.norm()
                )));
            }
        }
    }
    let b = street.len();
    let dim = street.first().map_or(0, |e| e.len());
    if street.iter().chain(cells).any(|e| e.len() != dim) {
        return Err(Error::Validation("embedding dimensions differ".into()));
    }
    Ok(Array2::from_shape_fn((b, b), |(i, j)| street[i].dot(&cells[j])))
}

fn check(s: &Array2<f64>, mask: &BatchMask, tau: f64, eps: f64) -> Result<()> {
    let b = s.nrows();
    if s.ncols() != b || mask.size() != b {
        return Err(Error::Shape(format!(
            "similarity {}x{} with mask of size {}",
            s.nrows(),
            s.ncols(),
            mask.size()
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter(format!("temperature {tau}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Parameter(format!("label smoothing {eps}")));
    }
    Ok(())
}

/// Loss of one direction. `at(i, j)` reads the similarity and `active(i, j)`
/// the mask in that direction. Adds `d L_sum / d z` into `grad` when given.
fn directional(
    b: usize,
    at: impl Fn(usize, usize) -> f64,
    active: impl Fn(usize, usize) -> bool,
    tau: f64,
    eps: f64,
    direction: &str,
    mut grad: Option<&mut dyn FnMut(usize, usize, f64)>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut idx = Vec::with_capacity(b);
    let mut z = Vec::with_capacity(b);
    for i in 0..b {
        idx.clear();
        z.clear();
        for j in 0..b {
            if active(i, j) {
                idx.push(j);
                z.push(at(i, j) / tau);
            }
        }
        if idx.is_empty() {
            return Err(Error::DegenerateBatch(format!(
                "{direction} row {i} has no active negatives"
            )));
        }
        let n = idx.len() as f64;
        let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let zi = at(i, i) / tau;
        let mean_neg = z.iter().sum::<f64>() / n;
        total += -((1.0 - eps) * zi + eps * mean_neg) + lse;
        if let Some(g) = grad.as_deref_mut() {
            g(i, i, -(1.0 - eps));
            for (&j, &zj) in idx.iter().zip(&z) {
                g(i, j, (zj - max).exp() / sum_exp - eps / n);
            }
        }
    }
    Ok(total)
}

pub fn dcl_loss(s: &Array2<f64>, mask: &BatchMask, tau: f64, eps: f64) -> Result<f64> {
    check(s, mask, tau, eps)?;
    let b = s.nrows();
    let fwd = directional(b, |i, j| s[[i, j]], |i, j| mask.get(i, j), tau, eps, "street->cell", None)?;
    let bwd = directional(b, |i, j| s[[j, i]], |i, j| mask.get(j, i), tau, eps, "cell->street", None)?;
    Ok((fwd + bwd) / (2 * b) as f64)
}

/// Loss and `d loss / d S`.
pub fn dcl_loss_with_grad(
    s: &Array2<f64>,
    mask: &BatchMask,
    tau: f64,
    eps: f64,
) -> Result<(f64, Array2<f64>)> {
    check(s, mask, tau, eps)?;
    let b = s.nrows();
    let scale = 1.0 / (tau * (2 * b) as f64);
    let mut g = Array2::zeros((b, b));
    let fwd = directional(
        b,
        |i, j| s[[i, j]],
        |i, j| mask.get(i, j),
        tau,
        eps,
        "street->cell",
        Some(&mut |i, j, v| g[[i, j]] += v * scale),
    )?;
    let bwd = directional(
        b,
        |i, j| s[[j, i]],
        |i, j| mask.get(j, i),
        tau,
        eps,
        "cell->street",
        Some(&mut |i, j, v| g[[j, i]] += v * scale),
    )?;
    Ok(((fwd + bwd) / (2 * b) as f64, g))
}

/// Fraction of rows whose positive beats every active negative.
pub fn in_batch_recall_at1(s: &Array2<f64>, mask: &BatchMask) -> f64 {
    let b = s.nrows();
    if b == 0 {
        return 0.0;
    }
    let hits = (0..b)
        .filter(|&i| (0..b).all(|j| !mask.get(i, j) || s[[i, j]] < s[[i, i]]))
        .count();
    hits as f64 / b as f64
}
