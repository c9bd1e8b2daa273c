//! Held-out evaluation: Monte Carlo predictive log-likelihood with z drawn
//! from the prior, predictive sampling, and the paired one-sided Wilcoxon
//! signed-rank test used to compare two models across seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ad::log_sum_exp;
use crate::data::Dataset;
use crate::encoder::LOG_2PI;
use crate::error::{Error, Result};
use crate::kernels::{layer_predict, layer_sample};
use crate::model::Model;
use crate::rng::{normal_tensor, substream, tag, Rng};
use crate::tensor::Tensor;

/// Rows pushed through the layers at once.
const CHUNK_ROWS: usize = 4096;

/// Largest sample size for which the signed-rank null is enumerated exactly.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestLogLik {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

/// Draws `rows` joint samples of the final-layer function at input `x`
/// (1×D), with z from the prior and every layer sampled.
fn sample_f(model: &Model, x: &Tensor, rows: usize, rng: &mut Rng) -> Result<Tensor> {
    let z = normal_tensor(rng, rows, model.latent_dim());
    let xs = x.gather_rows(&vec![0; rows]);
    let mut h = Tensor::concat_cols(&[&xs, &z]);
    for layer in &model.layers {
        let moments = layer_predict(layer, &h)?;
        let eps = normal_tensor(rng, rows, layer.output_dim());
        h = layer_sample(&moments, &eps);
    }
    Ok(h)
}

fn point_loglik(model: &Model, x: &Tensor, y: &[f64], s: usize, rng: &mut Rng) -> Result<f64> {
    let noise = model.noise_var();
    let mut terms = Vec::with_capacity(s);
    let mut done = 0;
    while done < s {
        let rows = CHUNK_ROWS.min(s - done);
        let f = sample_f(model, x, rows, rng)?;
        for r in 0..rows {
            let ll: f64 =
                f.row(r).iter().zip(y).map(|(fv, yv)| -0.5 * (LOG_2PI + noise.ln() + (yv - fv).powi(2) / noise)).sum();
            terms.push(ll);
        }
        done += rows;
    }
    Ok(log_sum_exp(&terms) - (s as f64).ln())
}

/// log (1/S) Σ_s p(y_n | f_s) for every row of `data`. Point n uses its own
/// stream keyed by its index, so results do not depend on thread count.
pub fn test_loglik(model: &Model, data: &Dataset, s: usize, seed: u64) -> Result<TestLogLik> {
    if s == 0 {
        return Err(Error::InvalidParameter("need at least one predictive sample".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidParameter("empty test set".into()));
    }
    if data.x.cols() != model.input_dim() || data.y.cols() != model.output_dim() {
        return Err(Error::Shape(format!(
            "test data is {}→{}, model is {}→{}",
            data.x.cols(),
            data.y.cols(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    let per_point = (0..data.len())
        .into_par_iter()
        .map(|n| {
            let mut rng = substream(seed, &[tag::PREDICT, n as u64]);
            let x = data.x.gather_rows(&[n]);
            point_loglik(model, &x, data.y.row(n), s, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok(TestLogLik { per_point, mean })
}

/// S×P samples of y at a single input (1×D), observation noise included.
pub fn predict_samples(model: &Model, x: &Tensor, s: usize, seed: u64) -> Result<Tensor> {
    if x.rows() != 1 || x.cols() != model.input_dim() {
        return Err(Error::Shape(format!("expected a 1×{} input, got {:?}", model.input_dim(), x.shape())));
    }
    let mut rng = substream(seed, &[tag::PREDICT, u64::MAX]);
    let f = sample_f(model, x, s, &mut rng)?;
    let eps = normal_tensor(&mut rng, s, model.output_dim());
    let sd = model.noise_var().sqrt();
    Ok(f.zip_map(&eps, |a, e| a + sd * e))
}

/// Midranks of |d| (1-based), ties sharing the average rank.
fn abs_ranks(d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// One-sided signed-rank p-value for H1: the differences are shifted above
/// zero, i.e. P(W⁺ ≥ observed) under the symmetric null. Zero differences
/// are dropped. Exact enumeration for up to 20 nonzero pairs, otherwise the
/// normal approximation with tie and continuity corrections.
pub fn wilcoxon_one_sided(diffs: &[f64]) -> Result<f64> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidParameter("non-finite difference".into()));
    }
    let d: Vec<f64> = diffs.iter().copied().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::Undefined("every paired difference is zero".into()));
    }
    let ranks = abs_ranks(&d);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();

    if n <= WILCOXON_EXACT_MAX {
        // midranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut counts = vec![0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let observed = (2.0 * w_plus).round() as usize;
        let tail: f64 = counts[observed..].iter().sum();
        return Ok(tail / 2f64.powi(n as i32));
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        ties += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = (w_plus - mean - 0.5) / var.sqrt();
    Ok(Normal::standard().sf(z))
}
