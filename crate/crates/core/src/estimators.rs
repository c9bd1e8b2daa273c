//! Gradient estimators for the encoder parameters φ, the full-model gradient
//! used by training, and the empirical check that ∇φ E[Ẑ] vanishes.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::bound::{
    dreg_sum, elbo_node, encode_points, iw_sum, sample_batch_draws, weight_parts, Batch, DensityTerm, Draws,
};
use crate::error::{Error, Result};
use crate::model::{Group, Model};
use crate::rng::{substream, tag, Rng};
use crate::tensor::Tensor;

/// Rows of per-sample work placed on one tape by the batched samplers.
const ROW_BUDGET: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Reg,
    Dreg,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Reg => "reg",
            EstimatorKind::Dreg => "dreg",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reg" => Ok(EstimatorKind::Reg),
            "dreg" => Ok(EstimatorKind::Dreg),
            other => Err(Error::InvalidParameter(format!("unknown estimator '{other}' (expected reg or dreg)"))),
        }
    }
}

/// One draw of a φ-gradient estimator, flattened in encoder weight order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub values: Vec<f64>,
    pub m: usize,
    pub k: usize,
    pub kind: EstimatorKind,
}

/// Scalar whose φ-gradient a sampler returns, per draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// (1/M) Σ_m [logsumexp_k log w − log K].
    Reg,
    /// (1/M) Σ_m Σ_k sg(w̃_k²) log w_k with q's parameters blocked.
    Dreg,
    /// (1/(MK)) Σ_{m,k} exp(log w − c) for a constant c shared by all draws.
    ZHat(DensityTerm),
}

impl From<EstimatorKind> for Objective {
    fn from(kind: EstimatorKind) -> Self {
        match kind {
            EstimatorKind::Reg => Objective::Reg,
            EstimatorKind::Dreg => Objective::Dreg,
        }
    }
}

fn require_learned(model: &Model) -> Result<()> {
    if model.encoder.is_learned() {
        Ok(())
    } else {
        Err(Error::InvalidMode("φ-gradient estimators need a learned encoder".into()))
    }
}

fn flatten(grads: impl IntoIterator<Item = Tensor>) -> Vec<f64> {
    grads.into_iter().flat_map(Tensor::into_vec).collect()
}

fn single_point_grad(model: &Model, x: &Tensor, y: &Tensor, draws: Draws, kind: EstimatorKind) -> Result<GradSample> {
    require_learned(model)?;
    let (m, k) = (draws.m, draws.k);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false, true);
    let (mu, sigma) = encode_points(&mut tape, model, &vars, x, y);
    let parts = weight_parts(&mut tape, model, &vars, x, y, mu, sigma, &[draws])?;
    let total = match kind {
        EstimatorKind::Reg => {
            let lw = parts.log_w(&mut tape, DensityTerm::Full);
            iw_sum(&mut tape, lw, k)
        }
        EstimatorKind::Dreg => {
            let lw = parts.log_w(&mut tape, DensityTerm::PathOnly);
            dreg_sum(&mut tape, lw, k)
        }
    };
    let objective = tape.scale(total, 1.0 / m as f64);
    let grads = tape.backward(objective)?;
    Ok(GradSample { values: flatten(vars.encoder.iter().map(|&v| grads.wrt(v))), m, k, kind })
}

/// REG estimate of ∇φ of the per-point bound for the point (`x`, `y`), both 1×·.
pub fn reg_grad_phi(model: &Model, x: &Tensor, y: &Tensor, m: usize, k: usize, rng: &mut Rng) -> Result<GradSample> {
    require_learned(model)?;
    single_point_grad(model, x, y, Draws::sample(model, m, k, rng), EstimatorKind::Reg)
}

/// DREG estimate for the same quantity as [`reg_grad_phi`].
pub fn dreg_grad_phi(model: &Model, x: &Tensor, y: &Tensor, m: usize, k: usize, rng: &mut Rng) -> Result<GradSample> {
    require_learned(model)?;
    single_point_grad(model, x, y, Draws::sample(model, m, k, rng), EstimatorKind::Dreg)
}

/// Bound value and gradients for every trainable tensor, in slot order.
#[derive(Clone, Debug)]
pub struct FullGrad {
    pub elbo: f64,
    pub grads: Vec<Tensor>,
}

/// Gradient of the minibatch bound with respect to all parameters. With
/// [`EstimatorKind::Dreg`] the encoder block comes from the DREG surrogate
/// on the same draws; all other blocks are unchanged.
pub fn full_grad(
    model: &Model,
    batch: Batch<'_>,
    k: usize,
    m: usize,
    rng: &mut Rng,
    kind: EstimatorKind,
) -> Result<FullGrad> {
    let b = batch.x.rows();
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let draws = sample_batch_draws(model, b, m, k, rng);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true, true);
    let (elbo, parts) = elbo_node(&mut tape, model, &vars, batch, &draws)?;
    let g = tape.backward(elbo)?;
    let mut grads: Vec<Tensor> = vars.all.iter().map(|&v| g.wrt(v)).collect();
    if kind == EstimatorKind::Dreg && model.encoder.is_learned() {
        let lw = parts.log_w(&mut tape, DensityTerm::PathOnly);
        let s = dreg_sum(&mut tape, lw, k);
        let s = tape.scale(s, batch.n_total as f64 / (b as f64 * m as f64));
        let g2 = tape.backward(s)?;
        for (slot, (grad, &v)) in model.slots().iter().zip(grads.iter_mut().zip(&vars.all)) {
            if slot.group == Group::Encoder {
                *grad = g2.wrt(v);
            }
        }
    }
    Ok(FullGrad { elbo: tape.value(elbo).item(), grads })
}

/// Draws for sample `q` of a sampler seeded with `seed`.
pub fn draws_for_sample(model: &Model, m: usize, k: usize, seed: u64, q: usize) -> Draws {
    Draws::sample(model, m, k, &mut substream(seed, &[tag::GRAD_SAMPLE, q as u64]))
}

/// Per-draw gradients of `objective` with respect to the latent mean and
/// scale of one point, each Q×D̃, holding q(z) at (`mu`, `sigma`) (1×D̃).
///
/// Draws are evaluated many to a tape, each with its own copy of (mu, sigma),
/// so one reverse sweep yields every draw's adjoints.
#[allow(clippy::too_many_arguments)]
pub fn sample_latent_gradients(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    objective: Objective,
    q: usize,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    if q == 0 || m == 0 || k == 0 {
        return Err(Error::InvalidParameter(format!("Q = {q}, M = {m}, K = {k} must all be at least 1")));
    }
    let d = mu.cols();
    let per_tape = (ROW_BUDGET / (m * k)).max(1);
    let starts: Vec<usize> = (0..q).step_by(per_tape).collect();
    let chunks: Vec<(Tensor, Tensor, f64)> = starts
        .par_iter()
        .map(|&start| {
            let n = per_tape.min(q - start);
            let draws: Vec<Draws> = (start..start + n).map(|i| draws_for_sample(model, m, k, seed, i)).collect();
            chunk_gradients(model, x, y, mu, sigma, objective, &draws)
        })
        .collect::<Result<_>>()?;

    // Rescale every chunk to the largest shift so all draws share one constant.
    let shift = chunks.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let mut g_mu = Tensor::zeros(q, d);
    let mut g_sigma = Tensor::zeros(q, d);
    let mut row = 0;
    for (gm, gs, c) in chunks {
        let scale = if matches!(objective, Objective::ZHat(_)) { (c - shift).exp() } else { 1.0 };
        for i in 0..gm.rows() {
            for j in 0..d {
                g_mu.set(row, j, gm.get(i, j) * scale);
                g_sigma.set(row, j, gs.get(i, j) * scale);
            }
            row += 1;
        }
    }
    Ok((g_mu, g_sigma))
}

fn chunk_gradients(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    objective: Objective,
    draws: &[Draws],
) -> Result<(Tensor, Tensor, f64)> {
    let n = draws.len();
    let (m, k) = (draws[0].m, draws[0].k);
    let rep = vec![0usize; n];
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false, false);
    let mu_v = tape.param(mu.gather_rows(&rep));
    let sigma_v = tape.param(sigma.gather_rows(&rep));
    let parts =
        weight_parts(&mut tape, model, &vars, &x.gather_rows(&rep), &y.gather_rows(&rep), mu_v, sigma_v, draws)?;
    let mut shift = 0.0;
    let total = match objective {
        Objective::Reg => {
            let lw = parts.log_w(&mut tape, DensityTerm::Full);
            iw_sum(&mut tape, lw, k)
        }
        Objective::Dreg => {
            let lw = parts.log_w(&mut tape, DensityTerm::PathOnly);
            dreg_sum(&mut tape, lw, k)
        }
        Objective::ZHat(density) => {
            let lw = parts.log_w(&mut tape, density);
            shift = tape.value(lw).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e = tape.offset(lw, -shift);
            let e = tape.exp(e);
            let s = tape.sum(e);
            tape.scale(s, 1.0 / k as f64)
        }
    };
    let objective = tape.scale(total, 1.0 / m as f64);
    let g = tape.backward(objective)?;
    Ok((g.wrt(mu_v), g.wrt(sigma_v), shift))
}

/// Rows of ∂mu/∂φ and ∂sigma/∂φ (D̃ each, length |φ|) with the values of mu and sigma.
pub type EncoderJacobian = (Vec<Vec<f64>>, Vec<Vec<f64>>, Tensor, Tensor);

/// Jacobians of the encoder's (mu, sigma) at one point.
pub fn encoder_jacobian(model: &Model, x: &Tensor, y: &Tensor) -> Result<EncoderJacobian> {
    require_learned(model)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false, true);
    let (mu, sigma) = encode_points(&mut tape, model, &vars, x, y);
    let d = model.latent_dim();
    let mut rows = |out: Var| -> Result<Vec<Vec<f64>>> {
        (0..d)
            .map(|j| {
                let s = tape.slice(out, 0, j, 1, 1);
                let g = tape.backward(s)?;
                Ok(flatten(vars.encoder.iter().map(|&v| g.wrt(v))))
            })
            .collect()
    };
    let j_mu = rows(mu)?;
    let j_sigma = rows(sigma)?;
    Ok((j_mu, j_sigma, tape.value(mu).clone(), tape.value(sigma).clone()))
}

/// Q×|φ| matrix of per-draw φ-gradients of `objective` at one point; row q
/// uses the substream (seed, q).
#[allow(clippy::too_many_arguments)]
pub fn sample_phi_gradients(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    objective: Objective,
    q: usize,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<Tensor> {
    let (j_mu, j_sigma, mu, sigma) = encoder_jacobian(model, x, y)?;
    let (g_mu, g_sigma) = sample_latent_gradients(model, x, y, &mu, &sigma, objective, q, m, k, seed)?;
    let p = model.encoder.num_params();
    let mut out = Tensor::zeros(q, p);
    for i in 0..q {
        let row = &mut out.data_mut()[i * p..(i + 1) * p];
        for j in 0..mu.cols() {
            let (a, b) = (g_mu.get(i, j), g_sigma.get(i, j));
            for ((r, jm), js) in row.iter_mut().zip(&j_mu[j]).zip(&j_sigma[j]) {
                *r += a * jm + b * js;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition1Report {
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub passed: bool,
    /// Components with |mean| > 4 SE.
    pub violations: usize,
}

/// Tests ∇φ E[Ẑ] = 0 at one point from Q draws of ∇φ Ẑ with M = 1.
pub fn condition1_check(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    q: usize,
    k: usize,
    seed: u64,
) -> Result<Condition1Report> {
    condition1_check_with(model, x, y, q, k, seed, DensityTerm::Full)
}

/// [`condition1_check`] with a chosen treatment of the density term; the
/// `Dropped` form serves as a negative control.
pub fn condition1_check_with(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    q: usize,
    k: usize,
    seed: u64,
    density: DensityTerm,
) -> Result<Condition1Report> {
    require_learned(model)?;
    if q < 2 {
        return Err(Error::InvalidParameter(format!("Q = {q} must be at least 2")));
    }
    let samples = sample_phi_gradients(model, x, y, Objective::ZHat(density), q, 1, k, seed)?;
    let (mean, sd) = column_moments(&samples);
    let standard_error: Vec<f64> = sd.iter().map(|s| s / (q as f64).sqrt()).collect();
    let violations = mean.iter().zip(&standard_error).filter(|(m, se)| m.abs() > 4.0 * **se).count();
    Ok(Condition1Report { mean, standard_error, passed: violations == 0, violations })
}

/// Column means and sample standard deviations (ddof 1).
pub fn column_moments(samples: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (q, p) = samples.shape();
    let mut mean = vec![0.0; p];
    for i in 0..q {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= q as f64);
    let mut var = vec![0.0; p];
    for i in 0..q {
        for ((s, v), m) in var.iter_mut().zip(samples.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let denom = (q.max(2) - 1) as f64;
    (mean, var.into_iter().map(|s| (s / denom).sqrt()).collect())
}
