//! The partially collapsed importance-weighted bound.
//!
//! For a point n, importance sample k and outer replicate m,
//! log w = log F + log p(z) − log q_φ(z), where z is drawn from the encoder,
//! every layer but the last is sampled with fresh noise, and log F is the
//! Gaussian expected log-likelihood at the last layer's predictive moments.
//!
//! Rows of every per-sample tensor are ordered (point, m, k) with k fastest.

use std::f64::consts::PI;

use crate::ad::{Axis, Tape, Var};
use crate::encoder::{encode_node, log_density_node, log_std_normal_node};
use crate::error::{Error, Result};
use crate::kernels::{kl_node, layer_sample_node, positive_node, GpLayer};
use crate::model::{Model, ModelVars};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

/// Σ_p [−½ log(2πσ²) − ((y_p − mean_p)² + var_p) / (2σ²)].
pub fn expected_loglik(y: &[f64], mean: &[f64], var: &[f64], noise_var: f64) -> Result<f64> {
    if !(noise_var > 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance {noise_var} must be positive")));
    }
    if y.len() != mean.len() || y.len() != var.len() {
        return Err(Error::Shape("expected_loglik arguments differ in length".into()));
    }
    let c = -0.5 * (2.0 * PI * noise_var).ln();
    Ok(y.iter().zip(mean).zip(var).map(|((y, m), v)| c - ((y - m).powi(2) + v) / (2.0 * noise_var)).sum())
}

/// Row-wise [`expected_loglik`] on the tape; returns R×1.
pub fn expected_loglik_node(tape: &mut Tape, y: Var, mean: Var, var: Var, noise_var: Var) -> Var {
    let (r, p) = tape.shape(y);
    let d = tape.sub(y, mean);
    let d2 = tape.square(d);
    let num = tape.add(d2, var);
    let s = tape.broadcast(noise_var, r, p);
    let q = tape.div(num, s);
    let q = tape.sum_axis(q, Axis::Cols);
    let q = tape.scale(q, -0.5);
    let logs = tape.log(noise_var);
    let logs = tape.scale(logs, -0.5 * p as f64);
    let logs = tape.offset(logs, -0.5 * p as f64 * (2.0 * PI).ln());
    let logs = tape.broadcast(logs, r, 1);
    tape.add(q, logs)
}

/// Standard-normal draws for one point: M·K latent draws and, per inner
/// layer, M·K rows of layer noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub m: usize,
    pub k: usize,
    pub z: Tensor,
    pub layers: Vec<Tensor>,
}

impl Draws {
    pub fn sample(model: &Model, m: usize, k: usize, rng: &mut Rng) -> Draws {
        let rows = m * k;
        let z = normal_tensor(rng, rows, model.latent_dim());
        let inner = &model.layers[..model.layers.len() - 1];
        let layers = inner.iter().map(|l| normal_tensor(rng, rows, l.output_dim())).collect();
        Draws { m, k, z, layers }
    }

    pub fn rows(&self) -> usize {
        self.m * self.k
    }
}

/// How log q_φ(z) enters the log weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityTerm {
    /// Differentiated through both z and its parameters.
    Full,
    /// Parameters of q are blocked; only the path through z differentiates.
    PathOnly,
    /// Omitted altogether (w = F·p(z)).
    Dropped,
}

/// Tape nodes shared by every form of the log weight.
#[derive(Clone, Copy, Debug)]
pub struct WeightParts {
    pub log_f: Var,
    pub log_p: Var,
    pub z: Var,
    pub mu: Var,
    pub sigma: Var,
}

impl WeightParts {
    pub fn log_w(&self, tape: &mut Tape, density: DensityTerm) -> Var {
        let ratio = match density {
            DensityTerm::Dropped => self.log_p,
            DensityTerm::Full => {
                let lq = log_density_node(tape, self.mu, self.sigma, self.z);
                tape.sub(self.log_p, lq)
            }
            DensityTerm::PathOnly => {
                let mu = tape.stop_gradient(self.mu);
                let sigma = tape.stop_gradient(self.sigma);
                let lq = log_density_node(tape, mu, sigma, self.z);
                tape.sub(self.log_p, lq)
            }
        };
        tape.add(self.log_f, ratio)
    }
}

/// Builds log F and log p(z) for every sample of the points in `x`, `y`.
///
/// `mu` and `sigma` (B×D̃) parameterize q(z) for each of the B points, which
/// lets callers supply either encoder outputs or free per-point leaves.
#[allow(clippy::too_many_arguments)]
pub fn weight_parts(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    x: &Tensor,
    y: &Tensor,
    mu: Var,
    sigma: Var,
    draws: &[Draws],
) -> Result<WeightParts> {
    let b = x.rows();
    if b != draws.len() || y.rows() != b {
        return Err(Error::Shape(format!("{} inputs, {} targets, {} draw sets", b, y.rows(), draws.len())));
    }
    let index: Vec<usize> = draws.iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, d.rows())).collect();
    let x_rows = tape.constant(x.gather_rows(&index));
    let y_rows = tape.constant(y.gather_rows(&index));
    let mu_rows = tape.gather_rows(mu, &index);
    let sigma_rows = tape.gather_rows(sigma, &index);
    let eps_z = tape.constant(Tensor::concat_rows(&draws.iter().map(|d| &d.z).collect::<Vec<_>>()));
    let noise = tape.mul(eps_z, sigma_rows);
    let z = tape.add(mu_rows, noise);

    let mut h = tape.concat_cols(&[x_rows, z]);
    let last = model.layers.len() - 1;
    for (l, lv) in vars.layers.iter().enumerate() {
        let out = GpLayer::predict_node(lv, tape, h)?;
        if l == last {
            let noise_var = positive_node(tape, vars.raw_noise);
            let log_f = expected_loglik_node(tape, y_rows, out.mean, out.var, noise_var);
            let log_p = log_std_normal_node(tape, z);
            return Ok(WeightParts { log_f, log_p, z, mu: mu_rows, sigma: sigma_rows });
        }
        let eps = tape.constant(Tensor::concat_rows(&draws.iter().map(|d| &d.layers[l]).collect::<Vec<_>>()));
        h = layer_sample_node(tape, out.mean, out.var, eps);
    }
    unreachable!("model has at least one layer")
}

/// Rows [x_n, y_n] fed to the encoder.
pub fn encoder_input(x: &Tensor, y: &Tensor) -> Tensor {
    Tensor::concat_cols(&[x, y])
}

/// Encoder outputs for the rows of (`x`, `y`).
pub fn encode_points(tape: &mut Tape, model: &Model, vars: &ModelVars, x: &Tensor, y: &Tensor) -> (Var, Var) {
    let xy = tape.constant(encoder_input(x, y));
    encode_node(tape, &model.encoder, &vars.encoder, xy)
}

/// Σ over (point, m) groups of [logsumexp_k log w − log K]; divide by M for the per-point average.
pub fn iw_sum(tape: &mut Tape, log_w: Var, k: usize) -> Var {
    let r = tape.shape(log_w).0;
    let grouped = tape.reshape(log_w, r / k, k);
    let lse = tape.log_sum_exp(grouped, Axis::Cols);
    let lse = tape.offset(lse, -(k as f64).ln());
    tape.sum(lse)
}

/// Σ over groups of Σ_k sg(w̃_k²) · log w_k, with w̃ the per-group softmax of
/// the current log-weight values.
pub fn dreg_sum(tape: &mut Tape, log_w: Var, k: usize) -> Var {
    let coeff = squared_normalized_weights(tape.value(log_w), k);
    let c = tape.constant(coeff);
    let p = tape.mul(c, log_w);
    tape.sum(p)
}

/// Squared self-normalized weights per group of `k` consecutive rows.
pub fn squared_normalized_weights(log_w: &Tensor, k: usize) -> Tensor {
    let mut out = Tensor::zeros(log_w.rows(), 1);
    for (g, chunk) in log_w.data().chunks(k).enumerate() {
        let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = chunk.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        for (j, v) in e.iter().enumerate() {
            out.set(g * k + j, 0, (v / total).powi(2));
        }
    }
    out
}

pub fn kl_total_node(tape: &mut Tape, vars: &ModelVars) -> Var {
    let mut total = tape.scalar(0.0);
    for lv in &vars.layers {
        let kl = kl_node(tape, lv.q_mean, &lv.q_sqrt);
        total = tape.add(total, kl);
    }
    total
}

/// A minibatch together with the size of the dataset it was drawn from.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub n_total: usize,
}

/// Bound estimate on the tape, returned with the weight parts for reuse.
pub fn elbo_node(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    batch: Batch<'_>,
    draws: &[Draws],
) -> Result<(Var, WeightParts)> {
    let b = batch.x.rows();
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let (m, k) = (draws[0].m, draws[0].k);
    let (mu, sigma) = encode_points(tape, model, vars, batch.x, batch.y);
    let parts = weight_parts(tape, model, vars, batch.x, batch.y, mu, sigma, draws)?;
    let log_w = parts.log_w(tape, DensityTerm::Full);
    let data = iw_sum(tape, log_w, k);
    let data = tape.scale(data, batch.n_total as f64 / (b as f64 * m as f64));
    let kl = kl_total_node(tape, vars);
    Ok((tape.sub(data, kl), parts))
}

/// Draws for every point of a batch, taken in point order from `rng`.
pub fn sample_batch_draws(model: &Model, points: usize, m: usize, k: usize, rng: &mut Rng) -> Vec<Draws> {
    (0..points).map(|_| Draws::sample(model, m, k, rng)).collect()
}

/// Monte Carlo estimate of the bound on a minibatch.
pub fn iwvi_elbo(model: &Model, batch: Batch<'_>, k: usize, m: usize, rng: &mut Rng) -> Result<f64> {
    if k == 0 || m == 0 {
        return Err(Error::InvalidParameter(format!("K = {k} and M = {m} must be at least 1")));
    }
    if batch.x.rows() == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let draws = sample_batch_draws(model, batch.x.rows(), m, k, rng);
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false, false);
    let (elbo, _) = elbo_node(&mut tape, model, &vars, batch, &draws)?;
    Ok(tape.value(elbo).item())
}

/// Log weights (M·K per point, rows ordered (point, m, k)) without gradients.
pub fn log_weights(model: &Model, x: &Tensor, y: &Tensor, draws: &[Draws], density: DensityTerm) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false, false);
    let (mu, sigma) = encode_points(&mut tape, model, &vars, x, y);
    let parts = weight_parts(&mut tape, model, &vars, x, y, mu, sigma, draws)?;
    let lw = parts.log_w(&mut tape, density);
    Ok(tape.value(lw).clone())
}
