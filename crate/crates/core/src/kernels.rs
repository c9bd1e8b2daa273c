//! RBF-ARD kernel and the sparse variational GP layer.
//!
//! Each layer carries `W` independent GPs sharing one kernel and one set of
//! inducing inputs. The inducing posterior is whitened: u_w = L_zz v_w with
//! q(v_w) = N(m_w, L_w L_wᵀ), so the KL term is taken against N(0, I).
//! A fixed linear projection of the layer input is added to the GP outputs
//! as the mean function; it is never trained.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::ad::{self, Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Lower clip applied after the softplus of every positive parameter.
pub const MIN_POSITIVE: f64 = 1e-6;

/// Jitter added to K_zz, escalated in order until the Cholesky succeeds.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

pub fn positive(raw: f64) -> f64 {
    ad::softplus(raw).max(MIN_POSITIVE)
}

/// Raw value whose constrained value is `value` (inverse softplus).
pub fn inverse_positive(value: f64) -> f64 {
    assert!(value > 0.0, "inverse_positive of non-positive {value}");
    value + (-(-value).exp_m1()).ln()
}

pub fn positive_node(tape: &mut Tape, raw: Var) -> Var {
    let s = tape.softplus(raw);
    tape.clamp_min(s, MIN_POSITIVE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfArdParams {
    /// 1×D unconstrained lengthscales.
    pub raw_lengthscales: Tensor,
    /// 1×1 unconstrained signal variance.
    pub raw_variance: Tensor,
}

impl RbfArdParams {
    pub fn new(lengthscales: &[f64], variance: f64) -> Self {
        RbfArdParams {
            raw_lengthscales: Tensor::row_vector(
                &lengthscales.iter().map(|&l| inverse_positive(l)).collect::<Vec<_>>(),
            ),
            raw_variance: Tensor::scalar(inverse_positive(variance)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.raw_lengthscales.cols()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.raw_lengthscales.data().iter().map(|&r| positive(r)).collect()
    }

    pub fn variance(&self) -> f64 {
        positive(self.raw_variance.item())
    }
}

/// Gram matrix k(x, x′) = s² exp(−½ Σ_d (x_d − x′_d)² / ℓ_d²).
pub fn rbf_ard(x1: &Tensor, x2: &Tensor, params: &RbfArdParams) -> Result<Tensor> {
    let d = params.input_dim();
    if x1.cols() != d || x2.cols() != d {
        return Err(Error::Shape(format!(
            "rbf_ard inputs have {} and {} columns, kernel has {d} lengthscales",
            x1.cols(),
            x2.cols()
        )));
    }
    let ls = params.lengthscales();
    let var = params.variance();
    let mut k = Tensor::zeros(x1.rows(), x2.rows());
    for i in 0..x1.rows() {
        for j in 0..x2.rows() {
            let r2: f64 = x1.row(i).iter().zip(x2.row(j)).zip(&ls).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
            k.set(i, j, var * (-0.5 * r2).exp());
        }
    }
    Ok(k)
}

/// Tape version of [`rbf_ard`] taking constrained lengthscales (1×D) and variance (1×1).
pub fn rbf_node(tape: &mut Tape, x1: Var, x2: Var, lengthscales: Var, variance: Var) -> Var {
    let (n1, d) = tape.shape(x1);
    let n2 = tape.shape(x2).0;
    let l1 = tape.broadcast(lengthscales, n1, d);
    let a = tape.div(x1, l1);
    let l2 = tape.broadcast(lengthscales, n2, d);
    let b = tape.div(x2, l2);
    let a2 = tape.square(a);
    let a2 = tape.sum_axis(a2, Axis::Cols);
    let a2 = tape.broadcast(a2, n1, n2);
    let b2 = tape.square(b);
    let b2 = tape.sum_axis(b2, Axis::Cols);
    let b2 = tape.transpose(b2);
    let b2 = tape.broadcast(b2, n1, n2);
    let bt = tape.transpose(b);
    let cross = tape.matmul(a, bt);
    let cross = tape.scale(cross, -2.0);
    let r2 = tape.add(a2, b2);
    let r2 = tape.add(r2, cross);
    let e = tape.scale(r2, -0.5);
    let e = tape.exp(e);
    let s = tape.broadcast(variance, n1, n2);
    tape.mul(e, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpLayer {
    /// M×D_in inducing inputs.
    pub inducing: Tensor,
    /// M×W whitened posterior means.
    pub q_mean: Tensor,
    /// W lower-triangular M×M whitened posterior square roots.
    pub q_sqrt: Vec<Tensor>,
    pub kernel: RbfArdParams,
    /// D_in×W mean-function projection; frozen.
    pub mean_projection: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMoments {
    pub mean: Tensor,
    pub var: Tensor,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub inducing: Var,
    pub raw_lengthscales: Var,
    pub raw_variance: Var,
    pub q_mean: Var,
    pub q_sqrt: Vec<Var>,
    pub mean_projection: Var,
}

/// Output of [`GpLayer::predict_node`].
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub mean: Var,
    pub var: Var,
    /// Variance before clamping at zero.
    pub raw_var: Var,
    pub jitter: f64,
}

impl GpLayer {
    /// Layer with the whitened prior as posterior, scaled by `sqrt_scale`.
    pub fn new(inducing: Tensor, kernel: RbfArdParams, mean_projection: Tensor, sqrt_scale: f64) -> Self {
        let m = inducing.rows();
        let w = mean_projection.cols();
        assert_eq!(inducing.cols(), kernel.input_dim());
        assert_eq!(mean_projection.rows(), kernel.input_dim());
        GpLayer {
            inducing,
            q_mean: Tensor::zeros(m, w),
            q_sqrt: (0..w).map(|_| Tensor::eye(m).scaled(sqrt_scale)).collect(),
            kernel,
            mean_projection,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.q_mean.cols()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn register(&self, tape: &mut Tape, hyper: bool, variational: bool) -> LayerVars {
        LayerVars {
            inducing: tape.leaf(self.inducing.clone(), hyper),
            raw_lengthscales: tape.leaf(self.kernel.raw_lengthscales.clone(), hyper),
            raw_variance: tape.leaf(self.kernel.raw_variance.clone(), hyper),
            q_mean: tape.leaf(self.q_mean.clone(), variational),
            q_sqrt: self.q_sqrt.iter().map(|s| tape.leaf(s.clone(), variational)).collect(),
            mean_projection: tape.constant(self.mean_projection.clone()),
        }
    }

    /// Whitened sparse-GP marginals at the rows of `inputs` (R×D_in).
    ///
    /// With A = K_xz L_zz⁻ᵀ: mean_w = A m_w + inputs·P_w and
    /// var_w = diag K_xx − rowsum(A∘A) + rowsum((A L_w)∘(A L_w)).
    pub fn predict_node(vars: &LayerVars, tape: &mut Tape, inputs: Var) -> Result<LayerOutput> {
        let r = tape.shape(inputs).0;
        let m = tape.shape(vars.inducing).0;
        let ls = positive_node(tape, vars.raw_lengthscales);
        let s = positive_node(tape, vars.raw_variance);

        let kzz = rbf_node(tape, vars.inducing, vars.inducing, ls, s);
        let mut chol = None;
        for &jitter in &JITTER_LADDER {
            let j = tape.constant(Tensor::eye(m).scaled(jitter));
            let kj = tape.add(kzz, j);
            match tape.cholesky(kj) {
                Ok(l) => {
                    chol = Some((l, jitter));
                    break;
                }
                Err(Error::NotPositiveDefinite { pivot }) => {
                    debug!("K_zz Cholesky failed at pivot {pivot} with jitter {jitter:e}; escalating");
                }
                Err(e) => return Err(e),
            }
        }
        let Some((lzz, jitter)) = chol else {
            let kv = tape.value(kzz).add_diag(JITTER_LADDER[JITTER_LADDER.len() - 1]);
            let pivot = match tensor::cholesky(&kv) {
                Err(Error::NotPositiveDefinite { pivot }) => pivot,
                _ => 0,
            };
            return Err(Error::NotPositiveDefinite { pivot });
        };

        let kzx = rbf_node(tape, vars.inducing, inputs, ls, s);
        let at = tape.tri_solve(lzz, kzx, false); // M×R
        let a = tape.transpose(at);
        let gp_mean = tape.matmul(a, vars.q_mean);
        let lin = tape.matmul(inputs, vars.mean_projection);
        let mean = tape.add(gp_mean, lin);

        let at2 = tape.square(at);
        let at2 = tape.sum_axis(at2, Axis::Rows); // 1×R
        let sr = tape.broadcast(s, 1, r);
        let base = tape.sub(sr, at2);
        let mut cols = Vec::with_capacity(vars.q_sqrt.len());
        for &q in &vars.q_sqrt {
            let lw = tape.tril(q);
            let lwt = tape.transpose(lw);
            let b = tape.matmul(lwt, at); // (A L_w)ᵀ
            let b2 = tape.square(b);
            let b2 = tape.sum_axis(b2, Axis::Rows);
            let v = tape.add(base, b2);
            cols.push(tape.transpose(v));
        }
        let raw_var = tape.concat_cols(&cols);
        let var = tape.clamp_min(raw_var, 0.0);
        Ok(LayerOutput { mean, var, raw_var, jitter })
    }
}

/// Predictive marginals of `layer` at `inputs`, evaluated without gradients.
pub fn layer_predict(layer: &GpLayer, inputs: &Tensor) -> Result<PredictiveMoments> {
    if inputs.cols() != layer.input_dim() {
        return Err(Error::Shape(format!("layer expects {} input columns, got {}", layer.input_dim(), inputs.cols())));
    }
    let mut tape = Tape::new();
    let vars = layer.register(&mut tape, false, false);
    let x = tape.constant(inputs.clone());
    let out = GpLayer::predict_node(&vars, &mut tape, x)?;
    Ok(PredictiveMoments { mean: tape.value(out.mean).clone(), var: tape.value(out.var).clone() })
}

/// mean + eps ⊙ √var.
pub fn layer_sample(moments: &PredictiveMoments, eps: &Tensor) -> Tensor {
    assert_eq!(eps.shape(), moments.mean.shape(), "eps shape must match the moments");
    let sd = moments.var.map(f64::sqrt);
    let noise = eps.zip_map(&sd, |e, s| e * s);
    moments.mean.zip_map(&noise, |m, n| m + n)
}

pub fn layer_sample_node(tape: &mut Tape, mean: Var, var: Var, eps: Var) -> Var {
    let sd = tape.sqrt(var);
    let noise = tape.mul(eps, sd);
    tape.add(mean, noise)
}

/// KL(N(m_w, L_w L_wᵀ) ‖ N(0, I)) summed over the W outputs.
pub fn kl_whitened(q_mean: &Tensor, q_sqrt: &[Tensor]) -> Result<f64> {
    let m = q_mean.rows();
    if q_sqrt.len() != q_mean.cols() {
        return Err(Error::Shape(format!("{} square-root factors for {} outputs", q_sqrt.len(), q_mean.cols())));
    }
    let mut kl = 0.5 * q_mean.data().iter().map(|v| v * v).sum::<f64>();
    for l in q_sqrt {
        if l.shape() != (m, m) {
            return Err(Error::Shape(format!("q_sqrt factor has shape {:?}, expected {m}x{m}", l.shape())));
        }
        let mut logdet = 0.0;
        for (i, d) in l.diag().into_iter().enumerate() {
            if !(d > 0.0) {
                return Err(Error::InvalidParameter(format!("q_sqrt diagonal entry {i} is {d}")));
            }
            logdet += d.ln();
        }
        let frob: f64 = l.tril().data().iter().map(|v| v * v).sum();
        kl += 0.5 * (frob - m as f64) - logdet;
    }
    Ok(kl)
}

pub fn kl_node(tape: &mut Tape, q_mean: Var, q_sqrt: &[Var]) -> Var {
    let m = tape.shape(q_mean).0 as f64;
    let m2 = tape.square(q_mean);
    let mut total = tape.sum(m2);
    for &q in q_sqrt {
        let l = tape.tril(q);
        let l2 = tape.square(l);
        let frob = tape.sum(l2);
        let d = tape.diag(l);
        let d2 = tape.square(d);
        let logd2 = tape.log(d2);
        let logdet2 = tape.sum(logd2);
        let t = tape.sub(frob, logdet2);
        let t = tape.offset(t, -m);
        total = tape.add(total, t);
    }
    tape.scale(total, 0.5)
}

const MAX_HALVINGS: usize = 10;

/// One natural-gradient step on the whitened posterior of `layer`.
///
/// `grad_mean` (M×W) and `grad_sqrt` (W factors, M×M) are gradients of the loss
/// being minimized with respect to q_mean and q_sqrt. They are mapped to the
/// expectation parameters η = (m, S + mmᵀ) and the natural parameters
/// θ = (S⁻¹m, −½S⁻¹) move by −step·∂loss/∂η. If the new precision is not
/// positive definite the step is halved, up to ten times.
pub fn natgrad_step(layer: &GpLayer, grad_mean: &Tensor, grad_sqrt: &[Tensor], step: f64) -> Result<GpLayer> {
    if !(step >= 0.0) {
        return Err(Error::InvalidParameter(format!("natural-gradient step {step} must be >= 0")));
    }
    if step == 0.0 {
        return Ok(layer.clone());
    }
    let m = layer.num_inducing();
    let w = layer.output_dim();
    let mut out = layer.clone();
    for k in 0..w {
        let mean = layer.q_mean.slice(0, k, m, 1);
        let l = layer.q_sqrt[k].tril();
        let gm = grad_mean.slice(0, k, m, 1);
        let gl = grad_sqrt[k].tril();
        let (g_eta1, g_eta2) = expectation_gradients(&mean, &l, &gm, &gl)?;

        let s = l.matmul(&l.transpose());
        let prec = tensor::spd_inverse(&s)?;
        let theta1 = prec.matmul(&mean);
        let theta2 = prec.scaled(-0.5);

        let mut gamma = step;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let t1 = theta1.zip_map(&g_eta1, |a, b| a - gamma * b);
            let t2 = theta2.zip_map(&g_eta2, |a, b| a - gamma * b);
            let new_prec = t2.scaled(-2.0);
            if let Ok(new_cov) = tensor::spd_inverse(&new_prec) {
                if let Ok(new_l) = tensor::cholesky(&new_cov) {
                    accepted = Some((new_cov.matmul(&t1), new_l));
                    break;
                }
            }
            debug!("natural-gradient step {gamma:e} left a non-positive-definite precision; halving");
            gamma *= 0.5;
        }
        let Some((new_mean, new_l)) = accepted else {
            return Err(Error::StepRejected { halvings: MAX_HALVINGS });
        };
        for i in 0..m {
            out.q_mean.set(i, k, new_mean.get(i, 0));
        }
        out.q_sqrt[k] = new_l;
    }
    Ok(out)
}

/// Pulls gradients w.r.t. (m, L) back to the expectation parameters
/// η₁ = m, η₂ = S + mmᵀ through m = η₁, L = chol(η₂ − η₁η₁ᵀ).
fn expectation_gradients(mean: &Tensor, l: &Tensor, gm: &Tensor, gl: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = l.matmul(&l.transpose());
    let eta2 = s.zip_map(&mean.matmul(&mean.transpose()), |a, b| a + b);
    let mut tape = Tape::new();
    let e1 = tape.param(mean.clone());
    let e2 = tape.param(eta2);
    let e1t = tape.transpose(e1);
    let outer = tape.matmul(e1, e1t);
    let cov = tape.sub(e2, outer);
    let chol = tape.cholesky(cov)?;
    let gm = tape.constant(gm.clone());
    let gl = tape.constant(gl.clone());
    let a = tape.mul(e1, gm);
    let a = tape.sum(a);
    let b = tape.mul(chol, gl);
    let b = tape.sum(b);
    let total = tape.add(a, b);
    let grads = tape.backward(total)?;
    Ok((grads.wrt(e1), grads.wrt(e2)))
}
