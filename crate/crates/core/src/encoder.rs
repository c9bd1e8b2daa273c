//! Amortized Gaussian encoder q_φ(z_n) for the per-point latent inputs. The
//! network reads the concatenated row [x_n, y_n].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ad::{Axis, Tape, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const HIDDEN: usize = 20;

/// Constant added to the standard-deviation head before the softplus.
pub const SIGMA_OFFSET: f64 = -3.0;

pub const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Learned,
    FixedToPrior,
}

/// Weights in the order w1, b1, w2, b2, w_mu, b_mu, w_sigma, b_sigma.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub mode: EncoderMode,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub weights: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDist {
    pub mu: Tensor,
    pub sigma: Tensor,
}

fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

impl EncoderParams {
    pub fn init(input_dim: usize, latent_dim: usize, mode: EncoderMode, rng: &mut Rng) -> Self {
        let d2 = input_dim + HIDDEN;
        let d3 = input_dim + 2 * HIDDEN;
        let weights = vec![
            glorot(rng, input_dim, HIDDEN),
            Tensor::zeros(1, HIDDEN),
            glorot(rng, d2, HIDDEN),
            Tensor::zeros(1, HIDDEN),
            glorot(rng, d3, latent_dim),
            Tensor::zeros(1, latent_dim),
            glorot(rng, d3, latent_dim),
            Tensor::zeros(1, latent_dim),
        ];
        EncoderParams { mode, input_dim, latent_dim, weights }
    }

    pub fn is_learned(&self) -> bool {
        self.mode == EncoderMode::Learned
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.weights.iter().map(|w| tape.leaf(w.clone(), trainable)).collect()
    }
}

/// Returns (mu, sigma) nodes, each R×D̃, for the rows of `x`.
pub fn encode_node(tape: &mut Tape, params: &EncoderParams, vars: &[Var], x: Var) -> (Var, Var) {
    let r = tape.shape(x).0;
    let d = params.latent_dim;
    if !params.is_learned() {
        let mu = tape.constant(Tensor::zeros(r, d));
        let sigma = tape.constant(Tensor::full(r, d, 1.0));
        return (mu, sigma);
    }
    let affine = |tape: &mut Tape, input: Var, w: Var, b: Var| {
        let a = tape.matmul(input, w);
        let cols = tape.shape(a).1;
        let b = tape.broadcast(b, r, cols);
        tape.add(a, b)
    };
    let a1 = affine(tape, x, vars[0], vars[1]);
    let h1 = tape.tanh(a1);
    let in2 = tape.concat_cols(&[x, h1]);
    let a2 = affine(tape, in2, vars[2], vars[3]);
    let h2 = tape.tanh(a2);
    let in3 = tape.concat_cols(&[x, h1, h2]);
    let mu = affine(tape, in3, vars[4], vars[5]);
    let pre = affine(tape, in3, vars[6], vars[7]);
    let pre = tape.offset(pre, SIGMA_OFFSET);
    let sigma = tape.softplus(pre);
    (mu, sigma)
}

pub fn encode(params: &EncoderParams, x: &Tensor) -> LatentDist {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let (mu, sigma) = encode_node(&mut tape, params, &vars, xv);
    LatentDist { mu: tape.value(mu).clone(), sigma: tape.value(sigma).clone() }
}

/// z = mu + eps ⊙ sigma, where `eps` holds `k` rows per point (point-major).
pub fn sample_z(dist: &LatentDist, eps: &Tensor, k: usize) -> Tensor {
    let n = dist.mu.rows();
    assert_eq!(eps.shape(), (n * k, dist.mu.cols()), "eps must hold k rows per point");
    let mut z = eps.clone();
    for i in 0..n * k {
        for (j, v) in z.data_mut()[i * eps.cols()..(i + 1) * eps.cols()].iter_mut().enumerate() {
            *v = dist.mu.get(i / k, j) + *v * dist.sigma.get(i / k, j);
        }
    }
    z
}

/// Row-wise log N(z | mu, diag sigma²), returned as R×1.
pub fn log_density(mu: &Tensor, sigma: &Tensor, z: &Tensor) -> Tensor {
    assert_eq!(mu.shape(), z.shape());
    assert_eq!(sigma.shape(), z.shape());
    let mut out = Tensor::zeros(z.rows(), 1);
    for i in 0..z.rows() {
        let mut s = 0.0;
        for j in 0..z.cols() {
            let (m, sd, v) = (mu.get(i, j), sigma.get(i, j), z.get(i, j));
            s += -0.5 * LOG_2PI - sd.ln() - 0.5 * ((v - m) / sd).powi(2);
        }
        out.set(i, 0, s);
    }
    out
}

pub fn log_density_node(tape: &mut Tape, mu: Var, sigma: Var, z: Var) -> Var {
    let d = tape.shape(z).1 as f64;
    let diff = tape.sub(z, mu);
    let u = tape.div(diff, sigma);
    let u2 = tape.square(u);
    let u2 = tape.scale(u2, -0.5);
    let ls = tape.log(sigma);
    let t = tape.sub(u2, ls);
    let t = tape.sum_axis(t, Axis::Cols);
    tape.offset(t, -0.5 * LOG_2PI * d)
}

pub fn log_std_normal_node(tape: &mut Tape, z: Var) -> Var {
    let d = tape.shape(z).1 as f64;
    let z2 = tape.square(z);
    let t = tape.sum_axis(z2, Axis::Cols);
    let t = tape.scale(t, -0.5);
    tape.offset(t, -0.5 * LOG_2PI * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::{normal_tensor, substream};
    use statrs::distribution::{ContinuousCDF, Normal};
    use std::f64::consts::PI;

    fn encoder(seed: u64) -> EncoderParams {
        let mut p = EncoderParams::init(2, 1, EncoderMode::Learned, &mut substream(seed, &[1]));
        // nonzero biases so every weight influences the output
        for i in [1, 3, 5, 7] {
            let (r, c) = p.weights[i].shape();
            p.weights[i] = normal_tensor(&mut substream(seed, &[2, i as u64]), r, c).scaled(0.3);
        }
        p
    }

    #[test]
    fn parameter_count_for_default_shapes() {
        let p = EncoderParams::init(1, 1, EncoderMode::Learned, &mut substream(0, &[]));
        assert_eq!(p.num_params(), 20 + 20 + 21 * 20 + 20 + 41 + 1 + 41 + 1);
    }

    #[test]
    fn prior_mode_returns_standard_normal() {
        let p = EncoderParams::init(3, 2, EncoderMode::FixedToPrior, &mut substream(0, &[]));
        let x = normal_tensor(&mut substream(1, &[]), 4, 3);
        let dist = encode(&p, &x);
        assert_eq!(dist.mu, Tensor::zeros(4, 2));
        assert_eq!(dist.sigma, Tensor::full(4, 2, 1.0));
        let eps = normal_tensor(&mut substream(2, &[]), 8, 2);
        assert_eq!(sample_z(&dist, &eps, 2), eps);
    }

    #[test]
    fn zero_head_gives_softplus_of_offset() {
        let mut p = EncoderParams::init(1, 1, EncoderMode::Learned, &mut substream(4, &[]));
        p.weights[6] = p.weights[6].map(|_| 0.0);
        let dist = encode(&p, &Tensor::column(&[-1.0, 0.0, 0.7]));
        for &s in dist.sigma.data() {
            assert!((s - (1.0 + (-3f64).exp()).ln()).abs() < 1e-15);
            assert!((s - 0.048587).abs() < 1e-6);
        }
    }

    #[test]
    fn skip_path_survives_zeroed_hidden_layers() {
        let mut p = encoder(3);
        for i in 0..4 {
            p.weights[i] = p.weights[i].map(|_| 0.0);
        }
        let x = normal_tensor(&mut substream(5, &[]), 6, 2);
        let dist = encode(&p, &x);
        let w_mu = p.weights[4].slice(0, 0, 2, 1);
        let w_sd = p.weights[6].slice(0, 0, 2, 1);
        for i in 0..6 {
            let row = x.slice(i, 0, 1, 2);
            let mu = row.matmul(&w_mu).item() + p.weights[5].item();
            let pre = row.matmul(&w_sd).item() + p.weights[7].item() + SIGMA_OFFSET;
            assert!((dist.mu.get(i, 0) - mu).abs() < 1e-14);
            assert!((dist.sigma.get(i, 0) - (1.0 + pre.exp()).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn sample_examples() {
        let dist = LatentDist { mu: Tensor::column(&[1.0, -2.0]), sigma: Tensor::column(&[0.5, 2.0]) };
        assert_eq!(sample_z(&dist, &Tensor::zeros(4, 1), 2).data(), &[1.0, 1.0, -2.0, -2.0]);
        let z = sample_z(&dist, &Tensor::column(&[1.0, -1.0, 0.5, 1.0]), 2);
        assert_eq!(z.data(), &[1.5, 0.5, -1.0, 0.0]);
    }

    #[test]
    fn log_density_examples() {
        let std = log_density(&Tensor::scalar(0.0), &Tensor::scalar(1.0), &Tensor::scalar(0.0)).item();
        assert!((std + 0.918939).abs() < 1e-6);
        let s = 1.0 / (2.0 * PI).sqrt();
        let at_mean =
            log_density(&Tensor::row_vector(&[0.3, -1.0]), &Tensor::full(1, 2, s), &Tensor::row_vector(&[0.3, -1.0]));
        assert!(at_mean.item().abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        let (mu, sd) = (0.4, 0.7);
        let h = 1e-3;
        let grid: Vec<f64> = (0..20_000).map(|i| -10.0 + (i as f64 + 0.5) * h).collect();
        let n = grid.len();
        let lp = log_density(&Tensor::full(n, 1, mu), &Tensor::full(n, 1, sd), &Tensor::column(&grid));
        let total: f64 = lp.data().iter().map(|v| v.exp() * h).sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn samples_follow_the_density() {
        let n = 100_000;
        let dist = LatentDist { mu: Tensor::scalar(-0.3), sigma: Tensor::scalar(1.7) };
        let eps = normal_tensor(&mut substream(9, &[]), n, 1);
        let mut z = sample_z(&dist, &eps, n).into_vec();
        z.sort_by(f64::total_cmp);
        let normal = Normal::new(-0.3, 1.7).unwrap();
        let d = z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = normal.cdf(v);
                (c - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0, f64::max);
        // asymptotic Kolmogorov critical value at alpha = 0.01
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");

        let mean = z.iter().sum::<f64>() / n as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se_sd = 1.7 / (2.0 * (n as f64 - 1.0)).sqrt();
        assert!((sd - 1.7).abs() < 4.0 * se_sd, "{sd}");
    }

    #[test]
    fn prior_mode_weight_ratio_is_zero() {
        let p = EncoderParams::init(1, 1, EncoderMode::FixedToPrior, &mut substream(0, &[]));
        let x = Tensor::column(&[0.1, 0.2, 0.3]);
        let mut t = Tape::new();
        let vars = p.register(&mut t, false);
        let xv = t.constant(x);
        let (mu, sigma) = encode_node(&mut t, &p, &vars, xv);
        let z = t.constant(Tensor::column(&[-2.0, 0.0, 3.5]));
        let lq = log_density_node(&mut t, mu, sigma, z);
        let lp = log_std_normal_node(&mut t, z);
        let diff = t.sub(lp, lq);
        assert!(t.value(diff).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_density_node_matches_values() {
        let mut rng = substream(6, &[]);
        let mu = normal_tensor(&mut rng, 5, 2);
        let sigma = normal_tensor(&mut rng, 5, 2).map(|v| 0.2 + v.abs());
        let z = normal_tensor(&mut rng, 5, 2);
        let mut t = Tape::new();
        let (a, b, c) = (t.constant(mu.clone()), t.constant(sigma.clone()), t.constant(z.clone()));
        let node = log_density_node(&mut t, a, b, c);
        let direct = log_density(&mu, &sigma, &z);
        for (u, v) in t.value(node).data().iter().zip(direct.data()) {
            assert!((u - v).abs() < 1e-13);
        }
        let zero = t.constant(Tensor::zeros(5, 2));
        let one = t.constant(Tensor::full(5, 2, 1.0));
        let p1 = log_std_normal_node(&mut t, c);
        let p2 = log_density_node(&mut t, zero, one, c);
        for (u, v) in t.value(p1).data().iter().zip(t.value(p2).data()) {
            assert!((u - v).abs() < 1e-13);
        }
    }

    #[test]
    fn encoder_and_density_gradients_match_differences() {
        for seed in 0..5 {
            let p = encoder(seed);
            let x = normal_tensor(&mut substream(seed, &[7]), 4, 2);
            let eps = normal_tensor(&mut substream(seed, &[8]), 4, 1);
            let report = check_gradients(&p.weights, 1e-5, |t, v| {
                let xv = t.constant(x.clone());
                let (mu, sigma) = encode_node(t, &p, v, xv);
                let e = t.constant(eps.clone());
                let noise = t.mul(e, sigma);
                let z = t.add(mu, noise);
                let lq = log_density_node(t, mu, sigma, z);
                let lp = log_std_normal_node(t, z);
                let s = t.add(lq, lp);
                let s2 = t.square(mu);
                let s2 = t.sum(s2);
                let s = t.sum(s);
                Ok(t.add(s, s2))
            })
            .unwrap();
            assert!(report.passes(1e-5), "{report:?}");
        }
    }
}
