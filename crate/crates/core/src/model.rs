//! The latent-variable deep GP: layer stack, encoder, likelihood noise,
//! parameter bookkeeping and initialization.

use log::info;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ad::{Tape, Var};
use crate::encoder::{EncoderMode, EncoderParams};
use crate::error::{Error, Result};
use crate::kernels::{inverse_positive, positive, GpLayer, LayerVars, RbfArdParams};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

pub const INIT_NOISE_VAR: f64 = 0.01;
const INNER_SQRT_SCALE: f64 = 1e-5;
const KMEANS_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::layers")]
    pub layers: usize,
    #[serde(default = "defaults::width")]
    pub width: usize,
    #[serde(default = "defaults::num_inducing")]
    pub num_inducing: usize,
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "defaults::encoder")]
    pub encoder: EncoderMode,
}

mod defaults {
    use super::EncoderMode;
    pub fn layers() -> usize {
        2
    }
    pub fn width() -> usize {
        5
    }
    pub fn num_inducing() -> usize {
        128
    }
    pub fn latent_dim() -> usize {
        1
    }
    pub fn encoder() -> EncoderMode {
        EncoderMode::Learned
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: defaults::layers(),
            width: defaults::width(),
            num_inducing: defaults::num_inducing(),
            latent_dim: defaults::latent_dim(),
            encoder: defaults::encoder(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.layers) {
            return Err(Error::InvalidParameter(format!("layers must be in 1..=4, got {}", self.layers)));
        }
        if self.width == 0 || self.num_inducing == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidParameter("width, num_inducing and latent_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter group used by the optimizers and by gradient reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Inducing inputs and kernel hyperparameters.
    Kernel,
    /// Whitened q(u) mean and square-root factors.
    Variational,
    Noise,
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub group: Group,
    pub layer: Option<usize>,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<GpLayer>,
    pub encoder: EncoderParams,
    /// 1×1 unconstrained likelihood variance.
    pub raw_noise: Tensor,
}

impl Model {
    pub fn noise_var(&self) -> f64 {
        positive(self.raw_noise.item())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input_dim().saturating_sub(self.latent_dim()))
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, GpLayer::output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Err(Error::Shape("model has no layers".into()));
        };
        if first.input_dim() <= self.latent_dim() {
            return Err(Error::Shape(format!(
                "first layer takes {} inputs, fewer than the {} latent dimensions plus data",
                first.input_dim(),
                self.latent_dim()
            )));
        }
        if self.encoder.input_dim != self.input_dim() + self.output_dim() {
            return Err(Error::Shape(format!(
                "encoder reads {} columns, expected {} inputs + {} targets",
                self.encoder.input_dim,
                self.input_dim(),
                self.output_dim()
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Shape(format!(
                    "layer {} takes {} inputs but layer {i} emits {}",
                    i + 1,
                    pair[1].input_dim(),
                    pair[0].output_dim()
                )));
            }
        }
        Ok(())
    }

    /// Trainable tensors in slot order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.inducing, &l.kernel.raw_lengthscales, &l.kernel.raw_variance, &l.q_mean]);
            out.extend(l.q_sqrt.iter());
        }
        out.push(&self.raw_noise);
        if self.encoder.is_learned() {
            out.extend(self.encoder.weights.iter());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.inducing);
            out.push(&mut l.kernel.raw_lengthscales);
            out.push(&mut l.kernel.raw_variance);
            out.push(&mut l.q_mean);
            out.extend(l.q_sqrt.iter_mut());
        }
        out.push(&mut self.raw_noise);
        if self.encoder.is_learned() {
            out.extend(self.encoder.weights.iter_mut());
        }
        out
    }

    pub fn slots(&self) -> Vec<Slot> {
        let slot = |group, layer, name: String| Slot { group, layer, name };
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(slot(Group::Kernel, Some(i), "inducing".into()));
            out.push(slot(Group::Kernel, Some(i), "lengthscales".into()));
            out.push(slot(Group::Kernel, Some(i), "variance".into()));
            out.push(slot(Group::Variational, Some(i), "q_mean".into()));
            for w in 0..l.q_sqrt.len() {
                out.push(slot(Group::Variational, Some(i), format!("q_sqrt_{w}")));
            }
        }
        out.push(slot(Group::Noise, None, "noise".into()));
        if self.encoder.is_learned() {
            for name in ["w1", "b1", "w2", "b2", "w_mu", "b_mu", "w_sigma", "b_sigma"] {
                out.push(slot(Group::Encoder, None, name.into()));
            }
        }
        out
    }

    /// Registers every parameter on `tape`; GP-side and encoder leaves are
    /// trainable according to the two flags.
    pub fn register(&self, tape: &mut Tape, gp: bool, phi: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .params()
            .into_iter()
            .zip(self.slots())
            .map(|(t, s)| tape.leaf(t.clone(), if s.group == Group::Encoder { phi } else { gp }))
            .collect();
        ModelVars::from_slots(tape, self, &vars)
    }
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub layers: Vec<LayerVars>,
    pub raw_noise: Var,
    /// Empty when the encoder is fixed to the prior.
    pub encoder: Vec<Var>,
    /// All of the above in slot order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Builds handles from `vars` given in slot order; mean projections are added as constants.
    pub fn from_slots(tape: &mut Tape, model: &Model, vars: &[Var]) -> ModelVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("too few variables for the model's slots");
        let mut layers = Vec::with_capacity(model.layers.len());
        for l in &model.layers {
            let inducing = next();
            let raw_lengthscales = next();
            let raw_variance = next();
            let q_mean = next();
            let q_sqrt = (0..l.q_sqrt.len()).map(|_| next()).collect();
            let mean_projection = tape.constant(l.mean_projection.clone());
            layers.push(LayerVars { inducing, raw_lengthscales, raw_variance, q_mean, q_sqrt, mean_projection });
        }
        let raw_noise = next();
        let encoder = if model.encoder.is_learned() {
            (0..model.encoder.weights.len()).map(|_| next()).collect()
        } else {
            Vec::new()
        };
        ModelVars { layers, raw_noise, encoder, all: vars.to_vec() }
    }
}

/// Builds a model for data `x` (N×D) with `output_dim` targets.
///
/// Inducing inputs are the data (N ≤ M) or k-means centroids, with standard
/// normal latent coordinates appended; they are carried to deeper layers
/// through each layer's mean projection.
pub fn init_model(config: &ModelConfig, x: &Tensor, output_dim: usize, rng: &mut Rng) -> Result<Model> {
    config.validate()?;
    if x.rows() == 0 || x.cols() == 0 || output_dim == 0 {
        return Err(Error::Shape(format!("cannot initialize from {:?} inputs and {output_dim} outputs", x.shape())));
    }
    let centers = if x.rows() <= config.num_inducing { x.clone() } else { kmeans(x, config.num_inducing, rng) };
    let m = centers.rows();
    let latent_z = normal_tensor(rng, m, config.latent_dim);
    let latent_x = normal_tensor(rng, x.rows(), config.latent_dim);
    let mut z = Tensor::concat_cols(&[&centers, &latent_z]);
    let mut h = Tensor::concat_cols(&[x, &latent_x]);

    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let last = l + 1 == config.layers;
        let d_in = h.cols();
        let projection = if last { Tensor::zeros(d_in, output_dim) } else { mean_projection(&h, config.width) };
        let kernel = RbfArdParams::new(&vec![(d_in as f64).sqrt(); d_in], 1.0);
        let scale = if last { 1.0 } else { INNER_SQRT_SCALE };
        let layer = GpLayer::new(z.clone(), kernel, projection, scale);
        if !last {
            z = z.matmul(&layer.mean_projection);
            h = h.matmul(&layer.mean_projection);
        }
        layers.push(layer);
    }
    let encoder = EncoderParams::init(x.cols() + output_dim, config.latent_dim, config.encoder, rng);
    let model = Model { layers, encoder, raw_noise: Tensor::scalar(inverse_positive(INIT_NOISE_VAR)) };
    model.validate()?;
    info!(
        "initialized {}-layer model: {} inducing points, {} encoder parameters",
        model.layers.len(),
        m,
        if model.encoder.is_learned() { model.encoder.num_params() } else { 0 }
    );
    Ok(model)
}

/// D_in×W mean-function projection: leading principal directions of `h`
/// when D_in > W, otherwise the identity padded with zero columns.
pub fn mean_projection(h: &Tensor, width: usize) -> Tensor {
    let d = h.cols();
    if d <= width {
        let mut p = Tensor::zeros(d, width);
        for i in 0..d {
            p.set(i, i, 1.0);
        }
        return p;
    }
    let n = h.rows() as f64;
    let mut centered = DMatrix::from_row_slice(h.rows(), d, h.data());
    for j in 0..d {
        let mean = centered.column(j).sum() / n;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut p = Tensor::zeros(d, width);
    for (k, &j) in order.iter().take(width).enumerate() {
        let v = eig.eigenvectors.column(j);
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            p.set(i, k, sign * v[i]);
        }
    }
    p
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(x: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let n = x.rows();
    assert!(k >= 1 && k <= n, "k-means needs 1 <= k <= n");
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();

    let mut centers: Vec<Vec<f64>> = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(x.row(pick).to_vec());
        let c = centers.last().unwrap();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(x.row(i), c));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERATIONS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best =
                (0..k).min_by(|&p, &q| dist2(x.row(i), &centers[p]).total_cmp(&dist2(x.row(i), &centers[q]))).unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; x.cols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Tensor::from_rows(&centers)
}
