//! Training: Adam on every parameter group except the last layer's q(u),
//! which takes natural-gradient steps. Both step sizes decay by a constant
//! factor every fixed number of iterations.

use std::time::Instant;

use log::info;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::bound::Batch;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::{full_grad, EstimatorKind};
use crate::kernels::natgrad_step;
use crate::model::{Group, Model};
use crate::rng::{substream, tag};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::m")]
    pub m: usize,
    #[serde(default = "defaults::adam_lr")]
    pub adam_lr: f64,
    #[serde(default = "defaults::natgrad_lr")]
    pub natgrad_lr: f64,
    #[serde(default = "defaults::anneal")]
    pub anneal: f64,
    #[serde(default = "defaults::anneal_every")]
    pub anneal_every: usize,
    #[serde(default = "defaults::estimator")]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub seed: u64,
    /// Iterations between trace rows.
    #[serde(default = "defaults::trace_every")]
    pub trace_every: usize,
}

mod defaults {
    use crate::estimators::EstimatorKind;
    pub fn iterations() -> usize {
        20_000
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn k() -> usize {
        50
    }
    pub fn m() -> usize {
        1
    }
    pub fn adam_lr() -> f64 {
        0.005
    }
    pub fn natgrad_lr() -> f64 {
        0.01
    }
    pub fn anneal() -> f64 {
        0.98
    }
    pub fn anneal_every() -> usize {
        1000
    }
    pub fn estimator() -> EstimatorKind {
        EstimatorKind::Reg
    }
    pub fn trace_every() -> usize {
        100
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: defaults::iterations(),
            batch_size: defaults::batch_size(),
            k: defaults::k(),
            m: defaults::m(),
            adam_lr: defaults::adam_lr(),
            natgrad_lr: defaults::natgrad_lr(),
            anneal: defaults::anneal(),
            anneal_every: defaults::anneal_every(),
            estimator: defaults::estimator(),
            seed: 0,
            trace_every: defaults::trace_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidParameter(what));
        if !(self.adam_lr > 0.0 && self.natgrad_lr > 0.0) {
            return bad(format!("learning rates must be positive ({}, {})", self.adam_lr, self.natgrad_lr));
        }
        if !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return bad(format!("anneal factor {} must lie in (0, 1]", self.anneal));
        }
        if self.batch_size == 0 || self.k == 0 || self.m == 0 || self.anneal_every == 0 || self.trace_every == 0 {
            return bad("batch_size, k, m, anneal_every and trace_every must be positive".into());
        }
        Ok(())
    }

    /// Step-function decay: rate · anneal^⌊t / anneal_every⌋.
    pub fn rate_at(&self, initial: f64, iteration: usize) -> f64 {
        initial * self.anneal.powi((iteration / self.anneal_every) as i32)
    }
}

/// Adam moments for a list of tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One Adam descent step on the entries of `params` flagged in `active`,
/// with `grads` the loss gradients.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], active: &[bool], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        if !active[i] {
            continue;
        }
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub elbo: f64,
    pub adam_lr: f64,
    pub natgrad_lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub points: Vec<TracePoint>,
    /// Minibatch bound estimate at every iteration, before its update.
    pub elbo: Vec<f64>,
}

impl TrainTrace {
    /// Rows `iter,elbo,adam_lr,natgrad_lr`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = crate::snr::csv_err;
        w.write_record(["iter", "elbo", "adam_lr", "natgrad_lr"]).map_err(err)?;
        for p in &self.points {
            w.write_record([
                p.iteration.to_string(),
                format!("{:?}", p.elbo),
                format!("{:?}", p.adam_lr),
                format!("{:?}", p.natgrad_lr),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Which slots Adam updates: everything except the last layer's q(u).
pub fn adam_mask(model: &Model) -> Vec<bool> {
    let last = model.layers.len() - 1;
    model.slots().iter().map(|s| !(s.group == Group::Variational && s.layer == Some(last))).collect()
}

/// Trains `model` on (normalized) `data`. Deterministic given `config.seed`.
pub fn train(model: &Model, data: &Dataset, config: &TrainConfig) -> Result<(Model, TrainTrace)> {
    config.validate()?;
    model.validate()?;
    if data.x.cols() != model.input_dim() || data.y.cols() != model.output_dim() {
        return Err(Error::Shape(format!(
            "data has {} inputs and {} outputs; model expects {} and {}",
            data.x.cols(),
            data.y.cols(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::InvalidParameter("cannot train on an empty dataset".into()));
    }
    let mut model = model.clone();
    let mut adam = AdamState::new(&model.params());
    let mask = adam_mask(&model);
    let last = model.layers.len() - 1;
    let slots = model.slots();
    let q_mean_slot = slots.iter().position(|s| s.layer == Some(last) && s.name == "q_mean").expect("q_mean slot");
    let width = model.layers[last].output_dim();
    let batch_size = config.batch_size.min(n);
    let mut trace = TrainTrace::default();
    let start = Instant::now();

    for it in 0..config.iterations {
        let at = |source| Error::AtIteration { module: "train_eval", iteration: it, source: Box::new(source) };
        let mut rng = substream(config.seed, &[tag::BATCH, it as u64]);
        let mut idx = sample(&mut rng, n, batch_size).into_vec();
        idx.sort_unstable();
        let bx = data.x.gather_rows(&idx);
        let by = data.y.gather_rows(&idx);
        let batch = Batch { x: &bx, y: &by, n_total: n };
        let fg = full_grad(&model, batch, config.k, config.m, &mut rng, config.estimator).map_err(at)?;
        if !fg.elbo.is_finite() {
            return Err(at(Error::NonFinite(format!("bound estimate {}", fg.elbo))));
        }
        let adam_lr = config.rate_at(config.adam_lr, it);
        let natgrad_lr = config.rate_at(config.natgrad_lr, it);
        let loss_grads: Vec<Tensor> = fg.grads.iter().map(|g| g.scaled(-1.0)).collect();

        let new_last = natgrad_step(
            &model.layers[last],
            &loss_grads[q_mean_slot],
            &loss_grads[q_mean_slot + 1..q_mean_slot + 1 + width],
            natgrad_lr,
        )
        .map_err(at)?;
        adam_step(&mut model.params_mut(), &loss_grads, &mask, &mut adam, adam_lr);
        let layer = &mut model.layers[last];
        layer.q_mean = new_last.q_mean;
        layer.q_sqrt = new_last.q_sqrt;

        trace.elbo.push(fg.elbo);
        if it % config.trace_every == 0 || it + 1 == config.iterations {
            let seconds = start.elapsed().as_secs_f64();
            info!(
                "iter {it:>6}  elbo {:>12.4}  adam_lr {adam_lr:.5}  natgrad_lr {natgrad_lr:.5}  {seconds:.1}s",
                fg.elbo
            );
            trace.points.push(TracePoint { iteration: it, elbo: fg.elbo, adam_lr, natgrad_lr, seconds });
        }
    }
    Ok((model, trace))
}
