//! Signal-to-noise measurements of the φ-gradient estimators.

use std::io::Write;

use log::{info, warn};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{column_moments, sample_phi_gradients, EstimatorKind};
use crate::model::Model;
use crate::rng::{derive_key, tag};
use crate::tensor::Tensor;

/// Q×|φ| gradient draws at one point; row q uses the substream (seed, q).
#[allow(clippy::too_many_arguments)]
pub fn sample_gradients(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    kind: EstimatorKind,
    q: usize,
    m: usize,
    k: usize,
    seed: u64,
) -> Result<Tensor> {
    sample_phi_gradients(model, x, y, kind.into(), q, m, k, seed)
}

/// Per-column |mean| / sd (ddof 1). A column with zero spread has SNR 0 when
/// its mean is 0 and +∞ otherwise.
pub fn snr(samples: &Tensor) -> Result<Vec<f64>> {
    if samples.rows() < 2 {
        return Err(Error::InvalidParameter(format!("SNR needs Q >= 2 samples, got {}", samples.rows())));
    }
    let (mean, sd) = column_moments(samples);
    Ok(mean
        .iter()
        .zip(&sd)
        .map(|(m, s)| match (*s == 0.0, *m == 0.0) {
            (true, true) => 0.0,
            (true, false) => f64::INFINITY,
            _ => m.abs() / s,
        })
        .collect())
}

/// Mean of the finite entries.
fn finite_mean(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < values.len() {
        warn!("{} parameters with zero spread left out of the mean SNR", values.len() - finite.len());
    }
    finite.iter().sum::<f64>() / finite.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    M,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnrSetting {
    pub m: usize,
    pub k: usize,
    pub q: usize,
    /// Per-parameter SNR averaged over the points.
    pub per_param: Vec<f64>,
    /// SNR averaged over parameters, then over points.
    pub mean_snr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnrReport {
    pub kind: EstimatorKind,
    pub axis: SweepAxis,
    pub settings: Vec<SnrSetting>,
    /// Least-squares slope of log10(mean SNR) against log10 of the swept quantity.
    pub slope: f64,
    pub slope_se: f64,
}

impl SnrReport {
    pub fn mean_snrs(&self) -> Vec<f64> {
        self.settings.iter().map(|s| s.mean_snr).collect()
    }
}

/// Least-squares slope and its standard error.
pub fn fit_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let se = if x.len() > 2 {
        let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, se)
}

/// Points to average over: rows `indices` of (`x`, `y`). Seeds are keyed by
/// the row index, so results do not depend on the order of `indices`.
#[derive(Clone, Copy, Debug)]
pub struct Points<'a> {
    pub x: &'a Tensor,
    pub y: &'a Tensor,
    pub indices: &'a [usize],
}

fn setting(
    model: &Model,
    points: Points<'_>,
    kind: EstimatorKind,
    m: usize,
    k: usize,
    q: usize,
    seed: u64,
) -> Result<SnrSetting> {
    if points.indices.is_empty() {
        return Err(Error::InvalidParameter("no points to measure".into()));
    }
    let mut order = points.indices.to_vec();
    order.sort_unstable();
    order.dedup();
    let p = model.encoder.num_params();
    let mut per_param = vec![0.0; p];
    let mut mean_snr = 0.0;
    for &n in &order {
        let x = points.x.slice(n, 0, 1, points.x.cols());
        let y = points.y.slice(n, 0, 1, points.y.cols());
        let s = derive_key(seed, &[tag::POINTS, n as u64, m as u64, k as u64]);
        let values = snr(&sample_gradients(model, &x, &y, kind, q, m, k, s)?)?;
        for (acc, v) in per_param.iter_mut().zip(&values) {
            *acc += v / order.len() as f64;
        }
        mean_snr += finite_mean(&values) / order.len() as f64;
    }
    info!("{kind} M={m} K={k} Q={q}: mean SNR {mean_snr:.4e}");
    Ok(SnrSetting { m, k, q, per_param, mean_snr })
}

fn report(kind: EstimatorKind, axis: SweepAxis, settings: Vec<SnrSetting>) -> SnrReport {
    let xs: Vec<f64> = settings
        .iter()
        .map(|s| match axis {
            SweepAxis::K => (s.k as f64).log10(),
            SweepAxis::M => (s.m as f64).log10(),
        })
        .collect();
    let ys: Vec<f64> = settings.iter().map(|s| s.mean_snr.log10()).collect();
    let (slope, slope_se) = if settings.len() >= 2 { fit_slope(&xs, &ys) } else { (f64::NAN, f64::NAN) };
    SnrReport { kind, axis, settings, slope, slope_se }
}

fn check_ascending(list: &[usize], what: &str) -> Result<()> {
    if list.is_empty() || list.contains(&0) || list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!("{what} list must be positive and strictly ascending: {list:?}")));
    }
    Ok(())
}

/// SNR across `k_list` at fixed M.
#[allow(clippy::too_many_arguments)]
pub fn snr_sweep(
    model: &Model,
    points: Points<'_>,
    kind: EstimatorKind,
    k_list: &[usize],
    m: usize,
    q: usize,
    seed: u64,
) -> Result<SnrReport> {
    check_ascending(k_list, "K")?;
    let settings = k_list.iter().map(|&k| setting(model, points, kind, m, k, q, seed)).collect::<Result<_>>()?;
    Ok(report(kind, SweepAxis::K, settings))
}

/// SNR across `m_list` at fixed K.
#[allow(clippy::too_many_arguments)]
pub fn snr_sweep_m(
    model: &Model,
    points: Points<'_>,
    kind: EstimatorKind,
    m_list: &[usize],
    k: usize,
    q: usize,
    seed: u64,
) -> Result<SnrReport> {
    check_ascending(m_list, "M")?;
    let settings = m_list.iter().map(|&m| setting(model, points, kind, m, k, q, seed)).collect::<Result<_>>()?;
    Ok(report(kind, SweepAxis::M, settings))
}

/// Rows `estimator,K,M,Q,param_index,snr`; one `MEAN` row per setting
/// followed by the per-parameter rows.
pub fn write_snr_csv<W: Write>(reports: &[SnrReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["estimator", "K", "M", "Q", "param_index", "snr"]).map_err(csv_err)?;
    for r in reports {
        for s in &r.settings {
            let head = [r.kind.to_string(), s.k.to_string(), s.m.to_string(), s.q.to_string()];
            let mut row = head.to_vec();
            row.extend(["MEAN".to_string(), format!("{:e}", s.mean_snr)]);
            w.write_record(&row).map_err(csv_err)?;
            for (i, v) in s.per_param.iter().enumerate() {
                let mut row = head.to_vec();
                row.extend([i.to_string(), format!("{v:e}")]);
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema(format!("{other:?}")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Equal-width histogram over the sample range, with the mean and standard
/// deviation of a matching Gaussian overlay.
pub fn export_histogram(column: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    if column.is_empty() {
        return Err(Error::InvalidParameter("histogram of an empty column".into()));
    }
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0; bins];
    for &v in column {
        let i = (((v - lo) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let std = if column.len() > 1 {
        (column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Histogram { edges, counts, mean, std })
}

/// Rows `bin_lo,bin_hi,count`.
pub fn write_histogram_csv<W: Write>(hist: &Histogram, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lo", "bin_hi", "count"]).map_err(csv_err)?;
    for (i, c) in hist.counts.iter().enumerate() {
        w.write_record([format!("{:e}", hist.edges[i]), format!("{:e}", hist.edges[i + 1]), c.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
