//! Demo data generation, CSV input and output, normalization and splitting.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal, substream, tag};
use crate::snr::csv_err;
use crate::tensor::Tensor;

/// Probability of the first branch of the demo mixture.
pub const DEMO_FIRST_BRANCH: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn rows(&self, index: &[usize]) -> Dataset {
        Dataset {
            x: self.x.gather_rows(index),
            y: self.y.gather_rows(index),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
        }
    }
}

/// One demo target: sin(4x)/3 + 0.2e^ε on the first branch, 9x²/30 + 1.5 + 0.2e^ε on the second.
pub fn demo_target(x: f64, eps: f64, first_branch: bool) -> f64 {
    let noise = 0.2 * eps.exp();
    if first_branch {
        (4.0 * x).sin() / 3.0 + noise
    } else {
        9.0 * x * x / 30.0 + 1.5 + noise
    }
}

/// The bimodal demo dataset with x ~ U(−1, 1).
pub fn gen_demo(n: usize, seed: u64) -> Dataset {
    let mut rng = substream(seed, &[tag::DATA]);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(-1.0..1.0);
        let first = rng.random::<f64>() < DEMO_FIRST_BRANCH;
        let eps = normal(&mut rng);
        xs.push(x);
        ys.push(demo_target(x, eps, first));
    }
    Dataset { x: Tensor::column(&xs), y: Tensor::column(&ys), x_names: vec!["x".into()], y_names: vec!["y".into()] }
}

/// Reads a headed numeric CSV; `targets` name the columns of Y, the rest form X.
pub fn load_csv(path: impl AsRef<Path>, targets: &[String]) -> Result<Dataset> {
    let mut text = String::new();
    File::open(path.as_ref())?.read_to_string(&mut text)?;
    parse_csv(&text, targets)
}

pub fn parse_csv(text: &str, targets: &[String]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut y_cols = Vec::new();
    for t in targets {
        let i = header
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| Error::Schema(format!("target column '{t}' not in header {header:?}")))?;
        y_cols.push(i);
    }
    if y_cols.is_empty() {
        return Err(Error::Schema("no target columns given".into()));
    }
    let x_cols: Vec<usize> = (0..header.len()).filter(|i| !y_cols.contains(i)).collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("column '{}' holds non-numeric value '{cell}'", header[j]),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        xs.extend(x_cols.iter().map(|&j| values[j]));
        ys.extend(y_cols.iter().map(|&j| values[j]));
        rows += 1;
    }
    Ok(Dataset {
        x: Tensor::from_vec(rows, x_cols.len(), xs),
        y: Tensor::from_vec(rows, y_cols.len(), ys),
        x_names: x_cols.iter().map(|&j| header[j].clone()).collect(),
        y_names: y_cols.iter().map(|&j| header[j].clone()).collect(),
    })
}

/// Writes features then targets with full round-trip precision.
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(data.x_names.iter().chain(&data.y_names)).map_err(csv_err)?;
    for i in 0..data.len() {
        let row: Vec<String> = data.x.row(i).iter().chain(data.y.row(i)).map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(data, File::create(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random partition with round(N·fraction) test rows (at least one of each).
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<Split> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("cannot split {n} rows")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut substream(seed, &[tag::SPLIT]));
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

/// Per-column affine maps fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
    /// Columns left untouched because they have no spread.
    pub warnings: Vec<String>,
}

fn column_stats(t: &Tensor, names: &[String], warnings: &mut Vec<String>) -> (Vec<f64>, Vec<f64>) {
    let n = t.rows() as f64;
    let mut mean = Vec::with_capacity(t.cols());
    let mut std = Vec::with_capacity(t.cols());
    for j in 0..t.cols() {
        let m = (0..t.rows()).map(|i| t.get(i, j)).sum::<f64>() / n;
        let s = ((0..t.rows()).map(|i| (t.get(i, j) - m).powi(2)).sum::<f64>() / n).sqrt();
        if s > 0.0 {
            mean.push(m);
            std.push(s);
        } else {
            let msg = format!("column '{}' is constant; left unscaled", names[j]);
            warn!("{msg}");
            warnings.push(msg);
            mean.push(0.0);
            std.push(1.0);
        }
    }
    (mean, std)
}

fn apply(t: &Tensor, mean: &[f64], std: &[f64], forward: bool) -> Tensor {
    let mut out = t.clone();
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            let v = t.get(i, j);
            out.set(i, j, if forward { (v - mean[j]) / std[j] } else { v * std[j] + mean[j] });
        }
    }
    out
}

impl Normalization {
    pub fn fit(train: &Dataset) -> Normalization {
        let mut warnings = Vec::new();
        let (x_mean, x_std) = column_stats(&train.x, &train.x_names, &mut warnings);
        let (y_mean, y_std) = column_stats(&train.y, &train.y_names, &mut warnings);
        Normalization { x_mean, x_std, y_mean, y_std, warnings }
    }

    pub fn transform(&self, data: &Dataset) -> Dataset {
        Dataset {
            x: apply(&data.x, &self.x_mean, &self.x_std, true),
            y: apply(&data.y, &self.y_mean, &self.y_std, true),
            ..data.clone()
        }
    }

    pub fn inverse(&self, data: &Dataset) -> Dataset {
        Dataset {
            x: apply(&data.x, &self.x_mean, &self.x_std, false),
            y: apply(&data.y, &self.y_mean, &self.y_std, false),
            ..data.clone()
        }
    }

    pub fn transform_x(&self, x: &Tensor) -> Tensor {
        apply(x, &self.x_mean, &self.x_std, true)
    }

    pub fn inverse_y(&self, y: &Tensor) -> Tensor {
        apply(y, &self.y_mean, &self.y_std, false)
    }

    /// Σ_p log std_p: subtract from a normalized-unit log density to report it in original units.
    pub fn y_log_scale(&self) -> f64 {
        self.y_std.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
    pub split: Split,
}

/// Normalizes a pre-split train/test pair with statistics of the training part.
pub fn normalize_pair(train: &Dataset, test: &Dataset) -> Prepared {
    let normalization = Normalization::fit(train);
    let split = Split { train: (0..train.len()).collect(), test: (train.len()..train.len() + test.len()).collect() };
    Prepared { train: normalization.transform(train), test: normalization.transform(test), normalization, split }
}

/// Seeded split followed by normalization with training statistics.
pub fn normalize_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<Prepared> {
    if data.len() < 10 {
        return Err(Error::InvalidParameter(format!("need at least 10 rows to split, got {}", data.len())));
    }
    let split = split_indices(data.len(), test_fraction, seed)?;
    let train = data.rows(&split.train);
    let test = data.rows(&split.test);
    let normalization = Normalization::fit(&train);
    Ok(Prepared { train: normalization.transform(&train), test: normalization.transform(&test), normalization, split })
}
