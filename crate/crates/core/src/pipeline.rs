//! File-level workflows behind the command-line tool. Every function reads
//! its inputs, writes new files only, and is deterministic given its seeds.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{gen_demo, load_csv, normalize_pair, save_csv, split_indices, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::eval::{test_loglik, wilcoxon_one_sided};
use crate::model::init_model;
use crate::rng::{derive_key, substream, tag};
use crate::snr::{
    export_histogram, sample_gradients, snr_sweep, snr_sweep_m, write_histogram_csv, write_snr_csv, Points, SnrReport,
};
use crate::train::{train, TrainTrace};

pub const TRAIN_FILE: &str = "demo_train.csv";
pub const TEST_FILE: &str = "demo_test.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SNR_REPORT_FILE: &str = "snr_report.csv";
pub const SNR_SUMMARY_FILE: &str = "snr_summary.json";

/// Generates the demo data and writes the train/test files into `dir`.
pub fn gen_data(dir: &Path, n: usize, seed: u64, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    let data = gen_demo(n, seed);
    let split = split_indices(n, test_fraction, seed)?;
    let (train, test) = (data.rows(&split.train), data.rows(&split.test));
    fs::create_dir_all(dir)?;
    save_csv(&train, dir.join(TRAIN_FILE))?;
    save_csv(&test, dir.join(TEST_FILE))?;
    Ok((train, test))
}

/// Header names starting with `y`.
pub fn target_columns(path: &Path) -> Result<Vec<String>> {
    let mut header = String::new();
    BufReader::new(File::open(path)?).read_line(&mut header)?;
    let targets: Vec<String> =
        header.trim_end().split(',').map(|s| s.trim().to_string()).filter(|s| s.starts_with('y')).collect();
    if targets.is_empty() {
        return Err(Error::Schema(format!("{}: no column name starts with 'y'", path.display())));
    }
    Ok(targets)
}

/// Raw (train, test) from a data directory.
pub fn load_data_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train_path = dir.join(TRAIN_FILE);
    let targets = target_columns(&train_path)?;
    let train = load_csv(&train_path, &targets)?;
    let test = load_csv(dir.join(TEST_FILE), &targets)?;
    if train.x_names != test.x_names {
        return Err(Error::Schema("train and test files have different columns".into()));
    }
    Ok((train, test))
}

/// Normalized (train, test) using the statistics stored with a checkpoint.
pub fn normalized_data(dir: &Path, normalization: &Normalization) -> Result<(Dataset, Dataset)> {
    let (train, test) = load_data_dir(dir)?;
    if train.x.cols() != normalization.x_mean.len() || train.y.cols() != normalization.y_mean.len() {
        return Err(Error::Shape("data columns do not match the checkpoint".into()));
    }
    Ok((normalization.transform(&train), normalization.transform(&test)))
}

/// Initializes and trains a model; writes the checkpoint and the trace CSV.
pub fn run_train(
    config: &RunConfig,
    data_dir: &Path,
    ckpt: &Path,
    trace_path: &Path,
) -> Result<(Checkpoint, TrainTrace)> {
    config.validate()?;
    for path in [ckpt, trace_path] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    let (train_raw, test_raw) = load_data_dir(data_dir)?;
    let prepared = normalize_pair(&train_raw, &test_raw);
    for w in &prepared.normalization.warnings {
        log::warn!("{w}");
    }
    let data = &prepared.train;
    let mut rng = substream(config.train.seed, &[tag::INIT]);
    let model = init_model(&config.model, &data.x, data.y.cols(), &mut rng)?;
    info!(
        "training {} layers, width {}, {} inducing points, {} encoder on {} rows",
        config.model.layers,
        config.model.width,
        config.model.num_inducing,
        if model.encoder.is_learned() { "learned" } else { "prior" },
        data.len()
    );
    let (model, trace) = train(&model, data, &config.train)?;
    let checkpoint = Checkpoint::new(config.clone(), prepared.normalization, config.train.iterations, model);
    checkpoint.save(ckpt)?;
    trace.write_csv(BufWriter::new(File::create(trace_path)?))?;
    Ok((checkpoint, trace))
}

/// `count` distinct row indices out of `n`, sorted.
pub fn select_points(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx = sample(&mut substream(seed, &[tag::POINTS]), n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnrOptions {
    pub kinds: Vec<EstimatorKind>,
    pub k_list: Vec<usize>,
    pub m_list: Vec<usize>,
    pub q: usize,
    pub points: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SnrSummaryRow {
    pub estimator: EstimatorKind,
    pub axis: crate::snr::SweepAxis,
    pub values: Vec<usize>,
    pub mean_snr: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
}

/// Sweeps K (when `m_list` has one entry) or M (when `k_list` has one entry)
/// over training points, writing the per-parameter CSV and a JSON summary.
pub fn run_snr_sweep(ckpt: &Checkpoint, data_dir: &Path, opts: &SnrOptions, out_dir: &Path) -> Result<Vec<SnrReport>> {
    let (train_data, _) = normalized_data(data_dir, &ckpt.normalization)?;
    let indices = select_points(train_data.len(), opts.points, opts.seed);
    let points = Points { x: &train_data.x, y: &train_data.y, indices: &indices };
    let mut reports = Vec::new();
    for &kind in &opts.kinds {
        let report = match (opts.k_list.len(), opts.m_list.len()) {
            (_, 1) => snr_sweep(&ckpt.model, points, kind, &opts.k_list, opts.m_list[0], opts.q, opts.seed)?,
            (1, _) => snr_sweep_m(&ckpt.model, points, kind, &opts.m_list, opts.k_list[0], opts.q, opts.seed)?,
            _ => return Err(Error::InvalidParameter("sweep either K or M; the other list must have one entry".into())),
        };
        info!("{kind}: slope {:.3} ± {:.3}", report.slope, report.slope_se);
        reports.push(report);
    }
    fs::create_dir_all(out_dir)?;
    write_snr_csv(&reports, BufWriter::new(File::create(out_dir.join(SNR_REPORT_FILE))?))?;
    let summary: Vec<SnrSummaryRow> = reports
        .iter()
        .map(|r| SnrSummaryRow {
            estimator: r.kind,
            axis: r.axis,
            values: r
                .settings
                .iter()
                .map(|s| match r.axis {
                    crate::snr::SweepAxis::K => s.k,
                    crate::snr::SweepAxis::M => s.m,
                })
                .collect(),
            mean_snr: r.mean_snrs(),
            slope: r.slope,
            slope_se: r.slope_se,
        })
        .collect();
    serde_json::to_writer_pretty(BufWriter::new(File::create(out_dir.join(SNR_SUMMARY_FILE))?), &summary)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistOptions {
    pub kinds: Vec<EstimatorKind>,
    pub k_list: Vec<usize>,
    pub m: usize,
    pub q: usize,
    /// Training row; `None` picks one with the point-selection stream.
    pub point: Option<usize>,
    pub param: usize,
    pub bins: usize,
    pub seed: u64,
}

/// One histogram CSV per (estimator, K) of a single φ component's gradient
/// draws at a single training point. Returns the written paths.
pub fn run_grad_hist(ckpt: &Checkpoint, data_dir: &Path, opts: &HistOptions, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (train_data, _) = normalized_data(data_dir, &ckpt.normalization)?;
    let n = opts.point.unwrap_or_else(|| select_points(train_data.len(), 1, opts.seed)[0]);
    if n >= train_data.len() {
        return Err(Error::InvalidParameter(format!("point {n} is out of range ({} rows)", train_data.len())));
    }
    let p = ckpt.model.encoder.num_params();
    if opts.param >= p {
        return Err(Error::InvalidParameter(format!(
            "parameter {} is out of range ({p} encoder parameters)",
            opts.param
        )));
    }
    let x = train_data.x.gather_rows(&[n]);
    let y = train_data.y.gather_rows(&[n]);
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &kind in &opts.kinds {
        for &k in &opts.k_list {
            let seed = derive_key(opts.seed, &[tag::POINTS, n as u64, opts.m as u64, k as u64]);
            let draws = sample_gradients(&ckpt.model, &x, &y, kind, opts.q, opts.m, k, seed)?;
            let column: Vec<f64> = (0..draws.rows()).map(|r| draws.get(r, opts.param)).collect();
            let hist = export_histogram(&column, opts.bins)?;
            let path = out_dir.join(format!("hist_{kind}_K{k}.csv"));
            write_histogram_csv(&hist, BufWriter::new(File::create(&path)?))?;
            info!("{kind} K={k}: mean {:.4e}, std {:.4e}", hist.mean, hist.std);
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub samples: usize,
    pub seed: u64,
    pub original_units: bool,
    pub mean: f64,
    pub per_point: Vec<f64>,
}

/// Test log-likelihood of a checkpoint on the test file of `data_dir`.
pub fn run_eval(
    ckpt: &Checkpoint,
    data_dir: &Path,
    samples: usize,
    seed: u64,
    original_units: bool,
) -> Result<EvalReport> {
    let (_, test) = normalized_data(data_dir, &ckpt.normalization)?;
    let ll = test_loglik(&ckpt.model, &test, samples, seed)?;
    let shift = if original_units { ckpt.normalization.y_log_scale() } else { 0.0 };
    let per_point: Vec<f64> = ll.per_point.iter().map(|v| v - shift).collect();
    Ok(EvalReport {
        config_hash: ckpt.config_hash.clone(),
        samples,
        seed,
        original_units,
        mean: ll.mean - shift,
        per_point,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub pairs: usize,
    /// candidate − baseline, per pair.
    pub differences: Vec<f64>,
    pub mean_difference: f64,
    /// One-sided: the candidate is better.
    pub p_value: f64,
}

/// Paired comparison of mean test log-likelihoods.
pub fn run_compare(baseline: &[EvalReport], candidate: &[EvalReport]) -> Result<CompareReport> {
    if baseline.len() != candidate.len() || baseline.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "need equally many baseline and candidate reports, got {} and {}",
            baseline.len(),
            candidate.len()
        )));
    }
    if baseline.iter().chain(candidate).any(|r| r.original_units != baseline[0].original_units) {
        return Err(Error::InvalidParameter("reports mix normalized and original units".into()));
    }
    let differences: Vec<f64> = baseline.iter().zip(candidate).map(|(a, b)| b.mean - a.mean).collect();
    let p_value = wilcoxon_one_sided(&differences)?;
    let mean_difference = differences.iter().sum::<f64>() / differences.len() as f64;
    Ok(CompareReport { pairs: differences.len(), differences, mean_difference, p_value })
}

pub fn read_eval_report(path: &Path) -> Result<EvalReport> {
    serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}
