use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgp_snr::checkpoint::Checkpoint;
use dgp_snr::config::RunConfig;
use dgp_snr::estimators::EstimatorKind;
use dgp_snr::pipeline::{self, HistOptions, SnrOptions, TRACE_FILE};
use dgp_snr::Error;

/// Latent-variable deep GPs with importance-weighted variational inference,
/// REG/DREG encoder gradients and SNR diagnostics.
#[derive(Debug, Parser)]
#[command(name = "dgp-snr", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "DGP_SNR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the bimodal demo dataset as demo_train.csv / demo_test.csv.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
    },
    /// Train a model and write a checkpoint plus trace.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trace path; defaults to trace.csv next to the checkpoint.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        estimator: Option<EstimatorKind>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-parameter SNR of the encoder gradient across K (or M).
    SnrSweep {
        #[command(flatten)]
        input: Input,
        /// Comma-separated estimators.
        #[arg(long, value_delimiter = ',', default_value = "reg,dreg")]
        estimator: Vec<EstimatorKind>,
        #[arg(long = "K", value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long = "M", value_delimiter = ',')]
        m: Option<Vec<usize>>,
        #[arg(long = "Q")]
        q: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histograms of one encoder gradient component, one CSV per K.
    GradHist {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_delimiter = ',', default_value = "reg,dreg")]
        estimator: Vec<EstimatorKind>,
        #[arg(long = "K", value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long = "M", default_value_t = 1)]
        m: usize,
        #[arg(long = "Q")]
        q: Option<usize>,
        /// Training row to sample at.
        #[arg(long)]
        point: Option<usize>,
        /// Encoder parameter index.
        #[arg(long, default_value_t = 0)]
        param: usize,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean test log-likelihood of a checkpoint.
    Eval {
        #[command(flatten)]
        input: Input,
        #[arg(long = "S")]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report in the units of the raw targets.
        #[arg(long)]
        original_units: bool,
        /// Write the per-point report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-sided Wilcoxon signed-rank test that the candidates beat the baselines.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        baseline: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        candidate: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Input {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

fn run(command: Command) -> dgp_snr::Result<()> {
    match command {
        Command::GenData { out, n, seed, test_fraction } => {
            let (train, test) = pipeline::gen_data(&out, n, seed, test_fraction)?;
            println!("wrote {} train and {} test rows to {}", train.len(), test.len(), out.display());
        }
        Command::Train { config, data, out, trace, iterations, estimator, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(v) = iterations {
                cfg.train.iterations = v;
            }
            if let Some(v) = estimator {
                cfg.train.estimator = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            let trace = trace.unwrap_or_else(|| sibling(&out, TRACE_FILE));
            let (_, tr) = pipeline::run_train(&cfg, &data, &out, &trace)?;
            match tr.points.last() {
                Some(p) => println!("final elbo {:?} after {} iterations", p.elbo, cfg.train.iterations),
                None => println!("no iterations run; checkpoint holds the initialization"),
            }
        }
        Command::SnrSweep { input, estimator, k, m, q, points, seed, out } => {
            let ckpt = Checkpoint::load(&input.ckpt)?;
            let ex = &ckpt.config.experiment;
            let opts = SnrOptions {
                kinds: estimator,
                k_list: k.unwrap_or_else(|| ex.k_list.clone()),
                m_list: m.unwrap_or_else(|| vec![ex.m]),
                q: q.unwrap_or(ex.q),
                points: points.unwrap_or(ex.points),
                seed: seed.unwrap_or(ex.seed),
            };
            for r in pipeline::run_snr_sweep(&ckpt, &input.data, &opts, &out)? {
                let means: Vec<String> = r.mean_snrs().iter().map(|v| format!("{v:.4e}")).collect();
                println!(
                    "{} {:?} mean SNR [{}] slope {:.4} ± {:.4}",
                    r.kind,
                    r.axis,
                    means.join(", "),
                    r.slope,
                    r.slope_se
                );
            }
        }
        Command::GradHist { input, estimator, k, m, q, point, param, bins, seed, out } => {
            let ckpt = Checkpoint::load(&input.ckpt)?;
            let ex = &ckpt.config.experiment;
            let opts = HistOptions {
                kinds: estimator,
                k_list: k.unwrap_or_else(|| ex.hist_k.clone()),
                m,
                q: q.unwrap_or(ex.q),
                point,
                param,
                bins: bins.unwrap_or(ex.bins),
                seed: seed.unwrap_or(ex.seed),
            };
            for path in pipeline::run_grad_hist(&ckpt, &input.data, &opts, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Eval { input, samples, seed, original_units, out } => {
            let ckpt = Checkpoint::load(&input.ckpt)?;
            let s = samples.unwrap_or(ckpt.config.experiment.test_samples);
            let report = pipeline::run_eval(&ckpt, &input.data, s, seed, original_units)?;
            if let Some(path) = out {
                fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            println!("mean test log-likelihood {:?}", report.mean);
        }
        Command::Compare { baseline, candidate, out } => {
            let read = |paths: &[PathBuf]| {
                paths.iter().map(|p| pipeline::read_eval_report(p)).collect::<dgp_snr::Result<Vec<_>>>()
            };
            let report = pipeline::run_compare(&read(&baseline)?, &read(&candidate)?)?;
            if let Some(path) = out {
                fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
            println!(
                "pairs {} mean difference {:?} one-sided p {:?}",
                report.pairs, report.mean_difference, report.p_value
            );
        }
    }
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else if err.is_config() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
