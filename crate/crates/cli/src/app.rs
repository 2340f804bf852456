//! Command-line surface.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use perceptscore_core::dataset::save_points;
use perceptscore_core::estimation::EstimationPlan;
use perceptscore_core::RunConfig;
use perceptscore_rating::server::run_blocking;
use perceptscore_rating::store::{StoreConfig, UrlTemplateRenderer};
use perceptscore_rating::RatingStore;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::evaluator::EvaluatorSpec;
use crate::pipeline::{self, files, GridSpec, RunDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Default settings (eps = 1e-4).
    Standard,
    /// Default settings with eps = 0.01.
    Tuned,
}

#[derive(Debug, Parser)]
#[command(name = "perceptscore", version, about = "Learn and sample what raters find acceptable, from pair ratings")]
pub struct Cli {
    /// JSON run configuration; defaults to the chosen preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// plateau | bump | bimodal | flat | replay:PATH | remote:URL
    #[arg(long, global = true)]
    pub evaluator: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Query the evaluator and build score targets.
    Estimate {
        /// Queries per evaluator call; each answered chunk is saved.
        #[arg(long, default_value_t = pipeline::DEFAULT_ESTIMATE_CHUNK)]
        chunk: usize,
    },
    /// Fit the score network to the targets.
    Train,
    /// Langevin sampling with the trained network.
    Sample,
    /// Train the generator baseline against the network's gradient head.
    Gan,
    /// Variance and acceptability of real vs generated samples.
    Stats,
    /// Raw, regularized and modeled gradients on a grid.
    Gradfield {
        #[arg(long, default_value_t = -10.0, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 10.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 41)]
        n: usize,
    },
    /// estimate, train, sample, gan, stats and gradfield in sequence.
    Run,
    /// Run the rating service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Journal file; defaults to the run directory.
        #[arg(long)]
        journal: Option<PathBuf>,
        /// Queue this run's estimation queries at startup.
        #[arg(long)]
        enqueue: bool,
        #[arg(long, default_value_t = perceptscore_rating::store::DEFAULT_SESSION_TTL_SECS)]
        session_ttl: f64,
        /// Media URL template with `{query_id}` and `{slot}` placeholders;
        /// raw coordinates are served when absent.
        #[arg(long)]
        media_template: Option<String>,
    },
    /// Write `n` draws from N(0, I) as a dataset file.
    Gendata {
        #[arg(long)]
        path: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        d: Option<usize>,
    },
}

pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Config(format!("config file {} not found", path.display())));
            }
            RunConfig::load(path).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => match cli.preset {
            Preset::Standard => RunConfig::default(),
            Preset::Tuned => RunConfig::tuned(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn report<T: Serialize>(stage: &str, value: &T) {
    let json = serde_json::to_string(value).unwrap_or_default();
    println!("{stage}: {json}");
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    if let Command::Gendata { path, n, d } = &cli.command {
        let ds = pipeline::standard_normal_dataset(n.unwrap_or(cfg.n_real), d.unwrap_or(cfg.d), cfg.seed);
        save_points(path, ds.points())?;
        println!("wrote {} points to {}", ds.len(), path.display());
        return Ok(());
    }
    let run = RunDir::create(&cli.out, &cfg)?;
    println!("run directory: {}", run.root().display());
    let spec = EvaluatorSpec::resolve(cli.evaluator.as_deref(), &cfg)?;
    match &cli.command {
        Command::Estimate { chunk } => report("estimate", &pipeline::estimate(&run, spec.build(&cfg)?.as_ref(), *chunk)?),
        Command::Train => report("train", &pipeline::train(&run)?),
        Command::Sample => report("sample", &sample_summary(&pipeline::sample(&run)?)),
        Command::Gan => report("gan", &pipeline::gan(&run)?),
        Command::Stats => report("stats", &pipeline::stats(&run, spec.build(&cfg)?.as_ref())?),
        Command::Gradfield { lo, hi, n } => {
            let grid = GridSpec { lo: *lo, hi: *hi, n: *n };
            let field = pipeline::gradfield(&run, spec.build(&cfg)?.as_ref(), grid)?;
            println!("gradfield: {} grid points", field.points.len());
        }
        Command::Run => {
            let evaluator = spec.build(&cfg)?;
            report("estimate", &pipeline::estimate(&run, evaluator.as_ref(), pipeline::DEFAULT_ESTIMATE_CHUNK)?);
            report("train", &pipeline::train(&run)?);
            report("sample", &sample_summary(&pipeline::sample(&run)?));
            report("gan", &pipeline::gan(&run)?);
            report("stats", &pipeline::stats(&run, evaluator.as_ref())?);
            let field = pipeline::gradfield(&run, evaluator.as_ref(), GridSpec::default())?;
            println!("gradfield: {} grid points", field.points.len());
        }
        Command::Serve {
            addr,
            journal,
            enqueue,
            session_ttl,
            media_template,
        } => {
            let mut store_cfg = StoreConfig {
                session_ttl_secs: *session_ttl,
                journal: Some(journal.clone().unwrap_or_else(|| run.path(files::RATING_JOURNAL))),
                ..StoreConfig::default()
            };
            if let Some(template) = media_template {
                store_cfg.renderer = Arc::new(UrlTemplateRenderer {
                    template: template.clone(),
                });
            }
            let store = RatingStore::open(store_cfg).map_err(|e| CliError::Failed(e.to_string()))?;
            if *enqueue {
                let plan = EstimationPlan::new(&pipeline::dataset(&run)?, &cfg)?;
                let ack = store.enqueue(&plan.queries()).map_err(|e| CliError::Failed(e.to_string()))?;
                report("enqueue", &ack);
            }
            println!("serving on http://{addr}");
            run_blocking(*addr, Arc::new(store)).map_err(|e| CliError::Failed(e.to_string()))?;
        }
        Command::Gendata { .. } => unreachable!("handled above"),
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleSummary {
    final_variance: Vec<f64>,
    late_half_variance: Vec<f64>,
    convergence_step: Option<usize>,
}

fn sample_summary(d: &perceptscore_core::langevin::Diagnostics) -> SampleSummary {
    SampleSummary {
        final_variance: d.final_variance.clone(),
        late_half_variance: d.late_half_variance.clone(),
        convergence_step: d.convergence_step,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
