//! Pipeline stages over a run directory.
//!
//! A run directory is `<out>/run-<hash>` where `<hash>` is the first 12 hex
//! digits of the SHA-256 of the resolved config's JSON. Each stage reads its
//! inputs from and writes its outputs to that directory, so every file can be
//! regenerated from `config.json` alone.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use perceptscore_core::dataset::{load_dataset, save_points};
use perceptscore_core::estimation::{estimate_gradient, query_id, EstimationPlan, PerturbationSet, ScoreTarget};
use perceptscore_core::evaluators::{EvalError, Evaluator, PairQuery, PairResponse};
use perceptscore_core::gan::{self, GanSettings, Generator};
use perceptscore_core::langevin::{run_sampling, Diagnostics, LogScoreField, SamplerError, SamplerSettings};
use perceptscore_core::rng::{self, RngStream};
use perceptscore_core::score_net::{BatchMode, NetworkSpec, ScoreNetwork, TrainState};
use perceptscore_core::stats::{mean_variance, summarize_acceptability, AcceptabilitySummary};
use perceptscore_core::types::{matrix_to_points, points_to_matrix};
use perceptscore_core::{jsonl, DataPoint, RealDataset, RunConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const DATASET: &str = "dataset.csv";
    pub const QUERIES: &str = "queries.jsonl";
    pub const RESPONSES: &str = "responses.jsonl";
    pub const TARGETS: &str = "targets.jsonl";
    pub const OBSERVED: &str = "observed_gradients.csv";
    pub const SCORE_NET: &str = "score_net.json";
    pub const TRAIN_LOSS: &str = "train_loss.csv";
    pub const SAMPLES: &str = "samples.csv";
    pub const DIAGNOSTICS: &str = "diagnostics.json";
    pub const GENERATOR: &str = "generator.json";
    pub const GAN_SAMPLES: &str = "gan_samples.csv";
    pub const GAN_LOG: &str = "gan_log.csv";
    pub const STATS: &str = "stats.json";
    pub const ACCEPTABILITY: &str = "acceptability.csv";
    pub const GRADFIELD_RAW: &str = "gradfield_raw.csv";
    pub const GRADFIELD_REGULARIZED: &str = "gradfield_regularized.csv";
    pub const GRADFIELD_MODELED: &str = "gradfield_modeled.csv";
    pub const RATING_JOURNAL: &str = "rating_journal.jsonl";
}

pub const DEFAULT_ESTIMATE_CHUNK: usize = 1000;
pub const HISTOGRAM_BINS: usize = 20;

pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(6).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
    pub config: RunConfig,
}

impl RunDir {
    /// Creates `<out>/run-<hash>` and writes the resolved config into it.
    pub fn create(out: &Path, config: &RunConfig) -> CliResult<Self> {
        config.validate()?;
        let root = out.join(format!("run-{}", config_hash(config)));
        std::fs::create_dir_all(&root).map_err(|e| io_failure(&root, e))?;
        write_text(&root.join(files::CONFIG), &(config.to_json_pretty() + "\n"))?;
        Ok(RunDir {
            root,
            config: config.clone(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn require(&self, name: &str, command: &'static str) -> CliResult<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingPrerequisite {
                file: p.display().to_string(),
                command,
            })
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// The configured dataset file, or `N` draws from `N(0, I)` written to the
/// run directory.
pub fn dataset(run: &RunDir) -> CliResult<RealDataset> {
    let cfg = &run.config;
    if let Some(path) = &cfg.dataset {
        let path = Path::new(path);
        if !path.exists() {
            return Err(CliError::MissingPrerequisite {
                file: path.display().to_string(),
                command: "gendata",
            });
        }
        return Ok(load_dataset(path, cfg.d)?);
    }
    let ds = standard_normal_dataset(cfg.n_real, cfg.d, cfg.seed);
    save_points(&run.path(files::DATASET), ds.points())?;
    Ok(ds)
}

pub fn standard_normal_dataset(n: usize, d: usize, seed: u64) -> RealDataset {
    let mut s = RngStream::new(seed, "dataset");
    let points = (0..n)
        .map(|_| DataPoint::new((0..d).map(|_| s.standard_normal()).collect()).expect("finite draws"))
        .collect();
    RealDataset::new(points).expect("n >= 1")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub queries: usize,
    pub resumed: usize,
    pub targets: usize,
}

/// Queries the evaluator in chunks, appending each answered chunk to
/// `responses.jsonl`, so an interrupted run resumes where it stopped.
pub fn estimate(run: &RunDir, evaluator: &dyn Evaluator, chunk: usize) -> CliResult<EstimateSummary> {
    let cfg = &run.config;
    let ds = dataset(run)?;
    let plan = EstimationPlan::new(&ds, cfg)?;
    let queries = plan.queries();
    jsonl::write(&run.path(files::QUERIES), &queries)?;

    let responses_path = run.path(files::RESPONSES);
    let wanted: HashSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    let mut answered: HashMap<String, PairResponse> = HashMap::new();
    if responses_path.exists() {
        for r in jsonl::read::<PairResponse>(&responses_path)? {
            if wanted.contains(r.query_id.as_str()) && r.ratings_in_range() {
                answered.entry(r.query_id.clone()).or_insert(r);
            }
        }
    }
    let resumed = answered.len();
    let remaining: Vec<PairQuery> = queries
        .iter()
        .filter(|q| !answered.contains_key(&q.query_id))
        .cloned()
        .collect();
    for batch in remaining.chunks(chunk.max(1)) {
        let got = match evaluator.evaluate_batch(batch) {
            Ok(got) => got,
            Err(EvalError::Timeout { unanswered, answered: partial }) => {
                jsonl::append(&responses_path, &partial)?;
                return Err(CliError::Evaluator(format!(
                    "timed out with {} unanswered queries; answered ones were saved, rerun estimate to resume",
                    unanswered.len()
                )));
            }
            Err(e) => return Err(e.into()),
        };
        let mut by_id: HashMap<String, PairResponse> = got.into_iter().map(|r| (r.query_id.clone(), r)).collect();
        let mut ordered = Vec::with_capacity(batch.len());
        let mut missing = Vec::new();
        for q in batch {
            match by_id.remove(&q.query_id) {
                Some(r) if r.ratings_in_range() => ordered.push(r),
                Some(r) => {
                    return Err(CliError::Evaluator(format!("ratings for {} outside [0, 1]", r.query_id)))
                }
                None => missing.push(q.query_id.clone()),
            }
        }
        jsonl::append(&responses_path, &ordered)?;
        if !missing.is_empty() {
            return Err(EvalError::MissingRecords { ids: missing }.into());
        }
        answered.extend(ordered.into_iter().map(|r| (r.query_id.clone(), r)));
    }

    let in_order: Vec<&PairResponse> = queries.iter().map(|q| &answered[&q.query_id]).collect();
    jsonl::write(&responses_path, in_order)?;
    let points = plan.estimate(&answered)?;
    let targets: Vec<ScoreTarget> = points.iter().map(|p| p.target.clone()).collect();
    jsonl::write(&run.path(files::TARGETS), &targets)?;

    let mut csv = String::new();
    let d = cfg.d;
    let _ = writeln!(csv, "{}", coord_header(d, &["raw", "reg"]));
    for p in &points {
        let row: Vec<String> = p
            .target
            .point
            .coords()
            .iter()
            .chain(&p.raw_grad)
            .chain(&p.target.grad)
            .map(|v| v.to_string())
            .collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    write_text(&run.path(files::OBSERVED), &csv)?;
    Ok(EstimateSummary {
        queries: queries.len(),
        resumed,
        targets: targets.len(),
    })
}

fn coord_header(d: usize, grads: &[&str]) -> String {
    let mut cols: Vec<String> = if d == 2 {
        vec!["x".into(), "y".into()]
    } else {
        (1..=d).map(|j| format!("x{j}")).collect()
    };
    for g in grads {
        if d == 2 {
            cols.push(format!("{g}_gx"));
            cols.push(format!("{g}_gy"));
        } else {
            cols.extend((1..=d).map(|j| format!("{g}_g{j}")));
        }
    }
    cols.join(",")
}

pub fn load_targets(run: &RunDir) -> CliResult<Vec<ScoreTarget>> {
    let path = run.require(files::TARGETS, "estimate")?;
    Ok(jsonl::read(&path)?)
}

pub fn load_score_net(run: &RunDir) -> CliResult<ScoreNetwork> {
    let path = run.require(files::SCORE_NET, "train")?;
    Ok(ScoreNetwork::load(&path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn network_spec(cfg: &RunConfig) -> NetworkSpec {
    NetworkSpec {
        input_dim: cfg.d,
        hidden: cfg.hidden.clone(),
        seed: cfg.seed,
    }
}

pub fn train(run: &RunDir) -> CliResult<TrainSummary> {
    let cfg = &run.config;
    let targets = load_targets(run)?;
    let net = ScoreNetwork::new(&network_spec(cfg));
    let mut state = TrainState::new(net, cfg.lr);
    state
        .train(&targets, cfg.train_iters, BatchMode::Full)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    state.net.save(&run.path(files::SCORE_NET))?;
    let final_loss = state.net.loss(&targets);
    let mut csv = String::from("iteration,loss\n");
    for (k, l) in state.loss_history.iter().enumerate() {
        if k % 10 == 0 {
            let _ = writeln!(csv, "{k},{l}");
        }
    }
    let _ = writeln!(csv, "{},{final_loss}", state.loss_history.len());
    write_text(&run.path(files::TRAIN_LOSS), &csv)?;
    Ok(TrainSummary {
        params: state.net.num_params(),
        initial_loss: state.loss_history.first().copied().unwrap_or(final_loss),
        final_loss,
    })
}

pub fn sample(run: &RunDir) -> CliResult<Diagnostics> {
    let cfg = &run.config;
    let net = load_score_net(run)?;
    let ds = dataset(run)?;
    let field = LogScoreField {
        net: &net,
        value_floor: cfg.value_floor,
    };
    match run_sampling(&field, &SamplerSettings::from_config(cfg), cfg.seed, Some(&ds)) {
        Ok(out) => {
            save_points(&run.path(files::SAMPLES), &matrix_to_points(&out.state.positions))?;
            write_json(&run.path(files::DIAGNOSTICS), &out.diagnostics)?;
            Ok(out.diagnostics)
        }
        Err(SamplerError::Diverged { step, diagnostics }) => {
            write_json(&run.path(files::DIAGNOSTICS), &diagnostics)?;
            Err(CliError::Failed(format!(
                "sampling diverged at step {step}; diagnostics written to {}",
                run.path(files::DIAGNOSTICS).display()
            )))
        }
        Err(e) => Err(CliError::Failed(e.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanSummary {
    pub pretrain_mse: f64,
    pub value_trace: Vec<(usize, f64)>,
    pub sample_variance: Vec<f64>,
}

pub fn gan(run: &RunDir) -> CliResult<GanSummary> {
    let cfg = &run.config;
    let net = load_score_net(run)?;
    let base = RngStream::new(cfg.seed, rng::GAN);
    let mut generator = Generator::new(cfg.d, &cfg.hidden, cfg.seed);
    let pretrain_mse = generator.pretrain_identity(
        cfg.gan.pretrain_iters,
        cfg.gan.pretrain_lr,
        cfg.gan.batch,
        &mut base.substream("pretrain"),
    );
    let log = gan::train_generator(&mut generator, &net, GanSettings::from_config(cfg), &mut base.substream("train"))
        .map_err(|e| CliError::Failed(e.to_string()))?;
    generator.save(&run.path(files::GENERATOR))?;
    let samples = generator.generate(cfg.gan.n_samples, &mut base.substream("samples"));
    save_points(&run.path(files::GAN_SAMPLES), &matrix_to_points(&samples))?;
    let mut csv = String::from("iteration,mean_value\n");
    for (it, v) in &log.value_trace {
        let _ = writeln!(csv, "{it},{v}");
    }
    write_text(&run.path(files::GAN_LOG), &csv)?;
    let (_, sample_variance) = mean_variance(&matrix_to_points(&samples));
    Ok(GanSummary {
        pretrain_mse,
        value_trace: log.value_trace,
        sample_variance,
    })
}

/// Single-stimulus ratings from a pair evaluator: points are paired as
/// `(p[2k], p[2k+1])`; an odd last point is paired with itself.
pub fn rate_points(evaluator: &dyn Evaluator, points: &[DataPoint], label: &str) -> CliResult<Vec<f64>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let queries: Vec<PairQuery> = points
        .chunks(2)
        .enumerate()
        .map(|(k, pair)| PairQuery {
            query_id: format!("stats-{label}-{}", k + 1),
            periphery_id: (0, k + 1),
            perturb_index: 0,
            stim_plus: pair[0].clone(),
            stim_minus: pair.get(1).unwrap_or(&pair[0]).clone(),
        })
        .collect();
    let by_id: HashMap<String, PairResponse> = evaluator
        .evaluate_batch(&queries)?
        .into_iter()
        .map(|r| (r.query_id.clone(), r))
        .collect();
    let mut out = Vec::with_capacity(points.len());
    for (q, pair) in queries.iter().zip(points.chunks(2)) {
        let r = by_id
            .get(&q.query_id)
            .ok_or_else(|| EvalError::MissingRecords {
                ids: vec![q.query_id.clone()],
            })?;
        out.push(r.rating_plus);
        if pair.len() == 2 {
            out.push(r.rating_minus);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetStats {
    pub name: String,
    pub n: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub acceptability: AcceptabilitySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub sets: Vec<SetStats>,
    /// Generated over real, per dimension.
    pub variance_ratio: Vec<f64>,
    /// Generated mean acceptability over real mean acceptability.
    pub acceptability_ratio: f64,
}

impl StatsReport {
    pub fn set(&self, name: &str) -> Option<&SetStats> {
        self.sets.iter().find(|s| s.name == name)
    }
}

pub fn read_points(path: &Path, d: usize) -> CliResult<Vec<DataPoint>> {
    Ok(load_dataset(path, d)?.points().to_vec())
}

/// Variance and acceptability of the real data, the Langevin samples and,
/// when present, the generator samples.
pub fn stats(run: &RunDir, evaluator: &dyn Evaluator) -> CliResult<StatsReport> {
    let cfg = &run.config;
    let samples_path = run.require(files::SAMPLES, "sample")?;
    let real = dataset(run)?.points().to_vec();
    let mut named = vec![
        ("real", real),
        ("generated", read_points(&samples_path, cfg.d)?),
    ];
    let gan_path = run.path(files::GAN_SAMPLES);
    if gan_path.exists() {
        named.push(("gan", read_points(&gan_path, cfg.d)?));
    }
    let mut sets = Vec::new();
    let mut csv = String::from("set,index,acceptability\n");
    for (name, points) in &named {
        let ratings = rate_points(evaluator, points, name)?;
        for (k, r) in ratings.iter().enumerate() {
            let _ = writeln!(csv, "{name},{},{r}", k + 1);
        }
        let (mean, variance) = mean_variance(points);
        sets.push(SetStats {
            name: name.to_string(),
            n: points.len(),
            mean,
            variance,
            acceptability: summarize_acceptability(&ratings, HISTOGRAM_BINS),
        });
    }
    let variance_ratio = sets[1].variance.iter().zip(&sets[0].variance).map(|(g, r)| g / r).collect();
    let acceptability_ratio = sets[1].acceptability.mean / sets[0].acceptability.mean;
    let report = StatsReport {
        sets,
        variance_ratio,
        acceptability_ratio,
    };
    write_json(&run.path(files::STATS), &report)?;
    write_text(&run.path(files::ACCEPTABILITY), &csv)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lo: -10.0,
            hi: 10.0,
            n: 41,
        }
    }
}

impl GridSpec {
    /// Grid over the first two coordinates (the first one when `d = 1`),
    /// remaining coordinates at 0.
    pub fn points(&self, d: usize) -> CliResult<Vec<DataPoint>> {
        if !(self.lo < self.hi) || self.n < 2 || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(CliError::Config(format!(
                "grid needs lo < hi and n >= 2, got [{}, {}] x {}",
                self.lo, self.hi, self.n
            )));
        }
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        let axis: Vec<f64> = (0..self.n).map(|k| self.lo + step * k as f64).collect();
        let mut out = Vec::new();
        if d == 1 {
            for &x in &axis {
                out.push(DataPoint::new(vec![x])?);
            }
        } else {
            for &y in &axis {
                for &x in &axis {
                    let mut c = vec![0.0; d];
                    c[0] = x;
                    c[1] = y;
                    out.push(DataPoint::new(c)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub points: Vec<DataPoint>,
    pub raw: Vec<Vec<f64>>,
    pub regularized: Vec<Vec<f64>>,
    pub modeled: Vec<Vec<f64>>,
}

/// Raw NES gradients from the evaluator at each grid point, the same with
/// the pull toward the nearest real datum, and the network's gradient head.
pub fn gradfield(run: &RunDir, evaluator: &dyn Evaluator, grid: GridSpec) -> CliResult<GradientField> {
    let cfg = &run.config;
    let net = load_score_net(run)?;
    let ds = dataset(run)?;
    let points = grid.points(cfg.d)?;
    let mut stream = RngStream::new(cfg.seed, "gradfield");
    let origin = DataPoint::zeros(cfg.d);
    let mut sets = Vec::with_capacity(points.len());
    let mut queries = Vec::with_capacity(points.len() * cfg.n_perturb);
    for (k, p) in points.iter().enumerate() {
        let mut perturbations = Vec::with_capacity(cfg.n_perturb);
        for i in 1..=cfg.n_perturb {
            let dx = stream.gaussian(&origin, cfg.sigma_nes)?;
            let plus = p.coords().iter().zip(dx.coords()).map(|(a, b)| a + b).collect();
            let minus = p.coords().iter().zip(dx.coords()).map(|(a, b)| a - b).collect();
            queries.push(PairQuery {
                query_id: format!("grid-{}", query_id(k + 1, 0, i)),
                periphery_id: (k + 1, 0),
                perturb_index: i,
                stim_plus: DataPoint::new(plus)?,
                stim_minus: DataPoint::new(minus)?,
            });
            perturbations.push(dx);
        }
        sets.push(PerturbationSet {
            periphery_id: (k + 1, 0),
            perturbations,
        });
    }
    let by_id: HashMap<String, PairResponse> = evaluator
        .evaluate_batch(&queries)?
        .into_iter()
        .map(|r| (r.query_id.clone(), r))
        .collect();
    let mut raw = Vec::with_capacity(points.len());
    let mut regularized = Vec::with_capacity(points.len());
    for ((p, set), qs) in points.iter().zip(&sets).zip(queries.chunks(cfg.n_perturb)) {
        let responses = qs
            .iter()
            .map(|q| {
                by_id.get(&q.query_id).cloned().ok_or_else(|| EvalError::MissingRecords {
                    ids: vec![q.query_id.clone()],
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let g = estimate_gradient(&responses, set, cfg.sigma_nes)?;
        let anchor = ds
            .points()
            .iter()
            .min_by(|a, b| a.distance(p).total_cmp(&b.distance(p)))
            .expect("non-empty dataset");
        let pull = f64::from(cfg.regularization_sign) * cfg.b;
        regularized.push(
            g.iter()
                .zip(anchor.coords().iter().zip(p.coords()))
                .map(|(g, (a, x))| g + pull * (a - x))
                .collect(),
        );
        raw.push(g);
    }
    let (_, heads) = net.forward_batch(points_to_matrix(&points).view());
    let modeled: Vec<Vec<f64>> = heads.rows().into_iter().map(|r| r.to_vec()).collect();
    for (name, field) in [
        (files::GRADFIELD_RAW, &raw),
        (files::GRADFIELD_REGULARIZED, &regularized),
        (files::GRADFIELD_MODELED, &modeled),
    ] {
        write_text(&run.path(name), &field_csv(&points, field))?;
    }
    Ok(GradientField {
        points,
        raw,
        regularized,
        modeled,
    })
}

fn field_csv(points: &[DataPoint], grads: &[Vec<f64>]) -> String {
    let d = points.first().map_or(2, |p| p.dim());
    let header = if d == 2 {
        "x,y,gx,gy".to_string()
    } else {
        let xs = (1..=d).map(|j| format!("x{j}"));
        let gs = (1..=d).map(|j| format!("g{j}"));
        xs.chain(gs).collect::<Vec<_>>().join(",")
    };
    let mut csv = header + "\n";
    for (p, g) in points.iter().zip(grads) {
        let row: Vec<String> = p.coords().iter().chain(g).map(|v| v.to_string()).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    csv
}

/// Positions as a matrix; convenience for callers comparing sample sets.
pub fn samples_matrix(path: &Path, d: usize) -> CliResult<Array2<f64>> {
    Ok(points_to_matrix(&read_points(path, d)?))
}
