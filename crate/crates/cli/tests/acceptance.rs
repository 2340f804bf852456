//! Acceptance suite. Runs every criterion in sequence (so the timed ones do
//! not compete for cores) and prints one PASS/FAIL line per criterion.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use perceptscore_cli::evaluator::EvaluatorSpec;
use perceptscore_cli::pipeline::{self, files, RunDir};
use perceptscore_core::estimation::{
    build_targets, estimate_gradient, pair_queries, sample_perturbations, PeripheryPoint, ScoreTarget,
};
use perceptscore_core::evaluators::{noise_wrap, Evaluator, Oracle, OracleShape, OracleSpec};
use perceptscore_core::kde::kde_mode;
use perceptscore_core::langevin::{run_sampling, standard_normal_field, SamplerSettings};
use perceptscore_core::rng::{self, RngStream};
use perceptscore_core::score_net::{NetworkSpec, ScoreNetwork};
use perceptscore_core::stats::ks_standard_normal;
use perceptscore_core::{jsonl, DataPoint, RunConfig};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit: Option<Duration>) -> bool {
    limit.is_none_or(|l| elapsed < l)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

fn gradient_check() -> Outcome {
    let net = ScoreNetwork::new(&NetworkSpec::standard(2, 17));
    let mut s = RngStream::new(17, "gradient-check");
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let target = ScoreTarget {
            point: DataPoint::new(vec![3.0 * s.standard_normal(), 3.0 * s.standard_normal()]).unwrap(),
            value: s.uniform(0.0, 1.0),
            grad: vec![s.standard_normal(), s.standard_normal()],
            anchor_id: 1,
        };
        let batch = [target];
        let (_, grad) = net.loss_and_gradient(&batch);
        for _ in 0..10 {
            let k = (s.uniform(0.0, 1.0) * net.num_params() as f64) as usize;
            let h = 1e-5;
            let mut probe = net.clone();
            probe.params_mut()[k] += h;
            let up = probe.loss(&batch);
            probe.params_mut()[k] -= 2.0 * h;
            let down = probe.loss(&batch);
            let numeric = (up - down) / (2.0 * h);
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over 10 parameters x 5 inputs"))
}

fn nes_consistency() -> Outcome {
    let shape = OracleShape::gaussian_bump(2);
    let oracle = noise_wrap(shape.clone(), 0.0, 0.0, RngStream::new(0, rng::NOISE));
    let mut where_ = RngStream::new(23, "nes-points");
    let mut perturb = RngStream::new(23, rng::PERTURBATION);
    let (mut worst_rel, mut worst_deg): (f64, f64) = (0.0, 0.0);
    let mut tested = 0;
    while tested < 20 {
        let x = vec![where_.uniform(-5.0, 5.0), where_.uniform(-5.0, 5.0)];
        let truth = shape.gradient(&x);
        if norm(&truth) <= 0.05 {
            continue;
        }
        tested += 1;
        let p = PeripheryPoint {
            point: DataPoint::new(x.clone()).unwrap(),
            anchor_id: tested,
            anchor: DataPoint::new(x).unwrap(),
            m: 1,
        };
        let set = sample_perturbations(std::slice::from_ref(&p), 5000, 0.1, &mut perturb)
            .unwrap()
            .remove(0);
        let responses = oracle.evaluate_batch(&pair_queries(&p, &set)).unwrap();
        let est = estimate_gradient(&responses, &set, 0.1).unwrap();
        let err: Vec<f64> = est.iter().zip(&truth).map(|(a, b)| a - b).collect();
        worst_rel = worst_rel.max(norm(&err) / norm(&truth));
        worst_deg = worst_deg.max(cosine(&est, &truth).clamp(-1.0, 1.0).acos().to_degrees());
    }
    outcome(
        worst_rel < 0.10 && worst_deg < 5.0,
        format!("20 points: max relative L2 error {:.3}, max angle {worst_deg:.2} deg", worst_rel),
    )
}

fn kde_mode_check() -> Outcome {
    let clipped = [0.0, 0.0, 0.0, 0.0, 0.9];
    let mode = kde_mode(&clipped);
    let mean = clipped.iter().sum::<f64>() / 5.0;
    let mut ok = mode.abs() <= 0.02 && mean.abs() > 0.02;
    let mut detail = format!("clipped fixture mode {mode:.4} (mean {mean:.2})");
    let mut s = RngStream::new(5, "kde-symmetric");
    for center in [0.3, 0.5, 0.7] {
        let mut xs = Vec::new();
        for _ in 0..100 {
            let dev = (0.08 * s.standard_normal()).clamp(-0.25, 0.25);
            xs.push(center + dev);
            xs.push(center - dev);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let mode = kde_mode(&xs);
        ok &= (mode - mean).abs() <= 0.02;
        detail.push_str(&format!("; symmetric at {center}: |mode - mean| {:.4}", (mode - mean).abs()));
    }
    outcome(ok, detail)
}

fn langevin_correctness() -> Outcome {
    let settings = SamplerSettings {
        n_chains: 200,
        eps: 0.1,
        iters: 100_000,
        thin: 100,
        init: Default::default(),
        collect_every: Some(1000),
    };
    let run = run_sampling(&standard_normal_field(2), &settings, 0, None).unwrap();
    let d = &run.diagnostics;
    let mut ok = true;
    let mut detail = String::new();
    for j in 0..2 {
        let (m, v) = (d.late_half_mean[j], d.late_half_variance[j]);
        let column: Vec<f64> = run.collected.column(j).to_vec();
        let ks = ks_standard_normal(&column);
        ok &= (-0.1..=0.1).contains(&m) && (0.85..=1.15).contains(&v) && ks.p_value > 0.01;
        detail.push_str(&format!(
            "dim {j}: mean {m:+.4} var {v:.4} KS D {:.4} p {:.3} (n {}); ",
            ks.statistic, ks.p_value, ks.n
        ));
    }
    outcome(ok, detail.trim_end_matches("; ").to_string())
}

/// KS rejections over many seeds should occur at about the nominal rate.
fn langevin_calibration() -> Outcome {
    let settings = SamplerSettings {
        n_chains: 200,
        eps: 0.1,
        iters: 100_000,
        thin: 100,
        init: Default::default(),
        collect_every: Some(1000),
    };
    let mut p_values = Vec::new();
    for seed in 1..=20 {
        let run = run_sampling(&standard_normal_field(2), &settings, seed, None).unwrap();
        for j in 0..2 {
            p_values.push(ks_standard_normal(&run.collected.column(j).to_vec()).p_value);
        }
    }
    let below = |t: f64| p_values.iter().filter(|p| **p < t).count();
    outcome(
        below(0.01) <= 3 && below(0.05) <= 6,
        format!(
            "{} KS p-values over seeds 1-20: {} below 0.01, {} below 0.05, {} below 0.5",
            p_values.len(),
            below(0.01),
            below(0.05),
            below(0.5)
        ),
    )
}

fn plateau_config() -> RunConfig {
    let mut cfg = RunConfig::tuned();
    cfg.oracle = Some(OracleSpec::noiseless(OracleShape::plateau(2)));
    cfg
}

fn regularization_check() -> Outcome {
    let cfg = plateau_config();
    let ds = pipeline::standard_normal_dataset(cfg.n_real, cfg.d, cfg.seed);
    let oracle = OracleSpec::noiseless(OracleShape::plateau(2)).build(RngStream::new(cfg.seed, rng::NOISE));
    let run = build_targets(&ds, &cfg, &oracle).unwrap();
    let (mut count, mut worst_cos, mut worst_mag): (usize, f64, f64) = (0, 1.0, 0.0);
    let small: Vec<f64> = run.points.iter().map(|p| norm(&p.raw_grad)).filter(|n| *n < 1e-3).collect();
    let nonzero = small.iter().filter(|n| **n > 0.0).count();
    let largest = small.iter().copied().fold(0.0, f64::max);
    for p in run.points.iter().filter(|p| norm(&p.raw_grad) < 1e-3) {
        let pull: Vec<f64> = p
            .periphery
            .anchor
            .coords()
            .iter()
            .zip(p.periphery.point.coords())
            .map(|(a, x)| a - x)
            .collect();
        count += 1;
        worst_cos = worst_cos.min(cosine(&p.target.grad, &pull));
        worst_mag = worst_mag.max((norm(&p.target.grad) - cfg.b * norm(&pull)).abs());
    }
    outcome(
        count > 0 && worst_cos > 0.999 && worst_mag <= 1e-6,
        format!(
            "{count} of {} periphery points with raw norm < 1e-3 ({nonzero} nonzero, largest {largest:.2e}): min cosine {worst_cos:.9}, max magnitude error {worst_mag:.2e}",
            run.points.len()
        ),
    )
}

/// The exact case: a zero raw gradient leaves only the anchor pull.
fn regularization_at_zero() -> Outcome {
    let cfg = plateau_config();
    let ds = pipeline::standard_normal_dataset(cfg.n_real, cfg.d, cfg.seed);
    let oracle = OracleSpec::noiseless(OracleShape::plateau(2)).build(RngStream::new(cfg.seed, rng::NOISE));
    let run = build_targets(&ds, &cfg, &oracle).unwrap();
    let zero: Vec<_> = run.points.iter().filter(|p| p.raw_grad.iter().all(|g| *g == 0.0)).collect();
    let (mut worst_cos, mut worst_mag): (f64, f64) = (1.0, 0.0);
    for p in &zero {
        let pull: Vec<f64> = p
            .periphery
            .anchor
            .coords()
            .iter()
            .zip(p.periphery.point.coords())
            .map(|(a, x)| a - x)
            .collect();
        worst_cos = worst_cos.min(cosine(&p.target.grad, &pull));
        worst_mag = worst_mag.max((norm(&p.target.grad) - cfg.b * norm(&pull)).abs());
    }
    outcome(
        !zero.is_empty() && worst_cos > 0.999 && worst_mag <= 1e-6,
        format!(
            "{} points with zero raw gradient: min cosine {worst_cos:.12}, max magnitude error {worst_mag:.2e}",
            zero.len()
        ),
    )
}

fn column_variances(m: &Array2<f64>) -> Vec<f64> {
    perceptscore_core::langevin::column_variance(m)
}

struct PlateauRun {
    stats: pipeline::StatsReport,
    elapsed: Duration,
    net: ScoreNetwork,
    targets: Vec<ScoreTarget>,
    field: pipeline::GradientField,
}

fn plateau_pipeline(root: &Path) -> PlateauRun {
    let cfg = plateau_config();
    let run = RunDir::create(root, &cfg).unwrap();
    let evaluator = EvaluatorSpec::Plateau.build(&cfg).unwrap();
    let start = Instant::now();
    pipeline::estimate(&run, evaluator.as_ref(), pipeline::DEFAULT_ESTIMATE_CHUNK).unwrap();
    pipeline::train(&run).unwrap();
    pipeline::sample(&run).unwrap();
    let elapsed = start.elapsed();
    let stats = pipeline::stats(&run, evaluator.as_ref()).unwrap();
    let field = pipeline::gradfield(&run, evaluator.as_ref(), pipeline::GridSpec::default()).unwrap();
    PlateauRun {
        stats,
        elapsed,
        net: pipeline::load_score_net(&run).unwrap(),
        targets: pipeline::load_targets(&run).unwrap(),
        field,
    }
}

fn widening(run: &PlateauRun) -> Outcome {
    let g = run.stats.set("generated").unwrap();
    let ok = g.variance.iter().all(|v| *v > 2.0) && g.acceptability.frac_at_least_half >= 0.9;
    outcome(
        ok,
        format!(
            "generated variance [{:.3}, {:.3}] (real [{:.3}, {:.3}]), acceptability >= 0.5 for {:.1}% of {}",
            g.variance[0],
            g.variance[1],
            run.stats.sets[0].variance[0],
            run.stats.sets[0].variance[1],
            100.0 * g.acceptability.frac_at_least_half,
            g.n
        ),
    )
}

fn parity(run: &PlateauRun) -> Outcome {
    let real = run.stats.set("real").unwrap().acceptability.mean;
    let generated = run.stats.set("generated").unwrap().acceptability.mean;
    outcome(
        generated >= 0.9 * real,
        format!("mean acceptability generated {generated:.4} vs real {real:.4} (ratio {:.4})", generated / real),
    )
}

/// The learned network and its gradient field on the plateau fixture.
fn learned_field(run: &PlateauRun) -> Outcome {
    let shape = OracleShape::plateau(2);
    let value_err = run
        .targets
        .iter()
        .map(|t| (run.net.forward(t.point.coords()).0 - t.value).abs())
        .sum::<f64>()
        / run.targets.len() as f64;
    let mut min_cos: f64 = 1.0;
    for k in 0..64 {
        let angle = std::f64::consts::TAU * k as f64 / 64.0;
        for r in [3.5, 4.0, 4.5] {
            let x = [r * angle.cos(), r * angle.sin()];
            min_cos = min_cos.min(cosine(&run.net.forward(&x).1, &shape.gradient(&x)));
        }
    }
    let mut grid_min: f64 = 1.0;
    for (p, g) in run.field.points.iter().zip(&run.field.modeled) {
        let r = p.norm();
        if (3.25..=4.75).contains(&r) {
            let inward: Vec<f64> = p.coords().iter().map(|c| -c).collect();
            grid_min = grid_min.min(cosine(g, &inward));
        }
    }
    outcome(
        value_err < 0.1 && min_cos > 0.8 && grid_min > 0.8,
        format!(
            "mean |value head - target| {value_err:.4}; ramp cosine with oracle gradient min {min_cos:.3}; gradfield ramp cosine min {grid_min:.3}"
        ),
    )
}

fn mode_collapse(root: &Path) -> (Outcome, Duration, Outcome) {
    let mut cfg = RunConfig::tuned();
    cfg.oracle = Some(OracleSpec::noiseless(OracleShape::bimodal_bump(2)));
    let run = RunDir::create(root, &cfg).unwrap();
    let evaluator = EvaluatorSpec::Bimodal.build(&cfg).unwrap();
    let start = Instant::now();
    pipeline::estimate(&run, evaluator.as_ref(), pipeline::DEFAULT_ESTIMATE_CHUNK).unwrap();
    pipeline::train(&run).unwrap();
    pipeline::sample(&run).unwrap();
    let gan = pipeline::gan(&run).unwrap();
    let elapsed = start.elapsed();
    let langevin = column_variances(&pipeline::samples_matrix(&run.path(files::SAMPLES), 2).unwrap());
    let generator = column_variances(&pipeline::samples_matrix(&run.path(files::GAN_SAMPLES), 2).unwrap());
    let ratios: Vec<f64> = generator.iter().zip(&langevin).map(|(g, l)| g / l).collect();
    let collapse = outcome(
        ratios.iter().all(|r| *r < 0.5),
        format!(
            "generator variance [{:.3e}, {:.3e}] vs Langevin [{:.3}, {:.3}], ratios [{:.2e}, {:.2e}]",
            generator[0], generator[1], langevin[0], langevin[1], ratios[0], ratios[1]
        ),
    );
    let trace = &gan.value_trace;
    let worst_drop = trace
        .iter()
        .enumerate()
        .flat_map(|(i, (_, a))| trace[i + 1..].iter().map(move |(_, b)| a - b))
        .fold(0.0f64, f64::max);
    let ascent = outcome(
        worst_drop <= 0.02,
        format!(
            "mean value head {:.4} -> {:.4} over {} readings, largest drop {worst_drop:.4}",
            trace[0].1,
            trace.last().unwrap().1,
            trace.len()
        ),
    );
    (collapse, elapsed, ascent)
}

fn determinism(root: &Path) -> Outcome {
    let mut cfg = plateau_config();
    cfg.n_real = 30;
    cfg.train_iters = 300;
    cfg.langevin_iters = 3000;
    cfg.n_chains = 50;
    cfg.gan.iters = 300;
    cfg.gan.pretrain_iters = 200;
    std::fs::create_dir_all(root).unwrap();
    let config_path = root.join("fixture.json");
    std::fs::write(&config_path, cfg.to_json_pretty()).unwrap();
    let dirs = [root.join("a"), root.join("b")];
    for out in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_perceptscore"))
            .arg("--config")
            .arg(&config_path)
            .arg("--out")
            .arg(out)
            .arg("run")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    }
    let run = format!("run-{}", pipeline::config_hash(&cfg));
    let names = [
        files::RESPONSES,
        files::TARGETS,
        files::SCORE_NET,
        files::SAMPLES,
        files::DIAGNOSTICS,
        files::GENERATOR,
        files::GAN_SAMPLES,
        files::STATS,
        files::GRADFIELD_MODELED,
    ];
    let mut differing = Vec::new();
    for name in names {
        let a = std::fs::read(dirs[0].join(&run).join(name)).unwrap();
        let b = std::fs::read(dirs[1].join(&run).join(name)).unwrap();
        if a != b || a.is_empty() {
            differing.push(name);
        }
    }
    let targets: Vec<ScoreTarget> = jsonl::read(&dirs[0].join(&run).join(files::TARGETS)).unwrap();
    outcome(
        differing.is_empty() && targets.len() == 90,
        if differing.is_empty() {
            format!("{} files byte-identical across two CLI runs", names.len())
        } else {
            format!("files differ: {differing:?}")
        },
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(String, bool)> = Vec::new();
    let mut report = |label: &str, o: Outcome, elapsed: Duration, limit: Option<Duration>| {
        let in_time = within(elapsed, limit);
        let passed = o.passed && in_time;
        let timing = match limit {
            Some(l) => format!("{:.1} s, limit {} s", elapsed.as_secs_f64(), l.as_secs()),
            None => format!("{:.1} s", elapsed.as_secs_f64()),
        };
        println!(
            "{} {label}: {} ({timing})",
            if passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((label.to_string(), passed));
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        (o, start.elapsed())
    };

    let (o, t) = timed(&gradient_check);
    report("criterion 1 gradient check", o, t, Some(Duration::from_secs(10)));
    let (o, t) = timed(&nes_consistency);
    report("criterion 2 NES consistency", o, t, Some(Duration::from_secs(60)));
    let (o, t) = timed(&kde_mode_check);
    report("criterion 3 KDE mode", o, t, None);
    let (o, t) = timed(&langevin_correctness);
    report("criterion 4 Langevin correctness", o, t, Some(Duration::from_secs(120)));
    let (o, t) = timed(&langevin_calibration);
    report("check Langevin KS calibration", o, t, None);

    let plateau = plateau_pipeline(&tmp.path().join("plateau"));
    let elapsed = plateau.elapsed;
    report("criterion 5 widening", widening(&plateau), elapsed, Some(Duration::from_secs(600)));
    report("criterion 6 acceptability parity", parity(&plateau), elapsed, None);
    report("check learned plateau field", learned_field(&plateau), elapsed, None);

    let (collapse, elapsed, ascent) = mode_collapse(&tmp.path().join("bimodal"));
    report("criterion 7 mode collapse", collapse, elapsed, Some(Duration::from_secs(600)));
    report("check generator ascent", ascent, elapsed, None);

    let (o, t) = timed(&regularization_check);
    report("criterion 8 regularization", o, t, None);
    let (o, t) = timed(&regularization_at_zero);
    report("check regularization at zero raw gradient", o, t, None);

    let (o, t) = timed(&|| determinism(&tmp.path().join("determinism")));
    report("criterion 9 determinism", o, t, None);

    let failed: Vec<&str> = results.iter().filter(|(_, p)| !p).map(|(l, _)| l.as_str()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
