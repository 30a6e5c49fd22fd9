//! End-to-end acceptance checks on synthetic cohorts with a known generator.
//!
//! Runs every criterion and prints one PASS/FAIL line each. Arguments that do
//! not start with `-` filter criteria by number or name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survrisk::cohort::{generate_synthetic, preprocess, stratified_split, FeatureMatrix, Scaling, SurvivalOutcome, SynthConfig};
use survrisk::coxph::{fit, neg_log_partial_likelihood, CoxFitConfig, Ties};
use survrisk::metrics::{calibration, concordance, concordance_ci};
use survrisk::neural::{cox_batch_loss, train, Activation, MlpSpec, MlpSurvModel, Mode, OptimizerKind};
use survrisk::selection::{backward_eliminate, univariate_screen, BatchSchedule};
use survrisk::tuning::{search, Distribution, Sampler, SearchConfig, SearchSpace, TpeConfig};

type Check = Result<String, String>;
type Snapshot = BTreeMap<String, Vec<u8>>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { id: 1, name: "cox_recovers_generator_coefficients", limit: Duration::from_secs(30), run: cox_recovery },
        Criterion { id: 2, name: "gradients_match_finite_differences", limit: Duration::from_secs(10), run: gradient_exactness },
        Criterion { id: 3, name: "concordance_matches_brute_force", limit: Duration::from_secs(30), run: concordance_brute_force },
        Criterion { id: 4, name: "linear_network_matches_cox", limit: Duration::from_secs(120), run: linear_network_equivalence },
        Criterion { id: 5, name: "backward_elimination_fidelity", limit: Duration::from_secs(180), run: elimination_fidelity },
        Criterion { id: 6, name: "well_specified_model_is_calibrated", limit: Duration::from_secs(30), run: calibration_check },
        Criterion { id: 7, name: "bootstrap_interval_covers_estimate", limit: Duration::from_secs(120), run: bootstrap_coverage },
        Criterion { id: 8, name: "tpe_beats_random_search", limit: Duration::from_secs(1200), run: tpe_vs_random },
        Criterion { id: 9, name: "cli_reruns_are_byte_identical", limit: Duration::from_secs(60), run: cli_reproducibility },
    ];
    let selected = criteria.iter().filter(|c| {
        filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f)
    });
    let mut failures = 0;
    for c in selected {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match outcome {
            Ok(d) if elapsed <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; exceeded time limit")),
            Err(d) => (false, d),
        };
        failures += usize::from(!pass);
        println!(
            "[{}] {} {} ({:.1}s of {}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}

fn cohort(cfg: &SynthConfig) -> (FeatureMatrix, Vec<SurvivalOutcome>) {
    let (table, _) = generate_synthetic(cfg).expect("generator config is valid");
    let (x, y, _) = preprocess(&table, 0.001).expect("synthetic cohort preprocesses");
    (x, y)
}

struct Splits {
    train: (FeatureMatrix, Vec<SurvivalOutcome>),
    validation: (FeatureMatrix, Vec<SurvivalOutcome>),
    test: (FeatureMatrix, Vec<SurvivalOutcome>),
}

fn split(x: &FeatureMatrix, y: &[SurvivalOutcome], seed: u64) -> Splits {
    let s = stratified_split(y, 0.25, 0.25, seed).expect("both classes present");
    let pick = |rows: &[usize]| (x.select_rows(rows), rows.iter().map(|&i| y[i]).collect::<Vec<_>>());
    Splits { train: pick(&s.train), validation: pick(&s.validation), test: pick(&s.test) }
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn cox_recovery() -> Check {
    let truth = vec![0.5, -0.4, 0.3, -0.3, 0.2, 0.6, -0.2, 0.1, 0.0, -0.5];
    let cfg = SynthConfig { n_subjects: 20_000, true_log_hr: truth.clone(), target_prevalence: 0.0323, seed: 1, ..SynthConfig::default() };
    let (x, y) = cohort(&cfg);
    let model = fit(&x, &y, &CoxFitConfig::default()).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (j, b) in model.beta.iter().enumerate() {
        let sd = match x.scaling[j] {
            Scaling::Standardized { sd, .. } => sd,
            Scaling::Identity => 1.0,
        };
        worst = worst.max((b / sd - truth[j]).abs());
    }
    let events = y.iter().filter(|o| o.event).count();
    ensure(model.converged && worst <= 0.1, format!("{events} events, max |beta - truth| = {worst:.4}"))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn random_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    FeatureMatrix::from_rows((0..d).map(|j| format!("x{j}")).collect(), &rows).unwrap()
}

fn random_outcomes(n: usize, rng: &mut ChaCha8Rng) -> Vec<SurvivalOutcome> {
    // Times on a coarse grid so that ties occur.
    (0..n).map(|_| SurvivalOutcome::new(f64::from(rng.random_range(1..15u32)) * 0.5, rng.random::<f64>() < 0.6)).collect()
}

fn cox_worst_error(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let (n, d) = (80, 4);
    let x = random_matrix(n, d, rng);
    let y = random_outcomes(n, rng);
    let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for ties in [Ties::Breslow, Ties::Efron] {
        let at = |b: &[f64]| neg_log_partial_likelihood(b, &x, &y, ties, 0.0).map_err(err);
        let base = at(&beta)?;
        for j in 0..d {
            let (mut up, mut down) = (beta.clone(), beta.clone());
            up[j] += h;
            down[j] -= h;
            let (eu, ed) = (at(&up)?, at(&down)?);
            worst = worst.max(relative_error(base.gradient[j], (eu.value - ed.value) / (2.0 * h)));
            for k in 0..d {
                worst = worst.max(relative_error(base.hessian[(k, j)], (eu.gradient[k] - ed.gradient[k]) / (2.0 * h)));
            }
        }
    }
    Ok(worst)
}

fn network_loss(m: &MlpSurvModel, x: &[f64], y: &[SurvivalOutcome], mode: Mode, mask_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let cache = m.forward_batch(x, y.len(), mode, Some(&mut rng)).unwrap();
    cox_batch_loss(&cache.scores, y).unwrap().0
}

fn network_worst_error(spec: &MlpSpec, mode: Mode, rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (16, 3);
    let mut m = MlpSurvModel::new(d, spec, rng.random()).unwrap();
    for (tensor, _) in m.parameters_mut() {
        tensor.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y = random_outcomes(n, rng);
    let mask_seed: u64 = rng.random();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let cache = m.forward_batch(&x, n, mode, Some(&mut mask_rng)).unwrap();
    let (_, d_scores) = cox_batch_loss(&cache.scores, &y).unwrap();
    let grads = m.backward(&cache, &d_scores);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..grads.tensors.len() {
        for k in 0..grads.tensors[t].len() {
            let orig = m.parameters()[t][k];
            m.parameters_mut()[t].0[k] = orig + h;
            let up = network_loss(&m, &x, &y, mode, mask_seed);
            m.parameters_mut()[t].0[k] = orig - h;
            let down = network_loss(&m, &x, &y, mode, mask_seed);
            m.parameters_mut()[t].0[k] = orig;
            worst = worst.max(relative_error(grads.tensors[t][k], (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn gradient_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cox: f64 = 0.0;
    for _ in 0..5 {
        cox = cox.max(cox_worst_error(&mut rng)?);
    }
    let spec = |hidden: Vec<usize>, activation, dropout_rate, batch_norm| MlpSpec {
        hidden_layers: hidden,
        activation,
        dropout_rate,
        batch_norm,
        ..MlpSpec::default()
    };
    let cases = [
        (spec(vec![], Activation::Relu, 0.0, false), Mode::Train),
        (spec(vec![6], Activation::Relu, 0.0, true), Mode::Train),
        (spec(vec![5, 4], Activation::Selu, 0.3, true), Mode::Train),
        (spec(vec![6, 4, 3], Activation::LeakyRelu, 0.2, false), Mode::Train),
        (spec(vec![5, 3], Activation::Selu, 0.5, true), Mode::Infer),
    ];
    let mut net: f64 = 0.0;
    for (s, mode) in &cases {
        for _ in 0..3 {
            net = net.max(network_worst_error(s, *mode, &mut rng));
        }
    }
    ensure(cox < 1e-5 && net < 1e-4, format!("worst relative error: cox {cox:.2e}, network {net:.2e}"))
}

fn brute_force(scores: &[f64], y: &[SurvivalOutcome]) -> (u64, u64, u64) {
    let (mut conc, mut disc, mut tied) = (0, 0, 0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i].event && y[i].duration < y[j].duration {
                if scores[i] > scores[j] {
                    conc += 1;
                } else if scores[i] < scores[j] {
                    disc += 1;
                } else {
                    tied += 1;
                }
            }
        }
    }
    (conc, disc, tied)
}

fn concordance_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut compared = 0;
    for instance in 0..1000 {
        let n = rng.random_range(2..=200);
        let time_levels = rng.random_range(1..=2 * n as u32);
        let score_levels = rng.random_range(1..=2 * n as u32);
        let event_rate = rng.random_range(0.05..1.0);
        let y: Vec<SurvivalOutcome> = (0..n)
            .map(|_| SurvivalOutcome::new(f64::from(rng.random_range(1..=time_levels)), rng.random::<f64>() < event_rate))
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..score_levels)) * 0.37 - 3.0).collect();
        let (conc, disc, tied) = brute_force(&scores, &y);
        let comparable = conc + disc + tied;
        match concordance(&scores, &y) {
            Ok(r) => {
                let expected = (conc as f64 + 0.5 * tied as f64) / comparable as f64;
                if (r.concordant, r.discordant, r.tied_risk) != (conc, disc, tied) || r.c_index != expected {
                    return Err(format!("instance {instance} (n={n}): {r:?} vs brute force ({conc}, {disc}, {tied})"));
                }
                compared += 1;
            }
            Err(e) if comparable == 0 => drop(e),
            Err(e) => return Err(format!("instance {instance}: {e} with {comparable} comparable pairs")),
        }
    }
    Ok(format!("1000 instances identical ({compared} with comparable pairs)"))
}

fn linear_network_equivalence() -> Check {
    let cfg = SynthConfig { n_subjects: 10_000, true_log_hr: vec![0.8, -0.5, 0.3, 0.0, 0.0], target_prevalence: 0.2, seed: 4, ..SynthConfig::default() };
    let (x, y) = cohort(&cfg);
    let s = split(&x, &y, 4);
    let (xt, yt) = &s.train;
    let (xv, yv) = &s.validation;
    let (xs, ys) = &s.test;
    let cox = fit(xt, yt, &CoxFitConfig::default()).map_err(err)?;
    let spec = MlpSpec {
        hidden_layers: vec![],
        dropout_rate: 0.0,
        batch_norm: false,
        weight_decay: 0.0,
        optimizer: OptimizerKind::Adam,
        learning_rate: 0.05,
        batch_size: yt.len(),
        max_epochs: 500,
        early_stop_patience: 0,
        ..MlpSpec::default()
    };
    let net = train(xt, yt, xv, yv, &spec, 4).map_err(err)?;
    let c_net = concordance(&net.predict(xs).map_err(err)?, ys).map_err(err)?.c_index;
    let c_cox = concordance(&cox.linear_predictor(xs).map_err(err)?, ys).map_err(err)?.c_index;
    let gap = (c_net - c_cox).abs();
    ensure(gap <= 0.005, format!("test C network {c_net:.5}, cox {c_cox:.5}, gap {gap:.5}"))
}

fn elimination_fidelity() -> Check {
    let mut truth = vec![0.5, -0.4, 0.35, -0.3, 0.25];
    truth.extend([0.0; 20]);
    let cfg = SynthConfig { n_subjects: 20_000, true_log_hr: truth, target_prevalence: 0.1, seed: 5, ..SynthConfig::default() };
    let (x, y) = cohort(&cfg);
    let s = split(&x, &y, 5);
    let (xt, yt) = &s.train;
    let (xv, yv) = &s.validation;
    let cox_cfg = CoxFitConfig::default();
    let screen = univariate_screen(xt, yt, 0.1, &cox_cfg).map_err(err)?;
    let trace = backward_eliminate(
        &xt.select_named(&screen.kept).map_err(err)?,
        yt,
        &xv.select_named(&screen.kept).map_err(err)?,
        yv,
        0.001,
        BatchSchedule::default(),
        &cox_cfg,
    )
    .map_err(err)?;
    let survivors = &trace.surviving_features;
    let signal_kept = (0..5).filter(|j| survivors.contains(&format!("x{j}"))).count();
    let noise_removed = (5..25).filter(|j| !survivors.contains(&format!("x{j}"))).count();
    let violations = trace
        .rounds
        .iter()
        .filter(|r| r.accepted && r.validation_c_after.is_none_or(|after| r.validation_c_before - after > 0.001))
        .count();
    ensure(
        signal_kept == 5 && noise_removed >= 16 && violations == 0,
        format!(
            "signal kept {signal_kept}/5, noise removed {noise_removed}/20 ({} by screen), {} rounds, {violations} rule violations",
            screen.dropped.len(),
            trace.rounds.len()
        ),
    )
}

fn calibration_check() -> Check {
    let cfg = SynthConfig { n_subjects: 50_000, target_prevalence: 0.0323, seed: 6, ..SynthConfig::default() };
    let (x, y) = cohort(&cfg);
    let s = split(&x, &y, 6);
    let model = fit(&s.train.0, &s.train.1, &CoxFitConfig::default()).map_err(err)?;
    let (xs, ys) = &s.test;
    let risks = model.predict_risk_scaled(xs, 10.0).map_err(err)?;
    let report = calibration(&risks, ys, 10.0, 10).map_err(err)?;
    let gap = (report.mean_predicted_overall - report.mean_observed_overall).abs();
    ensure(
        report.ici < 0.01 && gap < 0.005,
        format!(
            "ICI {:.5}, mean predicted {:.5}, observed {:.5}",
            report.ici, report.mean_predicted_overall, report.mean_observed_overall
        ),
    )
}

fn bootstrap_coverage() -> Check {
    let mut covered = 0;
    for rep in 0..100u64 {
        let cfg = SynthConfig { n_subjects: 2_000, target_prevalence: 0.0323, seed: 700 + rep, ..SynthConfig::default() };
        let (x, y) = cohort(&cfg);
        let model = fit(&x, &y, &CoxFitConfig::default()).map_err(err)?;
        let scores = model.linear_predictor(&x).map_err(err)?;
        let ci = concordance_ci(&scores, &y, 50, 0.95, rep).map_err(err)?;
        if ci.low <= ci.point && ci.point <= ci.high {
            covered += 1;
        }
    }
    ensure(covered >= 90, format!("interval contained the full-sample C in {covered}/100 repetitions"))
}

fn tuning_space() -> SearchSpace {
    let params = BTreeMap::from([
        ("width".to_string(), Distribution::Int { lo: 1, hi: 32 }),
        ("dropout_rate".to_string(), Distribution::Uniform { lo: 0.0, hi: 0.7 }),
        ("learning_rate".to_string(), Distribution::LogUniform { lo: 1e-3, hi: 1e-1 }),
    ]);
    let base = MlpSpec {
        hidden_layers: vec![8],
        activation: Activation::Relu,
        batch_norm: false,
        weight_decay: 0.0,
        optimizer: OptimizerKind::Adam,
        batch_size: 128,
        max_epochs: 15,
        early_stop_patience: 4,
        ..MlpSpec::default()
    };
    SearchSpace { params, base }
}

fn tpe_vs_random() -> Check {
    let space = tuning_space();
    let (mut wins, mut margin) = (0, 0.0);
    for rep in 0..100u64 {
        let cfg = SynthConfig {
            n_subjects: 800,
            true_log_hr: vec![0.4, 0.4, 0.0, 0.0, 0.0, 0.0],
            interaction_log_hr: 1.0,
            target_prevalence: 0.3,
            seed: 800 + rep,
            ..SynthConfig::default()
        };
        let (x, y) = cohort(&cfg);
        let run = |sampler, budget, history| {
            let cfg = SearchConfig { budget, k: 3, seed: rep, sampler, tpe: TpeConfig::default() };
            search(&space, &x, &y, &cfg, history, |_| Ok(()))
        };
        let (tpe_best, history) = run(Sampler::Tpe, 30, Vec::new()).map_err(err)?;
        // Both samplers draw the same startup trials, so random search resumes
        // from the shared prefix.
        let startup = TpeConfig::default().n_startup;
        let (random_best, _) = run(Sampler::Random, 30 - startup, history[..startup].to_vec()).map_err(err)?;
        let (t, r) = (tpe_best.mean_c.unwrap(), random_best.mean_c.unwrap());
        wins += usize::from(t >= r);
        margin += t - r;
    }
    ensure(wins >= 60, format!("TPE best >= random best in {wins}/100 repetitions, mean margin {:.4}", margin / 100.0))
}

fn snapshot(dir: &Path) -> Snapshot {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn cli_reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let dir = tmp.path();
    let d = dir.to_str().unwrap();
    fs::write(
        dir.join("tune.json"),
        format!(
            r#"{{"output_dir": "{d}", "seed": 11,
                "search_space": {{
                    "params": {{"width": {{"type": "int", "lo": 2, "hi": 12}}, "dropout_rate": {{"type": "uniform", "lo": 0.0, "hi": 0.4}}}},
                    "base": {{"hidden_layers": [8], "max_epochs": 8}}
                }}}}"#
        ),
    )
    .map_err(err)?;
    fs::write(dir.join("subject.json"), r#"{"x0": 0.4, "x1": -1.2, "x2": 0.3, "x3": 0.0, "x4": 2.0}"#).map_err(err)?;
    let at = |f: &str| dir.join(f).to_string_lossy().into_owned();
    let commands: Vec<Vec<String>> = [
        vec!["synth", "--n", "3000", "--seed", "11", "--prevalence", "0.15", "--out", d],
        vec!["train", "--seed", "11", "--out", d],
        vec!["select", "--seed", "11", "--out", d],
        vec!["tune", "--config", &at("tune.json"), "--budget", "3"],
        vec!["train-nn", "--config", &at("tune.json"), "--trials", &at("trials.jsonl")],
        vec!["calibrate", "--model", &at("model.json")],
        vec!["calibrate", "--model", &at("nn_model.json")],
        vec!["evaluate", "--model", &at("reduced_model.json")],
        vec!["score", "--model", &at("model.json"), "--features", &at("subject.json")],
        vec!["train", "--seed", "11", "--out", d, "--final"],
    ]
    .iter()
    .map(|c| c.iter().map(|s| s.to_string()).collect())
    .collect();
    let invoke = |args: &[String]| -> Result<(Vec<u8>, Snapshot), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_survrisk")).args(args).output().map_err(err)?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
        Ok((out.stdout, snapshot(dir)))
    };
    for args in &commands {
        let first = invoke(args)?;
        let second = invoke(args)?;
        if first.0 != second.0 {
            return Err(format!("{} printed different output", args[0]));
        }
        if let Some(name) = first.1.keys().find(|k| first.1.get(*k) != second.1.get(*k)) {
            return Err(format!("{} wrote a different {name}", args[0]));
        }
    }
    Ok(format!("{} commands rerun with identical files and output", commands.len()))
}
