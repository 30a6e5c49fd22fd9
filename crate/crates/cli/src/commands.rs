use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use survrisk::cohort::{
    event_count, generate_synthetic, load_cohort, load_schema, preprocess, stratified_split, write_cohort_csv, FeatureMatrix,
    PreprocessReport, SplitIndices, SurvivalOutcome,
};
use survrisk::coxph::{fit, wald_stats, CoxModel, WaldRow};
use survrisk::metrics::{calibration, concordance, concordance_ci, BootstrapCI};
use survrisk::neural::{train, MlpSpec};
use survrisk::selection::{backward_eliminate, univariate_screen, validation_concordance, BatchSchedule, EliminationTrace};
use survrisk::tuning::{read_history, search, write_trial, Sampler, SearchConfig, TrialStatus};
use survrisk::{Error, Result};

use crate::artifact::{Model, ModelArtifact, NeuralRiskModel, Outputs, FORMAT_VERSION};
use crate::config::RunConfig;

/// Common header of every report file.
#[derive(Serialize)]
struct Header<'a> {
    version: u32,
    tool_version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
}

impl<'a> Header<'a> {
    fn new(command: &'static str, config: &'a RunConfig) -> Self {
        Self { version: FORMAT_VERSION, tool_version: env!("CARGO_PKG_VERSION"), command, config }
    }
}

#[derive(Serialize)]
struct Counts {
    train: usize,
    validation: usize,
    test: usize,
}

#[derive(Serialize)]
struct Concordances {
    train: f64,
    validation: f64,
    test: BootstrapCI,
}

struct Prepared {
    x: FeatureMatrix,
    y: Vec<SurvivalOutcome>,
    report: PreprocessReport,
    split: SplitIndices,
}

impl Prepared {
    fn load(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schema_path = cfg.schema_path();
        let schema = load_schema(&schema_path).map_err(|e| with_path(e, &schema_path))?;
        let cohort_path = cfg.cohort_path();
        let table = load_cohort(&cohort_path, &schema).map_err(|e| with_path(e, &cohort_path))?;
        let (x, y, report) = preprocess(&table, cfg.rare_threshold)?;
        let split = stratified_split(&y, cfg.test_fraction, cfg.validation_fraction, cfg.seed)?;
        Ok(Self { x, y, report, split })
    }

    fn part(&self, rows: &[usize]) -> (FeatureMatrix, Vec<SurvivalOutcome>) {
        (self.x.select_rows(rows), rows.iter().map(|&i| self.y[i]).collect())
    }

    /// Rows used for fitting: the training split, plus validation for a
    /// final fit.
    fn fit_rows(&self, final_fit: bool) -> Vec<usize> {
        if final_fit {
            self.split.train_and_validation()
        } else {
            self.split.train.clone()
        }
    }

    fn row_counts(&self) -> Counts {
        Counts { train: self.split.train.len(), validation: self.split.validation.len(), test: self.split.test.len() }
    }

    fn event_counts(&self) -> Counts {
        let events = |rows: &[usize]| rows.iter().filter(|&&i| self.y[i].event).count();
        Counts { train: events(&self.split.train), validation: events(&self.split.validation), test: events(&self.split.test) }
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
        other => other,
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn ensure_output_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", cfg.output_dir.display())))
}

/// Concordance of `scores_for` on train, validation and test, with a
/// bootstrap interval on test.
fn split_concordances(
    cfg: &RunConfig,
    data: &Prepared,
    scores_for: impl Fn(&FeatureMatrix) -> Result<Vec<f64>>,
) -> Result<Concordances> {
    let c = |rows: &[usize]| -> Result<f64> {
        let (x, y) = data.part(rows);
        Ok(concordance(&scores_for(&x)?, &y)?.c_index)
    };
    let (xt, yt) = data.part(&data.split.test);
    Ok(Concordances {
        train: c(&data.split.train)?,
        validation: c(&data.split.validation)?,
        test: concordance_ci(&scores_for(&xt)?, &yt, cfg.bootstrap_rounds, cfg.confidence_level, cfg.seed)?,
    })
}

fn require_converged(model: &CoxModel) -> Result<()> {
    if model.converged {
        Ok(())
    } else {
        Err(Error::Numeric(format!("Cox fit did not converge: {}", model.warnings.join("; "))))
    }
}

pub fn synth(cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let (table, truth) = generate_synthetic(&cfg.synth)?;
    ensure_output_dir(cfg)?;
    let mut csv = Vec::new();
    write_cohort_csv(&table, &mut csv)?;
    out.text(cfg.cohort_path(), &String::from_utf8(csv).expect("csv output is utf-8"))?;
    out.json(cfg.schema_path(), &table.schema)?;
    out.json(out_path(cfg, "ground_truth.json"), &truth)?;
    println!(
        "wrote {} subjects (expected prevalence {:.4}) to {}",
        table.n_rows(),
        truth.expected_prevalence,
        cfg.cohort_path().display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    final_fit: bool,
    rows: Counts,
    events: Counts,
    training_rows: usize,
    training_events: usize,
    preprocess: &'a PreprocessReport,
    converged: bool,
    iterations: usize,
    ridge_fallback: bool,
    c_index: Concordances,
    coefficients: Vec<WaldRow>,
}

pub fn train_cox(cfg: &RunConfig, final_fit: bool, out: &mut Outputs) -> Result<()> {
    let data = Prepared::load(cfg)?;
    ensure_output_dir(cfg)?;
    let rows = data.fit_rows(final_fit);
    let (x_fit, y_fit) = data.part(&rows);
    let model = fit(&x_fit, &y_fit, &cfg.cox)?;
    require_converged(&model)?;
    let c_index = split_concordances(cfg, &data, |x| model.linear_predictor(x))?;
    let report = TrainReport {
        header: Header::new("train", cfg),
        final_fit,
        rows: data.row_counts(),
        events: data.event_counts(),
        training_rows: rows.len(),
        training_events: event_count(&y_fit),
        preprocess: &data.report,
        converged: model.converged,
        iterations: model.iterations,
        ridge_fallback: model.ridge_fallback,
        coefficients: wald_stats(&model, 0.05)?.rows,
        c_index,
    };
    println!(
        "test c-index {:.4} [{:.4}, {:.4}] from {} training rows",
        report.c_index.test.point, report.c_index.test.low, report.c_index.test.high, report.training_rows
    );
    out.json(out_path(cfg, "model.json"), &ModelArtifact::new(cfg, Model::Cox(model)))?;
    out.json(out_path(cfg, "metrics.json"), &report)?;
    Ok(())
}

#[derive(Serialize)]
struct SelectionRow {
    split: &'static str,
    features_before: usize,
    c_before: f64,
    features_after: usize,
    c_after: f64,
}

#[derive(Serialize)]
struct SelectReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    final_fit: bool,
    screened_in: usize,
    screened_out: usize,
    surviving_features: &'a [String],
    table: Vec<SelectionRow>,
    test_after: BootstrapCI,
}

pub fn select(cfg: &RunConfig, final_fit: bool, out: &mut Outputs) -> Result<()> {
    let data = Prepared::load(cfg)?;
    ensure_output_dir(cfg)?;
    let (xt, yt) = data.part(&data.split.train);
    let (xv, yv) = data.part(&data.split.validation);
    let screen = univariate_screen(&xt, &yt, cfg.alpha, &cfg.cox)?;
    let trace: EliminationTrace = backward_eliminate(
        &xt.select_named(&screen.kept)?,
        &yt,
        &xv.select_named(&screen.kept)?,
        &yv,
        cfg.drop_tolerance,
        BatchSchedule::default(),
        &cfg.cox,
    )?;
    let replay = validation_concordance(&trace.surviving_features, &xt, &yt, &xv, &yv, &cfg.cox)?;
    if (replay - trace.final_c).abs() > 1e-9 {
        return Err(Error::Numeric(format!("elimination trace does not replay: {replay} vs {}", trace.final_c)));
    }

    let rows = data.fit_rows(final_fit);
    let (x_fit, y_fit) = data.part(&rows);
    let before = fit(&x_fit, &y_fit, &cfg.cox)?;
    let reduced = fit(&x_fit.select_named(&trace.surviving_features)?, &y_fit, &cfg.cox)?;
    require_converged(&reduced)?;
    let c_before = split_concordances(cfg, &data, |x| before.linear_predictor(x))?;
    let c_after = split_concordances(cfg, &data, |x| reduced.linear_predictor(&x.select_named(&trace.surviving_features)?))?;
    let (n_before, n_after) = (data.x.n_cols(), trace.surviving_features.len());
    let row = |split, b: f64, a: f64| SelectionRow { split, features_before: n_before, c_before: b, features_after: n_after, c_after: a };
    let table = vec![
        row("train", c_before.train, c_after.train),
        row("validation", c_before.validation, c_after.validation),
        row("test", c_before.test.point, c_after.test.point),
    ];

    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in &table {
        csv.serialize(r).map_err(Error::from)?;
    }
    let csv = String::from_utf8(csv.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("csv output is utf-8");

    let report = SelectReport {
        header: Header::new("select", cfg),
        final_fit,
        screened_in: screen.kept.len(),
        screened_out: screen.dropped.len(),
        surviving_features: &trace.surviving_features,
        table,
        test_after: c_after.test,
    };
    println!("kept {n_after} of {n_before} features; test c-index {:.4} -> {:.4}", c_before.test.point, c_after.test.point);
    out.json(out_path(cfg, "screen.json"), &screen)?;
    out.json(out_path(cfg, "trace.json"), &trace)?;
    out.json(out_path(cfg, "features.json"), &trace.surviving_features)?;
    out.json(out_path(cfg, "reduced_model.json"), &ModelArtifact::new(cfg, Model::Cox(reduced)))?;
    out.text(out_path(cfg, "selection_table.csv"), &csv)?;
    out.json(out_path(cfg, "selection.json"), &report)?;
    Ok(())
}

pub fn tune(cfg: &RunConfig, resume: bool, sampler: Sampler) -> Result<()> {
    let data = Prepared::load(cfg)?;
    ensure_output_dir(cfg)?;
    let pool = data.split.train_and_validation();
    let (x, y) = data.part(&pool);
    let history_path = out_path(cfg, "trials.jsonl");
    let history = if resume && history_path.exists() {
        read_history(BufReader::new(File::open(&history_path)?))?
    } else {
        Vec::new()
    };
    let mut file = OpenOptions::new().create(true).write(true).append(resume).truncate(!resume).open(&history_path)?;
    let search_cfg = SearchConfig { budget: cfg.budget, k: cfg.k, seed: cfg.seed, sampler, tpe: cfg.tpe };
    let (best, all) = search(&cfg.search_space, &x, &y, &search_cfg, history, |t| {
        write_trial(&mut file, t)?;
        file.flush()?;
        Ok(())
    })?;
    let failed = all.iter().filter(|t| t.status == TrialStatus::Failed).count();
    println!(
        "{} trials ({failed} failed); best trial {} with mean c-index {:.4}",
        all.len(),
        best.trial_id,
        best.mean_c.unwrap_or(f64::NAN)
    );
    #[derive(Serialize)]
    struct BestReport<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        sampler: Sampler,
        trials: usize,
        failed: usize,
        best: &'a survrisk::tuning::TrialRecord,
    }
    let report = BestReport { header: Header::new("tune", cfg), sampler, trials: all.len(), failed, best: &best };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(out_path(cfg, "best_trial.json"), text)?;
    Ok(())
}

/// Where the network hyperparameters come from.
pub enum SpecSource {
    File(PathBuf),
    BestTrial(PathBuf),
    Config,
}

fn load_spec(cfg: &RunConfig, source: &SpecSource) -> Result<MlpSpec> {
    let spec = match source {
        SpecSource::Config => cfg.search_space.base.clone(),
        SpecSource::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)?
        }
        SpecSource::BestTrial(path) => {
            let file = File::open(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let trials = read_history(BufReader::new(file))?;
            trials
                .into_iter()
                .filter(|t| t.status == TrialStatus::Ok)
                .fold(None::<survrisk::tuning::TrialRecord>, |b, t| match b {
                    Some(b) if b.mean_c >= t.mean_c => Some(b),
                    _ => Some(t),
                })
                .ok_or_else(|| Error::Config(format!("{} has no successful trial", path.display())))?
                .spec
        }
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Serialize)]
struct NeuralReport<'a> {
    #[serde(flatten)]
    header: Header<'a>,
    final_fit: bool,
    spec: &'a MlpSpec,
    rows: Counts,
    training_rows: usize,
    best_epoch: Option<usize>,
    epochs_run: usize,
    c_index: Concordances,
}

pub fn train_nn(cfg: &RunConfig, source: &SpecSource, final_fit: bool, out: &mut Outputs) -> Result<()> {
    let spec = load_spec(cfg, source)?;
    let data = Prepared::load(cfg)?;
    ensure_output_dir(cfg)?;
    let (xt, yt) = data.part(&data.split.train);
    let (xv, yv) = data.part(&data.split.validation);
    let mut network = train(&xt, &yt, &xv, &yv, &spec, cfg.seed)?;
    let rows = data.fit_rows(final_fit);
    let (x_fit, y_fit) = data.part(&rows);
    if final_fit {
        // Refit on train + validation for the epoch count that validation chose.
        let epochs = network.best_epoch.unwrap_or(spec.max_epochs);
        let refit_spec = MlpSpec { max_epochs: epochs, early_stop_patience: 0, ..spec.clone() };
        network = train(&x_fit, &y_fit, &x_fit.select_rows(&[]), &[], &refit_spec, cfg.seed)?;
        network.spec = spec.clone();
    }
    let model = NeuralRiskModel::new(network, &x_fit, &y_fit)?;
    let c_index = split_concordances(cfg, &data, |x| model.network.predict(x))?;
    let report = NeuralReport {
        header: Header::new("train-nn", cfg),
        final_fit,
        spec: &spec,
        rows: data.row_counts(),
        training_rows: rows.len(),
        best_epoch: model.network.best_epoch,
        epochs_run: model.network.training_log.len(),
        c_index,
    };
    println!(
        "test c-index {:.4} [{:.4}, {:.4}] after {} epochs",
        report.c_index.test.point, report.c_index.test.low, report.c_index.test.high, report.epochs_run
    );
    out.json(out_path(cfg, "nn_metrics.json"), &report)?;
    out.json(out_path(cfg, "nn_model.json"), &ModelArtifact::new(cfg, Model::Neural(model)))?;
    Ok(())
}

fn artifact_stem(model_path: &Path) -> String {
    model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

pub fn calibrate(cfg: &RunConfig, model_path: &Path, artifact: &ModelArtifact, out: &mut Outputs) -> Result<()> {
    let data = Prepared::load(cfg)?;
    ensure_output_dir(cfg)?;
    let (xs, ys) = data.part(&data.split.test);
    let risks = artifact.risks(&artifact.align(&xs)?, cfg.horizon)?;
    let report = calibration(&risks, &ys, cfg.horizon, cfg.n_bins)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    #[derive(Serialize)]
    struct CalibrationOutput<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        model: String,
        #[serde(flatten)]
        report: &'a survrisk::metrics::CalibrationReport,
    }
    println!(
        "ICI {:.6}; mean predicted {:.4}, mean observed {:.4} at {} years",
        report.ici, report.mean_predicted_overall, report.mean_observed_overall, cfg.horizon
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let stem = artifact_stem(model_path);
    out.text(out_path(cfg, &format!("{stem}_calibration.csv")), &String::from_utf8(csv).expect("csv output is utf-8"))?;
    out.json(
        out_path(cfg, &format!("{stem}_calibration.json")),
        &CalibrationOutput { header: Header::new("calibrate", cfg), model: model_path.display().to_string(), report: &report },
    )?;
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, model_path: &Path, artifact: &ModelArtifact, out: &mut Outputs) -> Result<()> {
    let data = Prepared::load(cfg)?;
    ensure_output_dir(cfg)?;
    let c_index = split_concordances(cfg, &data, |x| artifact.scores(&artifact.align(x)?))?;
    #[derive(Serialize)]
    struct Evaluation<'a> {
        #[serde(flatten)]
        header: Header<'a>,
        model: String,
        features: usize,
        rows: Counts,
        c_index: Concordances,
    }
    println!("c-index train {:.4}, validation {:.4}, test {:.4}", c_index.train, c_index.validation, c_index.test.point);
    let report = Evaluation {
        header: Header::new("evaluate", cfg),
        model: model_path.display().to_string(),
        features: artifact.column_names().len(),
        rows: data.row_counts(),
        c_index,
    };
    out.json(out_path(cfg, &format!("{}_evaluation.json", artifact_stem(model_path))), &report)?;
    Ok(())
}

pub fn score(artifact: &ModelArtifact, features_path: &Path, horizon: f64) -> Result<f64> {
    let text = fs::read_to_string(features_path).map_err(|e| Error::Config(format!("cannot read {}: {e}", features_path.display())))?;
    let values: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)?;
    let mut missing = Vec::new();
    let mut raw = Vec::with_capacity(artifact.column_names().len());
    for name in artifact.column_names() {
        match values.get(name).and_then(|v| v.as_f64()) {
            Some(v) => raw.push(v),
            None => missing.push(name.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing or non-numeric feature(s): {}", missing.join(", "))));
    }
    artifact.risk_raw(&raw, horizon)
}
