//! End-to-end runs: generate, anneal, score, write artifacts.
//!
//! Every run writes into its `out_dir` and finishes with `manifest.json`,
//! which carries the full config and is enough to regenerate every other file.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::action::{DaProblem, MlProblem, Precisions};
use crate::anneal::{anneal, distinct_levels, plateau_detect, AnnealSchedule, InitRanges, PlateauConfig};
use crate::continuum::{boundary_momentum_check, el_residual, fit_continuum_path, Boundary, PerceptronField};
use crate::error::{Error, Result};
use crate::forge::{generate_library, generate_twin, prediction_error, TeacherSpec, TwinSpec};
use crate::io;
use crate::lbfgs::OptimizerConfig;
use crate::network::{ActivationKind, NetworkShape, Weights};

pub const MANIFEST_SCHEMA: &str = "manifest/1";
pub const EL_CONVERGENCE_HEADER: &str = "n_points,spacing,endpoints,max_residual,p_start_norm,p_end_norm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Ml,
    Da,
    ElCheck,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ml" => Ok(Mode::Ml),
            "da" => Ok(Mode::Da),
            "el-check" => Ok(Mode::ElCheck),
            _ => Err(Error::Config(format!("unknown mode '{s}' (expected ml, da or el-check)"))),
        }
    }
}

/// Continuum check on a constant-weight perceptron field over `[0, span]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElCheckConfig {
    /// Grid sizes, coarsest first.
    pub n_points: Vec<usize>,
    pub span: f64,
    pub r_f: f64,
    pub r_m: f64,
    /// Which library pair supplies the endpoint data.
    pub pair_index: usize,
}

impl Default for ElCheckConfig {
    fn default() -> Self {
        ElCheckConfig { n_points: vec![21, 41, 81], span: 4.0, r_f: 10.0, r_m: 1.0, pair_index: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub teacher: TeacherSpec,
    pub model_shape: NetworkShape,
    pub m_train: usize,
    pub schedule: AnnealSchedule,
    pub optimizer: OptimizerConfig,
    pub init: InitRanges,
    pub plateau: PlateauConfig,
    pub m_predict: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub twin: TwinSpec,
    pub twin_noise_variance: f64,
    pub el_check: ElCheckConfig,
}

impl Default for ExperimentConfig {
    /// Desk scale: `l_F = 20`, `M = 10`, `K = 20`, `α = 1.3` over `log10(R_f/R_m) ∈ [-8, 6]`.
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Ml,
            teacher: TeacherSpec::default(),
            model_shape: NetworkShape { n_neurons: 10, n_layers: 21, n_observed: 10, n_observed_out: None, activation: ActivationKind::Tanh },
            m_train: 10,
            schedule: AnnealSchedule::spanning(-8.0, 6.0, 1.3, 20),
            optimizer: OptimizerConfig::default(),
            init: InitRanges::default(),
            plateau: PlateauConfig::default(),
            m_predict: 100,
            seed: 1,
            out_dir: PathBuf::from("out"),
            twin: TwinSpec::default(),
            twin_noise_variance: 0.0,
            el_check: ElCheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// `l_F` of the model network.
    pub fn layers(&self) -> usize {
        self.model_shape.n_layers - 1
    }

    pub fn set_layers(&mut self, l_f: usize) {
        self.model_shape.n_layers = l_f + 1;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.schedule.validate().map_err(cfg)?;
        self.optimizer.validate().map_err(cfg)?;
        match self.mode {
            Mode::Ml => {
                self.teacher.validate().map_err(cfg)?;
                self.model_shape.validate().map_err(cfg)?;
                if self.m_train == 0 || self.m_predict == 0 {
                    return Err(Error::Config("m_train and m_predict must be at least 1".into()));
                }
                if self.model_shape.n_in() != self.teacher.shape.n_in() || self.model_shape.n_out() != self.teacher.shape.n_out() {
                    return Err(Error::Config("model and teacher observe different numbers of components".into()));
                }
            }
            Mode::Da => {
                if !(self.twin_noise_variance >= 0.0) {
                    return Err(Error::Config("twin_noise_variance must be non-negative".into()));
                }
            }
            Mode::ElCheck => {
                self.teacher.validate().map_err(cfg)?;
                let e = &self.el_check;
                if e.n_points.is_empty() || e.n_points.iter().any(|&n| n < 5) {
                    return Err(Error::Config("el_check.n_points needs entries of at least 5".into()));
                }
                if !(e.span > 0.0 && e.r_f > 0.0 && e.r_m > 0.0) {
                    return Err(Error::Config("el_check span, r_f and r_m must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} stage: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    /// Mode-specific numbers (lowest action, prediction MSE, recovered parameters, ...).
    pub results: Value,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    artifacts: Vec<String>,
    results: serde_json::Map<String, Value>,
}

impl Run<'_> {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        io::write_text(&self.cfg.out_dir.join(name), text)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn write_path(&mut self, stem: &str, flat: &[f64]) -> Result<()> {
        self.write(&format!("{stem}.csv"), &io::path_to_csv(flat)?)?;
        io::write_path_binary(flat, &self.cfg.out_dir.join(format!("{stem}.bin")))?;
        self.artifacts.push(format!("{stem}.bin"));
        Ok(())
    }

    fn put(&mut self, key: &str, v: Value) {
        self.results.insert(key.to_string(), v);
    }
}

/// Writes `manifest.json`. Runs with a failed stage are marked incomplete.
fn write_manifest(cfg: &ExperimentConfig, run: &Run, started: Instant, failure: Option<&StageError>) -> Result<()> {
    let schemas: serde_json::Map<String, Value> =
        io::schema_versions().into_iter().map(|(k, v)| (k.to_string(), Value::from(v))).collect();
    let manifest = json!({
        "schema": MANIFEST_SCHEMA,
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "complete": failure.is_none(),
        "error": failure.map(|e| e.to_string()),
        "seeds": { "master": cfg.seed, "teacher_weights": cfg.teacher.weight_seed },
        "csv_schemas": schemas,
        "artifacts": run.artifacts,
        "results": run.results,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "config": cfg,
    });
    io::write_text(&cfg.out_dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))
}

/// Runs one experiment and writes its artifacts. On failure the manifest is
/// still written, flagged incomplete, and the stage-tagged error is returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> std::result::Result<RunSummary, StageError> {
    let started = Instant::now();
    cfg.validate().stage("config")?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(Error::from).stage("output")?;
    let mut run = Run { cfg, artifacts: Vec::new(), results: serde_json::Map::new() };
    let outcome = match cfg.mode {
        Mode::Ml => run_ml(&mut run),
        Mode::Da => run_da(&mut run),
        Mode::ElCheck => run_el_check(&mut run),
    };
    write_manifest(cfg, &run, started, outcome.as_ref().err()).stage("manifest")?;
    outcome?;
    log::info!("{} finished in {:.1}s", cfg.out_dir.display(), started.elapsed().as_secs_f64());
    Ok(RunSummary { out_dir: cfg.out_dir.clone(), artifacts: run.artifacts, results: Value::Object(run.results) })
}

/// Library only.
pub fn generate_ml_data(cfg: &ExperimentConfig) -> std::result::Result<RunSummary, StageError> {
    let started = Instant::now();
    cfg.teacher.validate().map_err(|e| Error::Config(e.to_string())).stage("config")?;
    if cfg.m_train == 0 {
        return Err(Error::Config("m_train must be at least 1".into())).stage("config");
    }
    let mut run = Run { cfg, artifacts: Vec::new(), results: serde_json::Map::new() };
    let outcome = (|| {
        let lib = generate_library(&cfg.teacher, cfg.m_train, cfg.seed).stage("generate")?;
        io::write_library(&lib, &cfg.out_dir.join("library.csv")).stage("output")?;
        run.artifacts.push("library.csv".into());
        run.artifacts.push("library.csv.meta.json".into());
        run.put("n_pairs", json!(lib.len()));
        Ok(())
    })();
    write_manifest(cfg, &run, started, outcome.as_ref().err()).stage("manifest")?;
    outcome?;
    Ok(RunSummary { out_dir: cfg.out_dir.clone(), artifacts: run.artifacts, results: Value::Object(run.results) })
}

/// Twin observations only: `n,time_index,component,value`.
pub fn generate_da_data(cfg: &ExperimentConfig) -> std::result::Result<RunSummary, StageError> {
    let started = Instant::now();
    let mut run = Run { cfg, artifacts: Vec::new(), results: serde_json::Map::new() };
    let outcome = (|| {
        let twin = generate_twin(&cfg.twin, cfg.twin_noise_variance, cfg.seed).stage("generate")?;
        let p = &twin.problem;
        let mut text = String::from("n,time_index,component,value\n");
        for n in 0..p.n_observations {
            for (r, &c) in p.observed_indices.iter().enumerate() {
                text.push_str(&format!("{n},{},{c},{}\n", p.observation_time(n), p.observation(n)[r]));
            }
        }
        run.write("observations.csv", &text).stage("output")?;
        run.put("n_times", json!(p.n_times()));
        Ok(())
    })();
    write_manifest(cfg, &run, started, outcome.as_ref().err()).stage("manifest")?;
    outcome?;
    Ok(RunSummary { out_dir: cfg.out_dir.clone(), artifacts: run.artifacts, results: Value::Object(run.results) })
}

fn run_ml(run: &mut Run) -> std::result::Result<(), StageError> {
    let cfg = run.cfg;
    let lib = generate_library(&cfg.teacher, cfg.m_train, cfg.seed).stage("generate")?;
    io::write_library(&lib, &cfg.out_dir.join("library.csv")).stage("output")?;
    run.artifacts.push("library.csv".into());
    run.artifacts.push("library.csv.meta.json".into());

    let problem = MlProblem::new(cfg.model_shape, lib).stage("anneal")?;
    let out = anneal(&problem, &cfg.schedule, &cfg.optimizer, &cfg.init, cfg.seed).stage("anneal")?;
    run.write("ledger.csv", &io::ledger_to_csv(&out.ledger).stage("output")?).stage("output")?;
    run.write_path("best_path", &out.best).stage("output")?;
    run.put("lowest_action", json!(out.best_breakdown.total));
    run.put("best_index", json!(out.best_index));
    let finals: Vec<f64> = out.ledger.final_rows().iter().map(|r| r.total).collect();
    run.put("final_levels", json!(distinct_levels(&finals, 1e-3)));

    if out.ledger.n_beta() > cfg.plateau.window {
        let plateaus = plateau_detect(&out.ledger, cfg.plateau.window, cfg.plateau.rel_tol).stage("plateau")?;
        let best = plateaus[out.best_index];
        run.put("lowest_plateaued", json!(best.plateaued));
        run.put("lowest_rel_change", json!(best.rel_change));
        run.put("n_plateaued", json!(plateaus.iter().filter(|p| p.plateaued).count()));
    }

    let path = problem.path(&out.best).stage("predict")?;
    let report =
        prediction_error(path.weights(), &cfg.model_shape, &cfg.teacher, cfg.m_predict, cfg.m_train, cfg.seed).stage("predict")?;
    run.write("prediction.csv", &io::prediction_to_csv(&report).stage("output")?).stage("output")?;
    run.put("prediction_mse", json!(report.mean_square_error));
    Ok(())
}

fn run_da(run: &mut Run) -> std::result::Result<(), StageError> {
    let cfg = run.cfg;
    let twin = generate_twin(&cfg.twin, cfg.twin_noise_variance, cfg.seed).stage("generate")?;
    let problem = DaProblem::new(twin.problem.clone()).stage("anneal")?;
    let out = anneal(&problem, &cfg.schedule, &cfg.optimizer, &cfg.init, cfg.seed).stage("anneal")?;
    run.write("ledger.csv", &io::ledger_to_csv(&out.ledger).stage("output")?).stage("output")?;
    run.write_path("best_path", &out.best).stage("output")?;
    run.put("lowest_action", json!(out.best_breakdown.total));
    run.put("best_index", json!(out.best_index));

    let est = problem.path(&out.best).stage("score")?;
    let truth = twin.truth_for_scoring();
    let rms = (est.states.iter().zip(&truth.trajectory).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / est.states.len() as f64).sqrt();
    run.put("state_rms_error", json!(rms));
    if !est.params.is_empty() {
        run.put("estimated_params", json!(est.params));
        run.put("true_params", json!(truth.params));
        let rel: Vec<f64> = est.params.iter().zip(&truth.params).map(|(e, t)| (e - t).abs() / t.abs()).collect();
        run.put("param_rel_error", json!(rel));
    }
    Ok(())
}

fn run_el_check(run: &mut Run) -> std::result::Result<(), StageError> {
    let cfg = run.cfg;
    let e = &cfg.el_check;
    let lib = generate_library(&cfg.teacher, e.pair_index + 1, cfg.seed).stage("generate")?;
    let pair = &lib.pairs[e.pair_index];
    let n = cfg.teacher.shape.n_neurons;
    let one_layer = NetworkShape { n_layers: 2, ..cfg.teacher.shape };
    let w = Weights::from_flat(&one_layer, cfg.teacher.weights().layer(0).to_vec()).stage("generate")?;
    let field = PerceptronField::new(&one_layer, w, 0.0, e.span).stage("generate")?;
    let prec = Precisions { r_m: e.r_m, r_f: e.r_f };
    let opt = OptimizerConfig { grad_tolerance: 1e-11, max_iterations: 20_000, ..cfg.optimizer.clone() };

    let mut table = String::from(EL_CONVERGENCE_HEADER);
    table.push('\n');
    let mut finest = None;
    let mut residuals = Vec::new();
    for &pts in &e.n_points {
        let h = e.span / (pts - 1) as f64;
        for (label, boundary) in [
            ("pinned", Boundary { start: Some(pair.input.clone()), end: Some(pair.output.clone()) }),
            ("free_end", Boundary { start: Some(pair.input.clone()), end: None }),
        ] {
            let start = vec![vec![0.0; n]; pts];
            let (path, _) = fit_continuum_path(&field, &boundary, &prec, 0.0, h, &start, &opt).stage("el-check")?;
            let res = el_residual(&path, &field, &boundary, &prec).stage("el-check")?;
            let mom = boundary_momentum_check(&path, &field, &prec, 0.0).stage("el-check")?;
            table.push_str(&format!("{pts},{h},{label},{},{},{}\n", res.max_norm, mom.start_norm, mom.end_norm));
            if label == "pinned" {
                residuals.push(res.max_norm);
                finest = Some(res);
            }
        }
    }
    run.write("el_convergence.csv", &table).stage("output")?;
    if let Some(res) = finest {
        run.write("el_residual.csv", &io::el_residual_to_csv(&res).stage("output")?).stage("output")?;
    }
    run.put("pinned_max_residuals", json!(residuals));
    Ok(())
}

/// One cell of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCell {
    pub m_train: usize,
    pub l_f: usize,
    pub seed: u64,
}

/// Mean and sample variance of the prediction MSE over the seeds of one `(M, l_F)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepStat {
    pub m_train: usize,
    pub l_f: usize,
    pub n_ok: usize,
    pub mean_mse: f64,
    pub var_mse: f64,
}

pub fn cell_dir(base: &Path, c: &SweepCell) -> PathBuf {
    base.join(format!("m{}_l{}_s{}", c.m_train, c.l_f, c.seed))
}

/// Runs every cell as its own ML experiment under `base.out_dir`, then writes
/// `sweep.csv` and `sweep_stats.json`. A failing cell is recorded, not fatal.
pub fn sweep(base: &ExperimentConfig, cells: &[SweepCell]) -> Result<(Vec<io::SweepRow>, Vec<SweepStat>)> {
    if cells.is_empty() {
        return Err(Error::Config("sweep needs at least one cell".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for c in cells {
        let mut cfg = base.clone();
        cfg.mode = Mode::Ml;
        cfg.m_train = c.m_train;
        cfg.set_layers(c.l_f);
        cfg.seed = c.seed;
        cfg.out_dir = cell_dir(&base.out_dir, c);
        let row = match run_experiment(&cfg) {
            Ok(s) => io::SweepRow {
                m_train: c.m_train,
                l_f: c.l_f,
                seed: c.seed,
                lowest_action: s.results["lowest_action"].as_f64().unwrap_or(f64::NAN),
                prediction_mse: s.results["prediction_mse"].as_f64().unwrap_or(f64::NAN),
                status: "ok".into(),
            },
            Err(e) if matches!(e.error, Error::Config(_)) => return Err(e.error),
            Err(e) => {
                log::warn!("sweep cell {c:?} failed: {e}");
                io::SweepRow {
                    m_train: c.m_train,
                    l_f: c.l_f,
                    seed: c.seed,
                    lowest_action: f64::NAN,
                    prediction_mse: f64::NAN,
                    status: format!("failed:{}", e.stage),
                }
            }
        };
        rows.push(row);
    }
    let stats = sweep_stats(&rows);
    for s in &stats {
        log::info!("M = {}, l_F = {}: mean MSE {:.6e}, variance {:.6e} over {} seeds", s.m_train, s.l_f, s.mean_mse, s.var_mse, s.n_ok);
    }
    io::write_text(&base.out_dir.join("sweep.csv"), &io::sweep_to_csv(&rows)?)?;
    io::write_text(&base.out_dir.join("sweep_stats.json"), &(serde_json::to_string_pretty(&stats)? + "\n"))?;
    Ok((rows, stats))
}

pub fn sweep_stats(rows: &[io::SweepRow]) -> Vec<SweepStat> {
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.m_train, r.l_f)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(m, l)| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.m_train == m && r.l_f == l && r.status == "ok" && r.prediction_mse.is_finite())
                .map(|r| r.prediction_mse)
                .collect();
            let n = v.len();
            let mean = if n == 0 { f64::NAN } else { v.iter().sum::<f64>() / n as f64 };
            let var = if n < 2 { 0.0 } else { v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64 };
            SweepStat { m_train: m, l_f: l, n_ok: n, mean_mse: mean, var_mse: var }
        })
        .collect()
}
