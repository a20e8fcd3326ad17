use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlda_core::experiment::{self, ExperimentConfig, Mode, RunSummary, StageError, SweepCell};
use mlda_core::forge::prediction_error;
use mlda_core::network::Weights;
use mlda_core::{io, Error};

/// Variational annealing for perceptrons and Lorenz96 data assimilation.
#[derive(Parser)]
#[command(name = "mlda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; missing fields take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// ml, da or el-check
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    m_train: Option<usize>,
    /// Model depth l_F.
    #[arg(long)]
    layers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a teacher library (library.csv plus sidecar).
    GenMl(Common),
    /// Write twin-experiment observations.
    GenDa(Common),
    /// Full run: generate, anneal, plateau check, prediction.
    Anneal(Common),
    /// Score a saved path's weights on fresh teacher pairs.
    Predict {
        #[command(flatten)]
        common: Common,
        /// best_path.csv or best_path.bin from an earlier run.
        #[arg(long)]
        path: PathBuf,
    },
    /// Run a grid of ML experiments and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        m_list: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        layers_list: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Continuum Euler-Lagrange and boundary-momentum diagnostics.
    ElCheck(Common),
}

enum Failure {
    Config(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        let msg = e.to_string();
        if e.error.is_numeric() {
            Failure::Numeric(msg)
        } else {
            Failure::Config(msg)
        }
    }
}

fn load(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(m) = c.m_train {
        cfg.m_train = m;
    }
    if let Some(l) = c.layers {
        if l == 0 {
            return Err(Error::Config("--layers must be at least 1".into()));
        }
        cfg.set_layers(l);
    }
    Ok(cfg)
}

fn print(summary: &RunSummary) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(summary)?);
    Ok(())
}

fn predict(cfg: &ExperimentConfig, path: &PathBuf) -> Result<(), Failure> {
    cfg.validate()?;
    let flat = io::read_path(path)?;
    let shape = &cfg.model_shape;
    let wl = shape.weight_len();
    if flat.len() < wl || (flat.len() - wl) % (shape.n_neurons * shape.n_layers) != 0 {
        return Err(Failure::Config(format!(
            "path has {} values, which does not fit a model with {} weights and {} states per pair",
            flat.len(),
            wl,
            shape.n_neurons * shape.n_layers
        )));
    }
    let m_train = (flat.len() - wl) / (shape.n_neurons * shape.n_layers);
    let weights = Weights::from_flat(shape, flat[flat.len() - wl..].to_vec())?;
    let report = prediction_error(&weights, shape, &cfg.teacher, cfg.m_predict, m_train, cfg.seed)?;
    io::write_text(&cfg.out_dir.join("prediction.csv"), &io::prediction_to_csv(&report)?)?;
    println!("{}", serde_json::json!({ "m_train": m_train, "m_predict": report.m_predict, "prediction_mse": report.mean_square_error }));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenMl(c) => print(&experiment::generate_ml_data(&load(&c)?)?)?,
        Command::GenDa(c) => print(&experiment::generate_da_data(&load(&c)?)?)?,
        Command::Anneal(c) => {
            let cfg = load(&c)?;
            if cfg.mode == Mode::ElCheck {
                return Err(Failure::Config("anneal runs mode ml or da; use el-check for the continuum diagnostics".into()));
            }
            print(&experiment::run_experiment(&cfg)?)?
        }
        Command::ElCheck(c) => {
            let mut cfg = load(&c)?;
            cfg.mode = Mode::ElCheck;
            print(&experiment::run_experiment(&cfg)?)?
        }
        Command::Predict { common, path } => predict(&load(&common)?, &path)?,
        Command::Sweep { common, m_list, layers_list, seeds } => {
            let cfg = load(&common)?;
            let ms = if m_list.is_empty() { vec![cfg.m_train] } else { m_list };
            let ls = if layers_list.is_empty() { vec![cfg.layers()] } else { layers_list };
            let ss = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let mut cells = Vec::new();
            for &l_f in &ls {
                for &m_train in &ms {
                    for &seed in &ss {
                        cells.push(SweepCell { m_train, l_f, seed });
                    }
                }
            }
            let (_, stats) = experiment::sweep(&cfg, &cells)?;
            println!("{}", serde_json::to_string_pretty(&stats).map_err(Error::from)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
