//! Command surface: argument parsing and the glue between configuration,
//! simulation, training and evaluation. Every file written starts with the
//! hash of the effective configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::classifier::{self, MlpModel, ModelMeta};
use crate::config::ExperimentConfig;
use crate::contact::{sample_scenarios, ContactScenario, ScenarioConfig};
use crate::dataset::{self, Dataset, DatasetRow};
use crate::error::{Error, Result};
use crate::evaluation::{self, Evaluation, DFCR_MARGIN};
use crate::simulation::{self, ClassifierChoice, EpisodeOptions, Gate};

#[derive(Debug, Parser)]
#[command(name = "rrr-contact", version, about = "Contact classification and reaction experiments on a planar 3-RRR robot")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed of whatever the command draws: scenarios, training or evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Probability threshold of the reaction gate.
    #[arg(long = "p-th", global = true)]
    pub p_th: Option<f64>,
    /// Joint configuration held out of training.
    #[arg(long = "held-out-config", global = true)]
    pub held_out_config: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write its trace.
    Simulate {
        /// Index into the first round of sampled scenarios.
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        /// Classifier to gate with; without one, detection leads to zero-g.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate the labeled feature dataset.
    GenerateDataset,
    /// Grid-search and fit the classifier on the training configurations.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Confusion matrix and per-episode outcomes on the held-out configuration.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Outcome shares over the threshold grid.
    Sweep {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

impl Cli {
    /// Loads the configuration and applies the flag overrides that do not depend
    /// on the command.
    pub fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.p_th {
            cfg.policy.p_th = p;
        }
        if let Some(h) = self.held_out_config {
            cfg.evaluation.held_out_config = h;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.to_string_lossy().into_owned();
        }
        if let Some(seed) = self.seed {
            match self.command {
                Command::Simulate { .. } | Command::GenerateDataset => cfg.seed = seed,
                Command::Train { .. } => cfg.training.seed = seed,
                Command::Evaluate { .. } | Command::Sweep { .. } => cfg.evaluation.seed = seed,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command line and returns the text to print.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = cli.config()?;
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out)?;
    let default_model = || out.join("model.txt");
    match &cli.command {
        Command::Simulate { scenario, model } => {
            let model = model.as_deref().map(load_model).transpose()?;
            cmd_simulate(&cfg, *scenario, model.as_ref().map(|m| &m.0), &out)
        }
        Command::GenerateDataset => cmd_generate_dataset(&cfg, &out),
        Command::Train { dataset } => {
            let path = dataset.clone().unwrap_or_else(|| out.join("dataset.csv"));
            cmd_train(&cfg, &path, &out)
        }
        Command::Evaluate { model } => {
            let (model, meta) = load_model(&model.clone().unwrap_or_else(default_model))?;
            cmd_evaluate(&cfg, &model, &meta, &out)
        }
        Command::Sweep { model } => {
            let (model, meta) = load_model(&model.clone().unwrap_or_else(default_model))?;
            cmd_sweep(&cfg, &model, &meta, &out)
        }
    }
}

/// Machine-readable failure line.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

pub fn load_model(path: &Path) -> Result<(MlpModel, ModelMeta)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read model {}: {e}", path.display())))?;
    MlpModel::from_text(&text)
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

pub fn cmd_simulate(cfg: &ExperimentConfig, index: usize, model: Option<&MlpModel>, out: &Path) -> Result<String> {
    let engine = cfg.engine();
    let list = sample_scenarios(&engine.model, &engine.gains.stiffness, &cfg.scenarios, cfg.seed)?;
    let scenario = list
        .get(index)
        .ok_or_else(|| Error::Config(format!("scenario {index} out of range (0..{})", list.len())))?;
    let options = EpisodeOptions {
        classifier: model.map_or(ClassifierChoice::None, |m| ClassifierChoice::Model(m)),
        gate: Gate::Threshold(cfg.policy.p_th),
        seed: simulation::episode_seed(cfg.seed, index as u64),
        record_trace: true,
        ..Default::default()
    };
    let episode = simulation::run_episode(&engine, scenario, &options)?;
    let path = out.join(format!("episode_{index}.csv"));
    let mut w = create(&path)?;
    use std::io::Write;
    writeln!(w, "# config_hash={} scenario={index} episode_hash={}", cfg.hash(), episode.hash)?;
    simulation::write_trace(&episode, w)?;
    let summary = serde_json::json!({
        "trace": path.display().to_string(),
        "scenario": scenario,
        "summary": episode.summary,
    });
    Ok(serde_json::to_string_pretty(&summary).expect("summary serialises"))
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    dataset::generate(&cfg.engine(), &cfg.scenarios, &cfg.dataset, cfg.seed, cfg.worker_count())
}

pub fn cmd_generate_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let ds = generate_dataset(cfg)?;
    let path = out.join("dataset.csv");
    dataset::write_csv(&ds.rows, &cfg.hash(), create(&path)?)?;
    let mut s = format!(
        "{} rows from {} episodes ({} undetected, {} failed) -> {}\n",
        ds.rows.len(),
        ds.episodes,
        ds.undetected,
        ds.failed.len(),
        path.display()
    );
    for (id, reason) in &ds.failed {
        let _ = writeln!(s, "  episode {id} failed: {reason}");
    }
    Ok(s)
}

/// Fits the classifier on the training configurations of `rows`.
pub fn train_model(
    cfg: &ExperimentConfig,
    rows: Vec<DatasetRow>,
) -> Result<(MlpModel, ModelMeta, classifier::GridResult, classifier::TrainingLog)> {
    let ds = Dataset { rows, ..Default::default() };
    let train_configs = cfg.train_configs();
    let set = ds.labeled(&train_configs);
    if set.is_empty() {
        return Err(Error::DegenerateDataset(format!("no rows from configurations {train_configs:?}")));
    }
    let (model, grid, log) = classifier::fit(&set, &cfg.training)?;
    let meta = ModelMeta { config_hash: cfg.hash(), train_configs, lambda: grid.best_cell().cell.lambda };
    Ok((model, meta, grid, log))
}

pub fn cmd_train(cfg: &ExperimentConfig, dataset_path: &Path, out: &Path) -> Result<String> {
    let file = fs::File::open(dataset_path)
        .map_err(|e| Error::Config(format!("cannot read dataset {}: {e}", dataset_path.display())))?;
    let (rows, _) = dataset::read_csv(std::io::BufReader::new(file))?;
    let held_out = cfg.evaluation.held_out_config;
    let test = Dataset { rows: rows.clone(), ..Default::default() }.labeled(&[held_out]);
    let (model, meta, grid, log) = train_model(cfg, rows)?;
    let hash = cfg.hash();

    let model_path = out.join("model.txt");
    fs::write(&model_path, model.to_text(&meta))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["hidden", "lambda", "parameters", "val_accuracy", "val_loss", "best_epoch", "selected"])?;
    for (i, c) in grid.scores.iter().enumerate() {
        w.write_record([
            c.cell.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join("x"),
            format!("{:?}", c.cell.lambda),
            c.parameters.to_string(),
            format!("{:?}", c.val_accuracy),
            format!("{:?}", c.val_loss),
            c.best_epoch.to_string(),
            (i == grid.best).to_string(),
        ])?;
    }
    let grid_path = out.join("grid.csv");
    write_with_hash(&grid_path, &hash, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "loss", "accuracy"])?;
    for e in &log.epochs {
        w.write_record([e.epoch.to_string(), format!("{:?}", e.loss), format!("{:?}", e.accuracy)])?;
    }
    let log_path = out.join("training_log.csv");
    write_with_hash(&log_path, &hash, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

    let best = grid.best_cell();
    let mut s = format!(
        "selected hidden {:?} lambda {:e}: validation accuracy {:.4}, {} epochs on all rows\n",
        best.cell.hidden, best.cell.lambda, best.val_accuracy, log.best_epoch
    );
    if !test.is_empty() {
        let (loss, acc) = model.loss(&test, 0.0)?;
        let _ = writeln!(s, "held-out configuration {held_out}: accuracy {acc:.4}, cross-entropy {loss:.4}");
    }
    let _ = writeln!(s, "-> {}, {}, {}", model_path.display(), grid_path.display(), log_path.display());
    Ok(s)
}

fn write_with_hash(path: &Path, hash: &str, body: &[u8]) -> Result<()> {
    let mut bytes = format!("# config_hash={hash}\n").into_bytes();
    bytes.extend_from_slice(body);
    fs::write(path, bytes)?;
    Ok(())
}

/// Scenarios on the held-out configuration, `evaluation.rounds` rounds of them.
pub fn evaluation_scenarios(cfg: &ExperimentConfig) -> Result<Vec<ContactScenario>> {
    let held_out = cfg.evaluation.held_out_config;
    let engine = cfg.engine();
    let only = ScenarioConfig { configurations: vec![cfg.scenarios.configurations[held_out]], ..cfg.scenarios.clone() };
    let mut list = Vec::new();
    for round in 0..cfg.evaluation.rounds as u64 {
        let seed = simulation::episode_seed(cfg.evaluation.seed, round);
        for mut s in sample_scenarios(&engine.model, &engine.gains.stiffness, &only, seed)? {
            s.config_id = held_out;
            list.push(s);
        }
    }
    Ok(list)
}

/// Evaluates a model on the held-out configuration. Refuses models trained on it.
pub fn run_evaluation(cfg: &ExperimentConfig, model: &MlpModel, meta: &ModelMeta) -> Result<Evaluation> {
    let held_out = cfg.evaluation.held_out_config;
    if meta.train_configs.contains(&held_out) {
        return Err(Error::SplitViolation(held_out));
    }
    let list = evaluation_scenarios(cfg)?;
    Ok(evaluation::evaluate(&cfg.engine(), &list, model, cfg.evaluation.seed, cfg.worker_count()))
}

fn evaluation_notes(ev: &Evaluation) -> String {
    let mut s = format!("episodes {} undetected {} failed {}\n", ev.episodes.len(), ev.undetected.len(), ev.failed.len());
    for (i, reason) in &ev.failed {
        let _ = writeln!(s, "  scenario {i} failed: {reason}");
    }
    s
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, model: &MlpModel, meta: &ModelMeta, out: &Path) -> Result<String> {
    let ev = run_evaluation(cfg, model, meta)?;
    let hash = cfg.hash();
    let cm = ev.confusion()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["truth", "predicted_collision", "predicted_clamping", "count_collision", "count_clamping"])?;
    for (i, name) in ["collision", "clamping"].iter().enumerate() {
        w.write_record([
            name.to_string(),
            format!("{:?}", cm.rates[i][0]),
            format!("{:?}", cm.rates[i][1]),
            cm.counts[i][0].to_string(),
            cm.counts[i][1].to_string(),
        ])?;
    }
    let cm_path = out.join("confusion.csv");
    write_with_hash(&cm_path, &hash, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)?;

    let outcomes_path = out.join("outcomes.csv");
    evaluation::write_outcomes(&ev.episodes, cfg.policy.p_th, DFCR_MARGIN, &hash, create(&outcomes_path)?)?;

    let mut s = evaluation_notes(&ev);
    let _ = writeln!(s, "confusion (rows truth, columns predicted: collision, clamping)");
    let _ = writeln!(s, "  collision {:.3} {:.3}", cm.rates[0][0], cm.rates[0][1]);
    let _ = writeln!(s, "  clamping  {:.3} {:.3}", cm.rates[1][0], cm.rates[1][1]);
    let _ = writeln!(s, "-> {}, {}", cm_path.display(), outcomes_path.display());
    Ok(s)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, model: &MlpModel, meta: &ModelMeta, out: &Path) -> Result<String> {
    let ev = run_evaluation(cfg, model, meta)?;
    let grid = evaluation::sweep_grid();
    let rows = evaluation::threshold_sweep(&ev.episodes, &grid, DFCR_MARGIN)?;
    let path = out.join("sweep.csv");
    evaluation::write_sweep(&rows, &cfg.hash(), create(&path)?)?;
    let mut s = evaluation::summary_text(&ev, &rows, &grid);
    for c in evaluation::trend_checks(&rows, &grid, cfg.evaluation.min_misclassified) {
        let _ = writeln!(s, "{:?}: {} ({})", c.verdict, c.name, c.detail);
    }
    let _ = writeln!(s, "-> {}", path.display());
    fs::write(out.join("summary.txt"), format!("# config_hash={}\n{s}", cfg.hash()))?;
    Ok(s)
}
