//! Command-line front end.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use relquery_core::experiment::{baseline_summary, pool_and_targets, summarize, trial_target};
use relquery_core::session::{Oracle, OracleError, PoolItem, SessionError, SessionStatus, SyntheticOracle};
use relquery_core::synthworld::{Choice, Dataset, Image};
use relquery_core::{Localizer, ModelKey, Objective, Pool, ResponseKind, SessionConfig, SessionState, Vae};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataio::{self, Checkpoint, RunRecord};
use crate::pipeline::{self, EvalMetrics};
use crate::service::{self, AppState, ModelEntry};

#[derive(Debug, Parser)]
#[command(name = "relquery", version, about = "Relative-attribute VAE training, preference localization and session service")]
pub struct Cli {
    /// JSON run configuration; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for every artifact.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic stroke dataset to IDX + CSV.
    GenData {
        /// Also write every image as a PGM file.
        #[arg(long)]
        pgm: bool,
    },
    /// Train grid models (all six unless --model is given).
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Model id such as `bayesian-noisy`; repeatable.
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Triplet satisfaction and reconstruction error of trained models.
    Eval {
        #[command(flatten)]
        data: DataArg,
    },
    /// Run one localization session.
    Localize {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "bayesian-clean")]
        model: String,
        #[arg(long, default_value = "btrm", value_parser = parse_response)]
        response: ResponseKind,
        /// Answer queries on stdin instead of with the synthetic oracle.
        #[arg(long)]
        interactive: bool,
        /// Experiment trial whose target the synthetic oracle uses.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        budget: Option<usize>,
        /// Continue a suspended session file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the full 12-cell grid and write the loss tables.
    Experiment {
        #[command(flatten)]
        data: DataArg,
        /// Also sweep the logistic constant over these values (comma separated)
        /// and write experiment/k_sweep.csv.
        #[arg(long, value_delimiter = ',')]
        k_sweep: Vec<f64>,
    },
    /// Serve the HTTP session API.
    Serve {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory written by gen-data (or an external IDX + CSV set);
    /// regenerated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn parse_response(s: &str) -> Result<ResponseKind, String> {
    match s {
        "btrm" => Ok(ResponseKind::Btrm),
        "logistic" => Ok(ResponseKind::Logistic),
        other => Err(format!("unknown response model `{other}` (btrm or logistic)")),
    }
}

pub fn parse_model_id(id: &str) -> Result<ModelKey> {
    let (objective, noise) = id.split_once('-').with_context(|| format!("model id `{id}` is not <objective>-<clean|noisy>"))?;
    let objective: Objective = objective.parse().map_err(|_| anyhow::anyhow!("unknown objective in model id `{id}`"))?;
    let noisy = match noise {
        "clean" => false,
        "noisy" => true,
        _ => bail!("model id `{id}` must end in -clean or -noisy"),
    };
    Ok(ModelKey { objective, noisy })
}

/// Artifact layout under `--out-dir`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoint(&self, key: ModelKey) -> PathBuf {
        self.root.join("models").join(format!("{}.json", key.id()))
    }
    pub fn metrics(&self, key: ModelKey) -> PathBuf {
        self.root.join("models").join(format!("{}.metrics.csv", key.id()))
    }
    pub fn experiment_dir(&self) -> PathBuf {
        self.root.join("experiment")
    }
    pub fn localize_dir(&self) -> PathBuf {
        self.root.join("localize")
    }
}

pub const IMAGES_FILE: &str = "images-idx3-ubyte";
pub const METADATA_FILE: &str = "metadata.csv";
pub const MANIFEST_FILE: &str = "dataset.json";

/// Describes a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub count: usize,
    /// The last `test_size` items form the test split.
    pub test_size: usize,
    /// Seed the synthetic set was rendered from, if synthetic.
    pub data_seed: Option<u64>,
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = dataio::read_json(&dir.join(MANIFEST_FILE))?;
    let items = dataio::load_external_items(&dir.join(IMAGES_FILE), &dir.join(METADATA_FILE))?;
    if items.len() != manifest.count {
        bail!("{} lists {} items but the files hold {}", MANIFEST_FILE, manifest.count, items.len());
    }
    Ok(Dataset::from_items(items, manifest.test_size)?)
}

pub fn dataset(cfg: &Config, data: &DataArg) -> Result<Dataset> {
    match &data.data {
        Some(dir) => load_dataset_dir(dir),
        None => Ok(pipeline::generate_dataset(cfg)?),
    }
}

pub fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_checkpoint(layout: &Layout, key: ModelKey, cfg: &Config) -> Result<Checkpoint> {
    let path = layout.checkpoint(key);
    if !path.exists() {
        bail!("missing checkpoint for model {} ({}); run `relquery train` first", key.id(), path.display());
    }
    let ckpt = dataio::read_checkpoint(&path)?;
    if ckpt.key != key {
        bail!("{} holds model {}, not {}", path.display(), ckpt.key.id(), key.id());
    }
    if ckpt.data_seed != cfg.data_seed() {
        log::warn!("{} was trained on data seed {} but the config gives {}", path.display(), ckpt.data_seed, cfg.data_seed());
    }
    Ok(ckpt)
}

fn existing_checkpoints(layout: &Layout, cfg: &Config) -> Result<Vec<Checkpoint>> {
    ModelKey::all().into_iter().filter(|k| layout.checkpoint(*k).exists()).map(|k| load_checkpoint(layout, k, cfg)).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let layout = Layout { root: cli.out_dir.clone() };
    match cli.command {
        Command::GenData { pgm } => gen_data(&cfg, &layout, pgm),
        Command::Train { data, models } => train(&cfg, &layout, &data, &models),
        Command::Eval { data } => eval(&cfg, &layout, &data).map(|_| ()),
        Command::Localize { data, model, response, interactive, trial, budget, resume } => {
            let opts = LocalizeOptions { model, response, interactive, trial, budget, resume };
            localize(&cfg, &layout, &data, &opts, &mut stdin_lines(), &mut std::io::stdout()).map(|_| ())
        }
        Command::Experiment { data, k_sweep } => experiment(&cfg, &layout, &data, &k_sweep),
        Command::Serve { data, port } => serve(&cfg, &layout, &data, port),
    }
}

fn gen_data(cfg: &Config, layout: &Layout, pgm: bool) -> Result<()> {
    let data = pipeline::generate_dataset(cfg)?;
    let dir = layout.data_dir();
    let images: Vec<Image> = data.items.iter().map(|it| it.image.clone()).collect();
    dataio::write_idx_images(&images, &dir.join(IMAGES_FILE))?;
    dataio::write_metadata_csv(&data.items, &dir.join(METADATA_FILE))?;
    let manifest = DatasetManifest { count: data.items.len(), test_size: data.test.len(), data_seed: Some(cfg.data_seed()) };
    dataio::write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    if pgm {
        dataio::write_image_dir(&data.items, &dir.join("pgm"))?;
    }
    println!("wrote {} items ({} test) to {}", data.items.len(), data.test.len(), dir.display());
    Ok(())
}

fn train(cfg: &Config, layout: &Layout, data: &DataArg, models: &[String]) -> Result<()> {
    let keys: Vec<ModelKey> =
        if models.is_empty() { ModelKey::all() } else { models.iter().map(|m| parse_model_id(m)).collect::<Result<_>>()? };
    let dataset = dataset(cfg, data)?;
    let triplets = pipeline::build_triplets(&dataset, cfg)?;
    let trained = pipeline::train_models(&dataset, &triplets, &keys, cfg, cfg.worker_threads())?;
    for t in trained {
        let m = pipeline::evaluate(t.key, &t.vae, &dataset, &triplets.test);
        dataio::write_metrics_csv(&t.history, &layout.metrics(t.key))?;
        dataio::write_checkpoint(&Checkpoint::new(t.key, cfg.train_config(t.key), cfg.data_seed(), t.vae), &layout.checkpoint(t.key))?;
        println!("{:<20} satisfaction {:6.2}%  reconstruction {:.5}", t.key.id(), m.satisfaction, m.reconstruction);
    }
    Ok(())
}

pub fn eval_csv(rows: &[EvalMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model_id", "objective", "noise", "satisfaction", "reconstruction", "mean_sigma"])?;
    for r in rows {
        w.write_record([
            r.key.id(),
            r.key.objective.name().to_string(),
            r.key.noisy.to_string(),
            r.satisfaction.to_string(),
            r.reconstruction.to_string(),
            r.mean_sigma.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

fn eval(cfg: &Config, layout: &Layout, data: &DataArg) -> Result<Vec<EvalMetrics>> {
    let ckpts = existing_checkpoints(layout, cfg)?;
    if ckpts.is_empty() {
        bail!("no checkpoints under {}", layout.root.join("models").display());
    }
    let dataset = dataset(cfg, data)?;
    let triplets = pipeline::build_triplets(&dataset, cfg)?;
    let rows: Vec<EvalMetrics> = ckpts.iter().map(|c| pipeline::evaluate(c.key, &c.vae, &dataset, &triplets.test)).collect();
    dataio::write_file(&layout.root.join("eval.csv"), &eval_csv(&rows)?)?;
    println!("{:<22} {:>12} {:>15}", "model", "satisfaction", "reconstruction");
    for r in &rows {
        println!("{:<22} {:>11.2}% {:>15.5}", r.key.id(), r.satisfaction, r.reconstruction);
    }
    Ok(rows)
}

fn experiment(cfg: &Config, layout: &Layout, data: &DataArg, k_sweep: &[f64]) -> Result<()> {
    let dataset = dataset(cfg, data)?;
    let ckpts: Vec<Checkpoint> = ModelKey::all().into_iter().map(|k| load_checkpoint(layout, k, cfg)).collect::<Result<_>>()?;
    let models: Vec<(ModelKey, &Vae<f32>)> = ckpts.iter().map(|c| (c.key, &c.vae)).collect();
    let exp = cfg.experiment_config();
    let results = pipeline::run_experiment_parallel(&models, &dataset, &exp, cfg.worker_threads())?;
    let dir = layout.experiment_dir();
    dataio::write_file(&dir.join("experiment.csv"), &dataio::experiment_csv(&results)?)?;
    dataio::write_file(&dir.join("baselines.csv"), &dataio::baselines_csv(&results)?)?;
    let mut summary = baseline_summary(&results);
    summary.extend(summarize(&results));
    dataio::write_file(&dir.join("summary.csv"), &dataio::summary_csv(&summary)?)?;
    for r in &results {
        let record = RunRecord::from_trajectory(&r.cell.model.id(), exp.session(r.cell.response, r.trial), &r.trajectory);
        let name = format!("{}-{}-trial{:02}.json", r.cell.model.id(), relquery_core::experiment::response_name(r.cell.response), r.trial);
        dataio::write_run_record(&record, &dir.join("runs").join(name))?;
    }
    println!("{} sessions written to {}", results.len(), dir.display());
    if !k_sweep.is_empty() {
        let rows = pipeline::k_sweep_parallel(&models, &dataset, &exp, k_sweep, cfg.worker_threads())?;
        dataio::write_file(&dir.join("k_sweep.csv"), &dataio::k_sweep_csv(&rows)?)?;
        println!("logistic k sweep over {k_sweep:?} written to {}", dir.join("k_sweep.csv").display());
    }
    Ok(())
}

fn model_entries(cfg: &Config, layout: &Layout, dataset: &Dataset) -> Result<HashMap<String, Arc<ModelEntry>>> {
    let (pool_idx, _) = pool_and_targets(dataset, cfg.experiment.pool_size)?;
    let mut out = HashMap::new();
    for ckpt in existing_checkpoints(layout, cfg)? {
        let pool = Pool::build(&ckpt.vae, dataset, pool_idx)?;
        out.insert(ckpt.key.id(), Arc::new(ModelEntry { vae: ckpt.vae, pool, standardizer: dataset.standardizer.clone() }));
    }
    Ok(out)
}

fn serve(cfg: &Config, layout: &Layout, data: &DataArg, port: u16) -> Result<()> {
    let dataset = dataset(cfg, data)?;
    let models = model_entries(cfg, layout, &dataset)?;
    if models.is_empty() {
        bail!("no checkpoints under {}", layout.root.join("models").display());
    }
    let state = Arc::new(AppState::new(*cfg, models));
    log::info!("models: {}", state.model_ids().join(", "));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(state, port))?;
    Ok(())
}

pub struct LocalizeOptions {
    pub model: String,
    pub response: ResponseKind,
    pub interactive: bool,
    pub trial: usize,
    pub budget: Option<usize>,
    pub resume: Option<PathBuf>,
}

/// A session interrupted by a missing answer; `--resume` picks it up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspendedSession {
    pub model_id: String,
    pub state: SessionState,
}

pub enum LocalizeOutcome {
    Finished(RunRecord),
    Suspended(PathBuf),
}

/// Lines typed on stdin, read on a helper thread so waits can time out.
pub fn stdin_lines() -> Receiver<String> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in std::io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

/// Renders an image as text, two characters per pixel.
pub fn ascii_art(img: &Image) -> Vec<String> {
    const RAMP: &[u8] = b" .:-=+*#%@";
    img.rows()
        .map(|row| {
            row.iter()
                .flat_map(|&p| {
                    let c = RAMP[((p * (RAMP.len() - 1) as f64).round() as usize).min(RAMP.len() - 1)] as char;
                    [c, c]
                })
                .collect()
        })
        .collect()
}

/// Human oracle on a line stream: prints both images and waits for `a` or `b`.
pub struct LineOracle<'a> {
    pub lines: &'a Receiver<String>,
    pub timeout: Duration,
    pub out: &'a mut dyn Write,
    pub budget: usize,
}

impl Oracle for LineOracle<'_> {
    fn answer(&mut self, a: &PoolItem, b: &PoolItem, index: usize) -> Result<Choice, OracleError> {
        let (la, lb) = (ascii_art(&a.image), ascii_art(&b.image));
        let io = |e: std::io::Error| OracleError::Unavailable(e.to_string());
        writeln!(self.out, "query {index} of {}: which do you prefer?", self.budget).map_err(io)?;
        writeln!(self.out, "{:<58}{}", "a", "b").map_err(io)?;
        for (x, y) in la.iter().zip(&lb) {
            writeln!(self.out, "{x}  {y}").map_err(io)?;
        }
        loop {
            write!(self.out, "a/b> ").map_err(io)?;
            self.out.flush().map_err(io)?;
            match self.lines.recv_timeout(self.timeout) {
                Ok(line) => match line.trim() {
                    "a" | "A" => return Ok(Choice::A),
                    "b" | "B" => return Ok(Choice::B),
                    _ => writeln!(self.out, "please answer a or b").map_err(io)?,
                },
                Err(RecvTimeoutError::Timeout) => return Err(OracleError::Timeout),
                Err(RecvTimeoutError::Disconnected) => return Err(OracleError::Unavailable("input closed".into())),
            }
        }
    }
}

pub fn localize(
    cfg: &Config,
    layout: &Layout,
    data: &DataArg,
    opts: &LocalizeOptions,
    lines: &mut Receiver<String>,
    out: &mut dyn Write,
) -> Result<LocalizeOutcome> {
    let resumed: Option<SuspendedSession> = opts.resume.as_deref().map(dataio::read_json).transpose()?;
    let model_id = resumed.as_ref().map(|r| r.model_id.clone()).unwrap_or_else(|| opts.model.clone());
    let key = parse_model_id(&model_id)?;
    let ckpt = load_checkpoint(layout, key, cfg)?;
    let dataset = dataset(cfg, data)?;
    let exp = cfg.experiment_config();
    let (pool_idx, targets) = pool_and_targets(&dataset, exp.pool_size)?;
    let pool = Pool::build(&ckpt.vae, &dataset, pool_idx)?;
    let loc = Localizer::new(&ckpt.vae, &pool, &dataset.standardizer);
    let interactive = opts.interactive || resumed.as_ref().is_some_and(|r| r.state.target.is_none());

    let mut state = match resumed {
        Some(r) => r.state,
        None => {
            let (config, target) = if interactive {
                let seed = cfg.service_session_seed(0);
                let budget = opts.budget.unwrap_or(cfg.interactive.budget);
                (SessionConfig { response: cfg.response(opts.response), mcmc: cfg.interactive.mcmc, budget, seed }, None)
            } else {
                let mut config = exp.session(opts.response, opts.trial);
                config.budget = opts.budget.unwrap_or(config.budget);
                let item = &dataset.items[trial_target(targets, exp.seed, opts.trial)];
                (config, Some((Some(item.id), dataset.standardizer.apply(&item.metadata))))
            };
            loc.start(config, target)?
        }
    };

    let result = if interactive {
        let budget = state.config.budget;
        let mut oracle = LineOracle { lines, timeout: Duration::from_secs(cfg.interactive.answer_timeout_secs), out, budget };
        loc.run(&mut state, &mut oracle)
    } else {
        let target = state.target.context("synthetic session without a target")?;
        loc.run(&mut state, &mut SyntheticOracle { target })
    };
    let dir = layout.localize_dir();
    match result {
        Ok(trajectory) => {
            let record = RunRecord::from_trajectory(&model_id, state.config, &trajectory);
            dataio::write_run_record(&record, &dir.join("run.json"))?;
            dataio::write_pgm(&trajectory.final_image, &dir.join("final.pgm"))?;
            writeln!(out, "finished {} queries; nearest pool item {}", record.queries.len(), record.nearest_neighbor)?;
            if let Some(loss) = trajectory.final_loss() {
                writeln!(out, "metadata loss {:.4} (prior-mean baseline {:.4})", loss, trajectory.baseline_loss.unwrap_or(f64::NAN))?;
            }
            Ok(LocalizeOutcome::Finished(record))
        }
        Err(SessionError::Oracle(e)) => {
            debug_assert_eq!(state.status, SessionStatus::Suspended);
            let path = dir.join("suspended.json");
            let body = serde_json::to_vec_pretty(&SuspendedSession { model_id, state: state.clone() })?;
            dataio::write_file(&path, &body)?;
            writeln!(out, "\n{e}; {} answers saved, resume with --resume {}", state.answered(), path.display())?;
            Ok(LocalizeOutcome::Suspended(path))
        }
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_ids_round_trip() {
        for key in ModelKey::all() {
            assert_eq!(parse_model_id(&key.id()).unwrap(), key);
        }
        assert!(parse_model_id("bayesian").is_err());
        assert!(parse_model_id("bayes-clean").is_err());
        assert!(parse_model_id("bayesian-dirty").is_err());
    }

    #[test]
    fn cli_parses_every_subcommand() {
        for args in [
            vec!["relquery", "gen-data", "--seed", "3", "--out-dir", "x"],
            vec!["relquery", "--config", "c.json", "train", "--model", "bayesian-clean", "--model", "traditional-noisy"],
            vec!["relquery", "eval", "--data", "d"],
            vec!["relquery", "localize", "--model", "unsupervised-clean", "--response", "logistic", "--interactive"],
            vec!["relquery", "experiment", "--seed", "9"],
            vec!["relquery", "serve", "--port", "9000"],
        ] {
            Cli::try_parse_from(&args).unwrap_or_else(|e| panic!("{args:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["relquery", "localize", "--response", "probit"]).is_err());
    }

    #[test]
    fn ascii_art_shape() {
        let art = ascii_art(&Image::zeros());
        assert_eq!(art.len(), 28);
        assert!(art.iter().all(|l| l.len() == 56 && l.trim().is_empty()));
    }
}
