//! Experiment orchestration: single seeded runs, the (algorithm × p) grid,
//! learning curves on a shared 1000-episode grid, re-evaluation, persistence
//! and the per-step timing probe.
//!
//! A persisted run is a directory holding `config.json`, `curve.csv`,
//! `policy.bin`, `reeval.csv`, `log.jsonl` and, written last, `status.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmaes::{CmaesConfig, CmaesError, CmaesTrainer, Genome};
use crate::env::{EnvConfig, EnvError};
use crate::exec::{self, Parallelism};
use crate::nets::{init_params, NetError, ParamVector, Preset, Tape};
use crate::policy::{play_episode, PolicyView};
use crate::ppo::{PpoConfig, PpoError, PpoTrainer};
use crate::seed::{derive_seed, float_key, label_key, rng_from_seed};

pub const SCHEMA_VERSION: u32 = 1;
/// Episode spacing of learning-curve points.
pub const CURVE_SPACING: u64 = 1000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Cmaes(#[from] CmaesError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub algorithm: Preset,
    /// Rarity used for training; overrides `env.p`.
    pub p: f64,
    #[serde(default = "default_budget")]
    pub episode_budget: u64,
    pub seed: u64,
    #[serde(default)]
    pub env: EnvConfig,
    /// Defaults per preset (learning rate 0.005 for PPO-MLP, 0.001 for PPO-DEEP).
    #[serde(default)]
    pub ppo: Option<PpoConfig>,
    #[serde(default)]
    pub cmaes: CmaesConfig,
    #[serde(default = "default_reeval_episodes")]
    pub reeval_episodes: usize,
    #[serde(default = "default_reeval_p")]
    pub reeval_p: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn default_budget() -> u64 {
    30_000
}
fn default_reeval_episodes() -> usize {
    1000
}
fn default_reeval_p() -> f64 {
    1.0
}

impl RunConfig {
    pub fn new(algorithm: Preset, p: f64, episode_budget: u64, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            algorithm,
            p,
            episode_budget,
            seed,
            env: EnvConfig::default(),
            ppo: None,
            cmaes: CmaesConfig::default(),
            reeval_episodes: default_reeval_episodes(),
            reeval_p: default_reeval_p(),
            output_dir: None,
        }
    }

    pub fn train_env(&self) -> EnvConfig {
        EnvConfig {
            p: self.p,
            ..self.env.clone()
        }
    }

    pub fn eval_env(&self) -> EnvConfig {
        EnvConfig {
            p: self.reeval_p,
            ..self.env.clone()
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        self.ppo
            .clone()
            .unwrap_or_else(|| PpoConfig::for_preset(self.algorithm))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train_env().validate()?;
        self.eval_env().validate()?;
        if self.algorithm.is_ppo() {
            self.ppo_config().validate()?;
        } else {
            self.cmaes.validate()?;
        }
        Ok(())
    }

    /// Directory name used for this run inside a grid.
    pub fn run_name(&self, run_index: usize) -> String {
        format!("{}_p{}_run{run_index:03}", self.algorithm.label(), self.p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode_index: u64,
    pub mean_return: f64,
    pub env_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub completed: bool,
    pub failure: Option<String>,
    /// Episode count at which a failed run stopped.
    pub truncated_at_episode: Option<u64>,
    pub episodes: u64,
    pub env_steps: u64,
    /// PPO updates or CMA-ES generations.
    pub updates: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub curve: Vec<CurvePoint>,
    pub final_policy: ParamVector,
    pub reeval_scores: Vec<f64>,
    pub status: RunStatus,
    /// JSON-lines diagnostics, one object per update/generation.
    pub log: Vec<serde_json::Value>,
}

impl RunRecord {
    pub fn wall_time(&self) -> f64 {
        self.status.wall_time
    }

    pub fn reeval_mean(&self) -> f64 {
        if self.reeval_scores.is_empty() {
            0.0
        } else {
            self.reeval_scores.iter().sum::<f64>() / self.reeval_scores.len() as f64
        }
    }

    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &RunRecord) -> bool {
        let strip = |s: &RunStatus| RunStatus {
            wall_time: 0.0,
            ..s.clone()
        };
        self.config == other.config
            && self.curve == other.curve
            && self.final_policy == other.final_policy
            && self.reeval_scores == other.reeval_scores
            && strip(&self.status) == strip(&other.status)
            && self.log == other.log
    }
}

/// Grid points `g` (multiples of the spacing) with `from < g ≤ to`.
fn grid_points(from: u64, to: u64) -> impl Iterator<Item = u64> {
    let first = from / CURVE_SPACING + 1;
    let last = to / CURVE_SPACING;
    (first..=last).map(|k| k * CURVE_SPACING)
}

/// Trains one configuration to its episode budget, re-evaluates the final
/// policy and persists the record when `output_dir` is set.
pub fn run_single(cfg: &RunConfig) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let start = Instant::now();
    let mut record = if cfg.algorithm.is_ppo() {
        train_ppo(cfg)?
    } else {
        train_cmaes(cfg)?
    };
    record.reeval_scores = reevaluate(
        &record.final_policy,
        cfg.algorithm,
        cfg.reeval_episodes,
        &cfg.eval_env(),
        derive_seed(cfg.seed, &[label_key("reeval")]),
        Parallelism::Sequential,
    )?;
    record.status.completed = record.status.failure.is_none();
    record.status.wall_time = start.elapsed().as_secs_f64();
    if let Some(dir) = &cfg.output_dir {
        write_record(&record, dir)?;
    }
    Ok(record)
}

fn train_ppo(cfg: &RunConfig) -> Result<RunRecord, HarnessError> {
    let init = init_params(cfg.algorithm, &mut rng_from_seed(derive_seed(cfg.seed, &[label_key("init")])));
    let mut trainer = PpoTrainer::new(
        init,
        cfg.ppo_config(),
        cfg.train_env(),
        rng_from_seed(derive_seed(cfg.seed, &[label_key("train")])),
    )?;
    let mut curve = Vec::new();
    let mut log = Vec::new();
    let mut status = RunStatus::default();
    while trainer.episodes < cfg.episode_budget {
        let before = trainer.params.clone();
        let episodes_before = trainer.episodes;
        match trainer.step() {
            Ok((batch, diag)) => {
                let diagnostics: BTreeMap<String, f64> = [
                    ("mean_kl", diag.mean_kl),
                    ("beta", diag.beta),
                    ("clip_fraction", diag.clip_fraction),
                    ("value_loss", diag.value_loss),
                ]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect();
                for g in grid_points(episodes_before, trainer.episodes) {
                    curve.push(CurvePoint {
                        episode_index: g,
                        mean_return: batch.mean_return(),
                        env_steps: trainer.env_steps,
                        diagnostics: Some(diagnostics.clone()),
                    });
                }
                log.push(serde_json::to_value(&diag).expect("diagnostics serialize"));
            }
            Err(e @ PpoError::NonFinite { .. }) => {
                trainer.params = before;
                status.failure = Some(e.to_string());
                status.truncated_at_episode = Some(trainer.episodes);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    status.episodes = trainer.episodes;
    status.env_steps = trainer.env_steps;
    status.updates = trainer.updates;
    Ok(RunRecord {
        config: cfg.clone(),
        curve,
        final_policy: trainer.params,
        reeval_scores: Vec::new(),
        status,
        log,
    })
}

fn train_cmaes(cfg: &RunConfig) -> Result<RunRecord, HarnessError> {
    let mut trainer = CmaesTrainer::new(
        cfg.cmaes.clone(),
        cfg.train_env(),
        derive_seed(cfg.seed, &[label_key("train")]),
    )?;
    if trainer.state.dimension() != crate::nets::param_count(Preset::Cmaes) {
        return Err(HarnessError::Config(format!(
            "CMAES genome has {} coordinates",
            crate::nets::param_count(Preset::Cmaes)
        )));
    }
    let mut curve = Vec::new();
    let mut log = Vec::new();
    let mut last = None;
    while trainer.episodes < cfg.episode_budget {
        let episodes_before = trainer.episodes;
        let g = trainer.step()?;
        let points: Vec<u64> = grid_points(episodes_before, trainer.episodes).collect();
        if !points.is_empty() {
            let best = trainer.reeval_best(&g)?;
            for e in points {
                curve.push(CurvePoint {
                    episode_index: e,
                    mean_return: best.mean_return,
                    env_steps: trainer.env_steps,
                    diagnostics: Some(BTreeMap::from([("sigma".to_string(), trainer.state.sigma)])),
                });
            }
        }
        let best_fitness = g.fitnesses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        log.push(serde_json::json!({
            "generation": g.generation,
            "episodes": trainer.episodes,
            "env_steps": trainer.env_steps,
            "sigma": trainer.state.sigma,
            "best_fitness": best_fitness,
        }));
        last = Some(g);
    }
    let final_policy = match &last {
        Some(g) => trainer.select_final(g)?.0.to_params()?,
        None => Genome {
            values: trainer.state.mean.iter().copied().collect(),
        }
        .to_params()?,
    };
    let status = RunStatus {
        episodes: trainer.episodes,
        env_steps: trainer.env_steps,
        updates: trainer.state.generation,
        ..RunStatus::default()
    };
    Ok(RunRecord {
        config: cfg.clone(),
        curve,
        final_policy,
        reeval_scores: Vec::new(),
        status,
        log,
    })
}

/// Plays `episodes` episodes without learning; episode `k` uses a seed derived
/// from `(seed, k)`, so the result is independent of the parallel split.
pub fn reevaluate(
    policy: &ParamVector,
    algorithm: Preset,
    episodes: usize,
    env: &EnvConfig,
    seed: u64,
    par: Parallelism,
) -> Result<Vec<f64>, HarnessError> {
    policy.expect_preset(algorithm)?;
    env.validate()?;
    let view = PolicyView::new(policy)?;
    Ok(exec::map_indexed(episodes, par, |k| {
        let mut rng = rng_from_seed(derive_seed(seed, &[k as u64]));
        play_episode(&view, env, &mut rng, &mut Tape::default()).ret
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub algorithms: Vec<Preset>,
    pub p_values: Vec<f64>,
    pub runs_per_cell: usize,
    pub base_seed: u64,
    #[serde(default = "default_budget")]
    pub episode_budget: u64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub ppo_mlp: Option<PpoConfig>,
    #[serde(default)]
    pub ppo_deep: Option<PpoConfig>,
    #[serde(default)]
    pub cmaes: CmaesConfig,
    #[serde(default = "default_reeval_episodes")]
    pub reeval_episodes: usize,
    #[serde(default = "default_reeval_p")]
    pub reeval_p: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            algorithms: vec![Preset::Cmaes, Preset::PpoDeep, Preset::PpoMlp],
            p_values: vec![0.1, 0.2, 0.5, 1.0],
            runs_per_cell: 24,
            base_seed: 0,
            episode_budget: default_budget(),
            env: EnvConfig::default(),
            ppo_mlp: None,
            ppo_deep: None,
            cmaes: CmaesConfig::default(),
            reeval_episodes: default_reeval_episodes(),
            reeval_p: default_reeval_p(),
            output_dir: None,
        }
    }
}

impl GridConfig {
    /// Seed of run `run_index` in cell `(algorithm, p)`.
    pub fn run_seed(&self, algorithm: Preset, p: f64, run_index: usize) -> u64 {
        derive_seed(
            self.base_seed,
            &[label_key(algorithm.label()), float_key(p), run_index as u64],
        )
    }

    /// Every run of the grid, cells in (algorithm, p) order.
    pub fn runs(&self) -> Vec<(RunConfig, usize)> {
        let mut out = Vec::new();
        for &algorithm in &self.algorithms {
            for &p in &self.p_values {
                for run_index in 0..self.runs_per_cell {
                    let ppo = match algorithm {
                        Preset::PpoMlp => self.ppo_mlp.clone(),
                        Preset::PpoDeep => self.ppo_deep.clone(),
                        Preset::Cmaes => None,
                    };
                    let mut cfg = RunConfig {
                        schema_version: self.schema_version,
                        algorithm,
                        p,
                        episode_budget: self.episode_budget,
                        seed: self.run_seed(algorithm, p, run_index),
                        env: self.env.clone(),
                        ppo,
                        cmaes: self.cmaes.clone(),
                        reeval_episodes: self.reeval_episodes,
                        reeval_p: self.reeval_p,
                        output_dir: None,
                    };
                    cfg.output_dir = self.output_dir.as_ref().map(|d| d.join(cfg.run_name(run_index)));
                    out.push((cfg, run_index));
                }
            }
        }
        out
    }
}

#[derive(Debug)]
pub struct GridOutcome {
    pub records: Vec<RunRecord>,
    /// `(run directory name, error)` for runs that could not produce a record.
    pub failures: Vec<(String, String)>,
    /// Runs loaded from disk instead of recomputed.
    pub resumed: usize,
}

/// Runs every cell of the grid. Completed runs already present under
/// `output_dir` are loaded rather than recomputed.
pub fn run_grid(grid: &GridConfig, par: Parallelism) -> Result<GridOutcome, HarnessError> {
    if grid.algorithms.is_empty() || grid.p_values.is_empty() || grid.runs_per_cell == 0 {
        return Err(HarnessError::Config("grid is empty".into()));
    }
    let runs = grid.runs();
    let results = exec::map_slice(&runs, par, |(cfg, idx)| {
        let name = cfg.run_name(*idx);
        if let Some(dir) = &cfg.output_dir {
            if let Ok(rec) = read_record(dir) {
                if rec.status.completed && rec.config == *cfg {
                    return (name, Ok((rec, true)));
                }
            }
        }
        (name, run_single(cfg).map(|r| (r, false)))
    });
    let mut outcome = GridOutcome {
        records: Vec::new(),
        failures: Vec::new(),
        resumed: 0,
    };
    for (name, res) in results {
        match res {
            Ok((rec, resumed)) => {
                outcome.resumed += usize::from(resumed);
                if let Some(f) = &rec.status.failure {
                    outcome.failures.push((name, f.clone()));
                }
                outcome.records.push(rec);
            }
            Err(e) => outcome.failures.push((name, e.to_string())),
        }
    }
    Ok(outcome)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn csv_bytes<F>(path: &Path, fill: F) -> Result<Vec<u8>, HarnessError>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    fill(&mut w).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.into_inner().map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes the run directory; `status.json` goes last so its presence marks a
/// complete record.
pub fn write_record(record: &RunRecord, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let status_path = dir.join("status.json");
    if status_path.exists() {
        fs::remove_file(&status_path).map_err(io_err(&status_path))?;
    }
    let p = dir.join("config.json");
    write_atomic(&p, &serde_json::to_vec_pretty(&record.config).expect("config serializes"))?;

    let p = dir.join("curve.csv");
    let bytes = csv_bytes(&p, |w| {
        w.write_record(["episode_index", "mean_return", "env_steps"])?;
        for c in &record.curve {
            w.write_record([
                c.episode_index.to_string(),
                format!("{:?}", c.mean_return),
                c.env_steps.to_string(),
            ])?;
        }
        Ok(())
    })?;
    write_atomic(&p, &bytes)?;

    write_atomic(&dir.join("policy.bin"), &record.final_policy.to_bytes())?;

    let p = dir.join("reeval.csv");
    let bytes = csv_bytes(&p, |w| {
        w.write_record(["episode", "return"])?;
        for (k, r) in record.reeval_scores.iter().enumerate() {
            w.write_record([k.to_string(), format!("{r:?}")])?;
        }
        Ok(())
    })?;
    write_atomic(&p, &bytes)?;

    let mut log = Vec::new();
    for entry in &record.log {
        serde_json::to_writer(&mut log, entry).expect("log serializes");
        log.push(b'\n');
    }
    write_atomic(&dir.join("log.jsonl"), &log)?;

    write_atomic(&status_path, &serde_json::to_vec_pretty(&record.status).expect("status serializes"))
}

fn parse_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_record(dir: &Path) -> Result<RunRecord, HarnessError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(io_err(&p)).map(|b| (p, b))
    };
    let (p, bytes) = read("status.json")?;
    let status: RunStatus = serde_json::from_slice(&bytes).map_err(|e| parse_err(&p, e))?;
    let (p, bytes) = read("config.json")?;
    let config: RunConfig = serde_json::from_slice(&bytes).map_err(|e| parse_err(&p, e))?;

    let (p, bytes) = read("curve.csv")?;
    let mut curve = Vec::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).records() {
        let row = row.map_err(|e| parse_err(&p, e))?;
        let field = |k: usize| row.get(k).ok_or_else(|| parse_err(&p, "short row"));
        curve.push(CurvePoint {
            episode_index: field(0)?.parse().map_err(|e| parse_err(&p, e))?,
            mean_return: field(1)?.parse().map_err(|e| parse_err(&p, e))?,
            env_steps: field(2)?.parse().map_err(|e| parse_err(&p, e))?,
            diagnostics: None,
        });
    }
    let final_policy = ParamVector::load(&dir.join("policy.bin"))?;

    let (p, bytes) = read("reeval.csv")?;
    let mut reeval_scores = Vec::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).records() {
        let row = row.map_err(|e| parse_err(&p, e))?;
        let v = row.get(1).ok_or_else(|| parse_err(&p, "short row"))?;
        reeval_scores.push(v.parse().map_err(|e| parse_err(&p, e))?);
    }
    let (p, bytes) = read("log.jsonl")?;
    let log = bytes
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(|e| parse_err(&p, e)))
        .collect::<Result<_, _>>()?;
    Ok(RunRecord {
        config,
        curve,
        final_policy,
        reeval_scores,
        status,
        log,
    })
}

/// Loads every completed run found directly under `root`.
pub fn read_records(root: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("status.json").is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| read_record(d)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimingBudget {
    Seconds(f64),
    EnvSteps(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub algorithm: Preset,
    pub p: f64,
    pub env_steps: u64,
    /// PPO updates or CMA-ES `tell` calls.
    pub updates: u64,
    pub wall_seconds: f64,
    pub ms_per_step: f64,
    pub updates_per_step: f64,
}

/// Trains from a fresh policy until the budget is spent and reports wall time
/// per environment step, learning included.
pub fn step_timing_probe(
    algorithm: Preset,
    p: f64,
    budget: TimingBudget,
    seed: u64,
) -> Result<TimingReport, HarnessError> {
    let env = EnvConfig::with_p(p);
    env.validate()?;
    let start = Instant::now();
    let spent = |steps: u64| match budget {
        TimingBudget::Seconds(s) => start.elapsed().as_secs_f64() >= s,
        TimingBudget::EnvSteps(n) => steps >= n,
    };
    let (env_steps, updates) = if algorithm.is_ppo() {
        let init = init_params(algorithm, &mut rng_from_seed(seed));
        let mut t = PpoTrainer::new(init, PpoConfig::for_preset(algorithm), env, rng_from_seed(seed ^ 1))?;
        while !spent(t.env_steps) {
            t.step()?;
        }
        (t.env_steps, t.updates)
    } else {
        let mut t = CmaesTrainer::new(CmaesConfig::default(), env, seed)?;
        while !spent(t.env_steps) {
            t.step()?;
        }
        (t.env_steps, t.state.generation)
    };
    let wall_seconds = start.elapsed().as_secs_f64();
    Ok(TimingReport {
        algorithm,
        p,
        env_steps,
        updates,
        wall_seconds,
        ms_per_step: 1000.0 * wall_seconds / env_steps.max(1) as f64,
        updates_per_step: updates as f64 / env_steps.max(1) as f64,
    })
}
