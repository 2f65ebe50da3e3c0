//! `rarebench` command-line entry point.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use rarebench::analysis;
use rarebench::env::{expected_return_oracle, EnvConfig};
use rarebench::exec::Parallelism;
use rarebench::harness::{self, GridConfig, RunConfig, TimingBudget};
use rarebench::ppo::PpoConfig;
use rarebench::seed::rng_from_seed;
use rarebench::{ParamVector, Preset};

use config::ConfigError;

const WORKERS_ENV: &str = "RAREBENCH_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "rarebench", version, about = "Partner-choice benchmark with rare significant events")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set ppo.gamma=0.9` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; drawn at random and printed when omitted
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (falls back to RAREBENCH_WORKERS)
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration
    Run(Common),
    /// Train every (algorithm, p, run) of a grid
    Grid(Common),
    /// Re-evaluate a saved policy
    Reeval {
        /// policy.bin or a run directory
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Investment and acceptance probes of saved policies
    Probe {
        /// policy.bin, a run directory, or a grid directory
        #[arg(long)]
        policy: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Summary and U-test tables of a grid directory
    Stats {
        #[arg(long)]
        runs: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregated learning curves of a grid directory
    Curves {
        #[arg(long)]
        runs: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Wall time per environment step, learning included
    Timing {
        #[arg(long)]
        algorithm: Preset,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic expected return of a threshold policy
    Oracle {
        #[arg(long)]
        x: f64,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value_t = 1.0)]
        p: f64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(c) => cmd_run(&c),
        Command::Grid(c) => cmd_grid(&c),
        Command::Reeval {
            policy,
            episodes,
            p,
            common,
        } => cmd_reeval(&policy, episodes, p, &common),
        Command::Probe { policy, common } => cmd_probe(&policy, &common),
        Command::Stats { runs, common } => cmd_stats(&runs, &common),
        Command::Curves { runs, common } => cmd_curves(&runs, &common),
        Command::Timing {
            algorithm,
            p,
            seconds,
            common,
        } => cmd_timing(algorithm, p, seconds, &common),
        Command::Oracle { x, threshold, p } => {
            let cfg = EnvConfig::with_p(p);
            cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
            if !(0.0..=15.0).contains(&x) || !threshold.is_finite() {
                return Err(Failure::Config("x must lie in [0, 15]".into()));
            }
            println!("{}", expected_return_oracle(x, threshold, &cfg));
            Ok(())
        }
    }
}

fn workers(c: &Common) -> Result<Parallelism, Failure> {
    let n = match c.workers {
        Some(n) => Some(n),
        None => match std::env::var(WORKERS_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse()
                    .map_err(|_| Failure::Config(format!("{WORKERS_ENV}={s} is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    Ok(Parallelism::from_workers(n))
}

fn resolve_seed(c: &Common, from_config: Option<u64>) -> u64 {
    c.seed.or(from_config).unwrap_or_else(rand::random)
}

fn print_effective<T: serde::Serialize>(what: &str, cfg: &T) {
    println!("effective {what} config:");
    println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
}

/// Value of `key` as given by the file or an override, before defaults.
fn early_value(file: &Value, overrides: &[String], key: &str) -> Option<Value> {
    let prefix = format!("{key}=");
    overrides
        .iter()
        .rev()
        .find_map(|o| o.strip_prefix(&prefix))
        .map(|raw| serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())))
        .or_else(|| file.get(key).cloned())
}

fn load_layers(c: &Common) -> Result<Value, Failure> {
    Ok(match &c.config {
        Some(p) => config::read_file(p)?,
        None => Value::Object(Default::default()),
    })
}

fn resolve_run(c: &Common) -> Result<RunConfig, Failure> {
    let file = load_layers(c)?;
    let algorithm: Preset = match early_value(&file, &c.overrides, "algorithm") {
        Some(v) => config::from_value(v)?,
        None => Preset::PpoMlp,
    };
    let mut base = RunConfig::new(algorithm, 1.0, 30_000, 0);
    base.ppo = Some(PpoConfig::for_preset(algorithm));
    let mut v = config::to_value(&base);
    let seed_given = config::has_key(&file, "seed") || c.overrides.iter().any(|o| o.starts_with("seed="));
    config::merge(&mut v, file);
    for o in &c.overrides {
        config::apply_override(&mut v, o)?;
    }
    let mut cfg: RunConfig = config::from_value(v)?;
    cfg.seed = resolve_seed(c, seed_given.then_some(cfg.seed));
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn resolve_grid(c: &Common) -> Result<GridConfig, Failure> {
    let file = load_layers(c)?;
    let mut base = GridConfig::default();
    base.ppo_mlp = Some(PpoConfig::for_preset(Preset::PpoMlp));
    base.ppo_deep = Some(PpoConfig::for_preset(Preset::PpoDeep));
    let mut v = config::to_value(&base);
    let seed_given = config::has_key(&file, "base_seed") || c.overrides.iter().any(|o| o.starts_with("base_seed="));
    config::merge(&mut v, file);
    for o in &c.overrides {
        config::apply_override(&mut v, o)?;
    }
    let mut cfg: GridConfig = config::from_value(v)?;
    cfg.base_seed = resolve_seed(c, seed_given.then_some(cfg.base_seed));
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    if cfg.schema_version != harness::SCHEMA_VERSION {
        return Err(Failure::Config(format!("unsupported schema_version {}", cfg.schema_version)));
    }
    for (run, _) in cfg.runs().iter().take(cfg.algorithms.len() * cfg.p_values.len()) {
        run.validate().map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(cfg)
}

fn cmd_run(c: &Common) -> Result<(), Failure> {
    let cfg = resolve_run(c)?;
    print_effective("run", &cfg);
    let rec = harness::run_single(&cfg).map_err(runtime)?;
    println!(
        "episodes {} env steps {} updates {} curve points {}",
        rec.status.episodes,
        rec.status.env_steps,
        rec.status.updates,
        rec.curve.len()
    );
    println!(
        "re-evaluation mean over {} episodes: {:.4}",
        rec.reeval_scores.len(),
        rec.reeval_mean()
    );
    if let Some(f) = &rec.status.failure {
        return Err(Failure::Runtime(format!("run failed: {f}")));
    }
    Ok(())
}

fn cmd_grid(c: &Common) -> Result<(), Failure> {
    let cfg = resolve_grid(c)?;
    print_effective("grid", &cfg);
    let outcome = harness::run_grid(&cfg, workers(c)?).map_err(runtime)?;
    println!(
        "{} runs finished ({} resumed), {} failures",
        outcome.records.len(),
        outcome.resumed,
        outcome.failures.len()
    );
    for row in analysis::summary_rows(&outcome.records).map_err(runtime)? {
        println!(
            "{:<9} p={:<4} median {:.2} MAD {:.2} mean {:.2} std {:.2} n={}",
            row.algorithm, row.p, row.median, row.mad, row.mean, row.std, row.n
        );
    }
    for (name, err) in &outcome.failures {
        eprintln!("failed: {name}: {err}");
    }
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} runs failed", outcome.failures.len())))
    }
}

fn policy_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("policy.bin")
    } else {
        path.to_path_buf()
    }
}

fn cmd_reeval(path: &Path, episodes: usize, p: f64, c: &Common) -> Result<(), Failure> {
    let seed = resolve_seed(c, None);
    let env = EnvConfig::with_p(p);
    env.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let file = policy_file(path);
    println!("reeval policy={} episodes={episodes} p={p} seed={seed}", file.display());
    let pv = ParamVector::load(&file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    let scores = harness::reevaluate(&pv, pv.preset, episodes, &env, seed, workers(c)?).map_err(runtime)?;
    let s = analysis::median_mad(&scores).map_err(runtime)?;
    println!("{}: mean {:.4} median {:.4} std {:.4}", pv.preset, s.mean, s.median, s.std);
    if let Some(out) = &c.out {
        let mut text = String::from("episode,return\n");
        for (k, r) in scores.iter().enumerate() {
            let _ = writeln!(text, "{k},{r:?}");
        }
        write_out(out, "reeval.csv", &text)?;
    }
    Ok(())
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn out_dir(c: &Common) -> Result<&Path, Failure> {
    c.out
        .as_deref()
        .ok_or_else(|| Failure::Config("--out is required".into()))
}

fn cmd_probe(path: &Path, c: &Common) -> Result<(), Failure> {
    let seed = resolve_seed(c, None);
    let out = out_dir(c)?;
    println!("probe path={} seed={seed}", path.display());
    if path.is_dir() && !path.join("policy.bin").exists() {
        let records = harness::read_records(path).map_err(runtime)?;
        for p in analysis::write_probe_csvs(&records, out, seed).map_err(runtime)? {
            println!("wrote {}", p.display());
        }
        return Ok(());
    }
    let file = policy_file(path);
    let pv = ParamVector::load(&file).map_err(|e| runtime(format!("{}: {e}", file.display())))?;
    let mut rng = rng_from_seed(seed);
    let inv = analysis::probe_investment(&pv, pv.preset, &mut rng).map_err(runtime)?;
    let prof = analysis::probe_acceptance(&pv, pv.preset, &mut rng).map_err(runtime)?;
    let mut text = String::from("investment\n");
    for x in &inv {
        let _ = writeln!(text, "{x:?}");
    }
    write_out(out, "probe_investment.csv", &text)?;
    let mut text = String::from("partner_investment,accept_probability\n");
    for (y, a) in prof.partner_investment.iter().zip(&prof.accept_probability) {
        let _ = writeln!(text, "{y:?},{a:?}");
    }
    write_out(out, "probe_acceptance.csv", &text)?;
    println!("mean investment {:.4}", prof.mean_investment);
    Ok(())
}

fn cmd_stats(runs: &Path, c: &Common) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let records = harness::read_records(runs).map_err(runtime)?;
    println!("stats over {} runs in {}", records.len(), runs.display());
    for p in analysis::write_stat_tables(&records, out).map_err(runtime)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_curves(runs: &Path, c: &Common) -> Result<(), Failure> {
    let out = out_dir(c)?;
    let seed = resolve_seed(c, None);
    let records = harness::read_records(runs).map_err(runtime)?;
    println!("curves over {} runs in {} seed={seed}", records.len(), runs.display());
    for p in analysis::write_curve_csvs(&records, out, seed).map_err(runtime)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_timing(algorithm: Preset, p: f64, seconds: f64, c: &Common) -> Result<(), Failure> {
    if !(seconds > 0.0) {
        return Err(Failure::Config("--seconds must be positive".into()));
    }
    EnvConfig::with_p(p)
        .validate()
        .map_err(|e| Failure::Config(e.to_string()))?;
    let seed = resolve_seed(c, None);
    println!("timing algorithm={algorithm} p={p} seconds={seconds} seed={seed}");
    let r = harness::step_timing_probe(algorithm, p, TimingBudget::Seconds(seconds), seed).map_err(runtime)?;
    println!(
        "{} env steps, {} updates in {:.2} s: {:.5} ms/step, {:.3e} updates/step",
        r.env_steps, r.updates, r.wall_seconds, r.ms_per_step, r.updates_per_step
    );
    Ok(())
}
