//! Post-processing of run records: summary statistics, two-tailed
//! Mann-Whitney U tests, bootstrap bands for learning curves, policy probes
//! and CSV/plot-script emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::env::{self, EnvConfig};
use crate::harness::RunRecord;
use crate::nets::{NetError, ParamVector, Preset, Tape};
use crate::policy::PolicyView;
use crate::seed::{derive_seed, rng_from_seed};

pub const PROBE_INVESTMENTS: usize = 1000;
pub const PROBE_PRESENTATIONS: usize = 100;
pub const BOOTSTRAP_RESAMPLES: usize = 2000;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("empty sample")]
    Empty,
    #[error("curve grids differ between runs of {algorithm} at p={p}")]
    MismatchedGrids { algorithm: Preset, p: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> AnalysisError {
    AnalysisError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub mad: f64,
    pub mean: f64,
    pub std: f64,
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn median(xs: &[f64]) -> Result<f64, AnalysisError> {
    if xs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    Ok(median_sorted(&sorted(xs)))
}

/// Median, unscaled MAD, mean and sample standard deviation (n−1; 0 for n=1).
pub fn median_mad(xs: &[f64]) -> Result<Summary, AnalysisError> {
    let med = median(xs)?;
    let dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&dev)?;
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        median: med,
        mad,
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub p: f64,
    pub algorithm: Preset,
    pub median: f64,
    pub mad: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UTestResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub comparison: String,
}

/// Midranks (1-based) of `xs`, plus Σ(t³ − t) over tie groups.
fn midranks(xs: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + (j + 1)) as f64;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Directional statistics `(U_a, U_b)`; they sum to `n_a·n_b`.
pub fn u_statistics(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, _) = midranks(&pooled);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let r1: f64 = ranks[..a.len()].iter().sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    (u1, n1 * n2 - u1)
}

/// Two-tailed Mann-Whitney U test, normal approximation with tie and
/// continuity corrections. Reports `U = min(U_a, U_b)`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<UTestResult, AnalysisError> {
    mann_whitney_u_labeled(a, b, String::new())
}

pub fn mann_whitney_u_labeled(
    a: &[f64],
    b: &[f64],
    comparison: String,
) -> Result<UTestResult, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (_, ties) = midranks(&pooled);
    let (u1, u2) = u_statistics(a, b);
    let u = u1.min(u2);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let mu = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let p_value = if var <= 0.0 || !var.is_finite() {
        1.0
    } else {
        let z = ((mu - u).abs() - 0.5).max(0.0) / var.sqrt();
        // two-tailed: 2·(1 − Φ(z)) = erfc(z/√2)
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(UTestResult {
        u_statistic: u,
        p_value,
        n1: a.len(),
        n2: b.len(),
        comparison,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBand {
    pub algorithm: Preset,
    pub p: f64,
    pub episode_index: u64,
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Percentile 95% interval of the median from `resamples` bootstrap draws.
pub fn bootstrap_median_ci<R: Rng + ?Sized>(xs: &[f64], resamples: usize, rng: &mut R) -> (f64, f64) {
    let n = xs.len();
    let mut meds: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut s: Vec<f64> = (0..n).map(|_| xs[rng.random_range(0..n)]).collect();
            s.sort_by(f64::total_cmp);
            median_sorted(&s)
        })
        .collect();
    meds.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (resamples - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        meds[lo] + (pos - lo as f64) * (meds[hi] - meds[lo])
    };
    (at(0.025), at(0.975))
}

/// Per (algorithm, p, grid point): median across runs with a bootstrap 95%
/// interval. Cells come out in ascending p, then algorithm order.
pub fn aggregate_curves(records: &[RunRecord], seed: u64) -> Result<Vec<CurveBand>, AnalysisError> {
    let mut out = Vec::new();
    for ((p, algorithm), runs) in cells(records) {
        let grid: Vec<u64> = runs[0].curve.iter().map(|c| c.episode_index).collect();
        if runs
            .iter()
            .any(|r| !r.curve.iter().map(|c| c.episode_index).eq(grid.iter().copied()))
        {
            return Err(AnalysisError::MismatchedGrids { algorithm, p: p.0 });
        }
        for (k, &episode_index) in grid.iter().enumerate() {
            let ys: Vec<f64> = runs.iter().map(|r| r.curve[k].mean_return).collect();
            let mut rng = rng_from_seed(derive_seed(
                seed,
                &[algorithm.id() as u64, p.0.to_bits(), episode_index],
            ));
            let (ci_low, ci_high) = bootstrap_median_ci(&ys, BOOTSTRAP_RESAMPLES, &mut rng);
            out.push(CurveBand {
                algorithm,
                p: p.0,
                episode_index,
                median: median(&ys)?,
                ci_low,
                ci_high,
                n: ys.len(),
            });
        }
    }
    Ok(out)
}

/// Total order on p for map keys.
#[derive(Debug, Clone, Copy, PartialEq)]
struct POrd(f64);
impl Eq for POrd {}
impl PartialOrd for POrd {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for POrd {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn cells(records: &[RunRecord]) -> BTreeMap<(POrd, Preset), Vec<&RunRecord>> {
    let mut m: BTreeMap<(POrd, Preset), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        m.entry((POrd(r.config.p), r.config.algorithm)).or_default().push(r);
    }
    m
}

/// Median/MAD rows over each cell's run-level re-evaluation means.
pub fn summary_rows(records: &[RunRecord]) -> Result<Vec<SummaryRow>, AnalysisError> {
    cells(records)
        .into_iter()
        .map(|((p, algorithm), runs)| {
            let xs: Vec<f64> = runs.iter().map(|r| r.reeval_mean()).collect();
            let s = median_mad(&xs)?;
            Ok(SummaryRow {
                p: p.0,
                algorithm,
                median: s.median,
                mad: s.mad,
                mean: s.mean,
                std: s.std,
                n: xs.len(),
            })
        })
        .collect()
}

/// At each p, every pair of algorithms present.
pub fn u_test_rows(records: &[RunRecord]) -> Result<Vec<(f64, UTestResult)>, AnalysisError> {
    let cells = cells(records);
    let mut by_p: BTreeMap<POrd, Vec<(Preset, Vec<f64>)>> = BTreeMap::new();
    for ((p, alg), runs) in &cells {
        by_p.entry(*p)
            .or_default()
            .push((*alg, runs.iter().map(|r| r.reeval_mean()).collect()));
    }
    let mut out = Vec::new();
    for (p, algs) in by_p {
        for i in 0..algs.len() {
            for j in i + 1..algs.len() {
                let label = format!("{} vs {}", algs[i].0, algs[j].0);
                out.push((p.0, mann_whitney_u_labeled(&algs[i].1, &algs[j].1, label)?));
            }
        }
    }
    Ok(out)
}

/// Episode-start investments of `PROBE_INVESTMENTS` episodes at p = 1.
pub fn probe_investment<R: Rng + ?Sized>(
    policy: &ParamVector,
    algorithm: Preset,
    rng: &mut R,
) -> Result<Vec<f64>, AnalysisError> {
    policy.expect_preset(algorithm)?;
    let view = PolicyView::new(policy)?;
    let cfg = EnvConfig::with_p(1.0);
    Ok((0..PROBE_INVESTMENTS)
        .map(|_| view.draw_investment(&cfg, rng).clipped)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceProfile {
    pub partner_investment: Vec<f64>,
    pub accept_probability: Vec<f64>,
    pub mean_investment: f64,
}

/// Presents each cooperative partner `PROBE_PRESENTATIONS` times, each time
/// with a freshly drawn focal investment, and records acceptance frequencies.
pub fn probe_acceptance<R: Rng + ?Sized>(
    policy: &ParamVector,
    algorithm: Preset,
    rng: &mut R,
) -> Result<AcceptanceProfile, AnalysisError> {
    policy.expect_preset(algorithm)?;
    let view = PolicyView::new(policy)?;
    let cfg = EnvConfig::with_p(1.0);
    let grid = env::partner_grid(&cfg);
    let mut tape = Tape::default();
    let mut total_inv = 0.0;
    let mut accept_probability = Vec::with_capacity(grid.len());
    for &y in &grid {
        let mut hits = 0usize;
        for _ in 0..PROBE_PRESENTATIONS {
            let x = view.draw_investment(&cfg, rng).clipped;
            total_inv += x;
            let (accept, _) = view.choice_head([x, y], &mut tape).sample(rng);
            hits += usize::from(accept);
        }
        accept_probability.push(hits as f64 / PROBE_PRESENTATIONS as f64);
    }
    Ok(AcceptanceProfile {
        mean_investment: total_inv / (grid.len() * PROBE_PRESENTATIONS) as f64,
        partner_investment: grid,
        accept_probability,
    })
}

/// Shortest representation that round-trips exactly.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub const SUMMARY_HEADER: [&str; 7] = ["p", "algorithm", "median", "mad", "mean", "std", "n"];
pub const UTEST_HEADER: [&str; 6] = ["p", "comparison", "u_statistic", "p_value", "n1", "n2"];
pub const CURVE_HEADER: [&str; 7] = ["algorithm", "p", "episode_index", "median", "ci_low", "ci_high", "n"];
pub const INVESTMENT_HEADER: [&str; 4] = ["algorithm", "p", "run", "investment"];
pub const ACCEPTANCE_HEADER: [&str; 6] = ["algorithm", "p", "run", "partner_investment", "accept_probability", "mean_investment"];

/// Writes `summary.csv` and `utest.csv` into `out_dir`.
pub fn write_stat_tables(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let path = out_dir.join("summary.csv");
    let rows: Vec<Vec<String>> = summary_rows(records)?
        .iter()
        .map(|r| {
            vec![
                num(r.p),
                r.algorithm.to_string(),
                num(r.median),
                num(r.mad),
                num(r.mean),
                num(r.std),
                r.n.to_string(),
            ]
        })
        .collect();
    write_csv(&path, &SUMMARY_HEADER, &rows)?;
    let upath = out_dir.join("utest.csv");
    let rows: Vec<Vec<String>> = u_test_rows(records)?
        .iter()
        .map(|(p, u)| {
            vec![
                num(*p),
                u.comparison.clone(),
                num(u.u_statistic),
                num(u.p_value),
                u.n1.to_string(),
                u.n2.to_string(),
            ]
        })
        .collect();
    write_csv(&upath, &UTEST_HEADER, &rows)?;
    Ok(vec![path, upath])
}

/// Writes one `curves/<algorithm>_p<p>.csv` per cell.
pub fn write_curve_csvs(records: &[RunRecord], out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>, AnalysisError> {
    let curve_dir = out_dir.join("curves");
    fs::create_dir_all(&curve_dir).map_err(|e| io_err(&curve_dir, e))?;
    let bands = aggregate_curves(records, seed)?;
    let mut written = Vec::new();
    for ((p, alg), _) in cells(records) {
        let path = curve_dir.join(format!("{}_p{}.csv", alg.label(), p.0));
        let rows: Vec<Vec<String>> = bands
            .iter()
            .filter(|b| b.algorithm == alg && b.p == p.0)
            .map(|b| {
                vec![
                    b.algorithm.to_string(),
                    num(b.p),
                    b.episode_index.to_string(),
                    num(b.median),
                    num(b.ci_low),
                    num(b.ci_high),
                    b.n.to_string(),
                ]
            })
            .collect();
        write_csv(&path, &CURVE_HEADER, &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `probe_investment.csv` and `probe_acceptance.csv` for every run's
/// final policy.
pub fn write_probe_csvs(records: &[RunRecord], out_dir: &Path, seed: u64) -> Result<Vec<PathBuf>, AnalysisError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut inv_rows = Vec::new();
    let mut acc_rows = Vec::new();
    for (_, runs) in cells(records) {
        for (k, r) in runs.iter().enumerate() {
            let (alg, p) = (r.config.algorithm, r.config.p);
            let mut rng = rng_from_seed(derive_seed(seed, &[r.config.seed, 7]));
            for x in probe_investment(&r.final_policy, alg, &mut rng)? {
                inv_rows.push(vec![alg.to_string(), num(p), k.to_string(), num(x)]);
            }
            let prof = probe_acceptance(&r.final_policy, alg, &mut rng)?;
            for (y, a) in prof.partner_investment.iter().zip(&prof.accept_probability) {
                acc_rows.push(vec![
                    alg.to_string(),
                    num(p),
                    k.to_string(),
                    num(*y),
                    num(*a),
                    num(prof.mean_investment),
                ]);
            }
        }
    }
    let ipath = out_dir.join("probe_investment.csv");
    write_csv(&ipath, &INVESTMENT_HEADER, &inv_rows)?;
    let apath = out_dir.join("probe_acceptance.csv");
    write_csv(&apath, &ACCEPTANCE_HEADER, &acc_rows)?;
    Ok(vec![ipath, apath])
}

/// Writes the stat tables, curve CSVs, probe CSVs and plot scripts into
/// `out_dir`. Returns the written paths.
pub fn emit_tables_and_plotdata(
    records: &[RunRecord],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>, AnalysisError> {
    let mut written = write_stat_tables(records, out_dir)?;
    written.extend(write_curve_csvs(records, out_dir, seed)?);
    written.extend(write_probe_csvs(records, out_dir, seed)?);
    for (name, body) in [
        ("plot_curves.py", PLOT_CURVES),
        ("plot_summary.py", PLOT_SUMMARY),
        ("plot_probes.py", PLOT_PROBES),
    ] {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads a summary table written by [`emit_tables_and_plotdata`].
pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, AnalysisError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| io_err(path, e)))
        .collect()
}

const PLOT_CURVES: &str = r#"#!/usr/bin/env python3
# Learning curves: median with 95% band per (algorithm, p).
import csv, glob, os, sys
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
files = sorted(glob.glob(os.path.join(here, "curves", "*.csv")))
ps = sorted({f.rsplit("_p", 1)[1][:-4] for f in files}, key=float)
fig, axes = plt.subplots(1, max(len(ps), 1), figsize=(4 * max(len(ps), 1), 3.5), squeeze=False)
for ax, p in zip(axes[0], ps):
    for f in files:
        if not f.endswith("_p" + p + ".csv"):
            continue
        rows = list(csv.DictReader(open(f)))
        if not rows:
            continue
        x = [int(r["episode_index"]) for r in rows]
        ax.plot(x, [float(r["median"]) for r in rows], label=rows[0]["algorithm"])
        ax.fill_between(x, [float(r["ci_low"]) for r in rows], [float(r["ci_high"]) for r in rows], alpha=0.3)
    ax.set_title("p = " + p)
    ax.set_xlabel("episodes")
    ax.set_ylabel("mean return")
    ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "curves.png") if len(sys.argv) < 2 else sys.argv[1])
"#;

const PLOT_SUMMARY: &str = r#"#!/usr/bin/env python3
# Re-evaluation medians with MAD error bars against p.
import csv, os, sys
from collections import defaultdict
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
series = defaultdict(list)
for r in csv.DictReader(open(os.path.join(here, "summary.csv"))):
    series[r["algorithm"]].append((float(r["p"]), float(r["median"]), float(r["mad"])))
fig, ax = plt.subplots(figsize=(5, 3.5))
for alg, pts in sorted(series.items()):
    pts.sort()
    ax.errorbar([q[0] for q in pts], [q[1] for q in pts], yerr=[q[2] for q in pts], marker="o", capsize=3, label=alg)
ax.set_xscale("log")
ax.set_xlabel("p")
ax.set_ylabel("re-evaluation median")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(here, "summary.png") if len(sys.argv) < 2 else sys.argv[1])
"#;

const PLOT_PROBES: &str = r#"#!/usr/bin/env python3
# Investment histograms and acceptance profiles of the final policies.
import csv, os
from collections import defaultdict
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
inv = defaultdict(list)
for r in csv.DictReader(open(os.path.join(here, "probe_investment.csv"))):
    inv[(r["algorithm"], r["p"])].append(float(r["investment"]))
acc = defaultdict(lambda: defaultdict(list))
means = defaultdict(list)
for r in csv.DictReader(open(os.path.join(here, "probe_acceptance.csv"))):
    key = (r["algorithm"], r["p"])
    acc[key][float(r["partner_investment"])].append(float(r["accept_probability"]))
    means[key].append(float(r["mean_investment"]))
keys = sorted(set(inv) | set(acc), key=lambda k: (float(k[1]), k[0]))
if keys:
    fig, axes = plt.subplots(2, len(keys), figsize=(3.2 * len(keys), 6), squeeze=False)
    for j, k in enumerate(keys):
        axes[0][j].hist(inv.get(k, []), bins=30, range=(0, 15))
        axes[0][j].set_title("%s p=%s" % k)
        ys = sorted(acc[k])
        axes[1][j].plot(ys, [sum(acc[k][y]) / len(acc[k][y]) for y in ys])
        if means[k]:
            axes[1][j].axvline(sum(means[k]) / len(means[k]), color="green")
        axes[1][j].set_ylim(-0.05, 1.05)
        axes[1][j].set_xlabel("partner investment")
    fig.tight_layout()
    fig.savefig(os.path.join(here, "probes.png"))
"#;
