//! Covariance-matrix-adaptation evolution strategy (maximization) and the
//! 34-dimensional partner-choice genome it searches.
//!
//! Strategy constants follow the standard published defaults:
//!
//! * `λ = 4 + ⌊3 ln N⌋`, `μ = ⌊λ/2⌋`, weights `ln(μ + ½) − ln i` normalized
//! * `c_σ = (μ_eff + 2) / (N + μ_eff + 5)`,
//!   `d_σ = 1 + 2·max(0, √((μ_eff − 1)/(N + 1)) − 1) + c_σ`
//! * `c_c = (4 + μ_eff/N) / (N + 4 + 2μ_eff/N)`, `c_1 = 2 / ((N + 1.3)² + μ_eff)`
//! * `c_μ = min(1 − c_1, 2(μ_eff − 2 + 1/μ_eff) / ((N + 2)² + μ_eff))`
//!
//! The eigendecomposition of `C` is refreshed after every `tell`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::exec::{self, Parallelism};
use crate::nets::{param_count, ParamVector, Preset, Tape, CHOICE, DUMMY, INVESTMENT};
use crate::policy::{play_episode, PolicyView};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum CmaesError {
    #[error("covariance factorization failed (condition number {condition:e})")]
    Factorization { condition: f64 },
    #[error("fitness {index} is not finite: {value}")]
    NonFiniteFitness { index: usize, value: f64 },
    #[error("expected {expected} candidates, got {got}")]
    PopulationSize { expected: usize, got: usize },
    #[error("genome of length {got}, expected {expected}")]
    GenomeLength { expected: usize, got: usize },
    #[error("invalid CMA-ES config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaesConfig {
    pub dimension: usize,
    /// Defaults to `4 + ⌊3 ln N⌋`.
    pub population_size: Option<usize>,
    pub sigma_init: f64,
    pub episodes_per_eval: usize,
    /// Episodes used to score the generation's best candidate for the curve.
    pub reeval_episodes: usize,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        Self {
            dimension: param_count(Preset::Cmaes),
            population_size: None,
            sigma_init: 1.0,
            episodes_per_eval: 1,
            reeval_episodes: 10,
        }
    }
}

pub fn default_population(dimension: usize) -> usize {
    4 + (3.0 * (dimension as f64).ln()).floor() as usize
}

impl CmaesConfig {
    pub fn lambda(&self) -> usize {
        self.population_size
            .unwrap_or_else(|| default_population(self.dimension))
    }

    pub fn validate(&self) -> Result<(), CmaesError> {
        if self.dimension == 0 {
            return Err(CmaesError::InvalidConfig("dimension must be positive".into()));
        }
        if self.lambda() < 4 {
            return Err(CmaesError::InvalidConfig("population size must be at least 4".into()));
        }
        if !(self.sigma_init > 0.0) {
            return Err(CmaesError::InvalidConfig("sigma_init must be positive".into()));
        }
        if self.episodes_per_eval == 0 {
            return Err(CmaesError::InvalidConfig("episodes_per_eval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub cov: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub weights: Vec<f64>,
    pub lambda: usize,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
    pub generation: u64,
    /// Eigenvectors of `cov`.
    basis: DMatrix<f64>,
    /// Square roots of the eigenvalues of `cov`.
    scales: DVector<f64>,
}

impl CmaesState {
    pub fn new(mean: DVector<f64>, sigma: f64, lambda: usize) -> Result<Self, CmaesError> {
        let n = mean.len();
        if lambda < 4 {
            return Err(CmaesError::InvalidConfig("population size must be at least 4".into()));
        }
        let nf = n as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(Self {
            mean,
            sigma,
            cov: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            weights,
            lambda,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            generation: 0,
            basis: DMatrix::identity(n, n),
            scales: DVector::from_element(n, 1.0),
        })
    }

    pub fn from_config(cfg: &CmaesConfig) -> Result<Self, CmaesError> {
        cfg.validate()?;
        Self::new(DVector::zeros(cfg.dimension), cfg.sigma_init, cfg.lambda())
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// Eigenvalues of the covariance, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.scales.iter().map(|s| s * s).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    fn refresh_eigen(&mut self) -> Result<(), CmaesError> {
        // enforce exact symmetry before factorizing
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        self.cov = sym;
        let eig = SymmetricEigen::new(self.cov.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) || !max.is_finite() {
            return Err(CmaesError::Factorization {
                condition: if min > 0.0 { max / min } else { f64::INFINITY },
            });
        }
        self.scales = eig.eigenvalues.map(f64::sqrt);
        self.basis = eig.eigenvectors;
        Ok(())
    }

    /// `C^{-1/2}·v`.
    fn inv_sqrt_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut t = self.basis.tr_mul(v);
        t.component_div_assign(&self.scales);
        &self.basis * t
    }

    /// Samples `λ` candidates `mean + σ·B·D·z`.
    pub fn ask<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Genome>, CmaesError> {
        if self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            let max = self.scales.max().powi(2);
            let min = self.scales.min().powi(2);
            return Err(CmaesError::Factorization {
                condition: max / min,
            });
        }
        let n = self.dimension();
        Ok((0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
                let y = &self.basis * z.component_mul(&self.scales);
                let x = &self.mean + y * self.sigma;
                Genome {
                    values: x.iter().copied().collect(),
                }
            })
            .collect())
    }

    /// Rank-based update from one generation (higher fitness is better; ties
    /// keep sample order).
    pub fn tell(&mut self, genomes: &[Genome], fitnesses: &[f64]) -> Result<(), CmaesError> {
        let n = self.dimension();
        if genomes.len() != self.lambda || fitnesses.len() != self.lambda {
            return Err(CmaesError::PopulationSize {
                expected: self.lambda,
                got: genomes.len().min(fitnesses.len()),
            });
        }
        if let Some((index, &value)) = fitnesses.iter().enumerate().find(|(_, f)| !f.is_finite()) {
            return Err(CmaesError::NonFiniteFitness { index, value });
        }
        if let Some(g) = genomes.iter().find(|g| g.values.len() != n) {
            return Err(CmaesError::GenomeLength {
                expected: n,
                got: g.values.len(),
            });
        }
        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| fitnesses[b].total_cmp(&fitnesses[a]));

        let steps: Vec<DVector<f64>> = order[..self.weights.len()]
            .iter()
            .map(|&k| (DVector::from_column_slice(&genomes[k].values) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }
        self.mean.axpy(self.sigma, &y_w, 1.0);

        let cs = self.c_sigma;
        let c_inv_y = self.inv_sqrt_times(&y_w);
        self.p_sigma *= 1.0 - cs;
        self.p_sigma.axpy((cs * (2.0 - cs) * self.mu_eff).sqrt(), &c_inv_y, 1.0);

        let gen = (self.generation + 1) as f64;
        let ps_norm = self.p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - cs).powf(2.0 * gen)).sqrt()
            < (1.4 + 2.0 / (n as f64 + 1.0)) * self.chi_n;
        let cc = self.c_c;
        self.p_c *= 1.0 - cc;
        if h_sigma {
            self.p_c.axpy((cc * (2.0 - cc) * self.mu_eff).sqrt(), &y_w, 1.0);
        }

        let delta_h = if h_sigma { 0.0 } else { cc * (2.0 - cc) };
        let decay = 1.0 + self.c_1 * delta_h - self.c_1 - self.c_mu;
        self.cov *= decay;
        self.cov.ger(self.c_1, &self.p_c, &self.p_c, 1.0);
        for (w, y) in self.weights.iter().zip(&steps) {
            self.cov.ger(self.c_mu * w, y, y, 1.0);
        }

        self.sigma *= ((cs / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        self.generation += 1;
        self.refresh_eigen()
    }
}

/// A candidate policy: `[investment, 17 choice weights, 16 inert coordinates]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedGenome<'a> {
    pub investment: f64,
    pub choice_weights: &'a [f64],
    pub dummy: &'a [f64],
}

impl Genome {
    pub fn to_params(&self) -> Result<ParamVector, CmaesError> {
        ParamVector::from_values(Preset::Cmaes, self.values.clone()).map_err(|_| {
            CmaesError::GenomeLength {
                expected: param_count(Preset::Cmaes),
                got: self.values.len(),
            }
        })
    }

    /// Investment is clamped into the game range only here; the search
    /// coordinate itself stays unbounded.
    pub fn decode(&self, env: &EnvConfig) -> DecodedGenome<'_> {
        DecodedGenome {
            investment: env.clamp_investment(self.values[0]),
            choice_weights: &self.values[1..18],
            dummy: &self.values[18..],
        }
    }
}

impl From<ParamVector> for Genome {
    fn from(pv: ParamVector) -> Self {
        Genome { values: pv.values }
    }
}

/// Mean return of `episodes` episodes played by the genome.
pub fn evaluate_genome<R: Rng + ?Sized>(
    genome: &Genome,
    env: &EnvConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<f64, CmaesError> {
    let pv = genome.to_params()?;
    let view = PolicyView::new(&pv).expect("CMAES layout");
    let mut tape = Tape::default();
    let total: f64 = (0..episodes)
        .map(|_| play_episode(&view, env, rng, &mut tape).ret)
        .sum();
    Ok(total / episodes as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestReeval {
    pub index: usize,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

/// Replays the generation's best single-episode candidate on fresh episodes;
/// nothing in the search state changes.
pub fn generation_best_reeval<R: Rng + ?Sized>(
    genomes: &[Genome],
    fitnesses: &[f64],
    env: &EnvConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<BestReeval, CmaesError> {
    let index = best_index(fitnesses);
    let returns: Vec<f64> = (0..episodes)
        .map(|_| evaluate_genome(&genomes[index], env, 1, rng))
        .collect::<Result<_, _>>()?;
    let mean_return = returns.iter().sum::<f64>() / episodes.max(1) as f64;
    Ok(BestReeval {
        index,
        mean_return,
        returns,
    })
}

/// First index of the maximum.
fn best_index(fitnesses: &[f64]) -> usize {
    let mut best = 0;
    for (k, f) in fitnesses.iter().enumerate() {
        if *f > fitnesses[best] {
            best = k;
        }
    }
    best
}

/// One generation's worth of results.
#[derive(Debug, Clone)]
pub struct Generation {
    pub genomes: Vec<Genome>,
    pub fitnesses: Vec<f64>,
    pub env_steps: u64,
    pub generation: u64,
}

/// Ask/evaluate/tell loop on the partner-choice game. Each candidate's episode
/// uses a seed derived from `(seed, generation, index)`.
#[derive(Debug, Clone)]
pub struct CmaesTrainer {
    pub state: CmaesState,
    pub cfg: CmaesConfig,
    pub env: EnvConfig,
    pub seed: u64,
    pub parallelism: Parallelism,
    pub env_steps: u64,
    pub episodes: u64,
}

impl CmaesTrainer {
    pub fn new(cfg: CmaesConfig, env: EnvConfig, seed: u64) -> Result<Self, CmaesError> {
        Ok(Self {
            state: CmaesState::from_config(&cfg)?,
            cfg,
            env,
            seed,
            parallelism: Parallelism::Sequential,
            env_steps: 0,
            episodes: 0,
        })
    }

    pub fn step(&mut self) -> Result<Generation, CmaesError> {
        let gen = self.state.generation;
        let mut ask_rng = rng_from_seed(derive_seed(self.seed, &[0, gen]));
        let genomes = self.state.ask(&mut ask_rng)?;
        let env = &self.env;
        let episodes = self.cfg.episodes_per_eval;
        let seed = self.seed;
        let evals = exec::map_slice(
            &genomes.iter().enumerate().collect::<Vec<_>>(),
            self.parallelism,
            |&(k, g)| {
                let pv = g.to_params().expect("genome length");
                let view = PolicyView::new(&pv).expect("CMAES layout");
                let mut rng = rng_from_seed(derive_seed(seed, &[1, gen, k as u64]));
                let mut tape = Tape::default();
                let mut total = 0.0;
                let mut steps = 0u64;
                for _ in 0..episodes {
                    let e = play_episode(&view, env, &mut rng, &mut tape);
                    total += e.ret;
                    steps += e.steps as u64;
                }
                (total / episodes as f64, steps)
            },
        );
        let fitnesses: Vec<f64> = evals.iter().map(|e| e.0).collect();
        let env_steps: u64 = evals.iter().map(|e| e.1).sum();
        self.state.tell(&genomes, &fitnesses)?;
        self.env_steps += env_steps;
        self.episodes += (genomes.len() * episodes) as u64;
        Ok(Generation {
            genomes,
            fitnesses,
            env_steps,
            generation: gen,
        })
    }

    /// Curve point for a finished generation: the best candidate's mean over
    /// `reeval_episodes` fresh episodes.
    pub fn reeval_best(&self, g: &Generation) -> Result<BestReeval, CmaesError> {
        let mut rng = rng_from_seed(derive_seed(self.seed, &[2, g.generation]));
        generation_best_reeval(&g.genomes, &g.fitnesses, &self.env, self.cfg.reeval_episodes, &mut rng)
    }

    /// Picks the generation's candidate with the best `reeval_episodes`-episode mean.
    pub fn select_final(&self, g: &Generation) -> Result<(Genome, f64), CmaesError> {
        let means: Vec<f64> = g
            .genomes
            .iter()
            .enumerate()
            .map(|(k, genome)| {
                let mut rng = rng_from_seed(derive_seed(self.seed, &[3, g.generation, k as u64]));
                evaluate_genome(genome, &self.env, self.cfg.reeval_episodes, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        let k = best_index(&means);
        Ok((g.genomes[k].clone(), means[k]))
    }
}

/// Names of the genome segments, for documentation and checkpoints.
pub const GENOME_SEGMENTS: [&str; 3] = [INVESTMENT, CHOICE, DUMMY];
