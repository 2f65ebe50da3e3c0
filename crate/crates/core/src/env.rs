//! The partner-choice game.
//!
//! Each step the focal agent meets one partner. A cooperative partner (drawn
//! with probability `p`) offers an investment from the grid `0, 0.5, ..., 15`
//! and accepts whenever the focal investment is at least its own. A
//! non-cooperative partner shows investment 0 and never accepts. The first
//! mutual acceptance ends the episode with reward [`payoff`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("investment {value} outside [{min}, {max}]")]
    InvestmentOutOfRange { value: f64, min: f64, max: f64 },
    #[error("partner index {index} outside 1..={i_max}")]
    PartnerIndex { index: usize, i_max: usize },
    #[error("step called on a finished episode")]
    EpisodeFinished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Probability that the partner met at a step is cooperative.
    pub p: f64,
    pub a: f64,
    pub b: f64,
    pub invest_min: f64,
    pub invest_max: f64,
    /// Number of cooperative partners on the investment grid.
    pub i_max: usize,
    /// Expected number of cooperative meetings per full-length episode.
    pub base_meetings: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            a: 5.0,
            b: 5.0,
            invest_min: 0.0,
            invest_max: 15.0,
            i_max: 31,
            base_meetings: 100.0,
        }
    }
}

impl EnvConfig {
    pub fn with_p(p: f64) -> Self {
        Self {
            p,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: &str| Err(EnvError::InvalidConfig(msg.to_string()));
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad("p must lie in (0, 1]");
        }
        if !(self.a >= 0.0 && self.b >= 0.0 && self.a + self.b > 0.0) {
            return bad("payoff coefficients need a >= 0, b >= 0, a + b > 0");
        }
        if !(self.invest_min < self.invest_max) || !self.invest_min.is_finite() {
            return bad("invest_min must be below invest_max");
        }
        if self.i_max < 2 {
            return bad("i_max must be at least 2");
        }
        if !(self.base_meetings >= 1.0) {
            return bad("base_meetings must be at least 1");
        }
        Ok(())
    }

    /// Episode horizon `round(base_meetings / p)`.
    pub fn max_steps(&self) -> u32 {
        (self.base_meetings / self.p).round().max(1.0) as u32
    }

    pub fn clamp_investment(&self, x: f64) -> f64 {
        x.clamp(self.invest_min, self.invest_max)
    }

    fn check_range(&self, x: f64) -> Result<(), EnvError> {
        if x >= self.invest_min && x <= self.invest_max {
            Ok(())
        } else {
            Err(EnvError::InvestmentOutOfRange {
                value: x,
                min: self.invest_min,
                max: self.invest_max,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partner {
    pub investment: f64,
    pub cooperative: bool,
}

impl Partner {
    pub const DEFECTOR: Partner = Partner {
        investment: 0.0,
        cooperative: false,
    };

    pub fn cooperative(investment: f64) -> Self {
        Self {
            investment,
            cooperative: true,
        }
    }
}

/// Focal gain `a·x + b·y − x²/2` of a mutually accepted cooperation.
pub fn payoff(x_focal: f64, x_partner: f64, cfg: &EnvConfig) -> Result<f64, EnvError> {
    cfg.check_range(x_focal)?;
    cfg.check_range(x_partner)?;
    Ok(payoff_unchecked(x_focal, x_partner, cfg))
}

#[inline]
fn payoff_unchecked(x_focal: f64, x_partner: f64, cfg: &EnvConfig) -> f64 {
    cfg.a * x_focal + cfg.b * x_partner - 0.5 * x_focal * x_focal
}

/// Investment of cooperative partner `i` (1-based); evenly spaced so that the
/// first plays `invest_min` and the last plays `invest_max`.
pub fn partner_investment(i: usize, cfg: &EnvConfig) -> Result<f64, EnvError> {
    if i == 0 || i > cfg.i_max {
        return Err(EnvError::PartnerIndex {
            index: i,
            i_max: cfg.i_max,
        });
    }
    Ok(grid_value(i - 1, cfg))
}

#[inline]
fn grid_value(zero_based: usize, cfg: &EnvConfig) -> f64 {
    let spacing = (cfg.invest_max - cfg.invest_min) / (cfg.i_max - 1) as f64;
    cfg.invest_min + zero_based as f64 * spacing
}

/// The full cooperative grid, ascending.
pub fn partner_grid(cfg: &EnvConfig) -> Vec<f64> {
    (0..cfg.i_max).map(|k| grid_value(k, cfg)).collect()
}

pub fn partner_accepts(partner: &Partner, x_focal: f64) -> bool {
    partner.cooperative && x_focal >= partner.investment
}

pub fn sample_partner<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Partner {
    // Both draws are always taken so the stream layout does not depend on p.
    let u: f64 = rng.random();
    let k = rng.random_range(0..cfg.i_max);
    if u < cfg.p {
        Partner::cooperative(grid_value(k, cfg))
    } else {
        Partner::DEFECTOR
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub t: u32,
    pub focal_investment: f64,
    pub done: bool,
    pub final_reward: f64,
}

impl EpisodeState {
    /// Starts an episode; the investment is clamped into the allowed range and
    /// held for the whole episode.
    pub fn new(focal_investment: f64, cfg: &EnvConfig) -> Self {
        Self {
            t: 0,
            focal_investment: cfg.clamp_investment(focal_investment),
            done: false,
            final_reward: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// `(focal_investment, partner_investment)` of the meeting just played.
    pub observation: [f64; 2],
    pub reward: f64,
    pub done: bool,
    /// Diagnostic only; policies never see it.
    pub partner_was_cooperative: bool,
}

/// Plays one meeting. A mutual acceptance pays [`payoff`] and ends the episode;
/// the meeting at `t = max_steps − 1` ends it with reward 0 whatever happens.
pub fn step(
    state: &mut EpisodeState,
    cfg: &EnvConfig,
    focal_accepts: bool,
    partner: &Partner,
) -> Result<StepOutcome, EnvError> {
    if state.done {
        return Err(EnvError::EpisodeFinished);
    }
    let x = state.focal_investment;
    let timeout = state.t + 1 >= cfg.max_steps();
    let matched = focal_accepts && partner_accepts(partner, x);
    let reward = if matched && !timeout {
        payoff_unchecked(x, partner.investment, cfg)
    } else {
        0.0
    };
    state.t += 1;
    state.done = (matched && !timeout) || timeout;
    state.final_reward = reward;
    Ok(StepOutcome {
        observation: [x, partner.investment],
        reward,
        done: state.done,
        partner_was_cooperative: partner.cooperative,
    })
}

/// Exact expected return of the deterministic policy "invest `x_focal`, accept
/// iff partner investment ≥ `accept_threshold`".
///
/// Each step matches partner `i` with probability `p / i_max` when `i` is in
/// the mutually acceptable set; only the first `max_steps − 1` steps can pay.
pub fn expected_return_oracle(x_focal: f64, accept_threshold: f64, cfg: &EnvConfig) -> f64 {
    let x = cfg.clamp_investment(x_focal);
    let n = cfg.i_max as f64;
    let mut q = 0.0;
    let mut payoff_mass = 0.0;
    for y in partner_grid(cfg) {
        if y >= accept_threshold && x >= y {
            q += cfg.p / n;
            payoff_mass += cfg.p / n * payoff_unchecked(x, y, cfg);
        }
    }
    if q == 0.0 {
        return 0.0;
    }
    let paying_steps = cfg.max_steps().saturating_sub(1) as i32;
    // Σ_{t<paying} (1−q)^t · payoff_mass
    payoff_mass * (1.0 - (1.0 - q).powi(paying_steps)) / q
}
