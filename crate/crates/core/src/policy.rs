//! Acting view over a [`ParamVector`]: how either learner's parameters turn
//! into an investment and accept/refuse decisions, plus a plain episode player
//! used for evaluation, re-evaluation and probes.

use rand::Rng;

use crate::env::{self, EnvConfig, EpisodeState};
use crate::nets::{
    CategoricalHead, GaussianHead, InvestmentSample, NetError, NetworkSpec, ParamVector, Preset,
    Tape, CHOICE, CHOICE_ACTOR, INVESTMENT, INVESTMENT_ACTOR,
};

#[derive(Debug, Clone)]
pub struct PolicyView<'a> {
    preset: Preset,
    investment: &'a [f64],
    choice: &'a [f64],
    choice_spec: NetworkSpec,
}

impl<'a> PolicyView<'a> {
    pub fn new(params: &'a ParamVector) -> Result<Self, NetError> {
        let preset = params.preset;
        let (investment, choice) = if preset.is_ppo() {
            (params.segment(INVESTMENT_ACTOR)?, params.segment(CHOICE_ACTOR)?)
        } else {
            (params.segment(INVESTMENT)?, params.segment(CHOICE)?)
        };
        Ok(Self {
            preset,
            investment,
            choice,
            choice_spec: preset.choice_actor(),
        })
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    /// Gaussian investment head; `None` for the deterministic evolution-strategy genome.
    pub fn investment_head(&self) -> Option<GaussianHead> {
        self.preset.is_ppo().then(|| GaussianHead {
            mean: self.investment[0],
            log_std: self.investment[1],
        })
    }

    /// Draws the episode's investment. The genome's investment coordinate is
    /// clamped and returned with log-probability 0.
    pub fn draw_investment<R: Rng + ?Sized>(&self, cfg: &EnvConfig, rng: &mut R) -> InvestmentSample {
        match self.investment_head() {
            Some(head) => head.sample(rng, cfg.invest_min, cfg.invest_max),
            None => InvestmentSample {
                raw: self.investment[0],
                clipped: cfg.clamp_investment(self.investment[0]),
                log_prob: 0.0,
            },
        }
    }

    pub fn choice_head(&self, observation: [f64; 2], tape: &mut Tape) -> CategoricalHead {
        let out = self
            .choice_spec
            .forward(self.choice, &observation, tape)
            .expect("choice segment matches its spec");
        CategoricalHead {
            logits: [out[0], out[1]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub ret: f64,
    pub steps: u32,
    pub investment: f64,
}

/// Plays one episode with learning disabled.
pub fn play_episode<R: Rng + ?Sized>(
    policy: &PolicyView<'_>,
    cfg: &EnvConfig,
    rng: &mut R,
    tape: &mut Tape,
) -> EpisodeSummary {
    let inv = policy.draw_investment(cfg, rng);
    let mut state = EpisodeState::new(inv.clipped, cfg);
    while !state.done {
        let partner = env::sample_partner(cfg, rng);
        let head = policy.choice_head([state.focal_investment, partner.investment], tape);
        let (accept, _) = head.sample(rng);
        env::step(&mut state, cfg, accept, &partner).expect("episode is live");
    }
    EpisodeSummary {
        ret: state.final_reward,
        steps: state.t,
        investment: state.focal_investment,
    }
}

/// Sets the 17 choice weights of a genome (or the PPO-MLP choice actor) so it
/// accepts almost surely iff the partner invests at least `threshold`, using a
/// single steep hidden unit. Used by tests and examples as a known-good policy.
pub fn threshold_choice_weights(threshold: f64, steepness: f64) -> [f64; 17] {
    let mut w = [0.0; 17];
    // hidden unit 0: tanh(steepness · (partner − threshold + 0.25))
    w[1] = steepness;
    w[6] = -steepness * (threshold - 0.25);
    // output: accept logit = 40·h0, refuse logit = 0
    w[9] = 40.0;
    w
}
