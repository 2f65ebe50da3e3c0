//! On-policy actor-critic learner: fixed-size rollouts, GAE, and the clipped
//! surrogate with an adaptive KL penalty, optimized with plain minibatch SGD.
//!
//! Each episode contributes one investment transition (observation: constant
//! input, action: the raw Gaussian sample, reward 0) followed by its choice
//! transitions. GAE runs over that combined sequence, so with `gamma = 1` the
//! investment action is credited with the whole episode return. The two
//! sub-policies are optimized from their own minibatches in the same epoch loop
//! and share one KL coefficient.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, EnvConfig, EpisodeState};
use crate::nets::{
    CategoricalHead, GaussianHead, NetworkSpec, ParamVector, Preset, Tape, CHOICE_ACTOR,
    CHOICE_CRITIC, INVESTMENT_ACTOR, INVESTMENT_CRITIC,
};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid PPO config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at update {update}, epoch {epoch}")]
    NonFinite {
        what: &'static str,
        update: u64,
        epoch: usize,
    },
    #[error("PPO needs a PPO preset, got {0}")]
    WrongPreset(Preset),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Environment steps (choice transitions) per rollout.
    pub batch_size: usize,
    pub beta_init: f64,
    pub d_targ: f64,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub use_critic: bool,
    pub value_loss_coeff: f64,
    pub standardize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epochs: 10,
            minibatch_size: 128,
            batch_size: 4000,
            beta_init: 0.2,
            d_targ: 0.01,
            clip_epsilon: 0.3,
            gamma: 1.0,
            gae_lambda: 1.0,
            use_critic: true,
            value_loss_coeff: 1.0,
            standardize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::PpoDeep => Self {
                learning_rate: 0.001,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_epsilon > 0.0) {
            return bad("clip_epsilon must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.beta_init > 0.0) || !(self.d_targ > 0.0) {
            return bad("learning_rate, beta_init and d_targ must be positive");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.batch_size == 0 {
            return bad("epochs, minibatch_size and batch_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubPolicy {
    Investment,
    Choice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    /// Raw (unclipped) Gaussian sample.
    Investment(f64),
    Choice { accept: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub action: Action,
    /// `(own, partner)` investments for choices; `[1.0, 0.0]` for the investment step.
    pub observation: [f64; 2],
    pub log_prob_old: f64,
    /// Behavior distribution: `(mean, log_std)` or the two logits.
    pub dist_old: [f64; 2],
    pub value_old: f64,
    pub reward: f64,
    pub terminal: bool,
    pub episode_id: u64,
}

impl Transition {
    pub fn sub_policy(&self) -> SubPolicy {
        match self.action {
            Action::Investment(_) => SubPolicy::Investment,
            Action::Choice { .. } => SubPolicy::Choice,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    pub episode_returns: Vec<f64>,
    pub env_steps: u64,
}

impl RolloutBatch {
    pub fn episodes(&self) -> usize {
        self.episode_returns.len()
    }

    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            0.0
        } else {
            self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
        }
    }
}

/// Multiplicative KL coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlPenaltyState {
    pub beta: f64,
}

impl KlPenaltyState {
    pub fn new(beta: f64) -> Self {
        Self { beta }
    }
}

/// β × 1.5 when `d > 2·d_targ`, β / 2 when `d < d_targ / 2`, unchanged otherwise.
pub fn kl_beta_update(state: KlPenaltyState, d: f64, d_targ: f64) -> KlPenaltyState {
    if d > 2.0 * d_targ {
        KlPenaltyState::new(state.beta * 1.5)
    } else if d < d_targ / 2.0 {
        KlPenaltyState::new(state.beta / 2.0)
    } else {
        state
    }
}

/// The four networks of a PPO preset and where they live in the flat vector.
#[derive(Debug, Clone)]
pub struct PpoNets {
    pub inv_actor: NetworkSpec,
    pub inv_critic: NetworkSpec,
    pub choice_actor: NetworkSpec,
    pub choice_critic: NetworkSpec,
    inv_actor_at: std::ops::Range<usize>,
    inv_critic_at: std::ops::Range<usize>,
    choice_actor_at: std::ops::Range<usize>,
    choice_critic_at: std::ops::Range<usize>,
}

const INVESTMENT_OBS: [f64; 2] = [1.0, 0.0];

impl PpoNets {
    pub fn new(preset: Preset) -> Result<Self, PpoError> {
        if !preset.is_ppo() {
            return Err(PpoError::WrongPreset(preset));
        }
        let pv = ParamVector::zeros(preset);
        let range = |n| pv.segment_range(n).expect("PPO layout");
        Ok(Self {
            inv_actor: Preset::investment_actor(),
            inv_critic: Preset::investment_critic(),
            choice_actor: preset.choice_actor(),
            choice_critic: preset.choice_critic(),
            inv_actor_at: range(INVESTMENT_ACTOR),
            inv_critic_at: range(INVESTMENT_CRITIC),
            choice_actor_at: range(CHOICE_ACTOR),
            choice_critic_at: range(CHOICE_CRITIC),
        })
    }

    pub fn investment_head(&self, params: &[f64], tape: &mut Tape) -> GaussianHead {
        let out = self
            .inv_actor
            .forward(&params[self.inv_actor_at.clone()], &INVESTMENT_OBS[..1], tape)
            .expect("layout");
        GaussianHead {
            mean: out[0],
            log_std: out[1],
        }
    }

    pub fn choice_head(&self, params: &[f64], obs: [f64; 2], tape: &mut Tape) -> CategoricalHead {
        let out = self
            .choice_actor
            .forward(&params[self.choice_actor_at.clone()], &obs, tape)
            .expect("layout");
        CategoricalHead {
            logits: [out[0], out[1]],
        }
    }

    pub fn value(&self, params: &[f64], sub: SubPolicy, obs: [f64; 2], tape: &mut Tape) -> f64 {
        let (spec, range, input): (_, _, &[f64]) = match sub {
            SubPolicy::Investment => (&self.inv_critic, &self.inv_critic_at, &INVESTMENT_OBS[..1]),
            SubPolicy::Choice => (&self.choice_critic, &self.choice_critic_at, &obs),
        };
        spec.forward(&params[range.clone()], input, tape).expect("layout")[0]
    }

    fn actor(&self, sub: SubPolicy) -> (&NetworkSpec, std::ops::Range<usize>) {
        match sub {
            SubPolicy::Investment => (&self.inv_actor, self.inv_actor_at.clone()),
            SubPolicy::Choice => (&self.choice_actor, self.choice_actor_at.clone()),
        }
    }

    fn critic(&self, sub: SubPolicy) -> (&NetworkSpec, std::ops::Range<usize>) {
        match sub {
            SubPolicy::Investment => (&self.inv_critic, self.inv_critic_at.clone()),
            SubPolicy::Choice => (&self.choice_critic, self.choice_critic_at.clone()),
        }
    }

    fn actor_input(t: &Transition) -> &[f64] {
        match t.action {
            Action::Investment(_) => &INVESTMENT_OBS[..1],
            Action::Choice { .. } => &t.observation,
        }
    }
}

/// Plays whole episodes until at least `cfg.batch_size` choice transitions are
/// gathered (the last episode is completed), then fills advantages and returns.
pub fn collect_rollout<R: Rng + ?Sized>(
    params: &ParamVector,
    env_cfg: &EnvConfig,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<RolloutBatch, PpoError> {
    let nets = PpoNets::new(params.preset)?;
    let theta = &params.values;
    let mut tape = Tape::default();
    let mut batch = RolloutBatch::default();
    let mut choice_steps = 0usize;
    let mut episode_id = 0u64;
    let inv_head = nets.investment_head(theta, &mut tape);
    let inv_value = if cfg.use_critic {
        nets.value(theta, SubPolicy::Investment, INVESTMENT_OBS, &mut tape)
    } else {
        0.0
    };
    while choice_steps < cfg.batch_size {
        let inv = inv_head.sample(rng, env_cfg.invest_min, env_cfg.invest_max);
        batch.transitions.push(Transition {
            action: Action::Investment(inv.raw),
            observation: INVESTMENT_OBS,
            log_prob_old: inv.log_prob,
            dist_old: [inv_head.mean, inv_head.log_std],
            value_old: inv_value,
            reward: 0.0,
            terminal: false,
            episode_id,
        });
        let mut state = EpisodeState::new(inv.clipped, env_cfg);
        while !state.done {
            let partner = env::sample_partner(env_cfg, rng);
            let obs = [state.focal_investment, partner.investment];
            let head = nets.choice_head(theta, obs, &mut tape);
            let (accept, log_prob) = head.sample(rng);
            let value = if cfg.use_critic {
                nets.value(theta, SubPolicy::Choice, obs, &mut tape)
            } else {
                0.0
            };
            let out = env::step(&mut state, env_cfg, accept, &partner).expect("episode is live");
            batch.transitions.push(Transition {
                action: Action::Choice { accept },
                observation: obs,
                log_prob_old: log_prob,
                dist_old: head.logits,
                value_old: value,
                reward: out.reward,
                terminal: out.done,
                episode_id,
            });
            choice_steps += 1;
        }
        batch.episode_returns.push(state.final_reward);
        episode_id += 1;
    }
    batch.env_steps = choice_steps as u64;
    let values: Vec<f64> = batch.transitions.iter().map(|t| t.value_old).collect();
    let (adv, ret) = compute_gae(&batch.transitions, &values, cfg)?;
    batch.advantages = adv;
    batch.returns = ret;
    Ok(batch)
}

/// GAE over episode-contiguous transitions. Returns `(advantages, returns)`
/// where `returns = raw advantages + values`; advantages are standardized when
/// the config asks for it. Without a critic the advantages are the discounted
/// returns themselves.
pub fn compute_gae(
    transitions: &[Transition],
    values: &[f64],
    cfg: &PpoConfig,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if transitions.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    assert_eq!(transitions.len(), values.len());
    let (values, lambda): (Vec<f64>, f64) = if cfg.use_critic {
        (values.to_vec(), cfg.gae_lambda)
    } else {
        (vec![0.0; values.len()], 1.0)
    };
    let n = transitions.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let tr = &transitions[t];
        let boundary = tr.terminal || t + 1 == n;
        if boundary {
            next_adv = 0.0;
            next_value = 0.0;
        }
        let delta = tr.reward + cfg.gamma * next_value - values[t];
        adv[t] = delta + cfg.gamma * lambda * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let returns: Vec<f64> = adv.iter().zip(&values).map(|(a, v)| a + v).collect();
    if cfg.standardize_advantages {
        standardize(&mut adv);
    }
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, std 1 (population std; left centered when the
/// spread is zero).
pub fn standardize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in xs.iter_mut() {
        *x = if std > 1e-12 { (*x - mean) / std } else { *x - mean };
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate minus β·KL minus the value loss, averaged over the
/// transitions in `indices`. Returns the objective and its gradient w.r.t. the
/// whole parameter vector (to be ascended).
pub fn ppo_loss(
    params: &ParamVector,
    batch: &RolloutBatch,
    indices: &[usize],
    beta: f64,
    cfg: &PpoConfig,
) -> Result<(LossStats, Vec<f64>), PpoError> {
    let nets = PpoNets::new(params.preset)?;
    let mut grad = vec![0.0; params.len()];
    let stats = loss_into(&nets, &params.values, batch, indices, beta, cfg, &mut grad, &mut Tape::default())?;
    Ok((stats, grad))
}

#[allow(clippy::too_many_arguments)]
fn loss_into(
    nets: &PpoNets,
    theta: &[f64],
    batch: &RolloutBatch,
    indices: &[usize],
    beta: f64,
    cfg: &PpoConfig,
    grad: &mut [f64],
    tape: &mut Tape,
) -> Result<LossStats, PpoError> {
    if indices.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let inv_n = 1.0 / indices.len() as f64;
    let eps = cfg.clip_epsilon;
    let mut stats = LossStats::default();
    for &i in indices {
        let tr = &batch.transitions[i];
        let adv = batch.advantages[i];
        let sub = tr.sub_policy();
        let (spec, range) = nets.actor(sub);
        let out = spec
            .forward(&theta[range.clone()], PpoNets::actor_input(tr), tape)
            .expect("layout");
        let (log_prob, kl, d_logprob, d_kl) = match tr.action {
            Action::Investment(raw) => {
                let new = GaussianHead {
                    mean: out[0],
                    log_std: out[1],
                };
                let old = GaussianHead {
                    mean: tr.dist_old[0],
                    log_std: tr.dist_old[1],
                };
                (new.log_prob(raw), old.kl(&new), new.log_prob_grad(raw), old.kl_grad_other(&new))
            }
            Action::Choice { accept } => {
                let new = CategoricalHead {
                    logits: [out[0], out[1]],
                };
                let old = CategoricalHead {
                    logits: tr.dist_old,
                };
                (new.log_prob(accept), old.kl(&new), new.log_prob_grad(accept), old.kl_grad_other(&new))
            }
        };
        let ratio = (log_prob - tr.log_prob_old).exp();
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped * adv;
        // gradient flows through the min only when the unclipped term is selected
        let (surr, d_surr_d_lp) = if unclipped_term <= clipped_term {
            (unclipped_term, ratio * adv)
        } else {
            (clipped_term, 0.0)
        };
        if (ratio - 1.0).abs() > eps {
            stats.clip_fraction += inv_n;
        }
        stats.surrogate += surr * inv_n;
        stats.kl += kl * inv_n;
        let g_out = [
            (d_surr_d_lp * d_logprob[0] - beta * d_kl[0]) * inv_n,
            (d_surr_d_lp * d_logprob[1] - beta * d_kl[1]) * inv_n,
        ];
        spec.backward(&theta[range.clone()], tape, &g_out, &mut grad[range])
            .expect("layout");

        if cfg.use_critic {
            let (cspec, crange) = nets.critic(sub);
            let v = cspec
                .forward(&theta[crange.clone()], PpoNets::actor_input(tr), tape)
                .expect("layout")[0];
            let err = v - batch.returns[i];
            stats.value_loss += err * err * inv_n;
            let g = [-2.0 * cfg.value_loss_coeff * err * inv_n];
            cspec
                .backward(&theta[crange.clone()], tape, &g, &mut grad[crange])
                .expect("layout");
        }
    }
    stats.objective = stats.surrogate - beta * stats.kl - cfg.value_loss_coeff * stats.value_loss;
    Ok(stats)
}

/// Mean KL(old ‖ new) over every transition of the batch, both heads pooled.
pub fn mean_kl(params: &ParamVector, batch: &RolloutBatch) -> Result<f64, PpoError> {
    let nets = PpoNets::new(params.preset)?;
    let mut tape = Tape::default();
    let theta = &params.values;
    if batch.transitions.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let inv_new = nets.investment_head(theta, &mut tape);
    let total: f64 = batch
        .transitions
        .iter()
        .map(|tr| match tr.action {
            Action::Investment(_) => GaussianHead {
                mean: tr.dist_old[0],
                log_std: tr.dist_old[1],
            }
            .kl(&inv_new),
            Action::Choice { .. } => CategoricalHead {
                logits: tr.dist_old,
            }
            .kl(&nets.choice_head(theta, tr.observation, &mut tape)),
        })
        .sum();
    Ok(total / batch.transitions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub update_index: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub mean_return: f64,
    pub mean_kl: f64,
    pub beta: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
}

/// `epochs` passes of minibatch SGD ascent over the batch, each sub-policy
/// from its own shuffled minibatches, then one β adaptation from the measured
/// KL against the behavior policy.
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut ParamVector,
    batch: &RolloutBatch,
    cfg: &PpoConfig,
    kl_state: &mut KlPenaltyState,
    update_index: u64,
    rng: &mut R,
) -> Result<UpdateDiagnostics, PpoError> {
    if batch.transitions.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let nets = PpoNets::new(params.preset)?;
    let mut inv_idx = Vec::new();
    let mut choice_idx = Vec::new();
    for (i, t) in batch.transitions.iter().enumerate() {
        match t.sub_policy() {
            SubPolicy::Investment => inv_idx.push(i),
            SubPolicy::Choice => choice_idx.push(i),
        }
    }
    let mut grad = vec![0.0; params.len()];
    let mut tape = Tape::default();
    let mut clip_sum = 0.0;
    let mut vloss_sum = 0.0;
    let mut mb_count = 0usize;
    for epoch in 0..cfg.epochs {
        inv_idx.shuffle(rng);
        choice_idx.shuffle(rng);
        for idx in [&choice_idx, &inv_idx] {
            for mb in idx.chunks(cfg.minibatch_size) {
                grad.fill(0.0);
                let stats = loss_into(&nets, &params.values, batch, mb, kl_state.beta, cfg, &mut grad, &mut tape)?;
                if !stats.objective.is_finite() {
                    return Err(PpoError::NonFinite {
                        what: "loss",
                        update: update_index,
                        epoch,
                    });
                }
                for (p, g) in params.values.iter_mut().zip(&grad) {
                    *p += cfg.learning_rate * g;
                }
                clip_sum += stats.clip_fraction;
                vloss_sum += stats.value_loss;
                mb_count += 1;
            }
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(PpoError::NonFinite {
                what: "parameters",
                update: update_index,
                epoch,
            });
        }
    }
    let d = mean_kl(params, batch)?;
    if !d.is_finite() {
        return Err(PpoError::NonFinite {
            what: "KL",
            update: update_index,
            epoch: cfg.epochs,
        });
    }
    let beta_used = kl_state.beta;
    *kl_state = kl_beta_update(*kl_state, d, cfg.d_targ);
    Ok(UpdateDiagnostics {
        update_index,
        env_steps: batch.env_steps,
        episodes: batch.episodes() as u64,
        mean_return: batch.mean_return(),
        mean_kl: d,
        beta: beta_used,
        clip_fraction: clip_sum / mb_count.max(1) as f64,
        value_loss: vloss_sum / mb_count.max(1) as f64,
    })
}

/// A learner bound to one environment and one random stream.
#[derive(Debug, Clone)]
pub struct PpoTrainer<R> {
    pub params: ParamVector,
    pub cfg: PpoConfig,
    pub env: EnvConfig,
    pub kl: KlPenaltyState,
    pub updates: u64,
    pub env_steps: u64,
    pub episodes: u64,
    rng: R,
}

impl<R: Rng> PpoTrainer<R> {
    pub fn new(params: ParamVector, cfg: PpoConfig, env: EnvConfig, rng: R) -> Result<Self, PpoError> {
        cfg.validate()?;
        PpoNets::new(params.preset)?;
        Ok(Self {
            params,
            kl: KlPenaltyState::new(cfg.beta_init),
            cfg,
            env,
            updates: 0,
            env_steps: 0,
            episodes: 0,
            rng,
        })
    }

    /// Collects one batch and updates on it. Counters in the diagnostics are
    /// cumulative.
    pub fn step(&mut self) -> Result<(RolloutBatch, UpdateDiagnostics), PpoError> {
        let batch = collect_rollout(&self.params, &self.env, &self.cfg, &mut self.rng)?;
        let mut diag = ppo_update(
            &mut self.params,
            &batch,
            &self.cfg,
            &mut self.kl,
            self.updates,
            &mut self.rng,
        )?;
        self.updates += 1;
        self.env_steps += batch.env_steps;
        self.episodes += batch.episodes() as u64;
        diag.env_steps = self.env_steps;
        diag.episodes = self.episodes;
        Ok((batch, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;
    use crate::seed::rng_from_seed;

    fn choice(obs: [f64; 2], accept: bool, reward: f64, terminal: bool, ep: u64) -> Transition {
        Transition {
            action: Action::Choice { accept },
            observation: obs,
            log_prob_old: 0.0,
            dist_old: [0.0, 0.0],
            value_old: 0.0,
            reward,
            terminal,
            episode_id: ep,
        }
    }

    #[test]
    fn beta_rule() {
        let s = KlPenaltyState::new(0.2);
        assert!((kl_beta_update(s, 0.03, 0.01).beta - 0.3).abs() < 1e-15);
        assert!((kl_beta_update(s, 0.004, 0.01).beta - 0.1).abs() < 1e-15);
        assert_eq!(kl_beta_update(s, 0.01, 0.01).beta, 0.2);
        assert_eq!(kl_beta_update(s, 0.02, 0.01).beta, 0.2);
        assert_eq!(kl_beta_update(s, 0.005, 0.01).beta, 0.2);
    }

    #[test]
    fn gae_telescopes_to_terminal_reward() {
        let cfg = PpoConfig {
            standardize_advantages: false,
            ..PpoConfig::default()
        };
        let mut trs: Vec<_> = (0..5).map(|_| choice([1.0, 1.0], false, 0.0, false, 0)).collect();
        trs.push(choice([1.0, 1.0], true, 37.0, true, 0));
        let (adv, ret) = compute_gae(&trs, &vec![0.0; 6], &cfg).unwrap();
        assert!(adv.iter().all(|&a| a == 37.0));
        assert!(ret.iter().all(|&r| r == 37.0));
    }

    #[test]
    fn gae_single_transition() {
        let cfg = PpoConfig {
            standardize_advantages: false,
            ..PpoConfig::default()
        };
        let trs = vec![choice([0.0, 0.0], true, 12.0, true, 0)];
        let (adv, ret) = compute_gae(&trs, &[5.0], &cfg).unwrap();
        assert_eq!(adv, vec![7.0]);
        assert_eq!(ret, vec![12.0]);
    }

    #[test]
    fn gae_empty_is_an_error() {
        assert!(matches!(
            compute_gae(&[], &[], &PpoConfig::default()),
            Err(PpoError::EmptyBatch)
        ));
    }

    #[test]
    fn standardized_advantages_have_unit_moments() {
        let mut xs = vec![1.0, 5.0, -2.0, 8.0, 0.5];
        standardize(&mut xs);
        let m = xs.iter().sum::<f64>() / 5.0;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_policy_gives_unit_ratio_and_zero_kl() {
        let params = init_params(Preset::PpoMlp, &mut rng_from_seed(3));
        let cfg = PpoConfig {
            batch_size: 200,
            ..PpoConfig::default()
        };
        let batch = collect_rollout(&params, &EnvConfig::default(), &cfg, &mut rng_from_seed(4)).unwrap();
        let idx: Vec<usize> = (0..batch.transitions.len()).collect();
        let (stats, _) = ppo_loss(&params, &batch, &idx, 0.2, &cfg).unwrap();
        let mean_adv = batch.advantages.iter().sum::<f64>() / idx.len() as f64;
        assert!((stats.surrogate - mean_adv).abs() < 1e-12);
        assert!(stats.kl.abs() < 1e-15);
        assert_eq!(stats.clip_fraction, 0.0);
        assert!(mean_kl(&params, &batch).unwrap().abs() < 1e-15);
    }

    #[test]
    fn clipping_hand_example() {
        // ratio 2, advantage 1, eps 0.3: min(2.0, 1.3) = 1.3 and no policy gradient
        let params = ParamVector::zeros(Preset::PpoMlp);
        let mut tr = choice([1.0, 1.0], true, 1.0, true, 0);
        tr.log_prob_old = 0.5f64.ln() - 2.0f64.ln(); // new log-prob is ln 0.5
        let batch = RolloutBatch {
            transitions: vec![tr],
            returns: vec![0.0],
            advantages: vec![1.0],
            episode_returns: vec![1.0],
            env_steps: 1,
        };
        let cfg = PpoConfig {
            use_critic: false,
            ..PpoConfig::default()
        };
        let (stats, grad) = ppo_loss(&params, &batch, &[0], 0.0, &cfg).unwrap();
        assert!((stats.surrogate - 1.3).abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 1.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_advantage_first_step_is_noop() {
        let params = init_params(Preset::PpoMlp, &mut rng_from_seed(10));
        let cfg = PpoConfig {
            use_critic: false,
            standardize_advantages: false,
            epochs: 1,
            minibatch_size: 100_000,
            batch_size: 100,
            ..PpoConfig::default()
        };
        let mut batch = collect_rollout(&params, &EnvConfig::default(), &cfg, &mut rng_from_seed(2)).unwrap();
        for t in &mut batch.transitions {
            t.reward = 0.0;
        }
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let mut p = params.clone();
        let mut kl = KlPenaltyState::new(0.2);
        // one epoch, a single choice minibatch and a single investment minibatch
        let before = p.values.clone();
        ppo_update(&mut p, &batch, &cfg, &mut kl, 0, &mut rng_from_seed(1)).unwrap();
        assert_eq!(p.values, before);
    }

    #[test]
    fn rollout_never_accepting_times_out() {
        // a choice net that refuses everything
        let mut params = init_params(Preset::PpoMlp, &mut rng_from_seed(1));
        let seg = params.segment_mut(CHOICE_ACTOR).unwrap();
        seg.fill(0.0);
        seg[15] = -50.0; // accept logit bias
        let env = EnvConfig::with_p(0.1);
        let cfg = PpoConfig::default();
        let batch = collect_rollout(&params, &env, &cfg, &mut rng_from_seed(3)).unwrap();
        assert_eq!(batch.episodes(), 4);
        assert_eq!(batch.env_steps, 4000);
        assert!(batch.episode_returns.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn gamma_one_returns_equal_episode_reward() {
        let params = init_params(Preset::PpoMlp, &mut rng_from_seed(6));
        let cfg = PpoConfig {
            batch_size: 500,
            use_critic: false,
            ..PpoConfig::default()
        };
        let batch = collect_rollout(&params, &EnvConfig::with_p(0.5), &cfg, &mut rng_from_seed(8)).unwrap();
        for (t, r) in batch.transitions.iter().zip(&batch.returns) {
            assert_eq!(*r, batch.episode_returns[t.episode_id as usize]);
        }
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let params = init_params(Preset::PpoMlp, &mut rng_from_seed(1));
            let mut trainer = PpoTrainer::new(params, PpoConfig::default(), EnvConfig::default(), rng_from_seed(2)).unwrap();
            trainer.step().unwrap();
            trainer.step().unwrap();
            trainer.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn trainer_rejects_cmaes_preset() {
        let r = PpoTrainer::new(
            ParamVector::zeros(Preset::Cmaes),
            PpoConfig::default(),
            EnvConfig::default(),
            rng_from_seed(0),
        );
        assert!(matches!(r, Err(PpoError::WrongPreset(Preset::Cmaes))));
    }
}
