//! Independent oracles shared by the integration tests. None of these call
//! the library code they are used to check.

#![allow(dead_code)]

use rand::Rng;
use rarebench::env::{self, EnvConfig, EpisodeState};
use rarebench::nets::{init_params, CategoricalHead, GaussianHead, ParamVector, Preset, Tape};
use rarebench::ppo::{ppo_loss, Action, PpoConfig, PpoNets, RolloutBatch, Transition};
use rarebench::seed::rng_from_seed;

/// Monte-Carlo mean return of "invest x, accept iff partner ≥ threshold".
pub fn mc_threshold_return(x: f64, threshold: f64, cfg: &EnvConfig, episodes: usize, seed: u64) -> f64 {
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = EpisodeState::new(x, cfg);
        while !s.done {
            let partner = env::sample_partner(cfg, &mut rng);
            let accept = partner.cooperative && partner.investment >= threshold;
            env::step(&mut s, cfg, accept, &partner).unwrap();
        }
        total += s.final_reward;
    }
    total / episodes as f64
}

/// Direct definition: A_t = Σ_{l≥0} (γλ)^l δ_{t+l} within the episode, with
/// δ_t = r_t + γ V_{t+1} (0 past the end) − V_t.
pub fn gae_direct(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| {
            let next = if t + 1 < n { values[t + 1] } else { 0.0 };
            rewards[t] + gamma * next - values[t]
        })
        .collect();
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            for l in 0..n - t {
                a += (gamma * lambda).powi(l as i32) * delta[t + l];
            }
            a
        })
        .collect()
}

/// Two-tailed exact Mann-Whitney p-value for untied samples of sizes
/// `n1`, `n2`, by enumerating every rank assignment of the first sample.
pub fn exact_mwu_p(n1: usize, n2: usize, u_min: f64) -> f64 {
    let n = n1 + n2;
    let mut counts = vec![0u64; n1 * n2 + 1];
    let mut total = 0u64;
    // bitmask over ranks 1..=n
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let rank_sum: usize = (0..n).filter(|k| mask & (1 << k) != 0).map(|k| k + 1).sum();
        let u = rank_sum - n1 * (n1 + 1) / 2;
        counts[u] += 1;
        total += 1;
    }
    let tail: u64 = counts.iter().take(u_min as usize + 1).sum();
    (2.0 * tail as f64 / total as f64).min(1.0)
}

/// Ten-ish transitions drawn under a perturbed copy of `params`, so ratios
/// differ from one and the KL term is live.
pub fn random_batch<R: Rng>(params: &ParamVector, len: usize, rng: &mut R) -> RolloutBatch {
    let nets = PpoNets::new(params.preset).unwrap();
    let mut old = params.clone();
    for v in old.values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let mut tape = Tape::default();
    let mut batch = RolloutBatch::default();
    for k in 0..len {
        let tr = if k % 4 == 0 {
            let head: GaussianHead = nets.investment_head(&old.values, &mut tape);
            let raw = head.mean + head.std() * rng.random_range(-2.0..2.0);
            Transition {
                action: Action::Investment(raw),
                observation: [1.0, 0.0],
                log_prob_old: head.log_prob(raw),
                dist_old: [head.mean, head.log_std],
                value_old: 0.0,
                reward: 0.0,
                terminal: false,
                episode_id: k as u64,
            }
        } else {
            let obs = [rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)];
            let head: CategoricalHead = nets.choice_head(&old.values, obs, &mut tape);
            let accept = rng.random_bool(0.5);
            Transition {
                action: Action::Choice { accept },
                observation: obs,
                log_prob_old: head.log_prob(accept),
                dist_old: head.logits,
                value_old: 0.0,
                reward: 0.0,
                terminal: false,
                episode_id: k as u64,
            }
        };
        batch.transitions.push(tr);
        batch.advantages.push(rng.random_range(-2.0..2.0));
        batch.returns.push(rng.random_range(0.0..50.0));
    }
    batch.env_steps = len as u64;
    batch
}

/// Relative error ‖g − g_fd‖ / ‖g_fd‖ of the analytic PPO gradient against
/// central differences.
pub fn ppo_gradient_error(params: &ParamVector, batch: &RolloutBatch, beta: f64, cfg: &PpoConfig) -> f64 {
    let idx: Vec<usize> = (0..batch.transitions.len()).collect();
    let (_, g) = ppo_loss(params, batch, &idx, beta, cfg).unwrap();
    let h = 1e-6;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..params.len() {
        let mut plus = params.clone();
        plus.values[k] += h;
        let mut minus = params.clone();
        minus.values[k] -= h;
        let fp = ppo_loss(&plus, batch, &idx, beta, cfg).unwrap().0.objective;
        let fm = ppo_loss(&minus, batch, &idx, beta, cfg).unwrap().0.objective;
        let fd = (fp - fm) / (2.0 * h);
        num += (g[k] - fd).powi(2);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

pub fn random_ppo_params<R: Rng>(rng: &mut R) -> ParamVector {
    let mut pv = init_params(Preset::PpoMlp, rng);
    for v in pv.values.iter_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    pv
}
