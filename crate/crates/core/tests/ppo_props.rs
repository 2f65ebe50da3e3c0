mod common;

use proptest::prelude::*;
use rand::Rng;
use rarebench::env::EnvConfig;
use rarebench::nets::{init_params, Preset, Tape};
use rarebench::ppo::{
    collect_rollout, compute_gae, kl_beta_update, ppo_loss, ppo_update, Action, KlPenaltyState, PpoConfig,
    PpoNets, PpoTrainer, RolloutBatch, Transition,
};
use rarebench::seed::rng_from_seed;

fn raw_cfg(gamma: f64, lambda: f64) -> PpoConfig {
    PpoConfig {
        gamma,
        gae_lambda: lambda,
        standardize_advantages: false,
        ..PpoConfig::default()
    }
}

fn choice(reward: f64, terminal: bool, ep: u64) -> Transition {
    Transition {
        action: Action::Choice { accept: terminal },
        observation: [10.0, 10.0],
        log_prob_old: 0.0,
        dist_old: [0.0, 0.0],
        value_old: 0.0,
        reward,
        terminal,
        episode_id: ep,
    }
}

#[test]
fn gae_matches_direct_sum_on_random_episodes() {
    let mut rng = rng_from_seed(11);
    for ep in 0..1000u64 {
        let len = rng.random_range(1..40);
        let gamma = rng.random_range(0.5..=1.0);
        let lambda = rng.random_range(0.0..=1.0);
        let terminal_reward = rng.random_range(0.0..50.0);
        let trs: Vec<_> = (0..len)
            .map(|k| choice(if k + 1 == len { terminal_reward } else { 0.0 }, k + 1 == len, ep))
            .collect();
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..60.0)).collect();
        let rewards: Vec<f64> = trs.iter().map(|t| t.reward).collect();
        let (adv, ret) = compute_gae(&trs, &values, &raw_cfg(gamma, lambda)).unwrap();
        let want = common::gae_direct(&rewards, &values, gamma, lambda);
        for t in 0..len {
            assert!((adv[t] - want[t]).abs() <= 1e-12 * (1.0 + want[t].abs()), "ep {ep} t {t}");
            assert!((ret[t] - (want[t] + values[t])).abs() <= 1e-12 * (1.0 + ret[t].abs()));
        }
    }
}

#[test]
fn undiscounted_zero_value_advantage_is_terminal_reward() {
    let mut rng = rng_from_seed(12);
    let mut trs = Vec::new();
    let mut finals = Vec::new();
    for ep in 0..200u64 {
        let len = rng.random_range(1..30);
        let r = rng.random_range(0.0..50.0);
        for k in 0..len {
            trs.push(choice(if k + 1 == len { r } else { 0.0 }, k + 1 == len, ep));
            finals.push(r);
        }
    }
    let (adv, ret) = compute_gae(&trs, &vec![0.0; trs.len()], &raw_cfg(1.0, 1.0)).unwrap();
    assert_eq!(adv, finals);
    assert_eq!(ret, finals);
}

#[test]
fn returns_equal_episode_reward_in_real_batches() {
    let pv = init_params(Preset::PpoMlp, &mut rng_from_seed(1));
    let cfg = PpoConfig::default();
    let batch = collect_rollout(&pv, &EnvConfig::with_p(0.5), &cfg, &mut rng_from_seed(2)).unwrap();
    assert!(batch.env_steps >= 4000);
    let mut k = 0;
    for (ep, &r) in batch.episode_returns.iter().enumerate() {
        while k < batch.transitions.len() && batch.transitions[k].episode_id == ep as u64 {
            assert!((batch.returns[k] - r).abs() < 1e-9);
            k += 1;
        }
    }
    assert_eq!(k, batch.transitions.len());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(21);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let pv = common::random_ppo_params(&mut rng);
        let batch = common::random_batch(&pv, 10, &mut rng);
        let cfg = PpoConfig {
            use_critic: trial % 5 != 0,
            ..PpoConfig::default()
        };
        let beta = rng.random_range(0.0..1.0);
        worst = worst.max(common::ppo_gradient_error(&pv, &batch, beta, &cfg));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn clipped_term_by_hand() {
    let pv = init_params(Preset::PpoMlp, &mut rng_from_seed(4));
    let nets = PpoNets::new(Preset::PpoMlp).unwrap();
    let head = nets.choice_head(&pv.values, [10.0, 10.0], &mut Tape::default());
    // log π_old chosen so that the ratio is exactly 2
    let tr = Transition {
        log_prob_old: head.log_prob(true) - 2f64.ln(),
        dist_old: head.logits,
        ..choice(0.0, true, 0)
    };
    let batch = RolloutBatch {
        transitions: vec![tr],
        returns: vec![0.0],
        advantages: vec![1.0],
        episode_returns: vec![0.0],
        env_steps: 1,
    };
    let cfg = PpoConfig {
        use_critic: false,
        ..PpoConfig::default()
    };
    let (stats, grad) = ppo_loss(&pv, &batch, &[0], 0.0, &cfg).unwrap();
    assert!((stats.surrogate - 1.3).abs() < 1e-12);
    assert!(grad.iter().all(|g| *g == 0.0));
}

#[test]
fn identity_policy_surrogate_is_mean_advantage() {
    let pv = init_params(Preset::PpoMlp, &mut rng_from_seed(5));
    let cfg = PpoConfig::default();
    let batch = collect_rollout(&pv, &EnvConfig::with_p(1.0), &cfg, &mut rng_from_seed(6)).unwrap();
    let idx: Vec<usize> = (0..batch.transitions.len()).collect();
    let (stats, _) = ppo_loss(&pv, &batch, &idx, 0.2, &cfg).unwrap();
    let mean_adv = batch.advantages.iter().sum::<f64>() / idx.len() as f64;
    assert!((stats.surrogate - mean_adv).abs() < 1e-9);
    assert!(stats.kl.abs() < 1e-12);
}

#[test]
fn sanity_training_raises_acceptance_at_the_optimum() {
    // every transition: accepting partner 10 at own investment 10 with advantage +50
    let mut pv = init_params(Preset::PpoMlp, &mut rng_from_seed(8));
    let nets = PpoNets::new(Preset::PpoMlp).unwrap();
    let cfg = PpoConfig {
        use_critic: false,
        ..PpoConfig::default()
    };
    let mut kl = KlPenaltyState::new(cfg.beta_init);
    let mut rng = rng_from_seed(9);
    let prob = |pv: &rarebench::ParamVector| nets.choice_head(&pv.values, [10.0, 10.0], &mut Tape::default()).accept_prob();
    let mut last = prob(&pv);
    for u in 0..50 {
        let head = nets.choice_head(&pv.values, [10.0, 10.0], &mut Tape::default());
        let tr = Transition {
            log_prob_old: head.log_prob(true),
            dist_old: head.logits,
            ..choice(50.0, true, 0)
        };
        let batch = RolloutBatch {
            transitions: vec![tr; 256],
            returns: vec![50.0; 256],
            advantages: vec![50.0; 256],
            episode_returns: vec![50.0; 256],
            env_steps: 256,
        };
        ppo_update(&mut pv, &batch, &cfg, &mut kl, u, &mut rng).unwrap();
        let now = prob(&pv);
        assert!(now >= last - 1e-12, "update {u}: {now} < {last}");
        last = now;
    }
    assert!(last > 0.9, "{last}");
}

#[test]
fn beta_trajectory_stays_on_the_lattice_and_kl_stays_near_target() {
    let pv = init_params(Preset::PpoMlp, &mut rng_from_seed(31));
    let mut t = PpoTrainer::new(pv, PpoConfig::default(), EnvConfig::with_p(1.0), rng_from_seed(32)).unwrap();
    let mut within = 0;
    let updates = 40;
    for _ in 0..updates {
        let (_, d) = t.step().unwrap();
        within += usize::from(d.mean_kl < 10.0 * 0.01);
        let ratio = t.kl.beta / 0.2;
        // β = 0.2·1.5^j·0.5^k for integers j, k ≥ 0
        let found = (0..=updates).any(|j| {
            (0..=updates).any(|k| (1.5f64.powi(j) * 0.5f64.powi(k) / ratio - 1.0).abs() < 1e-9)
        });
        assert!(found, "beta {}", t.kl.beta);
    }
    assert!(within as f64 >= 0.95 * updates as f64);
}

#[test]
fn updates_are_seed_deterministic() {
    let run = || {
        let pv = init_params(Preset::PpoMlp, &mut rng_from_seed(41));
        let mut t = PpoTrainer::new(pv, PpoConfig::default(), EnvConfig::with_p(0.5), rng_from_seed(42)).unwrap();
        t.step().unwrap();
        t.step().unwrap();
        t.params
    };
    assert_eq!(run(), run());
}

#[test]
fn no_critic_first_step_with_zero_advantage_is_a_no_op() {
    let pv = init_params(Preset::PpoMlp, &mut rng_from_seed(51));
    let cfg = PpoConfig {
        use_critic: false,
        standardize_advantages: false,
        epochs: 1,
        minibatch_size: 4096,
        ..PpoConfig::default()
    };
    let mut batch = collect_rollout(&pv, &EnvConfig::with_p(1.0), &cfg, &mut rng_from_seed(52)).unwrap();
    batch.advantages.iter_mut().for_each(|a| *a = 0.0);
    // single minibatch per sub-policy: one step each, both at ratio 1 and KL 0
    let mut after = pv.clone();
    ppo_update(&mut after, &batch, &cfg, &mut KlPenaltyState::new(0.2), 0, &mut rng_from_seed(53)).unwrap();
    assert_eq!(after, pv);
}

proptest! {
    #[test]
    fn beta_rule_has_three_branches(beta in 1e-6f64..10.0, d in 0.0f64..0.1) {
        let next = kl_beta_update(KlPenaltyState::new(beta), d, 0.01).beta;
        if d > 0.02 {
            prop_assert!((next - 1.5 * beta).abs() < 1e-12 * beta);
        } else if d < 0.005 {
            prop_assert!((next - 0.5 * beta).abs() < 1e-12 * beta);
        } else {
            prop_assert_eq!(next, beta);
        }
    }

    #[test]
    fn standardized_advantages_have_zero_mean(seed in any::<u64>()) {
        let pv = init_params(Preset::PpoMlp, &mut rng_from_seed(seed));
        let cfg = PpoConfig { batch_size: 300, ..PpoConfig::default() };
        let batch = collect_rollout(&pv, &EnvConfig::with_p(1.0), &cfg, &mut rng_from_seed(seed ^ 5)).unwrap();
        let m = batch.advantages.iter().sum::<f64>() / batch.advantages.len() as f64;
        prop_assert!(m.abs() < 1e-9);
    }
}
