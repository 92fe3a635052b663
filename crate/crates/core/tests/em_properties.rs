//! Training-loop properties on small gridworld datasets: generalized-EM
//! ascent of the train likelihood, exact equivalence of nested variants
//! under parameter injection, reproducibility across worker counts, and the
//! single-mode degenerate-case contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swirl_core::em::{e_step, fit, FitConfig, TransitionDependence};
use swirl_core::env::{build_gridworld, optimal_policies, sample_trajectories, GridworldSpec};
use swirl_core::eval::heldout_ll;
use swirl_core::inference::sequence_log_likelihood;
use swirl_core::model::{ModeTransition, Trajectory};

fn small_gridworld_data(num: usize, len: usize, seed: u64) -> (swirl_core::model::DiscreteHmMdp, Vec<Trajectory>) {
    let (model, _) = build_gridworld(&GridworldSpec::default()).unwrap();
    let policies = optimal_policies(&model, 300).unwrap();
    let (data, _) = sample_trajectories(&model, &policies, num, len, seed);
    (model, data)
}

#[test]
fn train_ll_trace_is_nondecreasing_within_slack() {
    let (truth, data) = small_gridworld_data(10, 80, 21);
    for dependence in [
        TransitionDependence::StateIndependent,
        TransitionDependence::StateDependent,
    ] {
        let config = FitConfig {
            em_iters: 8,
            softq_iters: 120,
            seed: 1,
            ..FitConfig::new(dependence, 1, 2)
        };
        let result = fit(&data, &truth.env, &config).unwrap();
        for w in result.train_ll_trace.windows(2) {
            assert!(
                w[1] >= w[0] - 1e-6,
                "generalized-EM ascent violated: {} -> {}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn variant_nesting_likelihoods_agree() {
    // an S-2 model with state-independent P_z injected and rewards that
    // ignore history assigns exactly the I-1 likelihood
    let (truth, data) = small_gridworld_data(6, 50, 33);
    let i1_config = FitConfig {
        seed: 5,
        ..FitConfig::new(TransitionDependence::StateIndependent, 1, 2)
    };
    let i1 = swirl_core::em::init_model(&truth.env, &i1_config).unwrap();

    let mut s2 = i1.clone();
    s2.spaces = swirl_core::model::Spaces::new(2, 25, 5, 2).unwrap();
    s2.rewards = i1.rewards.expand_history(25, 1, 2);
    // broadcast the tied logits across states
    let mut logits = Vec::with_capacity(2 * 25 * 2);
    for z in 0..2 {
        for _ in 0..25 {
            logits.extend_from_slice(i1.mode_transition.logit_row(z, 0));
        }
    }
    s2.mode_transition = ModeTransition::new(2, 25, true, logits).unwrap();

    let cfg_i1 = FitConfig {
        softq_iters: 150,
        ..i1_config.clone()
    };
    let cfg_s2 = FitConfig {
        softq_iters: 150,
        ..FitConfig::new(TransitionDependence::StateDependent, 2, 2)
    };
    let pol_i1 = e_step(&i1, &data, &cfg_i1).unwrap().policies;
    let pol_s2 = e_step(&s2, &data, &cfg_s2).unwrap().policies;
    for traj in &data {
        let a = sequence_log_likelihood(traj, &pol_i1, &i1).unwrap();
        let b = sequence_log_likelihood(traj, &pol_s2, &s2).unwrap();
        assert!((a - b).abs() < 1e-8, "nested likelihoods differ: {a} vs {b}");
    }
}

#[test]
fn fits_are_identical_across_worker_counts() {
    let (truth, data) = small_gridworld_data(6, 40, 8);
    let config = FitConfig {
        em_iters: 4,
        softq_iters: 80,
        m_step_steps: 3,
        seed: 2,
        ..FitConfig::new(TransitionDependence::StateDependent, 1, 2)
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| fit(&data, &truth.env, &config).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.train_ll_trace, four.train_ll_trace);
    assert_eq!(one.model.rewards.values, four.model.rewards.values);
    assert_eq!(one.model.mode_transition.logits, four.model.mode_transition.logits);
}

#[test]
fn single_mode_fit_beats_marginal_action_frequencies() {
    // Z=1, L=1 reduces to single-reward fitting; the fitted policy's action
    // log-likelihood must beat the state-agnostic action-frequency baseline
    let (truth, data) = small_gridworld_data(12, 80, 55);
    let config = FitConfig {
        em_iters: 15,
        softq_iters: 150,
        seed: 0,
        ..FitConfig::new(TransitionDependence::StateIndependent, 1, 1)
    };
    let result = fit(&data, &truth.env, &config).unwrap();
    let out = e_step(&result.model, &data, &config).unwrap();
    let policy_ll: f64 = out.posteriors.iter().map(|p| p.chain_log_likelihood).sum();

    let mut counts = [0.0f64; 5];
    let mut total = 0.0;
    for traj in &data {
        for &a in &traj.actions {
            counts[a] += 1.0;
            total += 1.0;
        }
    }
    let baseline: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| c * (c / total).ln())
        .sum();
    assert!(
        policy_ll > baseline,
        "policy {policy_ll} must beat marginal baseline {baseline}"
    );
}

#[test]
fn ground_truth_model_beats_logit_noise_on_its_own_samples() {
    let (truth_model, _) = build_gridworld(&GridworldSpec::default()).unwrap();
    let policies = optimal_policies(&truth_model, 300).unwrap();
    let (data, _) = sample_trajectories(&truth_model, &policies, 20, 120, 99);

    let truth_ll = heldout_ll(&truth_model, &policies, &data).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..3 {
        let mut noisy = truth_model.clone();
        for l in noisy.mode_transition.logits.iter_mut() {
            *l += rng.random_range(-1.0..1.0) * 0.5;
        }
        for v in noisy.rewards.values.iter_mut() {
            *v += rng.random_range(-1.0..1.0) * 0.5;
        }
        let noisy_policies = optimal_policies(&noisy, 300).unwrap();
        let noisy_ll = heldout_ll(&noisy, &noisy_policies, &data).unwrap();
        assert!(
            truth_ll.per_trajectory > noisy_ll.per_trajectory,
            "trial {trial}: truth {} vs perturbed {}",
            truth_ll.per_trajectory,
            noisy_ll.per_trajectory
        );
    }
}
