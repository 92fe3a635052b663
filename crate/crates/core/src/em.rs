//! EM training: alternating E-step (per-mode soft-Q solve, Boltzmann
//! policies, forward-backward posteriors, auxiliary function G) and gradient
//! M-step over the reward tables, mode-transition logits, and initial-mode
//! logits. Covers the I/S variant taxonomy (state-independent vs
//! state-dependent mode transitions) at any history length L, plus the
//! multi-seed fit protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwirlError};
use crate::inference::{self, ModePosteriors};
use crate::math::{log_softmax_into, softmax_into};
use crate::model::{
    DiscreteHmMdp, EnvKernel, ModeTransition, RewardTable, Spaces, Trajectory,
};
use crate::softq::{
    augmented_env_kernel, backprop_reward_gradient, boltzmann_policy, soft_q_traced,
    AugmentedKernel, PolicyTable,
};

/// Whether the hidden-mode transition kernel conditions on the current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionDependence {
    /// I-models: P_z(z'|z), tied across states.
    #[serde(rename = "I")]
    StateIndependent,
    /// S-models: P_z(z'|z,s).
    #[serde(rename = "S")]
    StateDependent,
}

impl TransitionDependence {
    pub fn is_state_dependent(self) -> bool {
        matches!(self, TransitionDependence::StateDependent)
    }
}

/// M-step optimizer. The reward gradients pass through the soft-Q backprop
/// with a 1/alpha amplification, so their scale differs from the logit
/// blocks by orders of magnitude; per-entry adaptive steps (Adam) are the
/// default because a single scalar rate cannot serve both. Plain ascent
/// stays available behind this switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

/// Training configuration. Defaults follow the reference protocol: gamma
/// 0.95, 10 M-step updates per EM iteration at rate 0.05, soft-Q capped at
/// 200 sweeps with a 1e-8 stopping tolerance, and EM early stop when the
/// train log-likelihood moves less than 1e-5 for three consecutive
/// iterations (cap 100).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub dependence: TransitionDependence,
    pub history_len: usize,
    pub num_modes: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub em_iters: usize,
    pub softq_iters: usize,
    pub softq_tol: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub m_step_steps: usize,
    /// Weight of the L2 anchor on reward entries. The likelihood leaves the
    /// reward gauge free off the visitation support (shaping plus unvisited
    /// cells), so unanchored entries drift arbitrarily; the anchor steers
    /// those likelihood-flat directions toward zero. It shapes the step
    /// direction only — acceptance always tracks the raw auxiliary G.
    pub reward_l2: f64,
    pub seed: u64,
    pub tolerance: f64,
}

impl FitConfig {
    pub fn new(dependence: TransitionDependence, history_len: usize, num_modes: usize) -> Self {
        FitConfig {
            dependence,
            history_len,
            num_modes,
            gamma: 0.95,
            alpha: 0.1,
            em_iters: 100,
            softq_iters: 200,
            softq_tol: 1e-8,
            optimizer: Optimizer::Adam,
            learning_rate: 0.05,
            m_step_steps: 10,
            reward_l2: 1.0,
            seed: 0,
            tolerance: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_modes == 0 || self.history_len == 0 {
            return Err(SwirlError::InvalidInput(
                "num_modes and history_len must be >= 1".to_string(),
            ));
        }
        if self.em_iters == 0 || self.softq_iters == 0 {
            return Err(SwirlError::InvalidInput(
                "em_iters and softq_iters must be >= 1".to_string(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SwirlError::InvalidInput(
                "learning_rate must be finite and >= 0".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) || self.alpha <= 0.0 || self.alpha.is_nan() {
            return Err(SwirlError::InvalidInput(format!(
                "need gamma in [0,1) and alpha > 0, got {} and {}",
                self.gamma, self.alpha
            )));
        }
        Ok(())
    }

    /// "I-1", "S-2", ... the taxonomy label of this configuration.
    pub fn variant_label(&self) -> String {
        let tag = match self.dependence {
            TransitionDependence::StateIndependent => "I",
            TransitionDependence::StateDependent => "S",
        };
        format!("{tag}-{}", self.history_len)
    }
}

/// Value of the auxiliary function G, split into the part the M-step
/// optimizes and the mode-independent constants (environment kernel and
/// initial-state factors), which are included in the reported total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxValue {
    pub optimizable: f64,
    pub constant: f64,
}

impl AuxValue {
    pub fn total(&self) -> f64 {
        self.optimizable + self.constant
    }
}

/// Everything the E-step produces for one parameter vector.
#[derive(Debug, Clone)]
pub struct EStepOutput {
    pub policies: Vec<PolicyTable>,
    pub posteriors: Vec<ModePosteriors>,
    pub aux: AuxValue,
}

/// One training run's outcome.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub config: FitConfig,
    pub seed: u64,
    pub model: DiscreteHmMdp,
    /// Total train log-likelihood per EM iteration (constants included).
    pub train_ll_trace: Vec<f64>,
    /// Mode-chain part of the train log-likelihood per EM iteration; finite
    /// even when constants are -inf (perturbed data under a deterministic
    /// kernel), so it also drives early stopping and seed ranking tie-breaks.
    pub chain_ll_trace: Vec<f64>,
    /// Auxiliary G per EM iteration.
    pub aux_trace: Vec<f64>,
    pub converged: bool,
}

impl FitResult {
    pub fn final_train_ll(&self) -> f64 {
        *self.train_ll_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }

    pub fn final_chain_ll(&self) -> f64 {
        *self.chain_ll_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

fn check_data(data: &[Trajectory], spaces: &Spaces) -> Result<()> {
    if data.is_empty() {
        return Err(SwirlError::InvalidInput("no trajectories given".to_string()));
    }
    for traj in data {
        traj.validate_against(spaces.num_states, spaces.num_actions)?;
    }
    Ok(())
}

fn check_posterior_alignment(posteriors: &[ModePosteriors], data: &[Trajectory]) -> Result<()> {
    if posteriors.len() != data.len() {
        return Err(SwirlError::ShapeMismatch(format!(
            "{} posterior sets for {} trajectories",
            posteriors.len(),
            data.len()
        )));
    }
    for (post, traj) in posteriors.iter().zip(data) {
        if post.len != traj.len() {
            return Err(SwirlError::ShapeMismatch(format!(
                "posterior length {} does not match trajectory length {}",
                post.len,
                traj.len()
            )));
        }
    }
    Ok(())
}

/// Auxiliary function G for fixed posteriors: initial-mode term, policy term,
/// mode-transition term (optimizable), plus the environment-kernel and
/// initial-state constants (reported, never differentiated).
pub fn auxiliary_g(
    model: &DiscreteHmMdp,
    policies: &[PolicyTable],
    posteriors: &[ModePosteriors],
    data: &[Trajectory],
) -> Result<AuxValue> {
    check_data(data, &model.spaces)?;
    check_posterior_alignment(posteriors, data)?;
    let nz = model.spaces.num_modes;
    let aug = model.spaces.augmented();
    let log_trans = model.mode_transition.log_prob_table();
    let state_dep = model.mode_transition.state_dependent;

    let mut optimizable = 0.0;
    let mut constant = 0.0;
    for (traj, post) in data.iter().zip(posteriors) {
        constant += inference::constant_log_likelihood(traj, model);
        for z in 0..nz {
            let p1 = model.init_mode[z];
            let w = post.marginal(0, z);
            if w > 0.0 {
                optimizable += w * if p1 > 0.0 { p1.ln() } else { f64::NEG_INFINITY };
            }
        }
        let hist = traj.history_indices(&aug);
        for (t, (&h, &a)) in hist.iter().zip(&traj.actions).enumerate() {
            for (z, pol) in policies.iter().enumerate() {
                let w = post.marginal(t, z);
                if w > 0.0 {
                    optimizable += w * pol.log_prob(h, a);
                }
            }
        }
        for t in 0..traj.len() - 1 {
            let sel = if state_dep { traj.states[t] } else { 0 } * nz * nz;
            for z in 0..nz {
                for zp in 0..nz {
                    let w = post.pair(t, z, zp);
                    if w > 0.0 {
                        optimizable += w * log_trans[sel + z * nz + zp];
                    }
                }
            }
        }
    }
    Ok(AuxValue {
        optimizable,
        constant,
    })
}

/// Posterior-weighted sufficient statistics: everything the M-step needs from
/// the data once the posteriors are frozen.
#[derive(Debug, Clone)]
struct SufficientStats {
    /// Expected visitation counts per mode, [Z][H*A].
    visits: Vec<Vec<f64>>,
    /// Expected mode-transition counts, [Z * S_eff * Z].
    trans: Vec<f64>,
    /// Expected initial-mode counts, [Z].
    init: Vec<f64>,
    /// Total number of timesteps, the gradient-step normalizer.
    total_steps: f64,
}

fn sufficient_stats(
    model: &DiscreteHmMdp,
    posteriors: &[ModePosteriors],
    data: &[Trajectory],
) -> SufficientStats {
    let sp = &model.spaces;
    let nz = sp.num_modes;
    let na = sp.num_actions;
    let aug = sp.augmented();
    let s_eff = model.mode_transition.s_eff();
    let mut visits = vec![vec![0.0; sp.num_augmented() * na]; nz];
    let mut trans = vec![0.0; nz * s_eff * nz];
    let mut init = vec![0.0; nz];
    let mut total_steps = 0.0;
    for (traj, post) in data.iter().zip(posteriors) {
        total_steps += traj.len() as f64;
        let hist = traj.history_indices(&aug);
        for (t, (&h, &a)) in hist.iter().zip(&traj.actions).enumerate() {
            for (z, v) in visits.iter_mut().enumerate() {
                v[h * na + a] += post.marginal(t, z);
            }
        }
        for t in 0..traj.len() - 1 {
            let s_idx = if model.mode_transition.state_dependent {
                traj.states[t]
            } else {
                0
            };
            for z in 0..nz {
                for zp in 0..nz {
                    trans[(z * s_eff + s_idx) * nz + zp] += post.pair(t, z, zp);
                }
            }
        }
        for (z, i) in init.iter_mut().enumerate() {
            *i += post.marginal(0, z);
        }
    }
    SufficientStats {
        visits,
        trans,
        init,
        total_steps,
    }
}

/// Gradients of the optimizable part of G with respect to each parameter
/// block, in the same (unnormalized) units as [`auxiliary_g`].
#[derive(Debug, Clone)]
pub struct AuxGradients {
    pub rewards: Vec<f64>,
    pub trans_logits: Vec<f64>,
    pub init_logits: Vec<f64>,
}

/// Optimizable G and its gradients at the given parameters. The reward
/// gradient flows through the full soft-Q solve by unrolled reverse-mode
/// differentiation of the recorded sweeps.
fn eval_optimizable(
    model: &DiscreteHmMdp,
    kernel: &AugmentedKernel,
    stats: &SufficientStats,
    softq_iters: usize,
    softq_tol: f64,
    want_grads: bool,
) -> Result<(f64, Option<AuxGradients>)> {
    let sp = &model.spaces;
    let nz = sp.num_modes;
    let na = sp.num_actions;
    let nh = sp.num_augmented();
    let alpha = model.alpha;

    // policy term per mode, parallel: value and (optionally) reward gradient
    let per_mode: Vec<Result<(f64, Option<Vec<f64>>)>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let reward = model.rewards.mode(z);
            let counts = &stats.visits[z];
            let trace = soft_q_traced(reward, kernel, model.gamma, alpha, softq_iters, softq_tol)?;
            let policy = boltzmann_policy(&trace.q, alpha);
            let mut value = 0.0;
            for (idx, &c) in counts.iter().enumerate() {
                if c > 0.0 {
                    value += c * policy.log_probs[idx];
                }
            }
            let grad = if want_grads {
                // d(policy term)/dQ(h,a) = (counts - rowsum * pi) / alpha
                let mut adjoint = vec![0.0; nh * na];
                for h in 0..nh {
                    let row = &counts[h * na..(h + 1) * na];
                    let c_h: f64 = row.iter().sum();
                    if c_h == 0.0 {
                        continue;
                    }
                    for a in 0..na {
                        adjoint[h * na + a] =
                            (row[a] - c_h * policy.probs[h * na + a]) / alpha;
                    }
                }
                let mut g = vec![0.0; nh * na];
                backprop_reward_gradient(&trace, kernel, model.gamma, adjoint, &mut g);
                Some(g)
            } else {
                None
            };
            Ok((value, grad))
        })
        .collect();

    let mut optimizable = 0.0;
    let mut reward_grad = if want_grads {
        Some(vec![0.0; nz * nh * na])
    } else {
        None
    };
    for (z, res) in per_mode.into_iter().enumerate() {
        let (value, grad) = res?;
        optimizable += value;
        if let (Some(all), Some(g)) = (reward_grad.as_mut(), grad) {
            all[z * nh * na..(z + 1) * nh * na].copy_from_slice(&g);
        }
    }

    // mode-transition term: counts . log softmax(logits), row-concave
    let s_eff = model.mode_transition.s_eff();
    let mut trans_grad = if want_grads {
        Some(vec![0.0; nz * s_eff * nz])
    } else {
        None
    };
    let mut log_row = vec![0.0; nz];
    let mut prob_row = vec![0.0; nz];
    for row in 0..nz * s_eff {
        let logits = &model.mode_transition.logits[row * nz..(row + 1) * nz];
        let counts = &stats.trans[row * nz..(row + 1) * nz];
        let row_total: f64 = counts.iter().sum();
        if row_total == 0.0 {
            continue;
        }
        log_softmax_into(logits, &mut log_row);
        for (c, l) in counts.iter().zip(&log_row) {
            if *c > 0.0 {
                optimizable += c * l;
            }
        }
        if let Some(g) = trans_grad.as_mut() {
            softmax_into(logits, &mut prob_row);
            for zp in 0..nz {
                g[row * nz + zp] = counts[zp] - row_total * prob_row[zp];
            }
        }
    }

    // initial-mode term
    let init_logits: Vec<f64> = model
        .init_mode
        .iter()
        .map(|&p| p.max(1e-300).ln())
        .collect();
    let mut log_init = vec![0.0; nz];
    log_softmax_into(&init_logits, &mut log_init);
    let init_total: f64 = stats.init.iter().sum();
    for (c, l) in stats.init.iter().zip(&log_init) {
        if *c > 0.0 {
            optimizable += c * l;
        }
    }
    let init_grad = if want_grads {
        let mut probs = vec![0.0; nz];
        softmax_into(&init_logits, &mut probs);
        Some(
            stats
                .init
                .iter()
                .zip(&probs)
                .map(|(c, p)| c - init_total * p)
                .collect::<Vec<f64>>(),
        )
    } else {
        None
    };

    let grads = match (reward_grad, trans_grad, init_grad) {
        (Some(rewards), Some(trans_logits), Some(init_logits)) => Some(AuxGradients {
            rewards,
            trans_logits,
            init_logits,
        }),
        _ => None,
    };
    Ok((optimizable, grads))
}

/// Gradients of the optimizable part of G at `model`, for fixed posteriors.
/// Exposed for finite-difference verification.
pub fn aux_gradients(
    model: &DiscreteHmMdp,
    posteriors: &[ModePosteriors],
    data: &[Trajectory],
    config: &FitConfig,
) -> Result<AuxGradients> {
    check_data(data, &model.spaces)?;
    check_posterior_alignment(posteriors, data)?;
    let kernel = augmented_env_kernel(&model.env, &model.spaces);
    let stats = sufficient_stats(model, posteriors, data);
    let (_, grads) = eval_optimizable(
        model,
        &kernel,
        &stats,
        config.softq_iters,
        config.softq_tol,
        true,
    )?;
    Ok(grads.expect("gradients requested"))
}

/// E-step: per-mode soft-Q solve and Boltzmann policy, forward-backward
/// posteriors per trajectory, and the auxiliary G at the current parameters.
/// Pure function of (model, data, config).
pub fn e_step(
    model: &DiscreteHmMdp,
    data: &[Trajectory],
    config: &FitConfig,
) -> Result<EStepOutput> {
    check_data(data, &model.spaces)?;
    let kernel = augmented_env_kernel(&model.env, &model.spaces);
    let policies: Vec<PolicyTable> = (0..model.spaces.num_modes)
        .into_par_iter()
        .map(|z| {
            let q = crate::softq::soft_q_iterate(
                model.rewards.mode(z),
                &kernel,
                model.gamma,
                model.alpha,
                config.softq_iters,
                config.softq_tol,
            )?;
            Ok(boltzmann_policy(&q, model.alpha))
        })
        .collect::<Result<_>>()?;
    let posteriors: Vec<ModePosteriors> = data
        .par_iter()
        .map(|traj| inference::forward_backward(traj, &policies, model))
        .collect::<Result<_>>()?;
    let aux = auxiliary_g(model, &policies, &posteriors, data)?;
    Ok(EStepOutput {
        policies,
        posteriors,
        aux,
    })
}

fn grads_finite(grads: &AuxGradients) -> Result<()> {
    for (name, block) in [
        ("reward table", &grads.rewards),
        ("mode-transition logits", &grads.trans_logits),
        ("initial-mode logits", &grads.init_logits),
    ] {
        if block.iter().any(|g| !g.is_finite()) {
            return Err(SwirlError::Numerical(format!(
                "non-finite gradient in {name}"
            )));
        }
    }
    Ok(())
}

/// Per-entry direction buffer: plain gradients for SGD, bias-corrected
/// Adam moments otherwise.
struct Ascent {
    optimizer: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    direction: Vec<f64>,
}

impl Ascent {
    fn new(optimizer: Optimizer, len: usize) -> Self {
        Ascent {
            optimizer,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            direction: vec![0.0; len],
        }
    }

    /// Ingests fresh gradients and refreshes the step direction.
    fn observe(&mut self, grads: &[f64]) {
        match self.optimizer {
            Optimizer::Sgd => self.direction.copy_from_slice(grads),
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for (i, &g) in grads.iter().enumerate() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                    self.direction[i] = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}

fn concat_grads(grads: &AuxGradients) -> Vec<f64> {
    let mut out = Vec::with_capacity(
        grads.rewards.len() + grads.trans_logits.len() + grads.init_logits.len(),
    );
    out.extend_from_slice(&grads.rewards);
    out.extend_from_slice(&grads.trans_logits);
    out.extend_from_slice(&grads.init_logits);
    out
}

/// Step-direction gradients: raw G gradients with the reward block pulled
/// toward zero by the L2 anchor. The anchor weight scales with the data so
/// the pull is commensurate with the count-based terms.
fn direction_grads(
    grads: &AuxGradients,
    model: &DiscreteHmMdp,
    config: &FitConfig,
    total_steps: f64,
) -> Vec<f64> {
    let mut out = concat_grads(grads);
    if config.reward_l2 > 0.0 {
        let lambda = config.reward_l2 * total_steps / model.rewards.values.len() as f64;
        for (g, r) in out.iter_mut().zip(&model.rewards.values) {
            *g -= 2.0 * lambda * r;
        }
    }
    out
}

fn apply_step(model: &DiscreteHmMdp, direction: &[f64], step: f64) -> DiscreteHmMdp {
    let mut next = model.clone();
    if step == 0.0 {
        return next;
    }
    let nr = next.rewards.values.len();
    let nt = next.mode_transition.logits.len();
    for (v, g) in next.rewards.values.iter_mut().zip(&direction[..nr]) {
        *v += step * g;
    }
    for (v, g) in next
        .mode_transition
        .logits
        .iter_mut()
        .zip(&direction[nr..nr + nt])
    {
        *v += step * g;
    }
    let mut init_logits: Vec<f64> = next.init_mode.iter().map(|&p| p.max(1e-300).ln()).collect();
    for (v, g) in init_logits.iter_mut().zip(&direction[nr + nt..]) {
        *v += step * g;
    }
    softmax_into(&init_logits, &mut next.init_mode);
    next
}

/// M-step: up to `m_step_steps` ascent proposals on the optimizable part of
/// G. A proposal that lowers G is rejected and the step size halved, so the
/// returned parameters never decrease G — the generalized-EM ascent
/// guarantee rests on this. SGD steps are scaled by 1/total timesteps so the
/// rate is data-size free; Adam steps are already in parameter units.
pub fn m_step(
    model: &DiscreteHmMdp,
    posteriors: &[ModePosteriors],
    data: &[Trajectory],
    config: &FitConfig,
) -> Result<DiscreteHmMdp> {
    config.validate()?;
    check_data(data, &model.spaces)?;
    check_posterior_alignment(posteriors, data)?;
    let kernel = augmented_env_kernel(&model.env, &model.spaces);
    let stats = sufficient_stats(model, posteriors, data);

    let mut current = model.clone();
    let (g_cur, grads) = eval_optimizable(
        &current,
        &kernel,
        &stats,
        config.softq_iters,
        config.softq_tol,
        true,
    )?;
    let grads = grads.expect("gradients requested");
    grads_finite(&grads)?;

    let g_start = g_cur;
    let mut ascent = Ascent::new(config.optimizer, concat_grads(&grads).len());
    ascent.observe(&direction_grads(&grads, &current, config, stats.total_steps));
    let step = match config.optimizer {
        Optimizer::Sgd => config.learning_rate / stats.total_steps.max(1.0),
        Optimizer::Adam => config.learning_rate,
    };

    // Phase 1 — free ascent trajectory, keeping the best-G iterate visited.
    // Individual steps may decrease G (crossing shallow ridges is what breaks
    // the symmetric fast-switching optimum); returning the argmax keeps the
    // net M-step non-decreasing, which the generalized-EM guarantee needs.
    let start = current.clone();
    let start_grads = ascent.direction.clone();
    let mut best = current.clone();
    let mut g_best = g_cur;
    for _ in 0..config.m_step_steps {
        current = apply_step(&current, &ascent.direction, step);
        let (g_cand, cand_grads) = eval_optimizable(
            &current,
            &kernel,
            &stats,
            config.softq_iters,
            config.softq_tol,
            true,
        )?;
        let cand_grads = cand_grads.expect("gradients requested");
        grads_finite(&cand_grads)?;
        ascent.observe(&direction_grads(&cand_grads, &current, config, stats.total_steps));
        if g_cand >= g_best {
            g_best = g_cand;
            best = current.clone();
        }
    }

    // Phase 2 — when the full-rate trajectory found nothing better the step
    // is too coarse for the local basin: creep along the start direction with
    // halved steps so progress continues until true stationarity.
    if g_best <= g_start {
        let mut fine = step * 0.5;
        let mut halvings = 0;
        current = start;
        let mut direction = start_grads;
        for _ in 0..config.m_step_steps {
            let candidate = apply_step(&current, &direction, fine);
            let (g_cand, cand_grads) = eval_optimizable(
                &candidate,
                &kernel,
                &stats,
                config.softq_iters,
                config.softq_tol,
                true,
            )?;
            if g_cand >= g_best {
                g_best = g_cand;
                current = candidate;
                best = current.clone();
                let cand_grads = cand_grads.expect("gradients requested");
                grads_finite(&cand_grads)?;
                ascent.observe(&direction_grads(&cand_grads, &current, config, stats.total_steps));
                direction.copy_from_slice(&ascent.direction);
            } else {
                fine *= 0.5;
                halvings += 1;
                if halvings > 10 {
                    break;
                }
            }
        }
    }
    if std::env::var_os("SWIRL_DEBUG_MSTEP").is_some() {
        eprintln!(
            "m_step: G {g_start:.3} -> best {g_best:.3} (+{:.4})",
            g_best - g_start
        );
    }
    Ok(best)
}

/// Laplace-smoothed empirical initial-state frequencies. The smoothing keeps
/// held-out trajectories that start in an unseen state at finite likelihood.
pub fn empirical_init_state(data: &[Trajectory], num_states: usize) -> Vec<f64> {
    let eps = 1e-6;
    let mut counts = vec![eps; num_states];
    for traj in data {
        counts[traj.states[0]] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter_mut().for_each(|c| *c /= total);
    counts
}

/// Seeded random initialization: rewards ~ N(0, 0.1); transition and
/// initial-mode logits ~ N(0, 1). The environment kernel is given, never
/// learned.
pub fn init_model(env: &EnvKernel, config: &FitConfig) -> Result<DiscreteHmMdp> {
    use rand::SeedableRng;
    use rand_distr::Distribution;

    config.validate()?;
    let spaces = Spaces::new(
        config.num_modes,
        env.num_states,
        env.num_actions,
        config.history_len,
    )?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let reward_dist = rand_distr::Normal::new(0.0, 0.1).expect("valid normal");
    let logit_dist = rand_distr::Normal::new(0.0, 1.0).expect("valid normal");

    let n_reward = spaces.num_modes * spaces.num_augmented() * spaces.num_actions;
    let rewards: Vec<f64> = (0..n_reward).map(|_| reward_dist.sample(&mut rng)).collect();
    let s_eff = if config.dependence.is_state_dependent() {
        spaces.num_states
    } else {
        1
    };
    // Sticky initialization: a diagonal bias on the transition logits starts
    // the mode chain persistent, so early posteriors segment time into
    // contiguous chunks instead of flickering per step. Without it EM heads
    // for a fast-switching per-step mixture.
    let sticky = 3.0;
    let mut trans_logits: Vec<f64> = (0..spaces.num_modes * s_eff * spaces.num_modes)
        .map(|_| logit_dist.sample(&mut rng))
        .collect();
    for z in 0..spaces.num_modes {
        for s in 0..s_eff {
            trans_logits[(z * s_eff + s) * spaces.num_modes + z] += sticky;
        }
    }
    let init_logits: Vec<f64> = (0..spaces.num_modes)
        .map(|_| logit_dist.sample(&mut rng))
        .collect();
    let mut init_mode = vec![0.0; spaces.num_modes];
    softmax_into(&init_logits, &mut init_mode);

    Ok(DiscreteHmMdp {
        spaces,
        env: env.clone(),
        rewards: RewardTable::new(
            spaces.num_modes,
            spaces.num_augmented(),
            spaces.num_actions,
            rewards,
        )?,
        mode_transition: ModeTransition::new(
            spaces.num_modes,
            spaces.num_states,
            config.dependence.is_state_dependent(),
            trans_logits,
        )?,
        init_state: vec![1.0 / spaces.num_states as f64; spaces.num_states],
        init_mode,
        gamma: config.gamma,
        alpha: config.alpha,
    })
}

/// Runs EM from a seeded random initialization. The initial-state
/// distribution is fit once in closed form (it decouples from the rest);
/// everything else alternates e_step / m_step until the train log-likelihood
/// stalls for three consecutive iterations or `em_iters` is reached.
pub fn fit(data: &[Trajectory], env: &EnvKernel, config: &FitConfig) -> Result<FitResult> {
    let mut model = init_model(env, config)?;
    check_data(data, &model.spaces)?;
    model.init_state = empirical_init_state(data, model.spaces.num_states);

    let mut train_ll_trace = Vec::new();
    let mut chain_ll_trace = Vec::new();
    let mut aux_trace = Vec::new();
    let mut converged = false;
    let mut stall = 0;
    let mut prev_chain = f64::INFINITY;

    for k in 0..config.em_iters {
        let out = e_step(&model, data, config)?;
        let full: f64 = out.posteriors.iter().map(|p| p.log_likelihood).sum();
        let chain_part: f64 = out.posteriors.iter().map(|p| p.chain_log_likelihood).sum();
        let constants: f64 = full - chain_part;
        let chain = chain_part + if constants.is_finite() { constants } else { 0.0 };
        train_ll_trace.push(full);
        chain_ll_trace.push(chain);
        aux_trace.push(out.aux.total());

        if (chain - prev_chain).abs() < config.tolerance {
            stall += 1;
            if stall >= 3 {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
        prev_chain = chain;

        if k + 1 == config.em_iters {
            break;
        }
        model = m_step(&model, &out.posteriors, data, config)?;
    }

    Ok(FitResult {
        config: config.clone(),
        seed: config.seed,
        model,
        train_ll_trace,
        chain_ll_trace,
        aux_trace,
        converged,
    })
}

/// Runs `fit` with seeds 0..num_seeds-1 (parallel across seeds), ranks by
/// final train log-likelihood, and returns the best `keep_top` results in
/// descending order.
pub fn multi_seed_fit(
    data: &[Trajectory],
    env: &EnvKernel,
    config: &FitConfig,
    num_seeds: usize,
    keep_top: usize,
) -> Result<Vec<FitResult>> {
    if num_seeds == 0 || keep_top == 0 || keep_top > num_seeds {
        return Err(SwirlError::InvalidInput(format!(
            "need num_seeds >= keep_top >= 1, got {num_seeds} and {keep_top}"
        )));
    }
    let mut results: Vec<FitResult> = (0..num_seeds as u64)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            fit(data, env, &cfg)
        })
        .collect::<Result<_>>()?;
    results.sort_by(|a, b| {
        b.final_train_ll()
            .total_cmp(&a.final_train_ll())
            .then(b.final_chain_ll().total_cmp(&a.final_chain_ll()))
            .then(a.seed.cmp(&b.seed))
    });
    results.truncate(keep_top);
    Ok(results)
}

const FIT_FORMAT: &str = "swirl-fit/1";

/// JSON has no -inf literal; traces store non-finite entries as null and map
/// them back to -inf on read (the only non-finite value a trace can hold).
mod trace_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|&x| if x.is_finite() { Some(x) } else { None }))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|x| x.unwrap_or(f64::NEG_INFINITY))
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct FitDoc {
    format: String,
    config: FitConfig,
    seed: u64,
    converged: bool,
    #[serde(with = "trace_serde")]
    train_ll_trace: Vec<f64>,
    #[serde(with = "trace_serde")]
    chain_ll_trace: Vec<f64>,
    #[serde(with = "trace_serde")]
    aux_trace: Vec<f64>,
    model: serde_json::Value,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        let doc = FitDoc {
            format: FIT_FORMAT.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            converged: self.converged,
            train_ll_trace: self.train_ll_trace.clone(),
            chain_ll_trace: self.chain_ll_trace.clone(),
            aux_trace: self.aux_trace.clone(),
            model: serde_json::from_str(&self.model.to_json()?)?,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FitDoc = serde_json::from_str(text)?;
        if doc.format != FIT_FORMAT {
            return Err(SwirlError::data(format!(
                "unsupported fit format {:?}, expected {FIT_FORMAT:?}",
                doc.format
            )));
        }
        Ok(FitResult {
            config: doc.config,
            seed: doc.seed,
            model: DiscreteHmMdp::from_json(&serde_json::to_string(&doc.model)?)?,
            train_ll_trace: doc.train_ll_trace,
            chain_ll_trace: doc.chain_ll_trace,
            aux_trace: doc.aux_trace,
            converged: doc.converged,
        })
    }
}
