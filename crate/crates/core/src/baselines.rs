//! Reference models: single-mode MaxEnt IRL (a degenerate switching fit),
//! categorical ARHMM / recurrent ARHMM over state sequences, and the
//! deterministic-MDP reduction linking them to the switching model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{self, FitConfig, FitResult, TransitionDependence};
use crate::error::{Result, SwirlError};
use crate::inference::{chain_forward_backward, ModePosteriors};
use crate::math::{log_softmax_into, quantile_sorted, softmax_into};
use crate::model::{EnvKernel, ModeTransition, Trajectory};
use crate::softq::PolicyTable;

const SMOOTHING: f64 = 1e-6;

/// MaxEnt IRL: the switching trainer pinned to a single mode with no history.
pub fn fit_maxent(
    data: &[Trajectory],
    env: &EnvKernel,
    config: &FitConfig,
) -> Result<FitResult> {
    let mut cfg = config.clone();
    cfg.num_modes = 1;
    cfg.history_len = 1;
    cfg.dependence = TransitionDependence::StateIndependent;
    em::fit(data, env, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArhmmVariant {
    Plain,
    Recurrent,
}

/// Categorical AR(1)-HMM over state sequences: z_t ~ p(z_t|z_{t-1}[, s_{t-1}]),
/// s_{t+1} ~ p(s_{t+1}|s_t, z_t).
#[derive(Debug, Clone, PartialEq)]
pub struct ArhmmModel {
    pub num_modes: usize,
    pub num_states: usize,
    /// p(s'|s,z), row-major [Z, S, S].
    pub emission: Vec<f64>,
    pub transition: ModeTransition,
    pub init_mode: Vec<f64>,
    pub init_state: Vec<f64>,
}

impl ArhmmModel {
    #[inline]
    pub fn emission_row(&self, z: usize, s: usize) -> &[f64] {
        let base = (z * self.num_states + s) * self.num_states;
        &self.emission[base..base + self.num_states]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArhmmConfig {
    pub em_iters: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Gradient settings for the recurrent variant's transition update.
    pub learning_rate: f64,
    pub m_step_steps: usize,
}

impl Default for ArhmmConfig {
    fn default() -> Self {
        ArhmmConfig {
            em_iters: 100,
            seed: 0,
            tolerance: 1e-7,
            learning_rate: 0.05,
            m_step_steps: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArhmmFit {
    pub model: ArhmmModel,
    pub train_ll_trace: Vec<f64>,
    pub seed: u64,
    pub converged: bool,
}

/// Chain inputs for one state sequence: the mode chain has one slot per
/// emission step (length T-1), with the transition out of slot k conditioned
/// on the state where that mode acted.
fn arhmm_chain(model: &ArhmmModel, states: &[usize]) -> ModePosteriors {
    let nz = model.num_modes;
    let steps = states.len() - 1;
    let mut evidence = vec![0.0; steps * nz];
    for k in 0..steps {
        for z in 0..nz {
            let p = model.emission_row(z, states[k])[states[k + 1]];
            evidence[k * nz + z] = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        }
    }
    let log_trans = model.transition.log_prob_table();
    let sel: Vec<usize> = if model.transition.state_dependent {
        states[..steps.saturating_sub(1)].to_vec()
    } else {
        vec![0; steps.saturating_sub(1)]
    };
    let log_init: Vec<f64> = model
        .init_mode
        .iter()
        .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let p1 = model.init_state[states[0]];
    let constant = if p1 > 0.0 { p1.ln() } else { f64::NEG_INFINITY };
    chain_forward_backward(&log_init, &evidence, &log_trans, &sel, constant)
}

/// log p(s_1..s_T) under the ARHMM, initial state included.
pub fn arhmm_sequence_ll(model: &ArhmmModel, states: &[usize]) -> Result<f64> {
    if states.len() < 2 {
        return Err(SwirlError::InvalidInput(
            "ARHMM likelihood needs at least two states".to_string(),
        ));
    }
    Ok(arhmm_chain(model, states).log_likelihood)
}

fn random_arhmm(num_modes: usize, num_states: usize, variant: ArhmmVariant, seed: u64) -> ArhmmModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logit = rand_distr::Normal::new(0.0, 1.0).expect("valid normal");
    let state_dependent = variant == ArhmmVariant::Recurrent;
    let s_eff = if state_dependent { num_states } else { 1 };

    let mut emission = vec![0.0; num_modes * num_states * num_states];
    for row in emission.chunks_mut(num_states) {
        let logits: Vec<f64> = (0..num_states).map(|_| logit.sample(&mut rng)).collect();
        softmax_into(&logits, row);
    }
    let trans_logits: Vec<f64> = (0..num_modes * s_eff * num_modes)
        .map(|_| logit.sample(&mut rng))
        .collect();
    let init_logits: Vec<f64> = (0..num_modes).map(|_| logit.sample(&mut rng)).collect();
    let mut init_mode = vec![0.0; num_modes];
    softmax_into(&init_logits, &mut init_mode);
    ArhmmModel {
        num_modes,
        num_states,
        emission,
        transition: ModeTransition::new(num_modes, num_states, state_dependent, trans_logits)
            .expect("shape fixed"),
        init_mode,
        init_state: vec![1.0 / num_states as f64; num_states],
    }
}

/// Baum-Welch-style EM. The E-step reuses the shared forward-backward chain;
/// the M-step is closed-form expected-count normalization with Laplace
/// smoothing, except the recurrent variant's state-dependent transition
/// logits, which take safeguarded gradient-ascent steps.
pub fn fit_arhmm(
    data: &[Trajectory],
    num_modes: usize,
    variant: ArhmmVariant,
    config: &ArhmmConfig,
) -> Result<ArhmmFit> {
    if data.is_empty() {
        return Err(SwirlError::InvalidInput("no trajectories given".to_string()));
    }
    if data.iter().any(|t| t.len() < 2) {
        return Err(SwirlError::InvalidInput(
            "ARHMM needs trajectories of length >= 2".to_string(),
        ));
    }
    let num_states = data
        .iter()
        .flat_map(|t| t.states.iter().copied())
        .max()
        .unwrap()
        + 1;
    let mut model = random_arhmm(num_modes, num_states, variant, config.seed);

    // initial state is decoupled: closed form once
    let mut s1 = vec![SMOOTHING; num_states];
    for t in data {
        s1[t.states[0]] += 1.0;
    }
    let total: f64 = s1.iter().sum();
    s1.iter_mut().for_each(|c| *c /= total);
    model.init_state = s1;

    let nz = num_modes;
    let s_eff = model.transition.s_eff();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_ll = f64::INFINITY;

    for k in 0..config.em_iters {
        let posteriors: Vec<ModePosteriors> = data
            .par_iter()
            .map(|t| arhmm_chain(&model, &t.states))
            .collect();
        let ll: f64 = posteriors.iter().map(|p| p.log_likelihood).sum();
        trace.push(ll);
        if (ll - prev_ll).abs() < config.tolerance {
            converged = true;
            break;
        }
        prev_ll = ll;
        if k + 1 == config.em_iters {
            break;
        }

        // expected counts
        let mut em_counts = vec![SMOOTHING; nz * num_states * num_states];
        let mut tr_counts = vec![0.0; nz * s_eff * nz];
        let mut init_counts = vec![SMOOTHING; nz];
        for (traj, post) in data.iter().zip(&posteriors) {
            let states = &traj.states;
            for k in 0..states.len() - 1 {
                for z in 0..nz {
                    em_counts[(z * num_states + states[k]) * num_states + states[k + 1]] +=
                        post.marginal(k, z);
                }
            }
            for (k, &state) in states[..states.len().saturating_sub(2)].iter().enumerate() {
                let s_idx = if model.transition.state_dependent {
                    state
                } else {
                    0
                };
                for z in 0..nz {
                    for zp in 0..nz {
                        tr_counts[(z * s_eff + s_idx) * nz + zp] += post.pair(k, z, zp);
                    }
                }
            }
            for (z, c) in init_counts.iter_mut().enumerate() {
                *c += post.marginal(0, z);
            }
        }

        // normalize emission rows from counts (smoothing prior already added)
        for (row, counts) in model
            .emission
            .chunks_mut(num_states)
            .zip(em_counts.chunks(num_states))
        {
            let total: f64 = counts.iter().sum();
            for (p, c) in row.iter_mut().zip(counts) {
                *p = c / total;
            }
        }
        let init_total: f64 = init_counts.iter().sum();
        for (p, c) in model.init_mode.iter_mut().zip(&init_counts) {
            *p = c / init_total;
        }

        match variant {
            ArhmmVariant::Plain => {
                for (row, counts) in model
                    .transition
                    .logits
                    .chunks_mut(nz)
                    .zip(tr_counts.chunks(nz))
                {
                    let total: f64 = counts.iter().sum::<f64>() + nz as f64 * SMOOTHING;
                    for (l, c) in row.iter_mut().zip(counts) {
                        *l = ((c + SMOOTHING) / total).ln();
                    }
                }
            }
            ArhmmVariant::Recurrent => {
                ascend_transition_logits(
                    &mut model.transition,
                    &tr_counts,
                    config.learning_rate,
                    config.m_step_steps,
                );
            }
        }
    }

    Ok(ArhmmFit {
        model,
        train_ll_trace: trace,
        seed: config.seed,
        converged,
    })
}

/// Safeguarded gradient ascent on sum counts . log softmax(logits): proposals
/// that lower the objective are rejected and the step halved. Concave in the
/// logits, so this converges cleanly.
fn ascend_transition_logits(
    transition: &mut ModeTransition,
    counts: &[f64],
    learning_rate: f64,
    steps: usize,
) {
    let nz = transition.num_modes;
    let total: f64 = counts.iter().sum();
    if total == 0.0 {
        return;
    }
    let objective = |logits: &[f64]| {
        let mut val = 0.0;
        let mut row_log = vec![0.0; nz];
        for (row, c_row) in logits.chunks(nz).zip(counts.chunks(nz)) {
            log_softmax_into(row, &mut row_log);
            for (c, l) in c_row.iter().zip(&row_log) {
                if *c > 0.0 {
                    val += c * l;
                }
            }
        }
        val
    };
    let gradient = |logits: &[f64], out: &mut [f64]| {
        let mut probs = vec![0.0; nz];
        for ((row, c_row), g_row) in logits
            .chunks(nz)
            .zip(counts.chunks(nz))
            .zip(out.chunks_mut(nz))
        {
            softmax_into(row, &mut probs);
            let row_total: f64 = c_row.iter().sum();
            for ((g, c), p) in g_row.iter_mut().zip(c_row).zip(&probs) {
                *g = c - row_total * p;
            }
        }
    };

    let mut cur = objective(&transition.logits);
    let mut grad = vec![0.0; transition.logits.len()];
    gradient(&transition.logits, &mut grad);
    let mut step = learning_rate / total;
    for _ in 0..steps {
        let cand: Vec<f64> = transition
            .logits
            .iter()
            .zip(&grad)
            .map(|(l, g)| l + step * g)
            .collect();
        let cand_val = objective(&cand);
        if cand_val >= cur {
            transition.logits = cand;
            cur = cand_val;
            gradient(&transition.logits, &mut grad);
        } else {
            step *= 0.5;
        }
    }
}

/// State dynamics induced by a SWIRL policy in an environment:
/// p(s'|s) = sum_a P(s'|s,a) pi(a|s). In a deterministic MDP whose actions
/// map to distinct successors this is the reduction to a categorical ARHMM
/// emission.
pub fn induced_emission(policy: &PolicyTable, env: &EnvKernel) -> Result<Vec<f64>> {
    if policy.num_augmented != env.num_states || policy.num_actions != env.num_actions {
        return Err(SwirlError::ShapeMismatch(
            "policy must live on the raw state space (L=1) of the kernel".to_string(),
        ));
    }
    let ns = env.num_states;
    let mut emission = vec![0.0; ns * ns];
    for s in 0..ns {
        for a in 0..env.num_actions {
            let pi = policy.prob_row(s)[a];
            for (sp, &p) in env.row(s, a).iter().enumerate() {
                emission[s * ns + sp] += p * pi;
            }
        }
    }
    Ok(emission)
}

/// One fitted model family's held-out results, a row group of the comparison
/// table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub variant: String,
    pub history_len: usize,
    pub num_modes: usize,
    pub test_lls: Vec<f64>,
}

/// Collates held-out log-likelihoods into the fixed-schema comparison CSV:
/// model,variant,L,Z,median_test_ll,iqr — sorted by median descending, ties
/// by model name.
pub fn compare_models(summaries: &[ModelSummary]) -> String {
    let mut rows: Vec<(f64, f64, &ModelSummary)> = summaries
        .iter()
        .map(|s| {
            let mut lls = s.test_lls.clone();
            lls.sort_by(f64::total_cmp);
            let median = if lls.is_empty() {
                f64::NEG_INFINITY
            } else {
                quantile_sorted(&lls, 0.5)
            };
            let iqr = if lls.len() >= 2 {
                quantile_sorted(&lls, 0.75) - quantile_sorted(&lls, 0.25)
            } else {
                0.0
            };
            (median, iqr, s)
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.model.cmp(&b.2.model)));

    let mut out = String::from("model,variant,L,Z,median_test_ll,iqr\n");
    for (median, iqr, s) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.model, s.variant, s.history_len, s.num_modes, median, iqr
        ));
    }
    out
}
