//! Log-space forward-backward inference of hidden-mode posteriors and
//! sequence likelihood.
//!
//! The recursions run on a generic chain layer (initial distribution, local
//! evidence, per-step transition selector) so the same engine serves both the
//! policy-evidence chain of the switching model and the ARHMM baselines. The
//! environment kernel and initial-state factors are mode-independent
//! constants: they enter the reported log-likelihood but cancel from every
//! posterior.

use crate::error::{Result, SwirlError};
use crate::math::logsumexp;
use crate::model::{DiscreteHmMdp, Trajectory};
use crate::softq::PolicyTable;

/// Per-timestep mode marginals, pairwise posteriors, and the sequence
/// log-likelihood under the model that produced them.
#[derive(Debug, Clone)]
pub struct ModePosteriors {
    pub num_modes: usize,
    pub len: usize,
    /// p(z_t = z | xi), row-major [T, Z].
    pub marginals: Vec<f64>,
    /// p(z_t = z, z_{t+1} = z' | xi), row-major [T-1, Z, Z].
    pub pairwise: Vec<f64>,
    /// Full sequence log-likelihood, including the mode-independent
    /// environment-kernel and initial-state factors.
    pub log_likelihood: f64,
    /// Log-likelihood of the mode chain and evidence only (the part that
    /// changes during training; finite even when an observed transition is
    /// impossible under the environment kernel).
    pub chain_log_likelihood: f64,
    /// Set when the chain assigns zero probability to the sequence; the
    /// posteriors are then uniform placeholders.
    pub degenerate: bool,
}

impl ModePosteriors {
    #[inline]
    pub fn marginal(&self, t: usize, z: usize) -> f64 {
        self.marginals[t * self.num_modes + z]
    }

    #[inline]
    pub fn pair(&self, t: usize, z: usize, zp: usize) -> f64 {
        self.pairwise[(t * self.num_modes + z) * self.num_modes + zp]
    }
}

/// Forward-backward over a chain with `log_init` (Z), `log_evidence` ([T, Z])
/// and transition blocks `log_trans` ([B, Z, Z]) selected per step by
/// `trans_sel` (T-1 entries). Adds `constant_ll` to the reported full
/// likelihood.
pub(crate) fn chain_forward_backward(
    log_init: &[f64],
    log_evidence: &[f64],
    log_trans: &[f64],
    trans_sel: &[usize],
    constant_ll: f64,
) -> ModePosteriors {
    let nz = log_init.len();
    let len = log_evidence.len() / nz;
    debug_assert_eq!(log_evidence.len(), len * nz);
    debug_assert_eq!(trans_sel.len(), len - 1);

    let mut log_alpha = vec![0.0; len * nz];
    let mut scratch = vec![0.0; nz];
    for z in 0..nz {
        log_alpha[z] = log_init[z] + log_evidence[z];
    }
    for t in 1..len {
        let sel = trans_sel[t - 1] * nz * nz;
        for z in 0..nz {
            for (zp, s) in scratch.iter_mut().enumerate() {
                *s = log_alpha[(t - 1) * nz + zp] + log_trans[sel + zp * nz + z];
            }
            log_alpha[t * nz + z] = log_evidence[t * nz + z] + logsumexp(&scratch);
        }
    }
    let chain_ll = logsumexp(&log_alpha[(len - 1) * nz..len * nz]);

    if chain_ll == f64::NEG_INFINITY || chain_ll.is_nan() {
        return ModePosteriors {
            num_modes: nz,
            len,
            marginals: vec![1.0 / nz as f64; len * nz],
            pairwise: vec![1.0 / (nz * nz) as f64; len.saturating_sub(1) * nz * nz],
            log_likelihood: f64::NEG_INFINITY,
            chain_log_likelihood: f64::NEG_INFINITY,
            degenerate: true,
        };
    }

    let mut log_beta = vec![0.0; len * nz];
    for t in (0..len - 1).rev() {
        let sel = trans_sel[t] * nz * nz;
        for z in 0..nz {
            for (zp, s) in scratch.iter_mut().enumerate() {
                *s = log_trans[sel + z * nz + zp]
                    + log_evidence[(t + 1) * nz + zp]
                    + log_beta[(t + 1) * nz + zp];
            }
            log_beta[t * nz + z] = logsumexp(&scratch);
        }
    }

    let mut marginals = vec![0.0; len * nz];
    for t in 0..len {
        for z in 0..nz {
            marginals[t * nz + z] = (log_alpha[t * nz + z] + log_beta[t * nz + z] - chain_ll).exp();
        }
    }
    let mut pairwise = vec![0.0; (len - 1) * nz * nz];
    for t in 0..len - 1 {
        let sel = trans_sel[t] * nz * nz;
        for z in 0..nz {
            for zp in 0..nz {
                pairwise[(t * nz + z) * nz + zp] = (log_alpha[t * nz + z]
                    + log_trans[sel + z * nz + zp]
                    + log_evidence[(t + 1) * nz + zp]
                    + log_beta[(t + 1) * nz + zp]
                    - chain_ll)
                    .exp();
            }
        }
    }

    ModePosteriors {
        num_modes: nz,
        len,
        marginals,
        pairwise,
        log_likelihood: constant_ll + chain_ll,
        chain_log_likelihood: chain_ll,
        degenerate: false,
    }
}

fn check_inputs(
    traj: &Trajectory,
    policies: &[PolicyTable],
    model: &DiscreteHmMdp,
) -> Result<()> {
    let sp = &model.spaces;
    if policies.len() != sp.num_modes {
        return Err(SwirlError::ShapeMismatch(format!(
            "{} policies supplied for {} modes",
            policies.len(),
            sp.num_modes
        )));
    }
    for pol in policies {
        if pol.num_augmented != sp.num_augmented() || pol.num_actions != sp.num_actions {
            return Err(SwirlError::ShapeMismatch(
                "policy table does not match the model's augmented space".to_string(),
            ));
        }
    }
    traj.validate_against(sp.num_states, sp.num_actions)
}

/// Log of the policy evidence pi_z(a_t | h_t) for every (t, z), plus the
/// history index per step. Shared by posterior inference and the trainer.
pub(crate) fn policy_log_evidence(
    traj: &Trajectory,
    policies: &[PolicyTable],
    model: &DiscreteHmMdp,
) -> (Vec<usize>, Vec<f64>) {
    let nz = model.spaces.num_modes;
    let hist = traj.history_indices(&model.spaces.augmented());
    let mut ev = vec![0.0; traj.len() * nz];
    for (t, (&h, &a)) in hist.iter().zip(&traj.actions).enumerate() {
        for (z, pol) in policies.iter().enumerate() {
            ev[t * nz + z] = pol.log_prob(h, a);
        }
    }
    (hist, ev)
}

/// Mode-independent part of the trajectory likelihood: log p(s_1) plus the
/// environment-kernel factors for every observed transition.
pub(crate) fn constant_log_likelihood(traj: &Trajectory, model: &DiscreteHmMdp) -> f64 {
    let p1 = model.init_state[traj.states[0]];
    let mut ll = if p1 > 0.0 {
        p1.ln()
    } else {
        f64::NEG_INFINITY
    };
    for t in 0..traj.len() - 1 {
        let p = model.env.prob(traj.states[t], traj.actions[t], traj.states[t + 1]);
        ll += if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
    }
    ll
}

/// Posterior mode marginals, pairwise posteriors, and sequence likelihood for
/// one trajectory under frozen model parameters and per-mode policies.
pub fn forward_backward(
    traj: &Trajectory,
    policies: &[PolicyTable],
    model: &DiscreteHmMdp,
) -> Result<ModePosteriors> {
    check_inputs(traj, policies, model)?;
    let (_, evidence) = policy_log_evidence(traj, policies, model);
    let log_trans = model.mode_transition.log_prob_table();
    // z_{t+1} depends on (z_t, s_t): select the transition block by the state
    // where the previous mode acted.
    let trans_sel: Vec<usize> = if model.mode_transition.state_dependent {
        traj.states[..traj.len() - 1].to_vec()
    } else {
        vec![0; traj.len() - 1]
    };
    let log_init: Vec<f64> = model
        .init_mode
        .iter()
        .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let constant = constant_log_likelihood(traj, model);
    Ok(chain_forward_backward(
        &log_init, &evidence, &log_trans, &trans_sel, constant,
    ))
}

/// Full sequence log-likelihood log p(xi | theta), including the
/// environment-kernel and initial-state factors.
pub fn sequence_log_likelihood(
    traj: &Trajectory,
    policies: &[PolicyTable],
    model: &DiscreteHmMdp,
) -> Result<f64> {
    Ok(forward_backward(traj, policies, model)?.log_likelihood)
}

/// Pointwise MAP decoding of the marginals; ties break toward the smallest
/// mode index.
pub fn map_segments(post: &ModePosteriors) -> Vec<usize> {
    (0..post.len)
        .map(|t| {
            let mut best = 0;
            for z in 1..post.num_modes {
                if post.marginal(t, z) > post.marginal(t, best) {
                    best = z;
                }
            }
            best
        })
        .collect()
}

/// Most probable joint mode sequence (max-product decoding); offered as a
/// non-default alternative to pointwise MAP. Ties break toward the smaller
/// mode index.
pub fn viterbi_segments(
    traj: &Trajectory,
    policies: &[PolicyTable],
    model: &DiscreteHmMdp,
) -> Result<Vec<usize>> {
    check_inputs(traj, policies, model)?;
    let nz = model.spaces.num_modes;
    let len = traj.len();
    let (_, evidence) = policy_log_evidence(traj, policies, model);
    let log_trans = model.mode_transition.log_prob_table();
    let log_init: Vec<f64> = model
        .init_mode
        .iter()
        .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
        .collect();

    let mut score = vec![f64::NEG_INFINITY; len * nz];
    let mut back = vec![0usize; len * nz];
    for z in 0..nz {
        score[z] = log_init[z] + evidence[z];
    }
    for t in 1..len {
        let s_idx = if model.mode_transition.state_dependent {
            traj.states[t - 1]
        } else {
            0
        };
        let sel = s_idx * nz * nz;
        for z in 0..nz {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for zp in 0..nz {
                let v = score[(t - 1) * nz + zp] + log_trans[sel + zp * nz + z];
                if v > best {
                    best = v;
                    arg = zp;
                }
            }
            score[t * nz + z] = best + evidence[t * nz + z];
            back[t * nz + z] = arg;
        }
    }
    let mut cur = 0;
    for z in 1..nz {
        if score[(len - 1) * nz + z] > score[(len - 1) * nz + cur] {
            cur = z;
        }
    }
    let mut path = vec![0; len];
    path[len - 1] = cur;
    for t in (1..len).rev() {
        cur = back[t * nz + cur];
        path[t - 1] = cur;
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uniform_posterior_chain(nz: usize, len: usize) -> ModePosteriors {
        let log_init = vec![-(nz as f64).ln(); nz];
        let evidence = vec![-1.0; len * nz];
        let log_trans = vec![-(nz as f64).ln(); nz * nz];
        let sel = vec![0; len - 1];
        chain_forward_backward(&log_init, &evidence, &log_trans, &sel, 0.0)
    }

    #[test]
    fn single_mode_posteriors_are_degenerate_ones() {
        let post = uniform_posterior_chain(1, 6);
        assert!(post.marginals.iter().all(|&p| (p - 1.0).abs() < 1e-12));
        assert!(post.pairwise.iter().all(|&p| (p - 1.0).abs() < 1e-12));
        assert!(!post.degenerate);
    }

    #[test]
    fn symmetric_two_mode_chain_splits_evenly() {
        let post = uniform_posterior_chain(2, 5);
        assert!(post.marginals.iter().all(|&p| (p - 0.5).abs() < 1e-12));
        assert!(post.pairwise.iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn zero_probability_chain_flags_degenerate() {
        let log_init = vec![f64::NEG_INFINITY; 2];
        let evidence = vec![-1.0; 4 * 2];
        let log_trans = vec![-(2f64).ln(); 4];
        let post = chain_forward_backward(&log_init, &evidence, &log_trans, &[0, 0, 0], -1.0);
        assert!(post.degenerate);
        assert_eq!(post.log_likelihood, f64::NEG_INFINITY);
        assert!(post.marginals.iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn map_segments_breaks_ties_low() {
        let post = ModePosteriors {
            num_modes: 2,
            len: 3,
            marginals: vec![0.9, 0.1, 0.5, 0.5, 0.2, 0.8],
            pairwise: vec![0.25; 8],
            log_likelihood: 0.0,
            chain_log_likelihood: 0.0,
            degenerate: false,
        };
        assert_eq!(map_segments(&post), vec![0, 0, 1]);
    }

    #[test]
    fn long_chain_with_tiny_evidence_stays_finite() {
        let nz = 2;
        let len = 10_000;
        let log_init = vec![-(2f64).ln(); 2];
        // per-step evidence as small as 1e-6
        let evidence: Vec<f64> = (0..len * nz)
            .map(|i| if i % 3 == 0 { (1e-6f64).ln() } else { (0.3f64).ln() })
            .collect();
        let log_trans = vec![(0.7f64).ln(), (0.3f64).ln(), (0.4f64).ln(), (0.6f64).ln()];
        let sel = vec![0; len - 1];
        let post = chain_forward_backward(&log_init, &evidence, &log_trans, &sel, 0.0);
        assert!(post.chain_log_likelihood.is_finite());
        assert!(post.marginals.iter().all(|p| p.is_finite()));
        for t in 0..len {
            let sum: f64 = (0..nz).map(|z| post.marginal(t, z)).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-8);
        }
    }
}
