//! Per-mode soft Q tables by fixed-point iteration over the augmented state
//! space, and the Boltzmann policies derived from them. This is the
//! differentiable bridge from rewards to policies: the trainer backpropagates
//! through the recorded sweep iterates (see [`TracedSolve`]).

use crate::error::{Result, SwirlError};
use crate::model::{AugmentedSpace, EnvKernel, Spaces};

/// Environment kernel lifted to augmented history indices. A row (h, a) puts
/// the base-kernel mass of (last(h), a, s') on the shifted index h' =
/// shift(h, s'); the shift is injective in s', so rows keep exactly the base
/// row's nonzero pattern.
#[derive(Debug, Clone)]
pub struct AugmentedKernel {
    pub aug: AugmentedSpace,
    pub num_actions: usize,
    env: EnvKernel,
    /// shift(h, 0) per h; successor of (h, s') is this plus s'.
    shift_base: Vec<usize>,
}

/// Builds P(h'|h,a) over augmented indices. For L=1 this is the base kernel.
pub fn augmented_env_kernel(env: &EnvKernel, spaces: &Spaces) -> AugmentedKernel {
    let aug = spaces.augmented();
    let shift_base = (0..aug.total_size).map(|h| aug.shift(h, 0)).collect();
    AugmentedKernel {
        aug,
        num_actions: spaces.num_actions,
        env: env.clone(),
        shift_base,
    }
}

impl AugmentedKernel {
    #[inline]
    pub fn num_augmented(&self) -> usize {
        self.aug.total_size
    }

    /// Nonzero successors of (h, a) as (h', probability) pairs.
    #[inline]
    pub fn successors<'a>(
        &'a self,
        h: usize,
        a: usize,
    ) -> impl Iterator<Item = (usize, f64)> + 'a {
        let base = self.shift_base[h];
        self.env
            .row(self.aug.last_state(h), a)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(move |(next, &p)| (base + next, p))
    }

    /// Dense row of P(·|h,a), length S^L. Test and inspection helper; the
    /// solver uses the sparse successor iterator.
    pub fn dense_row(&self, h: usize, a: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.aug.total_size];
        for (hp, p) in self.successors(h, a) {
            row[hp] += p;
        }
        row
    }
}

/// Converged (or iteration-capped) soft Q values over (h, a).
#[derive(Debug, Clone)]
pub struct QTable {
    pub num_augmented: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
    pub iterations_run: usize,
    /// Sup-norm of the last sweep's update.
    pub residual: f64,
}

impl QTable {
    #[inline]
    pub fn row(&self, h: usize) -> &[f64] {
        &self.values[h * self.num_actions..(h + 1) * self.num_actions]
    }
}

/// Boltzmann policy rows over actions per augmented state. Log-probabilities
/// are the primary representation: they stay finite at temperatures where the
/// linear-space entries underflow, keeping the full-support semantics usable
/// by inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub num_augmented: usize,
    pub num_actions: usize,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PolicyTable {
    #[inline]
    pub fn prob_row(&self, h: usize) -> &[f64] {
        &self.probs[h * self.num_actions..(h + 1) * self.num_actions]
    }

    #[inline]
    pub fn log_prob(&self, h: usize, a: usize) -> f64 {
        self.log_probs[h * self.num_actions + a]
    }
}

/// One application of the soft Bellman operator: out(h,a) = r(h,a) +
/// gamma * E_{h'}[v(h')], where `soft_values` holds v(h') = alpha * LSE_a(Q/alpha).
fn sweep_from_values(
    reward: &[f64],
    kernel: &AugmentedKernel,
    gamma: f64,
    soft_values: &[f64],
    out: &mut [f64],
) {
    let na = kernel.num_actions;
    let ns = kernel.env.num_states;
    for h in 0..kernel.num_augmented() {
        let base = kernel.shift_base[h];
        let last = kernel.aug.last_state(h);
        for a in 0..na {
            let row = kernel.env.row(last, a);
            let mut exp = 0.0;
            for next in 0..ns {
                let p = row[next];
                if p > 0.0 {
                    exp += p * soft_values[base + next];
                }
            }
            out[h * na + a] = reward[h * na + a] + gamma * exp;
        }
    }
}

/// v(h) = alpha * log sum_a exp(Q(h,a)/alpha), with max-subtraction. Also
/// writes the row softmax (the iterate's Boltzmann policy) when requested.
fn soft_values_into(
    q: &[f64],
    num_actions: usize,
    alpha: f64,
    values: &mut [f64],
    mut policy: Option<&mut [f64]>,
) {
    for (h, v) in values.iter_mut().enumerate() {
        let row = &q[h * num_actions..(h + 1) * num_actions];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += ((x - m) / alpha).exp();
        }
        *v = m + alpha * z.ln();
        if let Some(pol) = policy.as_deref_mut() {
            let prow = &mut pol[h * num_actions..(h + 1) * num_actions];
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = ((x - m) / alpha).exp() / z;
            }
        }
    }
}

/// Forward solve that records every iterate's soft values and Boltzmann
/// rows, enabling reverse-mode differentiation of the final policy with
/// respect to the reward slice.
pub(crate) struct TracedSolve {
    pub q: QTable,
    /// Per-iteration policies pi^0 .. pi^(M-1), each [H x A]; iterate i is the
    /// softmax of Q^i, consumed by the backward pass of sweep i+1.
    pub iterate_policies: Vec<Vec<f64>>,
}

fn iterate(
    reward: &[f64],
    kernel: &AugmentedKernel,
    gamma: f64,
    alpha: f64,
    max_iters: usize,
    tol: f64,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<QTable> {
    let h = kernel.num_augmented();
    let na = kernel.num_actions;
    if reward.len() != h * na {
        return Err(SwirlError::ShapeMismatch(format!(
            "reward slice has {} entries, expected {}",
            reward.len(),
            h * na
        )));
    }
    if reward.iter().any(|v| !v.is_finite()) {
        return Err(SwirlError::InvalidInput(
            "reward slice contains non-finite entries".to_string(),
        ));
    }
    if !(0.0..1.0).contains(&gamma) || alpha <= 0.0 || alpha.is_nan() || max_iters == 0 {
        return Err(SwirlError::InvalidInput(format!(
            "need gamma in [0,1), alpha > 0, max_iters >= 1; got {gamma}, {alpha}, {max_iters}"
        )));
    }

    let mut q = vec![0.0; h * na];
    let mut q_next = vec![0.0; h * na];
    let mut values = vec![0.0; h];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let policy_buf = trace.as_deref_mut().map(|t| {
            t.push(vec![0.0; h * na]);
            t.last_mut().unwrap().as_mut_slice()
        });
        soft_values_into(&q, na, alpha, &mut values, policy_buf);
        sweep_from_values(reward, kernel, gamma, &values, &mut q_next);
        residual = q
            .iter()
            .zip(&q_next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut q, &mut q_next);
        iterations += 1;
        if residual < tol {
            break;
        }
    }
    Ok(QTable {
        num_augmented: h,
        num_actions: na,
        values: q,
        iterations_run: iterations,
        residual,
    })
}

/// One application of the soft Bellman operator to an arbitrary Q table.
pub fn soft_bellman_apply(
    q: &[f64],
    reward: &[f64],
    kernel: &AugmentedKernel,
    gamma: f64,
    alpha: f64,
) -> Vec<f64> {
    let h = kernel.num_augmented();
    let na = kernel.num_actions;
    assert_eq!(q.len(), h * na);
    assert_eq!(reward.len(), h * na);
    let mut values = vec![0.0; h];
    soft_values_into(q, na, alpha, &mut values, None);
    let mut out = vec![0.0; h * na];
    sweep_from_values(reward, kernel, gamma, &values, &mut out);
    out
}

/// Soft-Q fixed-point iteration from Q=0: each sweep replaces Q(h,a) with
/// r(h,a) + gamma * E[alpha * log sum_a' exp(Q(h',a')/alpha)], stopping when
/// the sup-norm change drops below `tol` or after `max_iters` sweeps.
pub fn soft_q_iterate(
    reward: &[f64],
    kernel: &AugmentedKernel,
    gamma: f64,
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<QTable> {
    iterate(reward, kernel, gamma, alpha, max_iters, tol, None)
}

pub(crate) fn soft_q_traced(
    reward: &[f64],
    kernel: &AugmentedKernel,
    gamma: f64,
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TracedSolve> {
    let mut iterate_policies = Vec::with_capacity(max_iters);
    let q = iterate(
        reward,
        kernel,
        gamma,
        alpha,
        max_iters,
        tol,
        Some(&mut iterate_policies),
    )?;
    Ok(TracedSolve {
        q,
        iterate_policies,
    })
}

/// Boltzmann distribution of a Q table: probs(h,a) = softmax_a(Q(h,a)/alpha).
pub fn boltzmann_policy(q: &QTable, alpha: f64) -> PolicyTable {
    let na = q.num_actions;
    let mut probs = vec![0.0; q.values.len()];
    let mut log_probs = vec![0.0; q.values.len()];
    for h in 0..q.num_augmented {
        let row = q.row(h);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &x in row {
            z += ((x - m) / alpha).exp();
        }
        let log_z = z.ln();
        for (a, &x) in row.iter().enumerate() {
            let centered = (x - m) / alpha;
            probs[h * na + a] = centered.exp() / z;
            log_probs[h * na + a] = centered - log_z;
        }
    }
    PolicyTable {
        num_augmented: q.num_augmented,
        num_actions: na,
        probs,
        log_probs,
    }
}

/// Adjoint of the traced solve: given dL/dQ^M at the final iterate, pushes
/// the adjoint back through every recorded sweep and accumulates dL/dr.
/// Q^i = r + gamma * P . v(Q^(i-1)) gives dQ^i/dr = identity per sweep and
/// dQ^i/dQ^(i-1) = gamma * P . diag-softmax, so dL/dr = sum_i adj_i.
pub(crate) fn backprop_reward_gradient(
    trace: &TracedSolve,
    kernel: &AugmentedKernel,
    gamma: f64,
    mut adjoint: Vec<f64>,
    grad: &mut [f64],
) {
    let h = kernel.num_augmented();
    let na = kernel.num_actions;
    let ns = kernel.env.num_states;
    debug_assert_eq!(adjoint.len(), h * na);
    debug_assert_eq!(grad.len(), h * na);
    let mut pushed = vec![0.0; h];
    for pi in trace.iterate_policies.iter().rev() {
        for (g, &a) in grad.iter_mut().zip(&adjoint) {
            *g += a;
        }
        // pushed(h') = gamma * sum_{h,a} adjoint(h,a) * P(h'|h,a)
        pushed.iter_mut().for_each(|x| *x = 0.0);
        for hh in 0..h {
            let base = kernel.shift_base[hh];
            let last = kernel.aug.last_state(hh);
            for a in 0..na {
                let w = adjoint[hh * na + a];
                if w == 0.0 {
                    continue;
                }
                let row = kernel.env.row(last, a);
                for next in 0..ns {
                    let p = row[next];
                    if p > 0.0 {
                        pushed[base + next] += gamma * w * p;
                    }
                }
            }
        }
        for hh in 0..h {
            for a in 0..na {
                adjoint[hh * na + a] = pushed[hh] * pi[hh * na + a];
            }
        }
    }
}
