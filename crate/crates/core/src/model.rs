//! Model spaces, parameter tables, trajectories, and the history-augmentation
//! indexing shared by every other module.
//!
//! All tables are stored as flat row-major `Vec<f64>` with explicit stride
//! arithmetic; probability tables are parameterized through softmax logits so
//! that row normalization holds by construction after any update.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SwirlError};
use crate::math::{log_softmax_into, softmax_into};

pub const PROB_TOL: f64 = 1e-9;

/// Cardinalities of the mode, state, and action spaces plus the reward
/// history length L.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spaces {
    pub num_modes: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub history_len: usize,
}

impl Spaces {
    pub fn new(
        num_modes: usize,
        num_states: usize,
        num_actions: usize,
        history_len: usize,
    ) -> Result<Self> {
        if num_modes == 0 || num_states == 0 || num_actions == 0 || history_len == 0 {
            return Err(SwirlError::InvalidInput(format!(
                "all space sizes must be >= 1, got Z={num_modes} S={num_states} A={num_actions} L={history_len}"
            )));
        }
        // S^L must stay indexable; fail construction instead of wrapping.
        let mut total: usize = 1;
        for _ in 0..history_len {
            total = total.checked_mul(num_states).ok_or_else(|| {
                SwirlError::InvalidInput(format!(
                    "augmented state count S^L overflows usize (S={num_states}, L={history_len})"
                ))
            })?;
        }
        Ok(Spaces {
            num_modes,
            num_states,
            num_actions,
            history_len,
        })
    }

    /// Number of augmented history states, S^L.
    pub fn num_augmented(&self) -> usize {
        self.num_states.pow(self.history_len as u32)
    }

    pub fn augmented(&self) -> AugmentedSpace {
        AugmentedSpace::new(self.num_states, self.history_len)
    }
}

/// Bijective index over S^L history tuples, row-major with the oldest state
/// as the most significant digit so that L=1 encoding is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentedSpace {
    pub base_size: usize,
    pub history_len: usize,
    pub total_size: usize,
    /// S^(L-1), the stride of the oldest digit.
    prefix: usize,
}

impl AugmentedSpace {
    pub fn new(base_size: usize, history_len: usize) -> Self {
        assert!(base_size >= 1 && history_len >= 1);
        let prefix = base_size.pow(history_len as u32 - 1);
        AugmentedSpace {
            base_size,
            history_len,
            total_size: prefix * base_size,
            prefix,
        }
    }

    /// Encodes a window of at most L state indices, oldest first. Windows
    /// shorter than L are left-padded by replicating their oldest entry.
    pub fn encode_history(&self, window: &[usize]) -> Result<usize> {
        if window.is_empty() || window.len() > self.history_len {
            return Err(SwirlError::InvalidInput(format!(
                "history window must hold 1..={} states, got {}",
                self.history_len,
                window.len()
            )));
        }
        for &s in window {
            if s >= self.base_size {
                return Err(SwirlError::InvalidInput(format!(
                    "state index {s} out of range 0..{}",
                    self.base_size
                )));
            }
        }
        let oldest = window[0];
        let mut idx = 0;
        for k in 0..self.history_len {
            let pad = self.history_len - window.len();
            let s = if k < pad { oldest } else { window[k - pad] };
            idx = idx * self.base_size + s;
        }
        Ok(idx)
    }

    /// Decodes an augmented index back into its L-tuple, oldest first.
    pub fn decode(&self, mut idx: usize) -> Vec<usize> {
        assert!(idx < self.total_size);
        let mut out = vec![0; self.history_len];
        for k in (0..self.history_len).rev() {
            out[k] = idx % self.base_size;
            idx /= self.base_size;
        }
        out
    }

    /// Drops the oldest state of `idx` and appends `next`: the history update
    /// performed on every environment transition.
    #[inline]
    pub fn shift(&self, idx: usize, next: usize) -> usize {
        debug_assert!(idx < self.total_size && next < self.base_size);
        (idx % self.prefix) * self.base_size + next
    }

    /// Most recent state of the tuple.
    #[inline]
    pub fn last_state(&self, idx: usize) -> usize {
        idx % self.base_size
    }

    /// Index of the tuple (s, s, ..., s): the padded start-of-trajectory
    /// history for initial state `s`.
    pub fn replicate(&self, s: usize) -> usize {
        let mut idx = 0;
        for _ in 0..self.history_len {
            idx = idx * self.base_size + s;
        }
        idx
    }
}

/// Environment transition kernel P(s'|s,a), row-major over (s, a, s').
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvKernel {
    pub num_states: usize,
    pub num_actions: usize,
    transition: Vec<f64>,
}

impl EnvKernel {
    pub fn new(num_states: usize, num_actions: usize, transition: Vec<f64>) -> Result<Self> {
        if transition.len() != num_states * num_actions * num_states {
            return Err(SwirlError::ShapeMismatch(format!(
                "env kernel expects {} entries, got {}",
                num_states * num_actions * num_states,
                transition.len()
            )));
        }
        let kernel = EnvKernel {
            num_states,
            num_actions,
            transition,
        };
        if let Some(((s, a), msg)) = kernel.violations().into_iter().next() {
            return Err(SwirlError::InvalidModel(format!(
                "env row (s={s}, a={a}): {msg}"
            )));
        }
        Ok(kernel)
    }

    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.num_actions + a) * self.num_states;
        &self.transition[base..base + self.num_states]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.num_actions + a) * self.num_states + next]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.transition
    }

    /// True when every (s,a) row is one-hot, the ARHMM-reduction precondition.
    pub fn is_deterministic(&self) -> bool {
        (0..self.num_states).all(|s| {
            (0..self.num_actions).all(|a| self.row(s, a).iter().filter(|&&p| p > 0.0).count() == 1)
        })
    }

    fn violations(&self) -> Vec<((usize, usize), String)> {
        let mut out = Vec::new();
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.row(s, a);
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    out.push(((s, a), "entry outside [0, 1]".to_string()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    out.push(((s, a), format!("row sums to {sum}, expected 1")));
                }
            }
        }
        out
    }
}

/// Tabular reward r_z(h, a) over (mode, augmented history, action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub num_modes: usize,
    pub num_augmented: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl RewardTable {
    pub fn new(
        num_modes: usize,
        num_augmented: usize,
        num_actions: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != num_modes * num_augmented * num_actions {
            return Err(SwirlError::ShapeMismatch(format!(
                "reward table expects {} entries, got {}",
                num_modes * num_augmented * num_actions,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SwirlError::InvalidInput(
                "reward table contains non-finite entries".to_string(),
            ));
        }
        Ok(RewardTable {
            num_modes,
            num_augmented,
            num_actions,
            values,
        })
    }

    pub fn zeros(num_modes: usize, num_augmented: usize, num_actions: usize) -> Self {
        RewardTable {
            num_modes,
            num_augmented,
            num_actions,
            values: vec![0.0; num_modes * num_augmented * num_actions],
        }
    }

    /// Reward slice for one mode, an (h, a) table.
    #[inline]
    pub fn mode(&self, z: usize) -> &[f64] {
        let n = self.num_augmented * self.num_actions;
        &self.values[z * n..(z + 1) * n]
    }

    pub fn mode_mut(&mut self, z: usize) -> &mut [f64] {
        let n = self.num_augmented * self.num_actions;
        &mut self.values[z * n..(z + 1) * n]
    }

    #[inline]
    pub fn get(&self, z: usize, h: usize, a: usize) -> f64 {
        self.values[(z * self.num_augmented + h) * self.num_actions + a]
    }

    /// Re-expresses the table on a longer history length: the new entry at
    /// history tuple w equals the old entry at the suffix of w. Used to
    /// compare tables learned at different L on a common space.
    pub fn expand_history(&self, num_states: usize, from_len: usize, to_len: usize) -> RewardTable {
        assert!(to_len >= from_len);
        let old_aug = AugmentedSpace::new(num_states, from_len);
        assert_eq!(old_aug.total_size, self.num_augmented);
        let new_aug = AugmentedSpace::new(num_states, to_len);
        let mut values =
            Vec::with_capacity(self.num_modes * new_aug.total_size * self.num_actions);
        for z in 0..self.num_modes {
            for h in 0..new_aug.total_size {
                let tuple = new_aug.decode(h);
                let suffix = &tuple[to_len - from_len..];
                let old_h = old_aug.encode_history(suffix).expect("suffix in range");
                for a in 0..self.num_actions {
                    values.push(self.get(z, old_h, a));
                }
            }
        }
        RewardTable {
            num_modes: self.num_modes,
            num_augmented: new_aug.total_size,
            num_actions: self.num_actions,
            values,
        }
    }

    /// Per-mode z-scored then min-max normalized copy, the gauge used for
    /// reporting recovered rewards. Raw tables are kept alongside.
    pub fn normalized_per_mode(&self) -> RewardTable {
        let mut out = self.clone();
        let n = self.num_augmented * self.num_actions;
        for z in 0..self.num_modes {
            let slice = out.mode_mut(z);
            let mean = slice.iter().sum::<f64>() / n as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            if sd > 0.0 {
                for v in slice.iter_mut() {
                    *v = (*v - mean) / sd;
                }
            }
            let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                for v in slice.iter_mut() {
                    *v = (*v - lo) / (hi - lo);
                }
            }
        }
        out
    }
}

/// Hidden-mode transition P_z(z'|z,s), parameterized by unconstrained logits
/// with a row-wise softmax over z'. The state-independent variant ties the
/// parameters across s by storing a single logit block per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTransition {
    pub num_modes: usize,
    pub num_states: usize,
    pub state_dependent: bool,
    /// Shape [Z, S_eff, Z] with S_eff = num_states when state-dependent, 1 otherwise.
    pub logits: Vec<f64>,
}

impl ModeTransition {
    pub fn new(
        num_modes: usize,
        num_states: usize,
        state_dependent: bool,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let s_eff = if state_dependent { num_states } else { 1 };
        if logits.len() != num_modes * s_eff * num_modes {
            return Err(SwirlError::ShapeMismatch(format!(
                "mode transition expects {} logits, got {}",
                num_modes * s_eff * num_modes,
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(SwirlError::InvalidInput(
                "mode transition logits contain non-finite entries".to_string(),
            ));
        }
        Ok(ModeTransition {
            num_modes,
            num_states,
            state_dependent,
            logits,
        })
    }

    /// Builds logits from an explicit probability table [Z, S_eff, Z].
    pub fn from_probs(
        num_modes: usize,
        num_states: usize,
        state_dependent: bool,
        probs: &[f64],
    ) -> Result<Self> {
        let logits = probs
            .iter()
            .map(|&p| {
                if p < 0.0 {
                    Err(SwirlError::InvalidInput(format!(
                        "mode transition probability {p} is negative"
                    )))
                } else {
                    Ok(p.max(1e-300).ln())
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        ModeTransition::new(num_modes, num_states, state_dependent, logits)
    }

    #[inline]
    pub fn s_eff(&self) -> usize {
        if self.state_dependent {
            self.num_states
        } else {
            1
        }
    }

    #[inline]
    fn row_base(&self, z: usize, s: usize) -> usize {
        let s_idx = if self.state_dependent { s } else { 0 };
        (z * self.s_eff() + s_idx) * self.num_modes
    }

    #[inline]
    pub fn logit_row(&self, z: usize, s: usize) -> &[f64] {
        let base = self.row_base(z, s);
        &self.logits[base..base + self.num_modes]
    }

    /// P_z(·|z,s) as a dense probability row.
    pub fn prob_row(&self, z: usize, s: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_modes];
        softmax_into(self.logit_row(z, s), &mut out);
        out
    }

    /// log P_z(z'|z,s) in state-major blocks, shape [S_eff, Z, Z']: block s
    /// is the Z x Z log-transition matrix conditioned on state s. The chain
    /// recursions select one block per timestep.
    pub fn log_prob_table(&self) -> Vec<f64> {
        let nz = self.num_modes;
        let s_eff = self.s_eff();
        let mut out = vec![0.0; self.logits.len()];
        let mut row = vec![0.0; nz];
        for z in 0..nz {
            for s in 0..s_eff {
                let base = (z * s_eff + s) * nz;
                log_softmax_into(&self.logits[base..base + nz], &mut row);
                out[(s * nz + z) * nz..(s * nz + z + 1) * nz].copy_from_slice(&row);
            }
        }
        out
    }
}

/// One demonstration: aligned state and action index sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if states.is_empty() || states.len() != actions.len() {
            return Err(SwirlError::InvalidInput(format!(
                "trajectory needs equal-length non-empty state/action lists, got {}/{}",
                states.len(),
                actions.len()
            )));
        }
        Ok(Trajectory { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate_against(&self, num_states: usize, num_actions: usize) -> Result<()> {
        for (t, &s) in self.states.iter().enumerate() {
            if s >= num_states {
                return Err(SwirlError::data(format!(
                    "state index {s} at step {t} out of range 0..{num_states}"
                )));
            }
        }
        for (t, &a) in self.actions.iter().enumerate() {
            if a >= num_actions {
                return Err(SwirlError::data(format!(
                    "action index {a} at step {t} out of range 0..{num_actions}"
                )));
            }
        }
        Ok(())
    }

    /// Augmented history index at every timestep, with start-of-trajectory
    /// padding by replicating the first state.
    pub fn history_indices(&self, aug: &AugmentedSpace) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut h = aug.replicate(self.states[0]);
        out.push(h);
        for &s in &self.states[1..] {
            h = aug.shift(h, s);
            out.push(h);
        }
        out
    }
}

/// Full model record theta: spaces, environment kernel, per-mode rewards,
/// mode-transition logits, initial distributions, and the discount and
/// temperature used by the soft-Q policy bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteHmMdp {
    pub spaces: Spaces,
    pub env: EnvKernel,
    pub rewards: RewardTable,
    pub mode_transition: ModeTransition,
    pub init_state: Vec<f64>,
    pub init_mode: Vec<f64>,
    pub gamma: f64,
    pub alpha: f64,
}

/// A single invariant violation found by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every model invariant and returns all violations, not just the first.
pub fn validate_model(model: &DiscreteHmMdp) -> Vec<Violation> {
    let mut out = Vec::new();
    let sp = &model.spaces;
    let mut push = |field: &str, message: String| {
        out.push(Violation {
            field: field.to_string(),
            message,
        })
    };

    if model.env.num_states != sp.num_states || model.env.num_actions != sp.num_actions {
        push(
            "env",
            format!(
                "kernel is {}x{}, spaces declare {}x{}",
                model.env.num_states, model.env.num_actions, sp.num_states, sp.num_actions
            ),
        );
    }
    for ((s, a), msg) in model.env.violations() {
        push("env", format!("row (s={s}, a={a}): {msg}"));
    }

    if model.rewards.num_modes != sp.num_modes
        || model.rewards.num_augmented != sp.num_augmented()
        || model.rewards.num_actions != sp.num_actions
    {
        push(
            "rewards",
            format!(
                "table is {}x{}x{}, expected {}x{}x{}",
                model.rewards.num_modes,
                model.rewards.num_augmented,
                model.rewards.num_actions,
                sp.num_modes,
                sp.num_augmented(),
                sp.num_actions
            ),
        );
    }
    if model.rewards.values.iter().any(|v| !v.is_finite()) {
        push("rewards", "non-finite entries".to_string());
    }

    if model.mode_transition.num_modes != sp.num_modes {
        push(
            "mode_transition",
            format!(
                "declares {} modes, spaces declare {}",
                model.mode_transition.num_modes, sp.num_modes
            ),
        );
    } else {
        for z in 0..sp.num_modes {
            for s in 0..model.mode_transition.s_eff() {
                let row = model.mode_transition.prob_row(z, s);
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL || row.iter().any(|p| !p.is_finite()) {
                    push(
                        "mode_transition",
                        format!("softmax row (z={z}, s={s}) sums to {sum}"),
                    );
                }
            }
        }
    }

    for (name, dist, len) in [
        ("init_state", &model.init_state, sp.num_states),
        ("init_mode", &model.init_mode, sp.num_modes),
    ] {
        if dist.len() != len {
            push(name, format!("length {} != {}", dist.len(), len));
            continue;
        }
        if dist.iter().any(|p| !(0.0..=1.0).contains(p)) {
            push(name, "entry outside [0, 1]".to_string());
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            push(name, format!("sums to {sum}, expected 1"));
        }
    }

    if !(0.0..1.0).contains(&model.gamma) {
        push("gamma", format!("{} outside [0, 1)", model.gamma));
    }
    if model.alpha <= 0.0 || model.alpha.is_nan() {
        push("alpha", format!("{} is not > 0", model.alpha));
    }
    out
}

const MODEL_FORMAT: &str = "swirl-model/1";

/// On-disk layout of the single-document model JSON.
#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    spaces: Spaces,
    env: Vec<f64>,
    rewards: Vec<f64>,
    mode_transition_state_dependent: bool,
    mode_transition_logits: Vec<f64>,
    init_state: Vec<f64>,
    init_mode: Vec<f64>,
    gamma: f64,
    alpha: f64,
}

impl DiscreteHmMdp {
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            format: MODEL_FORMAT.to_string(),
            spaces: self.spaces,
            env: self.env.as_slice().to_vec(),
            rewards: self.rewards.values.clone(),
            mode_transition_state_dependent: self.mode_transition.state_dependent,
            mode_transition_logits: self.mode_transition.logits.clone(),
            init_state: self.init_state.clone(),
            init_mode: self.init_mode.clone(),
            gamma: self.gamma,
            alpha: self.alpha,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(SwirlError::data(format!(
                "unsupported model format {:?}, expected {MODEL_FORMAT:?}",
                doc.format
            )));
        }
        let spaces = Spaces::new(
            doc.spaces.num_modes,
            doc.spaces.num_states,
            doc.spaces.num_actions,
            doc.spaces.history_len,
        )?;
        let model = DiscreteHmMdp {
            spaces,
            env: EnvKernel::new(spaces.num_states, spaces.num_actions, doc.env)?,
            rewards: RewardTable::new(
                spaces.num_modes,
                spaces.num_augmented(),
                spaces.num_actions,
                doc.rewards,
            )?,
            mode_transition: ModeTransition::new(
                spaces.num_modes,
                spaces.num_states,
                doc.mode_transition_state_dependent,
                doc.mode_transition_logits,
            )?,
            init_state: doc.init_state,
            init_mode: doc.init_mode,
            gamma: doc.gamma,
            alpha: doc.alpha,
        };
        let violations = validate_model(&model);
        if !violations.is_empty() {
            return Err(SwirlError::InvalidModel(
                violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
        Ok(model)
    }
}
