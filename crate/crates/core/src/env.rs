//! Ground-truth generative models and data handling: the 5x5 gridworld with
//! a non-Markovian water reward, ancestral trajectory sampling, the random
//! perturbation harness, trajectory file ingest/export, and train/test
//! splitting.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwirlError};
use crate::math::sample_categorical;
use crate::model::{
    DiscreteHmMdp, EnvKernel, ModeTransition, RewardTable, Spaces, Trajectory,
};
use crate::softq::PolicyTable;

pub const GRID_SIDE: usize = 5;
pub const GRID_STATES: usize = GRID_SIDE * GRID_SIDE;
pub const GRID_ACTIONS: usize = 5;
pub const ACTION_NAMES: [&str; GRID_ACTIONS] = ["up", "down", "left", "right", "stay"];

/// Mode indices of the two ground-truth reward maps.
pub const MODE_HOME: usize = 0;
pub const MODE_WATER: usize = 1;

/// 5x5 gridworld with home and water states in opposite corners by default.
/// The agent alternates between a home reward map (reward at the home state)
/// and a water map whose reward depends on the previous state as well:
/// arriving at the water state from elsewhere, or leaving it, is rewarded;
/// staying put at the water state is not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridworldSpec {
    pub home_state: usize,
    pub water_state: usize,
    /// Probability of switching mode when at the active mode's trigger state
    /// (water state while water-seeking, home state while home-seeking).
    pub p_switch_trigger: f64,
    /// Probability of switching mode anywhere else.
    pub p_switch_elsewhere: f64,
    /// Reward magnitude of every rewarded event.
    pub reward_magnitude: f64,
    /// Temperature of the soft-Q policies used to generate demonstrations.
    pub gen_alpha: f64,
    pub gen_gamma: f64,
}

impl Default for GridworldSpec {
    fn default() -> Self {
        GridworldSpec {
            home_state: 0,
            water_state: GRID_STATES - 1,
            p_switch_trigger: 0.8,
            p_switch_elsewhere: 0.02,
            reward_magnitude: 1.0,
            gen_alpha: 0.5,
            gen_gamma: 0.95,
        }
    }
}

/// The generative model behind a simulated dataset, kept for evaluation.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub rewards: RewardTable,
    pub mode_transition: ModeTransition,
    pub home_state: usize,
    pub water_state: usize,
}

/// Deterministic boundary-clipped move on the 5x5 grid.
pub fn grid_step(s: usize, a: usize) -> usize {
    let (row, col) = (s / GRID_SIDE, s % GRID_SIDE);
    let (row, col) = match a {
        0 => (row.saturating_sub(1), col),                    // up
        1 => ((row + 1).min(GRID_SIDE - 1), col),             // down
        2 => (row, col.saturating_sub(1)),                    // left
        3 => (row, (col + 1).min(GRID_SIDE - 1)),             // right
        _ => (row, col),                                      // stay
    };
    row * GRID_SIDE + col
}

/// Builds the ground-truth model: deterministic kernel, L=2 reward tables for
/// the home and water modes, and the state-dependent mode switching that
/// sends the agent home after visiting the water port and back out after
/// returning home.
pub fn build_gridworld(spec: &GridworldSpec) -> Result<(DiscreteHmMdp, GroundTruth)> {
    if spec.home_state >= GRID_STATES || spec.water_state >= GRID_STATES {
        return Err(SwirlError::InvalidInput(format!(
            "home/water states must be < {GRID_STATES}"
        )));
    }
    if spec.home_state == spec.water_state {
        return Err(SwirlError::InvalidInput(
            "home and water states must differ".to_string(),
        ));
    }
    for (name, p) in [
        ("p_switch_trigger", spec.p_switch_trigger),
        ("p_switch_elsewhere", spec.p_switch_elsewhere),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SwirlError::InvalidInput(format!("{name} must be in [0,1]")));
        }
    }

    let spaces = Spaces::new(2, GRID_STATES, GRID_ACTIONS, 2)?;
    let mut kernel = vec![0.0; GRID_STATES * GRID_ACTIONS * GRID_STATES];
    for s in 0..GRID_STATES {
        for a in 0..GRID_ACTIONS {
            kernel[(s * GRID_ACTIONS + a) * GRID_STATES + grid_step(s, a)] = 1.0;
        }
    }
    let env = EnvKernel::new(GRID_STATES, GRID_ACTIONS, kernel)?;

    let aug = spaces.augmented();
    let nh = spaces.num_augmented();
    let mut rewards = RewardTable::zeros(2, nh, GRID_ACTIONS);
    for h in 0..nh {
        let tuple = aug.decode(h);
        let (prev, cur) = (tuple[0], tuple[1]);
        // impossible transitions carry no reward: the history (prev, cur)
        // must be realizable by some action
        if !(0..GRID_ACTIONS).any(|a| grid_step(prev, a) == cur) {
            continue;
        }
        // home reward depends on the current state only
        if cur == spec.home_state {
            for a in 0..GRID_ACTIONS {
                rewards.values[(MODE_HOME * nh + h) * GRID_ACTIONS + a] = spec.reward_magnitude;
            }
        }
        // water reward: arriving from elsewhere or leaving; staying at the
        // port (prev = cur = water) earns nothing
        let arrived = cur == spec.water_state && prev != spec.water_state;
        let left = prev == spec.water_state && cur != spec.water_state;
        if arrived || left {
            for a in 0..GRID_ACTIONS {
                rewards.values[(MODE_WATER * nh + h) * GRID_ACTIONS + a] = spec.reward_magnitude;
            }
        }
    }

    // P_z(z'|z,s): switching is likely only at the active mode's trigger state
    let mut probs = vec![0.0; 2 * GRID_STATES * 2];
    for z in 0..2 {
        let trigger = if z == MODE_HOME {
            spec.home_state
        } else {
            spec.water_state
        };
        for s in 0..GRID_STATES {
            let p_switch = if s == trigger {
                spec.p_switch_trigger
            } else {
                spec.p_switch_elsewhere
            };
            probs[(z * GRID_STATES + s) * 2 + z] = 1.0 - p_switch;
            probs[(z * GRID_STATES + s) * 2 + (1 - z)] = p_switch;
        }
    }
    let mode_transition = ModeTransition::from_probs(2, GRID_STATES, true, &probs)?;

    let model = DiscreteHmMdp {
        spaces,
        env,
        rewards: rewards.clone(),
        mode_transition: mode_transition.clone(),
        init_state: vec![1.0 / GRID_STATES as f64; GRID_STATES],
        init_mode: vec![0.5, 0.5],
        gamma: spec.gen_gamma,
        alpha: spec.gen_alpha,
    };
    let truth = GroundTruth {
        rewards,
        mode_transition,
        home_state: spec.home_state,
        water_state: spec.water_state,
    };
    Ok((model, truth))
}

/// Per-mode optimal Boltzmann policies for a model's reward tables.
pub fn optimal_policies(model: &DiscreteHmMdp, softq_iters: usize) -> Result<Vec<PolicyTable>> {
    let kernel = crate::softq::augmented_env_kernel(&model.env, &model.spaces);
    (0..model.spaces.num_modes)
        .into_par_iter()
        .map(|z| {
            let q = crate::softq::soft_q_iterate(
                model.rewards.mode(z),
                &kernel,
                model.gamma,
                model.alpha,
                softq_iters,
                1e-10,
            )?;
            Ok(crate::softq::boltzmann_policy(&q, model.alpha))
        })
        .collect()
}

fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // per-trajectory derived stream so sampling order is scheduler-independent
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64),
    )
}

/// Ancestral sampling from the generative model: z1 ~ p(z1), s1 ~ p(s1), then
/// a_t ~ pi_{z_t}(.|h_t), s_{t+1} ~ P(.|s_t,a_t), z_{t+1} ~ P_z(.|z_t,s_t).
/// Returns the observable trajectories and the hidden mode labels.
pub fn sample_trajectories(
    model: &DiscreteHmMdp,
    policies: &[PolicyTable],
    num: usize,
    len: usize,
    seed: u64,
) -> (Vec<Trajectory>, Vec<Vec<usize>>) {
    assert!(len >= 1 && policies.len() == model.spaces.num_modes);
    let aug = model.spaces.augmented();
    let pairs: Vec<(Trajectory, Vec<usize>)> = (0..num)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            let mut states = Vec::with_capacity(len);
            let mut actions = Vec::with_capacity(len);
            let mut modes = Vec::with_capacity(len);
            let mut z = sample_categorical(&model.init_mode, rng.random::<f64>());
            let mut s = sample_categorical(&model.init_state, rng.random::<f64>());
            let mut h = aug.replicate(s);
            for t in 0..len {
                let a = sample_categorical(policies[z].prob_row(h), rng.random::<f64>());
                states.push(s);
                actions.push(a);
                modes.push(z);
                if t + 1 == len {
                    break;
                }
                let next = sample_categorical(model.env.row(s, a), rng.random::<f64>());
                let z_next = sample_categorical(
                    &model.mode_transition.prob_row(z, s),
                    rng.random::<f64>(),
                );
                h = aug.shift(h, next);
                s = next;
                z = z_next;
            }
            (Trajectory { states, actions }, modes)
        })
        .collect();
    pairs.into_iter().unzip()
}

/// How many entries [`perturb_trajectories`] replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerturbStats {
    pub state_entries_replaced: usize,
    pub action_entries_replaced: usize,
}

/// Partial Fisher-Yates draw of `k` distinct indices from 0..n.
fn choose_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Replaces floor(p * total) state entries and floor(p * total) action
/// entries (counted separately, positions distinct within each kind) with
/// uniformly random valid indices. The replacement may coincide with the
/// original value by chance. The input is untouched.
pub fn perturb_trajectories(
    data: &[Trajectory],
    num_states: usize,
    num_actions: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, PerturbStats)> {
    if !(0.0..=0.5).contains(&fraction) {
        return Err(SwirlError::InvalidInput(format!(
            "perturbation fraction must be in [0, 0.5], got {fraction}"
        )));
    }
    let mut out: Vec<Trajectory> = data.to_vec();
    let total: usize = data.iter().map(|t| t.len()).sum();
    let k = (fraction * total as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // flat index across (trajectory, step), states first then actions
    let mut offsets = Vec::with_capacity(data.len());
    let mut acc = 0;
    for t in data {
        offsets.push(acc);
        acc += t.len();
    }
    let locate = |flat: usize| {
        let idx = offsets.partition_point(|&o| o <= flat) - 1;
        (idx, flat - offsets[idx])
    };

    for flat in choose_indices(total, k, &mut rng) {
        let (i, t) = locate(flat);
        out[i].states[t] = rng.random_range(0..num_states);
    }
    for flat in choose_indices(total, k, &mut rng) {
        let (i, t) = locate(flat);
        out[i].actions[t] = rng.random_range(0..num_actions);
    }
    Ok((
        out,
        PerturbStats {
            state_entries_replaced: k,
            action_entries_replaced: k,
        },
    ))
}

/// Seeded-shuffle split into (train, test) index sets; train takes
/// floor(fraction * n). Disjoint and exhaustive.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(SwirlError::InvalidInput(format!(
            "split fraction must be in (0,1), got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng);
    let cut = (fraction * n as f64).floor() as usize;
    let test = idx.split_off(cut);
    Ok((idx, test))
}

pub fn train_test_split(
    data: &[Trajectory],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let (train_idx, test_idx) = split_indices(data.len(), fraction, seed)?;
    Ok((
        train_idx.iter().map(|&i| data[i].clone()).collect(),
        test_idx.iter().map(|&i| data[i].clone()).collect(),
    ))
}

/// Maximum-likelihood environment kernel from observed transitions; rows of
/// unvisited (s,a) pairs fall back to uniform.
pub fn estimate_env_kernel(
    data: &[Trajectory],
    num_states: usize,
    num_actions: usize,
) -> Result<EnvKernel> {
    let mut counts = vec![0.0f64; num_states * num_actions * num_states];
    for traj in data {
        traj.validate_against(num_states, num_actions)?;
        for t in 0..traj.len() - 1 {
            counts[(traj.states[t] * num_actions + traj.actions[t]) * num_states
                + traj.states[t + 1]] += 1.0;
        }
    }
    for row in counts.chunks_mut(num_states) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|c| *c /= total);
        } else {
            row.fill(1.0 / num_states as f64);
        }
    }
    EnvKernel::new(num_states, num_actions, counts)
}

/// Which split a trajectory file belongs to, when tagged in its header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// In-memory contents of a swirl-traj/1 file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    /// Hidden-mode labels per trajectory, when the file carries them.
    pub labels: Vec<Option<Vec<usize>>>,
    pub num_states: usize,
    pub num_actions: usize,
    pub split: Option<SplitTag>,
}

const TRAJ_FORMAT: &str = "swirl-traj/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajHeader {
    format: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_actions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<SplitTag>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajLine {
    states: Vec<usize>,
    actions: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<usize>>,
}

/// Parses a swirl-traj/1 JSON Lines file: an optional header object followed
/// by one {"states": [...], "actions": [...]} object per trajectory. State
/// and action counts are taken from the header when declared and inferred as
/// max index + 1 otherwise.
pub fn read_trajectory_file(path: &Path) -> Result<TrajectoryDataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);

    let mut trajectories = Vec::new();
    let mut labels = Vec::new();
    let mut declared: Option<TrajHeader> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 1 && line.contains("\"format\"") {
            let header: TrajHeader = serde_json::from_str(&line)
                .map_err(|e| SwirlError::data_at(lineno, format!("bad header: {e}")))?;
            if header.format != TRAJ_FORMAT {
                return Err(SwirlError::data_at(
                    lineno,
                    format!("unsupported format {:?}, expected {TRAJ_FORMAT:?}", header.format),
                ));
            }
            declared = Some(header);
            continue;
        }
        let parsed: TrajLine = serde_json::from_str(&line)
            .map_err(|e| SwirlError::data_at(lineno, format!("malformed trajectory: {e}")))?;
        let traj = Trajectory::new(parsed.states, parsed.actions)
            .map_err(|e| SwirlError::data_at(lineno, e.to_string()))?;
        if let Some(lab) = &parsed.labels {
            if lab.len() != traj.len() {
                return Err(SwirlError::data_at(
                    lineno,
                    format!("{} labels for {} steps", lab.len(), traj.len()),
                ));
            }
        }
        trajectories.push(traj);
        labels.push(parsed.labels);
    }
    if trajectories.is_empty() {
        return Err(SwirlError::data("file contains no trajectories"));
    }

    let max_state = trajectories
        .iter()
        .flat_map(|t| t.states.iter().copied())
        .max()
        .unwrap();
    let max_action = trajectories
        .iter()
        .flat_map(|t| t.actions.iter().copied())
        .max()
        .unwrap();
    let num_states = declared
        .as_ref()
        .and_then(|h| h.num_states)
        .unwrap_or(max_state + 1);
    let num_actions = declared
        .as_ref()
        .and_then(|h| h.num_actions)
        .unwrap_or(max_action + 1);
    if max_state >= num_states || max_action >= num_actions {
        // report the first offending position
        for (i, traj) in trajectories.iter().enumerate() {
            for (t, &s) in traj.states.iter().enumerate() {
                if s >= num_states {
                    return Err(SwirlError::data(format!(
                        "trajectory {i} step {t}: state index {s} exceeds declared num_states {num_states}"
                    )));
                }
            }
            for (t, &a) in traj.actions.iter().enumerate() {
                if a >= num_actions {
                    return Err(SwirlError::data(format!(
                        "trajectory {i} step {t}: action index {a} exceeds declared num_actions {num_actions}"
                    )));
                }
            }
        }
    }
    Ok(TrajectoryDataset {
        trajectories,
        labels,
        num_states,
        num_actions,
        split: declared.and_then(|h| h.split),
    })
}

/// Writes a swirl-traj/1 file: header line, then one JSON object per
/// trajectory. Byte-stable for identical input.
pub fn write_trajectory_file(path: &Path, dataset: &TrajectoryDataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = TrajHeader {
        format: TRAJ_FORMAT.to_string(),
        num_states: Some(dataset.num_states),
        num_actions: Some(dataset.num_actions),
        split: dataset.split,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for (traj, labels) in dataset.trajectories.iter().zip(&dataset.labels) {
        let line = TrajLine {
            states: traj.states.clone(),
            actions: traj.actions.clone(),
            labels: labels.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}
