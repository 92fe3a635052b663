//! Experiment configuration: a single TOML document with one section per
//! command. Unknown keys are rejected so misspellings fail loudly instead of
//! silently running a different experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swirl_core::em::{FitConfig, Optimizer, TransitionDependence};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub simulate: Option<SimulateConfig>,
    pub fit: Option<FitSection>,
    pub evaluate: Option<EvaluateConfig>,
    pub segment: Option<SegmentConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub output: PathBuf,
    #[serde(default = "default_num_trajectories")]
    pub num_trajectories: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Soft-Q sweeps used to derive the demonstration policies.
    #[serde(default = "default_gen_softq_iters")]
    pub softq_iters: usize,
    #[serde(default)]
    pub gridworld: GridworldSection,
}

fn default_num_trajectories() -> usize {
    200
}
fn default_steps() -> usize {
    500
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_gen_softq_iters() -> usize {
    400
}

/// Gridworld overrides; defaults follow the benchmark's ground truth.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridworldSection {
    pub home_state: Option<usize>,
    pub water_state: Option<usize>,
    pub p_switch_trigger: Option<f64>,
    pub p_switch_elsewhere: Option<f64>,
    pub reward_magnitude: Option<f64>,
    pub gen_alpha: Option<f64>,
    pub gen_gamma: Option<f64>,
}

impl GridworldSection {
    pub fn to_spec(&self) -> swirl_core::env::GridworldSpec {
        let mut spec = swirl_core::env::GridworldSpec::default();
        if let Some(v) = self.home_state {
            spec.home_state = v;
        }
        if let Some(v) = self.water_state {
            spec.water_state = v;
        }
        if let Some(v) = self.p_switch_trigger {
            spec.p_switch_trigger = v;
        }
        if let Some(v) = self.p_switch_elsewhere {
            spec.p_switch_elsewhere = v;
        }
        if let Some(v) = self.reward_magnitude {
            spec.reward_magnitude = v;
        }
        if let Some(v) = self.gen_alpha {
            spec.gen_alpha = v;
        }
        if let Some(v) = self.gen_gamma {
            spec.gen_gamma = v;
        }
        spec
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub train_data: PathBuf,
    /// Model file providing the (known) environment kernel; when absent the
    /// kernel is the maximum-likelihood estimate from the training data.
    pub env_model: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default = "default_num_seeds")]
    pub num_seeds: usize,
    #[serde(default)]
    pub defaults: FitDefaults,
    pub grid: Vec<GridEntry>,
}

fn default_num_seeds() -> usize {
    20
}

/// FitConfig fields shared by every grid entry.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitDefaults {
    pub gamma: f64,
    pub alpha: f64,
    pub em_iters: usize,
    pub softq_iters: usize,
    pub softq_tol: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub m_step_steps: usize,
    pub reward_l2: f64,
    pub tolerance: f64,
}

impl Default for FitDefaults {
    fn default() -> Self {
        let base = FitConfig::new(TransitionDependence::StateDependent, 1, 1);
        FitDefaults {
            gamma: base.gamma,
            alpha: base.alpha,
            em_iters: base.em_iters,
            softq_iters: base.softq_iters,
            softq_tol: base.softq_tol,
            optimizer: base.optimizer,
            learning_rate: base.learning_rate,
            m_step_steps: base.m_step_steps,
            reward_l2: base.reward_l2,
            tolerance: base.tolerance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Swirl,
    Maxent,
}

/// One model family to fit: MaxEnt, or a SWIRL variant given by the
/// transition dependence, history length, and mode count.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    pub variant: Option<TransitionDependence>,
    pub history_len: Option<usize>,
    pub num_modes: Option<usize>,
}

fn default_kind() -> ModelKind {
    ModelKind::Swirl
}

impl GridEntry {
    pub fn to_fit_config(&self, defaults: &FitDefaults) -> Result<FitConfig, CliError> {
        let (dependence, history_len, num_modes) = match self.kind {
            ModelKind::Maxent => (TransitionDependence::StateIndependent, 1, 1),
            ModelKind::Swirl => (
                self.variant.ok_or_else(|| {
                    CliError::Config("grid entry of kind \"swirl\" needs a variant (I or S)".into())
                })?,
                self.history_len.unwrap_or(1),
                self.num_modes.unwrap_or(2),
            ),
        };
        let mut config = FitConfig::new(dependence, history_len, num_modes);
        config.gamma = defaults.gamma;
        config.alpha = defaults.alpha;
        config.em_iters = defaults.em_iters;
        config.softq_iters = defaults.softq_iters;
        config.softq_tol = defaults.softq_tol;
        config.optimizer = defaults.optimizer;
        config.learning_rate = defaults.learning_rate;
        config.m_step_steps = defaults.m_step_steps;
        config.reward_l2 = defaults.reward_l2;
        config.tolerance = defaults.tolerance;
        Ok(config)
    }

    /// Display label: "MaxEnt" or the taxonomy name ("S-2", "I-1", ...).
    pub fn label(&self, config: &FitConfig) -> String {
        match self.kind {
            ModelKind::Maxent => "MaxEnt".to_string(),
            ModelKind::Swirl => config.variant_label(),
        }
    }

    /// Filename component ahead of "-{L}-Z{Z}-seed{k}.json".
    pub fn file_tag(&self) -> &'static str {
        match (self.kind, self.variant) {
            (ModelKind::Maxent, _) => "MaxEnt",
            (_, Some(TransitionDependence::StateDependent)) => "S",
            _ => "I",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub fits: PathBuf,
    pub test_data: PathBuf,
    pub truth_model: Option<PathBuf>,
    #[serde(default = "default_keep_top")]
    pub keep_top: usize,
    pub output: PathBuf,
    pub robustness: Option<RobustnessConfig>,
}

fn default_keep_top() -> usize {
    10
}

/// Perturbation-robustness sweep: refits one variant on perturbed copies of
/// the training data.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    pub train_data: PathBuf,
    pub env_model: Option<PathBuf>,
    pub fractions: Vec<f64>,
    #[serde(default = "default_rob_seeds")]
    pub num_seeds: usize,
    #[serde(default = "default_rob_keep")]
    pub keep_top: usize,
    pub variant: TransitionDependence,
    #[serde(default = "default_history")]
    pub history_len: usize,
    #[serde(default = "default_modes")]
    pub num_modes: usize,
    #[serde(default)]
    pub perturb_seed: u64,
    #[serde(default)]
    pub defaults: FitDefaults,
}

fn default_rob_seeds() -> usize {
    8
}
fn default_rob_keep() -> usize {
    4
}
fn default_history() -> usize {
    2
}
fn default_modes() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecodeRule {
    #[default]
    Map,
    Viterbi,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    pub fit: PathBuf,
    pub data: PathBuf,
    pub output: PathBuf,
    #[serde(default)]
    pub decode: DecodeRule,
}

/// Loads the config file and applies the SWIRL_SEED override (it takes
/// precedence over every seed field in the document).
pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
    if let Ok(seed) = std::env::var("SWIRL_SEED") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| CliError::Config(format!("SWIRL_SEED must be an integer, got {seed:?}")))?;
        if let Some(sim) = config.simulate.as_mut() {
            sim.seed = seed;
        }
        if let Some(eval) = config.evaluate.as_mut() {
            if let Some(rob) = eval.robustness.as_mut() {
                rob.perturb_seed = seed;
            }
        }
    }
    Ok(config)
}

/// Fetches a command's section or fails naming it.
pub fn require<T>(section: Option<T>, name: &str) -> Result<T, CliError> {
    section.ok_or_else(|| CliError::Config(format!("config is missing the [{name}] section")))
}
