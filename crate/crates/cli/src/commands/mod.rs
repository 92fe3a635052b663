pub mod evaluate;
pub mod fit;
pub mod segment;
pub mod simulate;

use std::path::Path;

use swirl_core::env::TrajectoryDataset;
use swirl_core::model::{DiscreteHmMdp, EnvKernel, Trajectory};

use crate::CliError;

pub(crate) fn read_dataset(path: &Path) -> Result<TrajectoryDataset, CliError> {
    swirl_core::env::read_trajectory_file(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub(crate) fn read_model(path: &Path) -> Result<DiscreteHmMdp, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    DiscreteHmMdp::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Environment kernel for fitting: from a model file when configured, else
/// the maximum-likelihood estimate from the training data.
pub(crate) fn resolve_env_kernel(
    env_model: Option<&Path>,
    data: &[Trajectory],
    num_states: usize,
    num_actions: usize,
) -> Result<EnvKernel, CliError> {
    match env_model {
        Some(path) => Ok(read_model(path)?.env),
        None => Ok(swirl_core::env::estimate_env_kernel(data, num_states, num_actions)?),
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}
