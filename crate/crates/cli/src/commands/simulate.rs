//! Gridworld simulation: ground-truth model, sampled demonstrations, and the
//! train/test split, written as swirl-traj/1 files plus the truth model.

use std::path::Path;

use swirl_core::env::{
    build_gridworld, optimal_policies, sample_trajectories, split_indices, SplitTag,
    TrajectoryDataset,
};

use crate::config::SimulateConfig;
use crate::{manifest, CliError};

pub fn run(config: &SimulateConfig, config_path: &Path) -> Result<(), CliError> {
    let spec = config.gridworld.to_spec();
    let (model, _truth) = build_gridworld(&spec)?;
    let policies = optimal_policies(&model, config.softq_iters)?;
    let (data, labels) = sample_trajectories(
        &model,
        &policies,
        config.num_trajectories,
        config.steps,
        config.seed,
    );
    let (train_idx, test_idx) =
        split_indices(data.len(), config.train_fraction, config.seed)?;

    super::ensure_dir(&config.output)?;
    let write_split = |indices: &[usize], tag: SplitTag, name: &str| -> Result<String, CliError> {
        let dataset = TrajectoryDataset {
            trajectories: indices.iter().map(|&i| data[i].clone()).collect(),
            labels: indices.iter().map(|&i| Some(labels[i].clone())).collect(),
            num_states: model.spaces.num_states,
            num_actions: model.spaces.num_actions,
            split: Some(tag),
        };
        let path = config.output.join(name);
        swirl_core::env::write_trajectory_file(&path, &dataset)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(name.to_string())
    };
    let train_name = write_split(&train_idx, SplitTag::Train, "train.jsonl")?;
    let test_name = write_split(&test_idx, SplitTag::Test, "test.jsonl")?;

    let model_path = config.output.join("truth_model.json");
    std::fs::write(&model_path, model.to_json()?)
        .map_err(|e| CliError::Data(format!("{}: {e}", model_path.display())))?;

    manifest::write(
        &config.output,
        "simulate",
        config_path,
        &[],
        &[train_name, test_name, "truth_model.json".to_string()],
    )?;
    println!(
        "simulated {} trajectories x {} steps (seed {}): {} train / {} test -> {}",
        config.num_trajectories,
        config.steps,
        config.seed,
        train_idx.len(),
        test_idx.len(),
        config.output.display()
    );
    Ok(())
}
