//! Multi-seed training over the configured model grid. Each seed's result is
//! one file named {variant}-{L}-Z{Z}-seed{k}.json; existing files are kept,
//! so an interrupted sweep resumes where it stopped.

use std::path::Path;

use rayon::prelude::*;
use swirl_core::em;

use crate::config::FitSection;
use crate::{manifest, CliError};

pub fn run(section: &FitSection, config_path: &Path) -> Result<(), CliError> {
    let dataset = super::read_dataset(&section.train_data)?;
    let env = super::resolve_env_kernel(
        section.env_model.as_deref(),
        &dataset.trajectories,
        dataset.num_states,
        dataset.num_actions,
    )?;
    super::ensure_dir(&section.output)?;

    let mut outputs = Vec::new();
    for entry in &section.grid {
        let base_config = entry.to_fit_config(&section.defaults)?;
        let label = entry.label(&base_config);
        let tag = entry.file_tag();
        let file_for = |seed: u64| {
            format!(
                "{tag}-{}-Z{}-seed{seed}.json",
                base_config.history_len, base_config.num_modes
            )
        };
        let missing: Vec<u64> = (0..section.num_seeds as u64)
            .filter(|&seed| !section.output.join(file_for(seed)).exists())
            .collect();
        let results: Vec<(u64, em::FitResult)> = missing
            .par_iter()
            .map(|&seed| {
                let mut config = base_config.clone();
                config.seed = seed;
                em::fit(&dataset.trajectories, &env, &config).map(|r| (seed, r))
            })
            .collect::<swirl_core::Result<_>>()?;
        for (seed, result) in &results {
            let path = section.output.join(file_for(*seed));
            std::fs::write(&path, result.to_json()?)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        }
        let mut best = f64::NEG_INFINITY;
        for seed in 0..section.num_seeds as u64 {
            let path = section.output.join(file_for(seed));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let result = em::FitResult::from_json(&text)?;
            best = best.max(result.final_train_ll());
            outputs.push(file_for(seed));
        }
        println!(
            "{label} (L={}, Z={}): {} seeds ({} new), best train LL {best:.3}",
            base_config.history_len,
            base_config.num_modes,
            section.num_seeds,
            results.len()
        );
    }

    let mut inputs: Vec<&Path> = vec![section.train_data.as_path()];
    if let Some(env_path) = section.env_model.as_deref() {
        inputs.push(env_path);
    }
    manifest::write(&section.output, "fit", config_path, &inputs, &outputs)?;
    Ok(())
}
