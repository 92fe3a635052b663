//! Mode-segment inference with frozen parameters: per-trajectory labels and
//! posterior marginals as JSON Lines for downstream plotting.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use swirl_core::em::FitResult;
use swirl_core::inference::{forward_backward, map_segments, viterbi_segments};
use swirl_core::softq::{augmented_env_kernel, boltzmann_policy, soft_q_iterate, PolicyTable};

use crate::config::{DecodeRule, SegmentConfig};
use crate::{manifest, CliError};

#[derive(Serialize)]
struct SegmentLine {
    labels: Vec<usize>,
    /// p(z_t | trajectory), row per timestep.
    marginals: Vec<Vec<f64>>,
    log_likelihood: f64,
}

pub fn run(section: &SegmentConfig, config_path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&section.fit)
        .map_err(|e| CliError::Data(format!("{}: {e}", section.fit.display())))?;
    let fit = FitResult::from_json(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", section.fit.display())))?;
    let dataset = super::read_dataset(&section.data)?;
    let model = &fit.model;
    if dataset.num_states > model.spaces.num_states
        || dataset.num_actions > model.spaces.num_actions
    {
        return Err(CliError::Data(format!(
            "data uses {} states / {} actions but the model was fit on {} / {}",
            dataset.num_states,
            dataset.num_actions,
            model.spaces.num_states,
            model.spaces.num_actions
        )));
    }

    let kernel = augmented_env_kernel(&model.env, &model.spaces);
    let policies: Vec<PolicyTable> = (0..model.spaces.num_modes)
        .map(|z| {
            let q = soft_q_iterate(
                model.rewards.mode(z),
                &kernel,
                model.gamma,
                model.alpha,
                fit.config.softq_iters,
                fit.config.softq_tol,
            )?;
            Ok(boltzmann_policy(&q, model.alpha))
        })
        .collect::<swirl_core::Result<_>>()?;

    if let Some(parent) = section.output.parent() {
        if !parent.as_os_str().is_empty() {
            super::ensure_dir(parent)?;
        }
    }
    let file = std::fs::File::create(&section.output)
        .map_err(|e| CliError::Data(format!("{}: {e}", section.output.display())))?;
    let mut writer = std::io::BufWriter::new(file);
    for traj in &dataset.trajectories {
        let post = forward_backward(traj, &policies, model)?;
        let labels = match section.decode {
            DecodeRule::Map => map_segments(&post),
            DecodeRule::Viterbi => viterbi_segments(traj, &policies, model)?,
        };
        let line = SegmentLine {
            labels,
            marginals: (0..post.len)
                .map(|t| (0..post.num_modes).map(|z| post.marginal(t, z)).collect())
                .collect(),
            log_likelihood: post.log_likelihood,
        };
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&line).map_err(|e| CliError::Data(e.to_string()))?
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::Data(e.to_string()))?;

    let out_dir = section
        .output
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    manifest::write(
        out_dir,
        "segment",
        config_path,
        &[section.fit.as_path(), section.data.as_path()],
        &[section
            .output
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default()],
    )?;
    println!(
        "segmented {} trajectories -> {}",
        dataset.trajectories.len(),
        section.output.display()
    );
    Ok(())
}
