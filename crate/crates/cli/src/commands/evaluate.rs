//! Held-out evaluation: per-model metric reports, the comparison table, and
//! the optional perturbation-robustness sweep.

use std::collections::BTreeMap;
use std::path::Path;

use swirl_core::baselines::{compare_models, ModelSummary};
use swirl_core::em::{FitConfig, FitResult};
use swirl_core::eval::{self, MetricReport, SeedMetrics, TruthContext};

use crate::config::EvaluateConfig;
use crate::{manifest, CliError};

/// Display label of a fitted family: single-mode fits are the MaxEnt
/// baseline, everything else carries its taxonomy name.
fn family_label(config: &FitConfig) -> String {
    if config.num_modes == 1 {
        "MaxEnt".to_string()
    } else {
        config.variant_label()
    }
}

fn load_fits(dir: &Path) -> Result<Vec<FitResult>, CliError> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("cannot read fits dir {}: {e}", dir.display())))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::Data(format!("cannot list {}: {e}", dir.display())))?;
    entries.sort_by_key(|e| e.file_name());
    let mut fits = Vec::new();
    for entry in entries {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().to_string();
        if path.extension().is_none_or(|e| e != "json") || name.starts_with("manifest") {
            continue;
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        fits.push(
            FitResult::from_json(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        );
    }
    if fits.is_empty() {
        return Err(CliError::Data(format!(
            "no fit results found in {}",
            dir.display()
        )));
    }
    Ok(fits)
}

pub fn run(section: &EvaluateConfig, config_path: &Path) -> Result<(), CliError> {
    let fits = load_fits(&section.fits)?;
    let test = super::read_dataset(&section.test_data)?;
    let truth_model = section
        .truth_model
        .as_deref()
        .map(super::read_model)
        .transpose()?;
    let test_labels: Vec<Vec<usize>> = test
        .labels
        .iter()
        .map(|l| l.clone().unwrap_or_default())
        .collect();
    let have_labels = test.labels.iter().all(|l| l.is_some());
    let truth_ctx = truth_model.as_ref().map(|model| TruthContext {
        rewards: &model.rewards,
        truth_history_len: model.spaces.history_len,
        num_states: model.spaces.num_states,
        test_labels: if have_labels { &test_labels } else { &[] },
    });

    // group by model family, keep the top seeds by train log-likelihood
    let mut groups: BTreeMap<(String, usize, usize), Vec<&FitResult>> = BTreeMap::new();
    for fit in &fits {
        groups
            .entry((
                family_label(&fit.config),
                fit.config.history_len,
                fit.config.num_modes,
            ))
            .or_default()
            .push(fit);
    }

    super::ensure_dir(&section.output)?;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut summaries = Vec::new();
    for ((label, history_len, num_modes), mut group) in groups {
        group.sort_by(|a, b| {
            b.final_train_ll()
                .total_cmp(&a.final_train_ll())
                .then(b.final_chain_ll().total_cmp(&a.final_chain_ll()))
                .then(a.seed.cmp(&b.seed))
        });
        group.truncate(section.keep_top);
        let per_seed: Vec<SeedMetrics> = group
            .iter()
            .map(|fit| eval::evaluate_fit(fit, &test.trajectories, truth_ctx.as_ref()))
            .collect::<swirl_core::Result<_>>()?;
        summaries.push(ModelSummary {
            model: if num_modes == 1 { "maxent" } else { "swirl" }.to_string(),
            variant: label.clone(),
            history_len,
            num_modes,
            test_lls: per_seed.iter().map(|s| s.test_ll_per_trajectory).collect(),
        });
        reports.push(MetricReport::from_seeds(
            if num_modes == 1 { "maxent" } else { "swirl" },
            &label,
            history_len,
            num_modes,
            0.0,
            per_seed,
        ));
        println!(
            "evaluated {label} (L={history_len}, Z={num_modes}): kept {} seeds",
            group.len()
        );
    }

    let mut outputs = vec![
        "reports.json".to_string(),
        "metrics.csv".to_string(),
        "comparison.csv".to_string(),
    ];
    std::fs::write(
        section.output.join("comparison.csv"),
        compare_models(&summaries),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;

    if let Some(rob) = &section.robustness {
        let train = super::read_dataset(&rob.train_data)?;
        let env = super::resolve_env_kernel(
            rob.env_model.as_deref(),
            &train.trajectories,
            train.num_states,
            train.num_actions,
        )?;
        let mut config = FitConfig::new(rob.variant, rob.history_len, rob.num_modes);
        config.gamma = rob.defaults.gamma;
        config.alpha = rob.defaults.alpha;
        config.em_iters = rob.defaults.em_iters;
        config.softq_iters = rob.defaults.softq_iters;
        config.softq_tol = rob.defaults.softq_tol;
        config.optimizer = rob.defaults.optimizer;
        config.learning_rate = rob.defaults.learning_rate;
        config.m_step_steps = rob.defaults.m_step_steps;
        config.reward_l2 = rob.defaults.reward_l2;
        config.tolerance = rob.defaults.tolerance;
        let sweep = eval::robustness_sweep(
            &rob.fractions,
            &train.trajectories,
            &test.trajectories,
            &env,
            truth_ctx.as_ref(),
            &config,
            rob.num_seeds,
            rob.keep_top,
            rob.perturb_seed,
        )?;
        for report in &sweep {
            let acc = report
                .aggregate_of("segmentation_accuracy")
                .map(|a| format!("{:.3}", a.median))
                .unwrap_or_else(|| "n/a".to_string());
            println!(
                "robustness fraction {:.2}: median accuracy {acc}",
                report.fraction
            );
        }
        std::fs::write(section.output.join("robustness.csv"), eval::metrics_csv(&sweep))
            .map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(
            section.output.join("robustness.json"),
            eval::reports_to_json(&sweep)?,
        )
        .map_err(|e| CliError::Data(e.to_string()))?;
        outputs.push("robustness.csv".to_string());
        outputs.push("robustness.json".to_string());
    }

    std::fs::write(section.output.join("reports.json"), eval::reports_to_json(&reports)?)
        .map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(section.output.join("metrics.csv"), eval::metrics_csv(&reports))
        .map_err(|e| CliError::Data(e.to_string()))?;

    let mut inputs: Vec<&Path> = vec![section.test_data.as_path()];
    if let Some(truth) = section.truth_model.as_deref() {
        inputs.push(truth);
    }
    manifest::write(&section.output, "evaluate", config_path, &inputs, &outputs)?;
    Ok(())
}
