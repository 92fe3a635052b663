//! Metrics and statistical reporting: held-out log-likelihood,
//! reward-recovery correlation with mode matching, segmentation accuracy,
//! the boxplot IQR outlier rule, and the perturbation-robustness sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::em::{multi_seed_fit, FitConfig, FitResult};
use crate::env::perturb_trajectories;
use crate::error::{Result, SwirlError};
use crate::inference::{forward_backward, map_segments};
use crate::math::{pearson, quantile_sorted};
use crate::model::{EnvKernel, RewardTable, Trajectory};
use crate::softq::PolicyTable;

/// Mean held-out log-likelihood, per trajectory and per timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutLl {
    pub total: f64,
    pub per_trajectory: f64,
    pub per_step: f64,
}

pub fn heldout_ll(
    model: &crate::model::DiscreteHmMdp,
    policies: &[PolicyTable],
    test: &[Trajectory],
) -> Result<HeldoutLl> {
    if test.is_empty() {
        return Err(SwirlError::InvalidInput("empty test set".to_string()));
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    for traj in test {
        total += forward_backward(traj, policies, model)?.log_likelihood;
        steps += traj.len();
    }
    Ok(HeldoutLl {
        total,
        per_trajectory: total / test.len() as f64,
        per_step: total / steps as f64,
    })
}

/// Learned-to-truth mode assignment plus the per-mode Pearson correlations it
/// achieves. Zero-variance (degenerate) inputs report correlation 0 and a flag.
///
/// Correlations come in two flavors: over the action-marginalized reward maps
/// r(h) (the reward-map comparison), and over the flattened (h, a) entries.
/// The map version is primary: the policies identify within-row action
/// profiles only up to the behavior they induce, so flat correlations carry
/// a structural gauge penalty even at perfect recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMatching {
    /// truth mode matched to each learned mode; None when there are more
    /// learned modes than truth modes.
    pub assignment: Vec<Option<usize>>,
    /// Pearson of the action-averaged reward maps, per learned mode.
    pub per_mode_corr: Vec<f64>,
    /// Pearson over flattened (h, a) entries, per learned mode.
    pub per_mode_corr_flat: Vec<f64>,
    pub degenerate: Vec<bool>,
    pub mean_corr: f64,
    pub mean_corr_flat: f64,
}

/// All maximal injective partial maps from 0..from into 0..to.
fn injective_assignments(from: usize, to: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = Vec::new();
    let mut used = vec![false; to];
    let mut cur: Vec<Option<usize>> = vec![None; from];
    fn rec(
        i: usize,
        from: usize,
        to: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == from {
            out.push(cur.clone());
            return;
        }
        // leaving this mode unmatched is allowed only when the remaining
        // learned modes outnumber the remaining truth slots
        let remaining_slots = used.iter().filter(|&&u| !u).count();
        let remaining_modes = from - i;
        if remaining_modes > remaining_slots {
            rec(i + 1, from, to, used, cur, out);
        }
        for t in 0..to {
            if !used[t] {
                used[t] = true;
                cur[i] = Some(t);
                rec(i + 1, from, to, used, cur, out);
                cur[i] = None;
                used[t] = false;
            }
        }
    }
    rec(0, from, to, &mut used, &mut cur, &mut out);
    out
}

/// r(h) = mean_a r(h, a) per mode: the displayed/compared reward map.
fn action_marginal(table: &RewardTable) -> Vec<Vec<f64>> {
    (0..table.num_modes)
        .map(|z| {
            let slice = table.mode(z);
            (0..table.num_augmented)
                .map(|h| {
                    slice[h * table.num_actions..(h + 1) * table.num_actions]
                        .iter()
                        .sum::<f64>()
                        / table.num_actions as f64
                })
                .collect()
        })
        .collect()
}

/// History cells realizable under the kernel: every consecutive pair of the
/// decoded tuple must be reachable by some action. Impossible transitions
/// carry no reward and are excluded from map comparisons.
pub fn realizable_history_cells(env: &EnvKernel, history_len: usize) -> Vec<usize> {
    let aug = crate::model::AugmentedSpace::new(env.num_states, history_len);
    let reach = |from: usize, to: usize| {
        (0..env.num_actions).any(|a| env.prob(from, a, to) > 0.0)
    };
    (0..aug.total_size)
        .filter(|&h| {
            let tuple = aug.decode(h);
            tuple.windows(2).all(|w| reach(w[0], w[1]))
        })
        .collect()
}

/// Correlation-maximizing mode matching over full (unmasked) reward maps.
pub fn reward_correlation(learned: &RewardTable, truth: &RewardTable) -> Result<ModeMatching> {
    reward_correlation_masked(learned, truth, None)
}

/// As [`reward_correlation`], comparing maps on the realizable history cells
/// only (impossible transitions carry no information). When a truth mode's
/// masked map is constant across everything but the current state, the
/// comparison collapses to the per-state map r(s_t), mirroring how such
/// reward maps are displayed and compared.
pub fn reward_correlation_in_env(
    learned: &RewardTable,
    truth: &RewardTable,
    env: &EnvKernel,
    history_len: usize,
) -> Result<ModeMatching> {
    let cells = realizable_history_cells(env, history_len);
    reward_correlation_masked(learned, truth, Some((&cells, env.num_states)))
}

fn reward_correlation_masked(
    learned: &RewardTable,
    truth: &RewardTable,
    mask: Option<(&[usize], usize)>,
) -> Result<ModeMatching> {
    if learned.num_augmented != truth.num_augmented || learned.num_actions != truth.num_actions {
        return Err(SwirlError::ShapeMismatch(format!(
            "reward tables live on different spaces: {}x{} vs {}x{}",
            learned.num_augmented, learned.num_actions, truth.num_augmented, truth.num_actions
        )));
    }
    let zl = learned.num_modes;
    let zt = truth.num_modes;
    let learned_maps = action_marginal(learned);
    let truth_maps = action_marginal(truth);

    // per truth mode: the vector pair extractor under the mask conventions
    type MapProjection = Box<dyn Fn(&[f64]) -> Vec<f64>>;
    let project: Vec<MapProjection> = (0..zt)
        .map(|j| -> MapProjection {
            match mask {
                None => Box::new(|m: &[f64]| m.to_vec()),
                Some((cells, num_states)) => {
                    // does this truth mode depend on anything beyond the
                    // current state, within the realizable cells?
                    let mut by_cur: Vec<Option<f64>> = vec![None; num_states];
                    let mut constant = true;
                    for &h in cells {
                        let cur = h % num_states;
                        let v = truth_maps[j][h];
                        match by_cur[cur] {
                            None => by_cur[cur] = Some(v),
                            Some(seen) if seen != v => {
                                constant = false;
                                break;
                            }
                            _ => {}
                        }
                    }
                    let cells = cells.to_vec();
                    if constant {
                        // state-level map r(s_t): average over realizable
                        // histories ending at each state
                        Box::new(move |m: &[f64]| {
                            let mut sums = vec![0.0; num_states];
                            let mut counts = vec![0usize; num_states];
                            for &h in &cells {
                                sums[h % num_states] += m[h];
                                counts[h % num_states] += 1;
                            }
                            sums.iter()
                                .zip(&counts)
                                .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                                .collect()
                        })
                    } else {
                        Box::new(move |m: &[f64]| cells.iter().map(|&h| m[h]).collect())
                    }
                }
            }
        })
        .collect();

    // pairwise correlation matrices, degeneracy tracked separately
    let mut corr = vec![0.0; zl * zt];
    let mut corr_flat = vec![0.0; zl * zt];
    let mut degen = vec![false; zl * zt];
    for i in 0..zl {
        for j in 0..zt {
            let a = project[j](&learned_maps[i]);
            let b = project[j](&truth_maps[j]);
            match pearson(&a, &b) {
                Some(r) => corr[i * zt + j] = r,
                None => degen[i * zt + j] = true,
            }
            if let Some(r) = pearson(learned.mode(i), truth.mode(j)) {
                corr_flat[i * zt + j] = r;
            }
        }
    }
    let mut best: Option<(f64, Vec<Option<usize>>)> = None;
    for assignment in injective_assignments(zl, zt) {
        let total: f64 = assignment
            .iter()
            .enumerate()
            .map(|(i, a)| a.map_or(0.0, |j| corr[i * zt + j]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, assignment));
        }
    }
    let (_, assignment) = best.expect("at least one assignment exists");
    let pick = |matrix: &[f64]| -> Vec<f64> {
        assignment
            .iter()
            .enumerate()
            .map(|(i, a)| a.map_or(0.0, |j| matrix[i * zt + j]))
            .collect()
    };
    let per_mode_corr = pick(&corr);
    let per_mode_corr_flat = pick(&corr_flat);
    let degenerate: Vec<bool> = assignment
        .iter()
        .enumerate()
        .map(|(i, a)| a.is_none_or(|j| degen[i * zt + j]))
        .collect();
    let matched = per_mode_corr.len().max(1) as f64;
    Ok(ModeMatching {
        mean_corr: per_mode_corr.iter().sum::<f64>() / matched,
        mean_corr_flat: per_mode_corr_flat.iter().sum::<f64>() / matched,
        assignment,
        per_mode_corr,
        per_mode_corr_flat,
        degenerate,
    })
}

/// Accuracy-maximizing assignment, used when no truth rewards exist to match
/// against.
pub fn match_modes_by_accuracy(
    predicted: &[Vec<usize>],
    truth: &[Vec<usize>],
    num_pred_modes: usize,
    num_true_modes: usize,
) -> Result<Vec<Option<usize>>> {
    check_label_shapes(predicted, truth)?;
    let mut agree = vec![0usize; num_pred_modes * num_true_modes];
    for (p, t) in predicted.iter().zip(truth) {
        for (&pz, &tz) in p.iter().zip(t) {
            agree[pz * num_true_modes + tz] += 1;
        }
    }
    let mut best: Option<(usize, Vec<Option<usize>>)> = None;
    for assignment in injective_assignments(num_pred_modes, num_true_modes) {
        let total: usize = assignment
            .iter()
            .enumerate()
            .map(|(i, a)| a.map_or(0, |j| agree[i * num_true_modes + j]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, assignment));
        }
    }
    Ok(best.expect("assignments non-empty").1)
}

fn check_label_shapes(predicted: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<()> {
    if predicted.len() != truth.len() {
        return Err(SwirlError::ShapeMismatch(format!(
            "{} predicted label sequences vs {} true",
            predicted.len(),
            truth.len()
        )));
    }
    for (p, t) in predicted.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(SwirlError::ShapeMismatch(format!(
                "label length mismatch: {} vs {}",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Fraction of timesteps whose assignment-mapped predicted label equals the
/// true label, averaged over trajectories.
pub fn segmentation_accuracy(
    predicted: &[Vec<usize>],
    truth: &[Vec<usize>],
    assignment: &[Option<usize>],
) -> Result<f64> {
    check_label_shapes(predicted, truth)?;
    if predicted.is_empty() {
        return Err(SwirlError::InvalidInput("no label sequences".to_string()));
    }
    let mut per_traj = 0.0;
    for (p, t) in predicted.iter().zip(truth) {
        let hits = p
            .iter()
            .zip(t)
            .filter(|(&pz, &tz)| assignment.get(pz).copied().flatten() == Some(tz))
            .count();
        per_traj += hits as f64 / p.len() as f64;
    }
    Ok(per_traj / predicted.len() as f64)
}

/// Q1/median/Q3 by linear interpolation (the plotting-library default).
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (
        quantile_sorted(&sorted, 0.25),
        quantile_sorted(&sorted, 0.5),
        quantile_sorted(&sorted, 0.75),
    )
}

/// The boxplot rule: values outside [Q1 - 1.5 IQR, Q3 + 1.5 IQR] are
/// outliers. Returns (kept, outliers); needs at least four values.
pub fn iqr_outliers(values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() < 4 {
        return Err(SwirlError::InvalidInput(format!(
            "IQR outlier rule needs >= 4 values, got {}",
            values.len()
        )));
    }
    let (q1, _, q3) = quartiles(values);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let (kept, outliers) = values.iter().partition(|&&v| (lo..=hi).contains(&v));
    Ok((kept, outliers))
}

/// Median/quartile summary of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub outliers: Vec<f64>,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let (q1, median, q3) = quartiles(values);
    let outliers = if values.len() >= 4 {
        iqr_outliers(values).expect("length checked").1
    } else {
        Vec::new()
    };
    Some(Aggregate {
        median,
        q1,
        q3,
        iqr: q3 - q1,
        outliers,
    })
}

/// JSON has no -inf literal; log-likelihoods store non-finite values as
/// null and read them back as -inf (the only non-finite value they take).
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Metrics of one fitted seed on the held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    #[serde(with = "nullable_f64")]
    pub train_ll: f64,
    #[serde(with = "nullable_f64")]
    pub test_ll_per_trajectory: f64,
    #[serde(with = "nullable_f64")]
    pub test_ll_per_step: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_corr_per_mode: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_corr_mean: Option<f64>,
    /// Pearson over flattened (h, a) entries, mean across matched modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_corr_flat_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation_accuracy: Option<f64>,
}

/// Per-seed metrics and aggregates for one model family (and perturbation
/// fraction, for robustness sweeps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub variant: String,
    pub history_len: usize,
    pub num_modes: usize,
    pub fraction: f64,
    pub per_seed: Vec<SeedMetrics>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl MetricReport {
    pub fn from_seeds(
        model: &str,
        variant: &str,
        history_len: usize,
        num_modes: usize,
        fraction: f64,
        per_seed: Vec<SeedMetrics>,
    ) -> MetricReport {
        let mut aggregates = BTreeMap::new();
        let collect = |f: &dyn Fn(&SeedMetrics) -> Option<f64>| -> Vec<f64> {
            per_seed.iter().filter_map(f).collect()
        };
        let mut insert = |name: &str, values: Vec<f64>| {
            if let Some(agg) = aggregate(&values) {
                aggregates.insert(name.to_string(), agg);
            }
        };
        insert("test_ll_per_trajectory", collect(&|s| Some(s.test_ll_per_trajectory)));
        insert("test_ll_per_step", collect(&|s| Some(s.test_ll_per_step)));
        insert("reward_corr_mean", collect(&|s| s.reward_corr_mean));
        insert("reward_corr_flat_mean", collect(&|s| s.reward_corr_flat_mean));
        insert("segmentation_accuracy", collect(&|s| s.segmentation_accuracy));
        MetricReport {
            model: model.to_string(),
            variant: variant.to_string(),
            history_len,
            num_modes,
            fraction,
            per_seed,
            aggregates,
        }
    }

    pub fn aggregate_of(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.get(metric)
    }
}

/// Ground-truth context for metrics that need it.
#[derive(Debug, Clone)]
pub struct TruthContext<'a> {
    /// True per-mode rewards on the truth history length.
    pub rewards: &'a RewardTable,
    pub truth_history_len: usize,
    pub num_states: usize,
    /// Hidden-mode labels of the test trajectories.
    pub test_labels: &'a [Vec<usize>],
}

/// Evaluates one fit on held-out data: test log-likelihood always; reward
/// correlation and segmentation accuracy when ground truth is available. The
/// mode assignment from reward matching is reused for segmentation so one
/// report speaks about one permutation.
pub fn evaluate_fit(
    result: &FitResult,
    test: &[Trajectory],
    truth: Option<&TruthContext>,
) -> Result<SeedMetrics> {
    let model = &result.model;
    let config = &result.config;
    let kernel = crate::softq::augmented_env_kernel(&model.env, &model.spaces);
    let policies: Vec<PolicyTable> = (0..model.spaces.num_modes)
        .map(|z| {
            let q = crate::softq::soft_q_iterate(
                model.rewards.mode(z),
                &kernel,
                model.gamma,
                model.alpha,
                config.softq_iters,
                config.softq_tol,
            )?;
            Ok(crate::softq::boltzmann_policy(&q, model.alpha))
        })
        .collect::<Result<_>>()?;
    let ll = heldout_ll(model, &policies, test)?;

    let mut metrics = SeedMetrics {
        seed: result.seed,
        train_ll: result.final_train_ll(),
        test_ll_per_trajectory: ll.per_trajectory,
        test_ll_per_step: ll.per_step,
        reward_corr_per_mode: None,
        reward_corr_mean: None,
        reward_corr_flat_mean: None,
        segmentation_accuracy: None,
    };

    let Some(truth) = truth else {
        return Ok(metrics);
    };

    // compare reward tables on a common history length
    let learned_l = model.spaces.history_len;
    let common_l = learned_l.max(truth.truth_history_len);
    let learned = if learned_l < common_l {
        model.rewards.expand_history(truth.num_states, learned_l, common_l)
    } else {
        model.rewards.clone()
    };
    let truth_rewards = if truth.truth_history_len < common_l {
        truth
            .rewards
            .expand_history(truth.num_states, truth.truth_history_len, common_l)
    } else {
        truth.rewards.clone()
    };
    let matching = reward_correlation_in_env(&learned, &truth_rewards, &model.env, common_l)?;
    metrics.reward_corr_per_mode = Some(matching.per_mode_corr.clone());
    metrics.reward_corr_mean = Some(matching.mean_corr);
    metrics.reward_corr_flat_mean = Some(matching.mean_corr_flat);

    if truth.test_labels.len() == test.len() {
        let predicted: Vec<Vec<usize>> = test
            .iter()
            .map(|traj| Ok(map_segments(&forward_backward(traj, &policies, model)?)))
            .collect::<Result<_>>()?;
        metrics.segmentation_accuracy = Some(segmentation_accuracy(
            &predicted,
            truth.test_labels,
            &matching.assignment,
        )?);
    }
    Ok(metrics)
}

/// Robustness sweep: for each fraction, perturb the training data (test data
/// untouched), run the multi-seed protocol, and evaluate the kept seeds.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    fractions: &[f64],
    train: &[Trajectory],
    test: &[Trajectory],
    env: &EnvKernel,
    truth: Option<&TruthContext>,
    config: &FitConfig,
    num_seeds: usize,
    keep_top: usize,
    perturb_seed: u64,
) -> Result<Vec<MetricReport>> {
    let mut out = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let (perturbed, _) = perturb_trajectories(
            train,
            env.num_states,
            env.num_actions,
            fraction,
            perturb_seed,
        )?;
        let fits = multi_seed_fit(&perturbed, env, config, num_seeds, keep_top)?;
        let per_seed: Vec<SeedMetrics> = fits
            .iter()
            .map(|fit| evaluate_fit(fit, test, truth))
            .collect::<Result<_>>()?;
        out.push(MetricReport::from_seeds(
            "swirl",
            &config.variant_label(),
            config.history_len,
            config.num_modes,
            fraction,
            per_seed,
        ));
    }
    Ok(out)
}

const REPORT_FORMAT: &str = "swirl-report/1";

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    format: String,
    reports: Vec<MetricReport>,
}

pub fn reports_to_json(reports: &[MetricReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ReportDoc {
        format: REPORT_FORMAT.to_string(),
        reports: reports.to_vec(),
    })?)
}

pub fn reports_from_json(text: &str) -> Result<Vec<MetricReport>> {
    let doc: ReportDoc = serde_json::from_str(text)?;
    if doc.format != REPORT_FORMAT {
        return Err(SwirlError::data(format!(
            "unsupported report format {:?}, expected {REPORT_FORMAT:?}",
            doc.format
        )));
    }
    Ok(doc.reports)
}

/// One CSV row per (model, variant, L, Z, seed, fraction), fixed column
/// order; absent metrics leave their cell empty.
pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from(
        "model,variant,L,Z,seed,fraction,test_ll_per_trajectory,test_ll_per_step,reward_corr_mean,reward_corr_flat_mean,segmentation_accuracy\n",
    );
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for report in reports {
        for s in &report.per_seed {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                report.model,
                report.variant,
                report.history_len,
                report.num_modes,
                s.seed,
                report.fraction,
                s.test_ll_per_trajectory,
                s.test_ll_per_step,
                fmt_opt(s.reward_corr_mean),
                fmt_opt(s.reward_corr_flat_mean),
                fmt_opt(s.segmentation_accuracy),
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn correlation_identity_affine_and_swap() {
        // two genuinely different per-map mode patterns
        let pattern0 = [0.0, 1.0, 2.0, 3.0, 4.0];
        let pattern1 = [5.0, 1.0, 4.0, 0.0, 3.0];
        let mut vals = Vec::new();
        for pattern in [pattern0, pattern1] {
            for h in pattern {
                vals.push(h);
                vals.push(h + 0.5);
            }
        }
        let truth = RewardTable::new(2, 5, 2, vals).unwrap();
        let m = reward_correlation(&truth, &truth).unwrap();
        assert_eq!(m.assignment, vec![Some(0), Some(1)]);
        for r in m.per_mode_corr.iter().chain(&m.per_mode_corr_flat) {
            assert_relative_eq!(*r, 1.0, epsilon = 1e-12);
        }

        // positive affine transform leaves Pearson at 1
        let scaled =
            RewardTable::new(2, 5, 2, truth.values.iter().map(|v| 2.5 * v + 3.0).collect())
                .unwrap();
        let m = reward_correlation(&scaled, &truth).unwrap();
        assert_relative_eq!(m.mean_corr, 1.0, epsilon = 1e-12);

        // swapped modes recover via the matching
        let mut swapped = truth.values[10..].to_vec();
        swapped.extend_from_slice(&truth.values[..10]);
        let swapped = RewardTable::new(2, 5, 2, swapped).unwrap();
        let m = reward_correlation(&swapped, &truth).unwrap();
        assert_eq!(m.assignment, vec![Some(1), Some(0)]);
        assert_relative_eq!(m.mean_corr, 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.mean_corr_flat, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn correlation_of_noise_is_small_and_zero_variance_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // 1250 entries per mode, as in the 5x5 gridworld L=2 table
        let truth_vals: Vec<f64> = (0..1250).map(|i| if i % 60 == 0 { 1.0 } else { 0.0 }).collect();
        let truth = RewardTable::new(1, 250, 5, truth_vals).unwrap();
        let noise =
            RewardTable::new(1, 250, 5, (0..1250).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let m = reward_correlation(&noise, &truth).unwrap();
        assert!(m.mean_corr.abs() < 0.2, "noise correlation {}", m.mean_corr);

        let flat = RewardTable::new(1, 250, 5, vec![3.0; 1250]).unwrap();
        let m = reward_correlation(&flat, &truth).unwrap();
        assert_eq!(m.per_mode_corr, vec![0.0]);
        assert_eq!(m.degenerate, vec![true]);
    }

    #[test]
    fn segmentation_accuracy_cases() {
        let truth = vec![vec![0, 0, 1, 1], vec![1, 0, 1, 0]];
        let identity = vec![Some(0), Some(1)];
        assert_relative_eq!(
            segmentation_accuracy(&truth, &truth, &identity).unwrap(),
            1.0
        );

        // swapped prediction recovers under the matched permutation
        let swapped: Vec<Vec<usize>> = truth
            .iter()
            .map(|t| t.iter().map(|&z| 1 - z).collect())
            .collect();
        let assignment = match_modes_by_accuracy(&swapped, &truth, 2, 2).unwrap();
        assert_eq!(assignment, vec![Some(1), Some(0)]);
        assert_relative_eq!(
            segmentation_accuracy(&swapped, &truth, &assignment).unwrap(),
            1.0
        );

        // uniform random labels sit near one half
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big_truth: Vec<Vec<usize>> = (0..40)
            .map(|_| (0..250).map(|_| rng.random_range(0..2)).collect())
            .collect();
        let noise: Vec<Vec<usize>> = (0..40)
            .map(|_| (0..250).map(|_| rng.random_range(0..2)).collect())
            .collect();
        let acc = segmentation_accuracy(&noise, &big_truth, &identity).unwrap();
        assert!((acc - 0.5).abs() < 0.03, "accuracy {acc}");

        assert!(segmentation_accuracy(&truth, &truth[..1].to_vec(), &identity).is_err());
    }

    #[test]
    fn iqr_rule_examples() {
        let (kept, out) = iqr_outliers(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!(out, vec![100.0]);
        assert_eq!(kept.len(), 4);

        let (kept, out) = iqr_outliers(&[5.0; 6]).unwrap();
        assert!(out.is_empty());
        assert_eq!(kept.len(), 6);

        let symmetric = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let (_, out) = iqr_outliers(&symmetric).unwrap();
        assert!(out.is_empty());

        assert!(iqr_outliers(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn heldout_ll_uniform_policy_closed_form() {
        use crate::em::{e_step, FitConfig, TransitionDependence};
        use crate::env::{build_gridworld, GridworldSpec};

        let (mut model, _) = build_gridworld(&GridworldSpec::default()).unwrap();
        // zero rewards at L=2 give a uniform Boltzmann policy
        model.rewards = RewardTable::zeros(2, model.spaces.num_augmented(), 5);
        let config = FitConfig::new(TransitionDependence::StateDependent, 2, 2);

        // kernel-consistent walk: stay then move right along the top row
        let states = vec![0, 0, 1, 2, 3, 4, 4, 4, 4, 4];
        let actions = vec![4, 3, 3, 3, 3, 4, 4, 4, 4, 0];
        let traj = Trajectory::new(states, actions).unwrap();
        let out = e_step(&model, &[traj.clone()], &config).unwrap();
        let ll = heldout_ll(&model, &out.policies, &[traj.clone()]).unwrap();
        let expect = 10.0 * (1.0f64 / 5.0).ln() + (1.0f64 / 25.0).ln();
        assert_relative_eq!(ll.per_trajectory, expect, epsilon = 1e-9);
        assert_relative_eq!(ll.per_step, expect / 10.0, epsilon = 1e-10);

        // invariant under trajectory reordering
        let traj2 = Trajectory::new(vec![5, 0, 0], vec![0, 4, 4]).unwrap();
        let a = heldout_ll(&model, &out.policies, &[traj.clone(), traj2.clone()]).unwrap();
        let b = heldout_ll(&model, &out.policies, &[traj2, traj]).unwrap();
        assert_relative_eq!(a.per_trajectory, b.per_trajectory, epsilon = 1e-12);

        assert!(heldout_ll(&model, &out.policies, &[]).is_err());
    }

    #[test]
    fn robustness_fraction_zero_reproduces_unperturbed_fits() {
        use crate::em::{multi_seed_fit, FitConfig, TransitionDependence};
        use crate::env::{build_gridworld, optimal_policies, sample_trajectories, GridworldSpec};

        let (truth, _) = build_gridworld(&GridworldSpec::default()).unwrap();
        let policies = optimal_policies(&truth, 200).unwrap();
        let (data, _) = sample_trajectories(&truth, &policies, 6, 40, 4);
        let (train, test) = crate::env::train_test_split(&data, 0.8, 4).unwrap();
        let config = FitConfig {
            em_iters: 3,
            softq_iters: 60,
            m_step_steps: 2,
            alpha: 0.5,
            ..FitConfig::new(TransitionDependence::StateDependent, 1, 2)
        };
        let sweep = robustness_sweep(
            &[0.0], &train, &test, &truth.env, None, &config, 2, 2, 9,
        )
        .unwrap();
        let direct = multi_seed_fit(&train, &truth.env, &config, 2, 2).unwrap();
        let direct_metrics: Vec<SeedMetrics> = direct
            .iter()
            .map(|fit| evaluate_fit(fit, &test, None).unwrap())
            .collect();
        assert_eq!(sweep[0].per_seed, direct_metrics);
    }

    #[test]
    fn report_round_trip_and_csv_schema() {
        let seeds = vec![
            SeedMetrics {
                seed: 0,
                train_ll: -100.0,
                test_ll_per_trajectory: -50.0,
                test_ll_per_step: -1.0,
                reward_corr_per_mode: Some(vec![0.9, 0.8]),
                reward_corr_mean: Some(0.85),
                reward_corr_flat_mean: Some(0.6),
                segmentation_accuracy: Some(0.95),
            },
            SeedMetrics {
                seed: 1,
                train_ll: -101.0,
                test_ll_per_trajectory: -51.0,
                test_ll_per_step: -1.02,
                reward_corr_per_mode: None,
                reward_corr_mean: None,
                reward_corr_flat_mean: None,
                segmentation_accuracy: None,
            },
        ];
        let report = MetricReport::from_seeds("swirl", "S-2", 2, 2, 0.0, seeds);
        assert!(report.aggregate_of("test_ll_per_step").is_some());
        assert_relative_eq!(
            report.aggregate_of("reward_corr_mean").unwrap().median,
            0.85
        );

        let text = reports_to_json(&[report.clone()]).unwrap();
        let back = reports_from_json(&text).unwrap();
        assert_eq!(back, vec![report.clone()]);

        let csv = metrics_csv(&back);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "model,variant,L,Z,seed,fraction,test_ll_per_trajectory,test_ll_per_step,reward_corr_mean,reward_corr_flat_mean,segmentation_accuracy"
        );
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("swirl,S-2,2,2,0,0,"));
        // absent metrics leave empty cells
        assert!(lines[2].ends_with(",,,"));
    }
}
