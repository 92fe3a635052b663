//! Acceptance suite: nine numbered criteria covering reward recovery, model
//! orderings, perturbation robustness, inference and solver correctness,
//! gradient checks, EM monotonicity, the ARHMM reduction, and the end-to-end
//! CLI protocol. One pass/fail line prints per criterion; run with
//! `cargo test -p swirl-cli --test acceptance -- --nocapture` to see them.
//!
//! The full run executes the complete benchmark (200 trajectories x 500
//! steps, 20 seeds keep 10, plus the robustness sweep) and takes tens of
//! minutes on a desktop CPU. Set SWIRL_ACCEPTANCE_FAST=1 to exercise the
//! wiring at reduced scale; statistical criteria are then reported but not
//! enforced.

use std::path::Path;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swirl_core::baselines::{arhmm_sequence_ll, fit_arhmm, induced_emission, ArhmmConfig, ArhmmModel, ArhmmVariant};
use swirl_core::em::{self, aux_gradients, auxiliary_g, e_step, FitConfig, FitResult, TransitionDependence};
use swirl_core::eval::{metrics_csv, quartiles, reports_from_json, MetricReport};
use swirl_core::inference::{forward_backward, sequence_log_likelihood};
use swirl_core::math::{logsumexp, spearman};
use swirl_core::model::{DiscreteHmMdp, EnvKernel, ModeTransition, RewardTable, Spaces, Trajectory};
use swirl_core::softq::{
    augmented_env_kernel, boltzmann_policy, soft_bellman_apply, soft_q_iterate, PolicyTable,
};

struct Outcome {
    criterion: usize,
    name: &'static str,
    passed: Option<bool>, // None = not enforced in fast mode
    detail: String,
}

fn fast_mode() -> bool {
    std::env::var_os("SWIRL_ACCEPTANCE_FAST").is_some()
}

struct Scale {
    num_trajectories: usize,
    steps: usize,
    num_seeds: usize,
    keep_top: usize,
    em_iters: usize,
    rob_seeds: usize,
    rob_keep: usize,
    rob_em_iters: usize,
    rob_fractions: &'static str,
}

fn scale() -> Scale {
    if fast_mode() {
        Scale {
            num_trajectories: 30,
            steps: 100,
            num_seeds: 3,
            keep_top: 2,
            em_iters: 20,
            rob_seeds: 2,
            rob_keep: 1,
            rob_em_iters: 10,
            rob_fractions: "[0.0, 0.1, 0.5]",
        }
    } else {
        Scale {
            num_trajectories: 200,
            steps: 500,
            num_seeds: 20,
            keep_top: 10,
            em_iters: 100,
            rob_seeds: 8,
            rob_keep: 4,
            rob_em_iters: 70,
            rob_fractions: "[0.0, 0.05, 0.1, 0.2, 0.3, 0.5]",
        }
    }
}

fn experiment_config(root: &Path, s: &Scale) -> String {
    format!(
        r#"
[simulate]
output = "{root}/data"
num_trajectories = {n}
steps = {steps}
train_fraction = 0.8
seed = 7

[fit]
train_data = "{root}/data/train.jsonl"
env_model = "{root}/data/truth_model.json"
output = "{root}/fits"
num_seeds = {seeds}

[fit.defaults]
alpha = 0.5
em_iters = {em}

[[fit.grid]]
kind = "maxent"

[[fit.grid]]
variant = "I"
history_len = 1

[[fit.grid]]
variant = "I"
history_len = 2

[[fit.grid]]
variant = "S"
history_len = 1

[[fit.grid]]
variant = "S"
history_len = 2

[evaluate]
fits = "{root}/fits"
test_data = "{root}/data/test.jsonl"
truth_model = "{root}/data/truth_model.json"
keep_top = {keep}
output = "{root}/reports"

[evaluate.robustness]
train_data = "{root}/data/train.jsonl"
env_model = "{root}/data/truth_model.json"
fractions = {fractions}
num_seeds = {rob_seeds}
keep_top = {rob_keep}
variant = "S"
history_len = 2
num_modes = 2
perturb_seed = 11

[evaluate.robustness.defaults]
alpha = 0.5
em_iters = {rob_em}
"#,
        root = root.display(),
        n = s.num_trajectories,
        steps = s.steps,
        seeds = s.num_seeds,
        em = s.em_iters,
        keep = s.keep_top,
        fractions = s.rob_fractions,
        rob_seeds = s.rob_seeds,
        rob_keep = s.rob_keep,
        rob_em = s.rob_em_iters,
    )
}

fn swirl(args: &[&str], config: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_swirl"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .expect("binary runs")
}

fn median_of(report: &MetricReport, metric: &str) -> f64 {
    report
        .aggregate_of(metric)
        .map(|a| a.median)
        .unwrap_or(f64::NAN)
}

fn find<'a>(reports: &'a [MetricReport], variant: &str) -> &'a MetricReport {
    reports
        .iter()
        .find(|r| r.variant == variant && r.fraction == 0.0)
        .unwrap_or_else(|| panic!("missing report for {variant}"))
}

// ---------------------------------------------------------------------------
// criteria 1-3, 9: the full pipeline and its statistics
// ---------------------------------------------------------------------------

struct PipelineArtifacts {
    reports: Vec<MetricReport>,
    robustness: Vec<MetricReport>,
    fit_traces: Vec<(String, Vec<f64>)>,
    comparison_csv: String,
    metrics_rows: usize,
}

fn run_pipeline(root: &Path, s: &Scale) -> PipelineArtifacts {
    let config_path = root.join("experiment.toml");
    std::fs::write(&config_path, experiment_config(root, s)).unwrap();

    for command in ["simulate", "fit", "evaluate"] {
        let out = swirl(&[command, "--workers", "2"], &config_path);
        assert!(
            out.status.success(),
            "{command} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        eprintln!("[pipeline] {command} done");
    }

    let reports_text = std::fs::read_to_string(root.join("reports/reports.json")).unwrap();
    let reports = reports_from_json(&reports_text).unwrap();
    let robustness_text = std::fs::read_to_string(root.join("reports/robustness.json")).unwrap();
    let robustness = reports_from_json(&robustness_text).unwrap();
    let mut fit_traces = Vec::new();
    for entry in std::fs::read_dir(root.join("fits")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if !name.ends_with(".json") || name.starts_with("manifest") {
            continue;
        }
        let fit = FitResult::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        fit_traces.push((name, fit.train_ll_trace));
    }
    let comparison_csv = std::fs::read_to_string(root.join("reports/comparison.csv")).unwrap();
    let metrics_rows = std::fs::read_to_string(root.join("reports/metrics.csv"))
        .unwrap()
        .lines()
        .count()
        - 1;
    PipelineArtifacts {
        reports,
        robustness,
        fit_traces,
        comparison_csv,
        metrics_rows,
    }
}

fn criterion_1(art: &PipelineArtifacts, enforce: bool) -> Outcome {
    let s2 = median_of(find(&art.reports, "S-2"), "reward_corr_mean");
    let others: Vec<(String, f64)> = ["S-1", "I-2", "I-1", "MaxEnt"]
        .iter()
        .map(|v| (v.to_string(), median_of(find(&art.reports, v), "reward_corr_mean")))
        .collect();
    let beats_all = others.iter().all(|(_, m)| s2 > *m);
    let passed = beats_all && s2 >= 0.8;
    let detail = format!(
        "S-2 median reward-map correlation {s2:.3} (target >= 0.8); others: {}",
        others
            .iter()
            .map(|(v, m)| format!("{v} {m:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Outcome {
        criterion: 1,
        name: "gridworld reward recovery",
        passed: enforce.then_some(passed),
        detail,
    }
}

fn criterion_2(art: &PipelineArtifacts, enforce: bool) -> Outcome {
    let ll = |v: &str| median_of(find(&art.reports, v), "test_ll_per_step");
    let acc = |v: &str| median_of(find(&art.reports, v), "segmentation_accuracy");
    let corr = |v: &str| median_of(find(&art.reports, v), "reward_corr_mean");

    let maxent_ll = ll("MaxEnt");
    let a = ["I-1", "I-2", "S-1", "S-2"].iter().all(|v| ll(v) > maxent_ll);

    let s_acc_min = acc("S-1").min(acc("S-2"));
    let i_acc_max = acc("I-1").max(acc("I-2"));
    // pooled accuracy spread of the I models vs the S models
    let pool = |variants: [&str; 2]| {
        let mut values = Vec::new();
        for v in variants {
            values.extend(
                find(&art.reports, v)
                    .per_seed
                    .iter()
                    .filter_map(|s| s.segmentation_accuracy),
            );
        }
        let (q1, _, q3) = quartiles(&values);
        q3 - q1
    };
    let i_pool_iqr = pool(["I-1", "I-2"]);
    let s_pool_iqr = pool(["S-1", "S-2"]);
    let b = s_acc_min > i_acc_max && i_pool_iqr > s_pool_iqr;

    let tie = 1e-9;
    let c = ["MaxEnt", "I-1", "I-2", "S-1"].iter().all(|v| {
        ll("S-2") >= ll(v) - tie && acc("S-2") >= acc(v) - tie && corr("S-2") >= corr(v) - tie
    });

    let passed = a && b && c;
    let detail = format!(
        "(a) SWIRL > MaxEnt on test LL: {a} (MaxEnt {maxent_ll:.4}); \
         (b) S acc {s_acc_min:.3} > I acc {i_acc_max:.3}, pooled IQR I {i_pool_iqr:.3} > S {s_pool_iqr:.3}: {b}; \
         (c) S-2 best-or-tied everywhere: {c}"
    );
    Outcome {
        criterion: 2,
        name: "ordering claims",
        passed: enforce.then_some(passed),
        detail,
    }
}

fn criterion_3(art: &PipelineArtifacts, enforce: bool) -> Outcome {
    let mut points: Vec<(f64, f64)> = art
        .robustness
        .iter()
        .map(|r| (r.fraction, median_of(r, "segmentation_accuracy")))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    let base = points
        .iter()
        .find(|(f, _)| *f == 0.0)
        .map(|(_, a)| *a)
        .unwrap_or(f64::NAN);
    let stable = points
        .iter()
        .filter(|(f, _)| *f <= 0.1)
        .all(|(_, a)| (a - base).abs() <= 0.05);
    let fractions: Vec<f64> = points.iter().map(|(f, _)| *f).collect();
    let accs: Vec<f64> = points.iter().map(|(_, a)| *a).collect();
    let rho = spearman(&fractions, &accs).unwrap_or(f64::NAN);
    let passed = stable && rho < 0.0;
    let detail = format!(
        "accuracy by fraction: {}; Spearman(fraction, accuracy) = {rho:.3}",
        points
            .iter()
            .map(|(f, a)| format!("{f:.2}:{a:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Outcome {
        criterion: 3,
        name: "perturbation robustness",
        passed: enforce.then_some(passed),
        detail,
    }
}

fn criterion_9(art: &PipelineArtifacts, s: &Scale, enforce: bool) -> Outcome {
    let lines: Vec<&str> = art.comparison_csv.lines().collect();
    let header_ok = lines.first() == Some(&"model,variant,L,Z,median_test_ll,iqr");
    let five_rows = lines.len() == 6;
    let expected_rows = 5 * s.keep_top;
    let rows_ok = art.metrics_rows == expected_rows;
    let fits_ok = art.fit_traces.len() == 5 * s.num_seeds;
    let iqr_present = art
        .reports
        .iter()
        .all(|r| r.aggregate_of("test_ll_per_step").is_some_and(|a| a.iqr >= 0.0));
    let passed = header_ok && five_rows && rows_ok && fits_ok && iqr_present;
    let detail = format!(
        "three CLI commands produced {} fit files ({} expected), {} kept metric rows ({} expected), comparison table {} rows, IQR aggregates present: {iqr_present}",
        art.fit_traces.len(),
        5 * s.num_seeds,
        art.metrics_rows,
        expected_rows,
        lines.len() - 1,
    );
    Outcome {
        criterion: 9,
        name: "protocol fidelity",
        passed: enforce.then_some(passed),
        detail,
    }
}

// ---------------------------------------------------------------------------
// criterion 4: forward-backward vs exhaustive enumeration
// ---------------------------------------------------------------------------

fn random_simplex(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (DiscreteHmMdp, Vec<PolicyTable>, Trajectory) {
    let nz = rng.random_range(1..=3);
    let ns = rng.random_range(2..=4);
    let na = rng.random_range(2..=3);
    let l = rng.random_range(1..=2);
    let t = rng.random_range(2..=6);
    let spaces = Spaces::new(nz, ns, na, l).unwrap();
    let mut kernel = Vec::new();
    for _ in 0..ns * na {
        kernel.extend(random_simplex(ns, rng));
    }
    let env = EnvKernel::new(ns, na, kernel).unwrap();
    let state_dependent = rng.random_bool(0.5);
    let s_eff = if state_dependent { ns } else { 1 };
    let model = DiscreteHmMdp {
        spaces,
        env,
        rewards: RewardTable::new(
            nz,
            spaces.num_augmented(),
            na,
            (0..nz * spaces.num_augmented() * na)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap(),
        mode_transition: ModeTransition::new(
            nz,
            ns,
            state_dependent,
            (0..nz * s_eff * nz).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap(),
        init_state: random_simplex(ns, rng),
        init_mode: random_simplex(nz, rng),
        gamma: rng.random_range(0.3..0.95),
        alpha: rng.random_range(0.2..1.0),
    };
    let aug_kernel = augmented_env_kernel(&model.env, &model.spaces);
    let policies: Vec<PolicyTable> = (0..nz)
        .map(|z| {
            let q = soft_q_iterate(model.rewards.mode(z), &aug_kernel, model.gamma, model.alpha, 150, 1e-12)
                .unwrap();
            boltzmann_policy(&q, model.alpha)
        })
        .collect();
    let states: Vec<usize> = (0..t).map(|_| rng.random_range(0..ns)).collect();
    let actions: Vec<usize> = (0..t).map(|_| rng.random_range(0..na)).collect();
    (model, policies, Trajectory::new(states, actions).unwrap())
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC4);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let (model, policies, traj) = random_instance(&mut rng);
        let post = forward_backward(&traj, &policies, &model).unwrap();
        // exhaustive enumeration over Z^T hidden sequences
        let nz = model.spaces.num_modes;
        let t_len = traj.len();
        let aug = model.spaces.augmented();
        let hist = traj.history_indices(&aug);
        let total = nz.pow(t_len as u32);
        let mut logps = Vec::with_capacity(total);
        let mut seqs = Vec::with_capacity(total);
        for code in 0..total {
            let mut modes = vec![0usize; t_len];
            let mut c = code;
            for m in modes.iter_mut() {
                *m = c % nz;
                c /= nz;
            }
            let mut lp =
                model.init_mode[modes[0]].ln() + model.init_state[traj.states[0]].ln();
            for t in 0..t_len {
                lp += policies[modes[t]].log_prob(hist[t], traj.actions[t]);
                if t + 1 < t_len {
                    lp += model
                        .env
                        .prob(traj.states[t], traj.actions[t], traj.states[t + 1])
                        .ln();
                    lp += model.mode_transition.prob_row(modes[t], traj.states[t])[modes[t + 1]]
                        .ln();
                }
            }
            logps.push(lp);
            seqs.push(modes);
        }
        let log_z = logsumexp(&logps);
        let mut marginals = vec![0.0; t_len * nz];
        let mut pairwise = vec![0.0; (t_len - 1) * nz * nz];
        for (lp, modes) in logps.iter().zip(&seqs) {
            let w = (lp - log_z).exp();
            for (t, &z) in modes.iter().enumerate() {
                marginals[t * nz + z] += w;
            }
            for t in 0..t_len - 1 {
                pairwise[(t * nz + modes[t]) * nz + modes[t + 1]] += w;
            }
        }
        max_err = max_err.max((post.log_likelihood - log_z).abs());
        for (a, b) in post.marginals.iter().zip(&marginals) {
            max_err = max_err.max((a - b).abs());
        }
        for (a, b) in post.pairwise.iter().zip(&pairwise) {
            max_err = max_err.max((a - b).abs());
        }
    }
    Outcome {
        criterion: 4,
        name: "oracle equivalence",
        passed: Some(max_err < 1e-8),
        detail: format!("100 instances, max |fb - enumeration| = {max_err:.2e} (< 1e-8)"),
    }
}

// ---------------------------------------------------------------------------
// criterion 5: soft-Q contraction, residual, shift invariance
// ---------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC5);
    let ns = 5;
    let na = 3;
    let spaces = Spaces::new(1, ns, na, 1).unwrap();
    let mut kernel = Vec::new();
    for _ in 0..ns * na {
        kernel.extend(random_simplex(ns, &mut rng));
    }
    let env = EnvKernel::new(ns, na, kernel).unwrap();
    let aug = augmented_env_kernel(&env, &spaces);
    let gamma = 0.95;
    let alpha = 0.1;
    let reward: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();

    // (a) one sweep contracts pairs by at least gamma
    let mut contraction_ok = true;
    let mut worst_ratio = 0.0f64;
    for _ in 0..100 {
        let q1: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-5.0..5.0)).collect();
        let q2: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-5.0..5.0)).collect();
        let gap = q1.iter().zip(&q2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let t1 = soft_bellman_apply(&q1, &reward, &aug, gamma, alpha);
        let t2 = soft_bellman_apply(&q2, &reward, &aug, gamma, alpha);
        let new_gap = t1.iter().zip(&t2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ratio = new_gap / gap;
        worst_ratio = worst_ratio.max(ratio);
        if new_gap > gamma * gap + 1e-12 {
            contraction_ok = false;
        }
    }

    // (b) residual < 1e-8 within 200 sweeps at gamma = 0.95, unit-scale
    // rewards. The contraction rate bounds the residual after k sweeps by
    // gamma^(k-1) * ||Q1 - Q0||, which at gamma 0.95 cannot reach 1e-8 in
    // 200 sweeps for any reward scale above ~2e-4; measured below.
    let q200 = soft_q_iterate(&reward, &aug, gamma, alpha, 200, 1e-8).unwrap();
    let residual_ok = q200.residual < 1e-8 && q200.iterations_run <= 200;
    let q_full = soft_q_iterate(&reward, &aug, gamma, alpha, 2000, 1e-8).unwrap();

    // (c) policy invariance under constant reward shift
    let shifted: Vec<f64> = reward.iter().map(|r| r + 4.2).collect();
    let qa = soft_q_iterate(&reward, &aug, gamma, alpha, 2000, 1e-13).unwrap();
    let qb = soft_q_iterate(&shifted, &aug, gamma, alpha, 2000, 1e-13).unwrap();
    let pa = boltzmann_policy(&qa, alpha);
    let pb = boltzmann_policy(&qb, alpha);
    let shift_err = pa
        .probs
        .iter()
        .zip(&pb.probs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let shift_ok = shift_err < 1e-8;

    Outcome {
        criterion: 5,
        name: "soft-Q properties",
        passed: Some(contraction_ok && residual_ok && shift_ok),
        detail: format!(
            "contraction ratio <= gamma on 100 pairs: {contraction_ok} (worst {worst_ratio:.4}); \
             residual after 200 sweeps = {:.2e} (< 1e-8: {residual_ok}; 1e-8 first reached at sweep {}); \
             shift invariance err = {shift_err:.2e}",
            q200.residual, q_full.iterations_run
        ),
    }
}

// ---------------------------------------------------------------------------
// criterion 6: finite-difference gradient agreement
// ---------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC6);
    let (nz, ns, na) = (2, 3, 2);
    let spaces = Spaces::new(nz, ns, na, 2).unwrap();
    let mut kernel = Vec::new();
    for _ in 0..ns * na {
        kernel.extend(random_simplex(ns, &mut rng));
    }
    let model = DiscreteHmMdp {
        spaces,
        env: EnvKernel::new(ns, na, kernel).unwrap(),
        rewards: RewardTable::new(
            nz,
            spaces.num_augmented(),
            na,
            (0..nz * spaces.num_augmented() * na)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        )
        .unwrap(),
        mode_transition: ModeTransition::new(
            nz,
            ns,
            true,
            (0..nz * ns * nz).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap(),
        init_state: random_simplex(ns, &mut rng),
        init_mode: random_simplex(nz, &mut rng),
        gamma: 0.9,
        alpha: 0.3,
    };
    let data: Vec<Trajectory> = (0..3)
        .map(|_| {
            let len = 6 + rng.random_range(0..3);
            Trajectory::new(
                (0..len).map(|_| rng.random_range(0..ns)).collect(),
                (0..len).map(|_| rng.random_range(0..na)).collect(),
            )
            .unwrap()
        })
        .collect();
    let config = FitConfig {
        softq_iters: 80,
        softq_tol: 0.0,
        ..FitConfig::new(TransitionDependence::StateDependent, 2, nz)
    };
    let out = e_step(&model, &data, &config).unwrap();
    let grads = aux_gradients(&model, &out.posteriors, &data, &config).unwrap();

    let g_of = |m: &DiscreteHmMdp| {
        let kernel = augmented_env_kernel(&m.env, &m.spaces);
        let policies: Vec<PolicyTable> = (0..nz)
            .map(|z| {
                let q = soft_q_iterate(
                    m.rewards.mode(z),
                    &kernel,
                    m.gamma,
                    m.alpha,
                    config.softq_iters,
                    config.softq_tol,
                )
                .unwrap();
                boltzmann_policy(&q, m.alpha)
            })
            .collect();
        auxiliary_g(m, &policies, &out.posteriors, &data).unwrap().optimizable
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let h = 1e-5;

    let mut trans_err = 0.0f64;
    for idx in 0..model.mode_transition.logits.len() {
        let mut plus = model.clone();
        plus.mode_transition.logits[idx] += h;
        let mut minus = model.clone();
        minus.mode_transition.logits[idx] -= h;
        let fd = (g_of(&plus) - g_of(&minus)) / (2.0 * h);
        trans_err = trans_err.max(rel(fd, grads.trans_logits[idx]));
    }

    let n = model.rewards.values.len();
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| grads.rewards[b].abs().total_cmp(&grads.rewards[a].abs()));
    let mut probe: Vec<usize> = (0..n).step_by((n / 10).max(1)).collect();
    probe.extend(&by_mag[..8]);
    probe.sort_unstable();
    probe.dedup();
    let mut reward_err = 0.0f64;
    for &idx in &probe {
        let mut plus = model.clone();
        plus.rewards.values[idx] += h;
        let mut minus = model.clone();
        minus.rewards.values[idx] -= h;
        let fd = (g_of(&plus) - g_of(&minus)) / (2.0 * h);
        reward_err = reward_err.max(rel(fd, grads.rewards[idx]));
    }

    Outcome {
        criterion: 6,
        name: "gradient correctness",
        passed: Some(trans_err < 1e-4 && reward_err < 1e-3),
        detail: format!(
            "max relative error: transition logits {trans_err:.2e} (< 1e-4), rewards through soft-Q re-solve {reward_err:.2e} (< 1e-3)"
        ),
    }
}

// ---------------------------------------------------------------------------
// criterion 7: generalized-EM and exact-EM monotonicity
// ---------------------------------------------------------------------------

fn criterion_7(art: &PipelineArtifacts, enforce: bool) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut violations = 0usize;
    let mut checked = 0usize;
    for (_, trace) in &art.fit_traces {
        for w in trace.windows(2) {
            checked += 1;
            let drop = w[0] - w[1];
            if drop > 1e-6 {
                violations += 1;
            }
            worst = worst.max(drop);
        }
    }

    // ARHMM exact EM on gridworld state sequences
    let (truth_model, _) = swirl_core::env::build_gridworld(&swirl_core::env::GridworldSpec::default()).unwrap();
    let policies = swirl_core::env::optimal_policies(&truth_model, 300).unwrap();
    let (data, _) = swirl_core::env::sample_trajectories(&truth_model, &policies, 20, 200, 5);
    let mut arhmm_worst: f64 = 0.0;
    for variant in [ArhmmVariant::Plain, ArhmmVariant::Recurrent] {
        let fit = fit_arhmm(
            &data,
            2,
            variant,
            &ArhmmConfig {
                em_iters: 50,
                ..ArhmmConfig::default()
            },
        )
        .unwrap();
        for w in fit.train_ll_trace.windows(2) {
            arhmm_worst = arhmm_worst.max(w[0] - w[1]);
        }
    }

    let passed = violations == 0 && arhmm_worst <= 1e-9;
    Outcome {
        criterion: 7,
        name: "EM ascent",
        passed: enforce.then_some(passed),
        detail: format!(
            "{checked} EM steps across {} gridworld fits: {violations} decreases beyond 1e-6 (worst drop {worst:.2e}); ARHMM worst drop {arhmm_worst:.2e} (<= 1e-9)",
            art.fit_traces.len()
        ),
    }
}

// ---------------------------------------------------------------------------
// criterion 8: deterministic-MDP reduction to ARHMM
// ---------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC8);
    let ns = 6;
    let na = 3;
    // deterministic kernel whose actions map to distinct successors
    let mut t = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            t[(s * na + a) * ns + (s + a + 1) % ns] = 1.0;
        }
    }
    let env = EnvKernel::new(ns, na, t).unwrap();
    let config = FitConfig {
        seed: 13,
        ..FitConfig::new(TransitionDependence::StateIndependent, 1, 2)
    };
    let model = em::init_model(&env, &config).unwrap();
    let out = e_step(
        &model,
        &[Trajectory::new(vec![0, 1, 2], vec![0, 0, 0]).unwrap()],
        &config,
    )
    .unwrap();

    let mut emission = Vec::new();
    for pol in &out.policies {
        emission.extend(induced_emission(pol, &env).unwrap());
    }
    let arhmm = ArhmmModel {
        num_modes: 2,
        num_states: ns,
        emission,
        transition: model.mode_transition.clone(),
        init_mode: model.init_mode.clone(),
        init_state: model.init_state.clone(),
    };

    let mut max_err = 0.0f64;
    for _ in 0..50 {
        let len = 5 + rng.random_range(0..6);
        let mut states = vec![rng.random_range(0..ns)];
        let mut actions = Vec::new();
        for _ in 0..len {
            let a = rng.random_range(0..na);
            actions.push(a);
            states.push((states.last().unwrap() + a + 1) % ns);
        }
        let full_states = states.clone();
        states.pop();
        let traj = Trajectory::new(states, actions).unwrap();
        let swirl_ll = sequence_log_likelihood(&traj, &out.policies, &model).unwrap();
        let arhmm_ll = arhmm_sequence_ll(&arhmm, &full_states).unwrap();
        max_err = max_err.max((swirl_ll - arhmm_ll).abs());
    }
    Outcome {
        criterion: 8,
        name: "ARHMM reduction",
        passed: Some(max_err < 1e-10),
        detail: format!("50 deterministic-MDP sequences, max |SWIRL - ARHMM| = {max_err:.2e} (< 1e-10)"),
    }
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let fast = fast_mode();
    let enforce = !fast;
    let s = scale();
    let dir = tempfile::tempdir().unwrap();
    eprintln!(
        "[acceptance] running {} pipeline in {}",
        if fast { "FAST (reduced, statistical criteria not enforced)" } else { "full-scale" },
        dir.path().display()
    );
    let art = run_pipeline(dir.path(), &s);

    let outcomes = vec![
        criterion_1(&art, enforce),
        criterion_2(&art, enforce),
        criterion_3(&art, enforce),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(&art, enforce),
        criterion_8(),
        criterion_9(&art, &s, true),
    ];

    // keep the robustness CSV shape honest too
    assert!(!metrics_csv(&art.robustness).is_empty());

    let mut failures = Vec::new();
    for outcome in &outcomes {
        let status = match outcome.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "INFO",
        };
        println!(
            "criterion {} [{status}] {}: {}",
            outcome.criterion, outcome.name, outcome.detail
        );
        if outcome.passed == Some(false) {
            failures.push(format!("criterion {} ({})", outcome.criterion, outcome.name));
        }
    }
    assert!(
        failures.is_empty(),
        "acceptance criteria failed: {}",
        failures.join(", ")
    );
}
