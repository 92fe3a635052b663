use swirl_core::em::{fit, e_step, FitConfig, TransitionDependence};
use swirl_core::env::*;
use swirl_core::inference::map_segments;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let em_iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let spec = GridworldSpec::default();
    let (truth_model, _) = build_gridworld(&spec).unwrap();
    let policies = optimal_policies(&truth_model, 400).unwrap();
    let (data, _) = sample_trajectories(&truth_model, &policies, 200, 500, 7);
    let (train_idx, _) = split_indices(200, 0.8, 7).unwrap();
    let train: Vec<_> = train_idx.iter().map(|&i| data[i].clone()).collect();

    let config = FitConfig { seed: 2, em_iters, ..FitConfig::new(TransitionDependence::StateDependent, 2, 2) };
    let result = fit(&train, &truth_model.env, &config).unwrap();
    let model = &result.model;

    println!("init_mode: {:?}", model.init_mode);
    println!("P_z rows: z=0@home {:?}  z=0@12 {:?}  z=0@water {:?}",
        model.mode_transition.prob_row(0, 0), model.mode_transition.prob_row(0, 12), model.mode_transition.prob_row(0, 24));
    println!("          z=1@home {:?}  z=1@12 {:?}  z=1@water {:?}",
        model.mode_transition.prob_row(1, 0), model.mode_transition.prob_row(1, 12), model.mode_transition.prob_row(1, 24));

    // posterior histogram on a few train trajectories
    let out = e_step(model, &train[..10].to_vec(), &config).unwrap();
    let mut hist = [0usize; 10];
    for p in &out.posteriors {
        for t in 0..p.len {
            let m = p.marginal(t, 0);
            hist[(m * 9.999) as usize] += 1;
        }
    }
    println!("posterior p(z=0) histogram (10 bins): {hist:?}");
    let segs = map_segments(&out.posteriors[0]);
    let switches = segs.windows(2).filter(|w| w[0] != w[1]).count();
    println!("traj0 decoded switches: {switches} of {}", segs.len()-1);

    // reward stats per mode
    for z in 0..2 {
        let r = model.rewards.mode(z);
        let mx = r.iter().cloned().fold(f64::MIN, f64::max);
        let mn = r.iter().cloned().fold(f64::MAX, f64::min);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        println!("reward z={z}: min {mn:.3} max {mx:.3} mean {mean:.3}");
    }
}
