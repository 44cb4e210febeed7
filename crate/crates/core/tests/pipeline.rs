use margint::additive::{reconstruct_regression, true_global_average, MarginalIntegrator};
use margint::config::{validate_config, RunConfig};
use margint::estimators::DensityMode;
use margint::experiments::{run_batch, run_replication, Scenario};
use margint::stats::{median, summarize};

fn default_scenario() -> Scenario {
    Scenario::new(&RunConfig::default()).unwrap()
}

#[test]
fn reconstruction_recovers_regression_at_center() {
    let scn = default_scenario();
    let mut recon = Vec::new();
    for r in 0..20 {
        let path = scn.simulate(4096.0, scn.replica_seed(4096.0, r)).unwrap();
        let re = scn.regression(&path, DensityMode::KnownF).unwrap();
        let mi = MarginalIntegrator::new(&re, &scn.q, 32).unwrap();
        let comps: Vec<_> = (0..2).map(|l| mi.component(l, &scn.config.component_grid(l)).unwrap()).collect();
        recon.push(reconstruct_regression(&comps, mi.global_average(), &[0.5, 0.5]).unwrap());
    }
    let truth = scn.model.eval(&[0.5, 0.5]);
    assert!((truth - 1.0).abs() < 1e-12);
    for v in &recon {
        assert!((v - truth).abs() < 0.1, "{v}");
    }
}

#[test]
fn reconstruction_error_is_bounded_by_component_errors() {
    let scn = default_scenario();
    let path = scn.simulate(4096.0, 99).unwrap();
    let re = scn.regression(&path, DensityMode::KnownF).unwrap();
    let mi = MarginalIntegrator::new(&re, &scn.q, 32).unwrap();
    let comps: Vec<_> = (0..2).map(|l| mi.component(l, &scn.config.component_grid(l)).unwrap()).collect();
    let g = true_global_average(&scn.model, &scn.q);
    let mut bound = (mi.global_average() - g).abs();
    for (l, c) in comps.iter().enumerate() {
        bound += c
            .grid
            .iter()
            .zip(&c.values)
            .map(|(x, v)| (v - scn.truth(l, *x)).abs())
            .fold(0.0, f64::max);
    }
    let grid = scn.config.component_grid(0);
    let mut worst = 0.0f64;
    for &a in &grid {
        for &b in &grid {
            let v = reconstruct_regression(&comps, mi.global_average(), &[a, b]).unwrap();
            worst = worst.max((v - scn.model.eval(&[a, b])).abs());
        }
    }
    assert!(worst <= bound + 1e-9, "{worst} > {bound}");
}

#[test]
fn reconstruction_error_shrinks_with_horizon() {
    let scn = default_scenario();
    let grid = scn.config.component_grid(0);
    let medians: Vec<f64> = [1024.0, 4096.0, 16384.0]
        .iter()
        .map(|&t| {
            let errs: Vec<f64> = (0..20)
                .map(|r| {
                    let path = scn.simulate(t, scn.replica_seed(t, r)).unwrap();
                    let re = scn.regression(&path, DensityMode::KnownF).unwrap();
                    let mi = MarginalIntegrator::new(&re, &scn.q, 32).unwrap();
                    let comps: Vec<_> = (0..2).map(|l| mi.component(l, &grid).unwrap()).collect();
                    let mut worst = 0.0f64;
                    for &a in grid.iter().step_by(4) {
                        for &b in grid.iter().step_by(4) {
                            let v = reconstruct_regression(&comps, mi.global_average(), &[a, b]).unwrap();
                            worst = worst.max((v - scn.model.eval(&[a, b])).abs());
                        }
                    }
                    worst
                })
                .collect();
            median(&errs)
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
}

#[test]
fn component_mean_matches_truth_plus_bias() {
    // At x = 0.3 the bias h^2 b_1 is not zero; the Monte Carlo mean of the
    // estimate must sit on truth + bias within four standard errors.
    let cfg = validate_config("study.x = 0.3\n").unwrap();
    let scn = Scenario::new(&cfg).unwrap();
    let t = 2048.0;
    let b = run_batch(t, 100, 0.05, |r| run_replication(&scn, t, r, 0, &[0.3], DensityMode::KnownF)).unwrap();
    assert_eq!(b.failed, 0);
    let e: Vec<f64> = b.records.iter().map(|r| r.errors[0]).collect();
    let s = summarize(&e);
    let se = (s.variance / e.len() as f64).sqrt();
    let bias = scn.bias(0, 0.3, t).unwrap();
    assert!((s.mean - bias).abs() < 4.0 * se, "mean {} bias {bias} se {se}", s.mean);
}

#[test]
fn bias_correction_matters_at_large_bandwidth() {
    // c1 = 0.8 gives h = 0.2 at T = 1024, where the bias at x = 0.3 is
    // about two standard deviations.
    let cfg = validate_config("study.x = 0.3\nbandwidth.c1 = 0.8\n").unwrap();
    let scn = Scenario::new(&cfg).unwrap();
    let t = 1024.0;
    let b = run_batch(t, 100, 0.05, |r| run_replication(&scn, t, r, 0, &[0.3], DensityMode::KnownF)).unwrap();
    let e: Vec<f64> = b.records.iter().map(|r| r.errors[0]).collect();
    let s = summarize(&e);
    let sd = s.variance.sqrt();
    let bias = scn.bias(0, 0.3, t).unwrap();
    assert!(bias.abs() > 1.5 * sd, "bias {bias} sd {sd}");
    let shift = s.mean / sd;
    assert!((shift - bias / sd).abs() < 0.5, "uncorrected shift {shift} vs {}", bias / sd);
    let corrected = (s.mean - bias) / sd;
    assert!(corrected.abs() < 0.5, "corrected shift {corrected}");
}

#[test]
fn no_failed_replicas_in_default_scenario() {
    let scn = default_scenario();
    for t in [1024.0, 8192.0] {
        let b = run_batch(t, 100, 0.0, |r| run_replication(&scn, t, r, 0, &[0.5], DensityMode::KnownF)).unwrap();
        assert_eq!(b.failed, 0);
    }
}

#[test]
fn estimated_density_mode_runs() {
    let mut cfg = RunConfig::default();
    cfg.density_mode = DensityMode::EstimatedF;
    let scn = Scenario::new(&cfg).unwrap();
    let known = run_replication(&scn, 1024.0, 0, 0, &[0.3, 0.5], DensityMode::KnownF).unwrap();
    let est = run_replication(&scn, 1024.0, 0, 0, &[0.3, 0.5], DensityMode::EstimatedF).unwrap();
    assert_eq!(known.truths, est.truths);
    for (a, b) in known.estimates.iter().zip(&est.estimates) {
        assert!((a - b).abs() < 0.2, "{a} vs {b}");
    }
}
