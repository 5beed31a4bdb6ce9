//! Posterior predictive checks against their statistical guarantees: a
//! degenerate posterior reproduces the binomial law of the replicated
//! proportion, and a correctly specified model is calibrated (the observed
//! proportion falls inside the central 95% of replicates).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sepfit_core::diagnostics::posterior_predictive;
use sepfit_core::posterior::{Posterior, PriorConfig};
use sepfit_core::sampler::{run_chains, ChainDraws, DrawStats, PosteriorDraws, SamplerConfig};
use sepfit_core::sim::{simulate_scenario, BlockTruth, CovariateGen, GroupGen, SimScenario};

fn scenario(n: usize, groups: usize, beta0: f64, beta_x: f64, sigma: f64) -> SimScenario {
    SimScenario {
        name: "ppc".into(),
        n,
        formula: "y ~ x + (1 | g)".into(),
        covariates: vec![CovariateGen {
            name: "x".into(),
            mean: 0.0,
            sd: 1.0,
        }],
        factors: vec![],
        groups: vec![GroupGen {
            name: "g".into(),
            count: groups,
        }],
        beta0,
        beta: vec![beta_x],
        blocks: vec![BlockTruth {
            group: "g".into(),
            sigma: vec![sigma],
            omega: vec![vec![1.0]],
        }],
        injections: vec![],
    }
}

/// Draws pinned to a single point, for the degenerate-posterior checks.
fn point_mass_draws(theta: Vec<f64>, count: usize, config: SamplerConfig) -> PosteriorDraws {
    let dim = theta.len();
    let stats = DrawStats {
        divergent: false,
        treedepth: 1,
        accept: 1.0,
        energy: 0.0,
    };
    PosteriorDraws {
        chains: vec![ChainDraws {
            draws: vec![theta; count],
            stats: vec![stats; count],
            step_size: 1.0,
            inv_mass: vec![1.0; dim],
        }],
        dim,
        config,
    }
}

#[test]
fn zero_parameters_replicate_half() {
    let products = simulate_scenario(&scenario(600, 10, 0.4, 0.6, 0.7), 3).unwrap();
    let posterior = Posterior::new(&products.design, PriorConfig::default());
    let draws = point_mass_draws(vec![0.0; posterior.dim()], 2000, SamplerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ppc = posterior_predictive(&draws, &posterior, &products.design, &mut rng, 2000).unwrap();
    let mean: f64 =
        ppc.replicated_proportions.iter().sum::<f64>() / ppc.replicated_proportions.len() as f64;
    // Binomial(600, 0.5)/600 has sd ~ 0.0204; 2000 reps shrink the mean
    // error to ~ 0.0005
    assert!((mean - 0.5).abs() < 0.003, "replicated mean {mean}");
    assert!(ppc.fitted_at_mean.iter().all(|p| (p - 0.5).abs() < 1e-12));
}

#[test]
fn degenerate_posterior_replicates_binomial_law() {
    let products = simulate_scenario(&scenario(400, 8, 0.3, 0.8, 0.6), 5).unwrap();
    let posterior = Posterior::new(&products.design, PriorConfig::default());
    // truth on the unconstrained scale: beta0, beta, log sigma, z = u/sigma
    let mut theta = vec![0.0; posterior.dim()];
    theta[0] = 0.3;
    theta[1] = 0.8;
    let bl = posterior.layout.blocks[0].clone();
    theta[bl.log_sigma_off] = 0.6f64.ln();
    for (g, u) in products.truth.u[0].iter().enumerate() {
        theta[bl.z_off + g] = u / 0.6;
    }
    let (params, _) = sepfit_core::posterior::transform(&posterior.layout, &theta);
    let probs = posterior.fitted_probabilities(&params);
    let n = probs.len() as f64;
    let want_mean = probs.iter().sum::<f64>() / n;
    let want_var: f64 = probs.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n);

    let draws = point_mass_draws(theta, 4000, SamplerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ppc = posterior_predictive(&draws, &posterior, &products.design, &mut rng, 4000).unwrap();
    let reps = &ppc.replicated_proportions;
    let m = reps.iter().sum::<f64>() / reps.len() as f64;
    let v = reps.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / (reps.len() - 1) as f64;
    assert!(
        (m - want_mean).abs() < 4.0 * (want_var / reps.len() as f64).sqrt(),
        "replicated mean {m} vs binomial mean {want_mean}"
    );
    assert!(
        (v - want_var).abs() < 0.25 * want_var,
        "replicated variance {v} vs binomial variance {want_var}"
    );
}

#[test]
fn ppc_is_calibrated_for_the_correct_model() {
    // simulate from the model, fit it, and require the observed proportion
    // to fall in the central 95% of replicates in at least 9 of 10 trials
    let config = SamplerConfig {
        chains: 2,
        iterations: 700,
        warmup: 350,
        seed: 0, // per-trial seeds below
        ..Default::default()
    };
    let mut inside = 0;
    for trial in 0..10u64 {
        let products = simulate_scenario(&scenario(240, 12, 0.2, 0.5, 0.8), 100 + trial).unwrap();
        let posterior = Posterior::new(&products.design, PriorConfig::default());
        let cfg = SamplerConfig {
            seed: 500 + trial,
            ..config.clone()
        };
        let draws = run_chains(&posterior, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
        let ppc =
            posterior_predictive(&draws, &posterior, &products.design, &mut rng, 300).unwrap();
        let mut sorted = ppc.replicated_proportions.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[(0.025 * (sorted.len() - 1) as f64).round() as usize];
        let hi = sorted[(0.975 * (sorted.len() - 1) as f64).round() as usize];
        if ppc.observed_proportion >= lo && ppc.observed_proportion <= hi {
            inside += 1;
        }
    }
    assert!(inside >= 9, "observed inside central 95% in {inside}/10 trials");
}

#[test]
fn summary_names_the_parameter_that_fails_rhat() {
    let products = simulate_scenario(&scenario(200, 5, 0.2, 0.4, 0.5), 33).unwrap();
    let posterior = Posterior::new(&products.design, PriorConfig::default());
    let dim = posterior.dim();
    // two displaced noisy chains: beta0 centered at 0 in one, 5 in the other
    let mut state = 1234u64;
    let mut noise = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.2
    };
    let stats = DrawStats {
        divergent: false,
        treedepth: 1,
        accept: 1.0,
        energy: 0.0,
    };
    let chain = |center: f64, noise: &mut dyn FnMut() -> f64| ChainDraws {
        draws: (0..100)
            .map(|_| {
                let mut t = vec![0.0; dim];
                t[0] = center + noise();
                for v in t.iter_mut().skip(1) {
                    *v = noise();
                }
                t
            })
            .collect(),
        stats: vec![stats; 100],
        step_size: 1.0,
        inv_mass: vec![1.0; dim],
    };
    let draws = PosteriorDraws {
        chains: vec![chain(0.0, &mut noise), chain(5.0, &mut noise)],
        dim,
        config: SamplerConfig::default(),
    };
    let summary =
        sepfit_core::diagnostics::summarize(&draws, &posterior, None).unwrap();
    assert!(!summary.verdict_pass);
    let beta0 = summary.parameters.iter().find(|p| p.name == "beta0").unwrap();
    assert!(beta0.rhat > 1.5);
    assert!(
        summary
            .warnings
            .iter()
            .any(|w| w.contains("beta0") && w.contains("R-hat")),
        "warnings must name the offending parameter: {:?}",
        summary.warnings
    );
}

#[test]
fn per_group_intervals_cover_group_observations() {
    let products = simulate_scenario(&scenario(600, 10, 0.2, 0.5, 0.8), 21).unwrap();
    let posterior = Posterior::new(&products.design, PriorConfig::default());
    let cfg = SamplerConfig {
        chains: 2,
        iterations: 700,
        warmup: 350,
        seed: 77,
        ..Default::default()
    };
    let draws = run_chains(&posterior, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ppc = posterior_predictive(&draws, &posterior, &products.design, &mut rng, 300).unwrap();
    assert_eq!(ppc.groups.len(), 10);
    let covered = ppc
        .groups
        .iter()
        .filter(|g| g.observed >= g.lo && g.observed <= g.hi)
        .count();
    // fitted group effects track their own data closely
    assert!(covered >= 9, "only {covered}/10 group intervals covered");
    for g in &ppc.groups {
        assert!(g.lo <= g.hi);
        assert!((0.0..=1.0).contains(&g.lo) && (0.0..=1.0).contains(&g.hi));
    }
}
