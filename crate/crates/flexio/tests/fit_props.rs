//! Property and oracle tests for the inverse-optimization learner. The
//! synthetic generator provides the ground truth: its parameters are feasible
//! for the learning program, so a zero-loss point exists on noiseless data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flexio::data::{default_bounds, generate_synthetic, SyntheticSpec, TrueEnvelopeRule};
use flexio::fit::{fit, reconstruction_loss, verify_fit, FitConfig, SolverMode};
use flexio::model::{compute_weights, Hyperparams, ShedCostRule};

fn noiseless_spec() -> SyntheticSpec {
    SyntheticSpec {
        t: 6,
        s: 3,
        d_bl: vec![1.0, 1.3, 1.7, 1.9, 1.4, 1.1],
        rule: TrueEnvelopeRule::Constant { plus: 0.35, minus: 0.35, shed: 0.25 },
        flat_price: 22.0,
        tou: vec![15.0, 15.0, 29.0, 29.0, 15.0, 15.0],
        shed_rule: ShedCostRule::MeanOfShiftCosts,
        t_max: 4,
        noise_sigma: 0.0,
        generation: Vec::new(),
        seed: 13,
    }
}

fn fit_config(spec: &SyntheticSpec, mode: SolverMode) -> FitConfig {
    FitConfig {
        hyper: Hyperparams { t_max: spec.t_max, ..Default::default() },
        solver_mode: mode,
        ..Default::default()
    }
}

#[test]
fn noiseless_recovery_exact_mode() {
    let spec = noiseless_spec();
    let (ds, truths, _) = generate_synthetic(&spec).unwrap();
    let bounds = default_bounds(&ds);
    let prices = vec![spec.prices().unwrap(); spec.s];
    let costs = vec![spec.costs().unwrap(); spec.s];
    let result =
        fit(&ds.days, &bounds, &prices, &costs, &fit_config(&spec, SolverMode::ExactBnb)).unwrap();

    assert!(result.training_loss <= 1e-6, "training loss {}", result.training_loss);
    assert!(result.kkt_max_residual <= 1e-8, "kkt residual {}", result.kkt_max_residual);

    // Feasible-point dominance: the fitted objective cannot exceed the loss
    // at the ground-truth parameters (zero on noiseless data).
    let weights = compute_weights(0.0, spec.s).unwrap();
    let mut truth_loss = 0.0;
    for (s, day) in ds.days.iter().enumerate() {
        let sol = flexio::fop::solve_fop(&prices[s], &costs[s], &truths[s], spec.t_max, &day.gen_hat)
            .unwrap();
        for h in 0..spec.t {
            let recon = truths[s].d_bl[h] + sol.d_sf[h] + sol.d_sd[h] - day.gen_hat[h];
            truth_loss += weights[s] * (recon - day.demand_hat[h]).powi(2);
        }
    }
    assert!(result.training_loss <= truth_loss + 1e-6);

    let report = verify_fit(&result, &prices, &costs, &bounds, spec.t_max);
    assert!(report.max_kkt <= 1e-8);
    assert!(report.theta_feasible.iter().all(|&f| f));
    assert!(report.envelopes_in_bounds);
}

fn random_small_spec(rng: &mut ChaCha8Rng) -> SyntheticSpec {
    let t = rng.gen_range(2..=3);
    let peak = rng.gen_range(26.0..32.0);
    let off = rng.gen_range(12.0..18.0);
    let tou: Vec<f64> = (0..t).map(|h| if h % 2 == 1 { peak } else { off }).collect();
    SyntheticSpec {
        t,
        s: 2,
        d_bl: (0..t).map(|_| rng.gen_range(0.8..2.0)).collect(),
        rule: TrueEnvelopeRule::Constant {
            plus: rng.gen_range(0.1..0.5),
            minus: rng.gen_range(0.1..0.5),
            shed: rng.gen_range(0.05..0.3),
        },
        flat_price: 22.0,
        tou,
        shed_rule: ShedCostRule::MeanOfShiftCosts,
        t_max: t,
        noise_sigma: 0.08,
        generation: Vec::new(),
        seed: rng.gen(),
    }
}

#[test]
fn mode_agreement_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let spec = random_small_spec(&mut rng);
        let (ds, _, _) = generate_synthetic(&spec).unwrap();
        let bounds = default_bounds(&ds);
        let prices = vec![spec.prices().unwrap(); spec.s];
        let costs = vec![spec.costs().unwrap(); spec.s];

        let exact =
            fit(&ds.days, &bounds, &prices, &costs, &fit_config(&spec, SolverMode::ExactBnb))
                .unwrap();
        let alt =
            fit(&ds.days, &bounds, &prices, &costs, &fit_config(&spec, SolverMode::Alternating))
                .unwrap();

        assert!(
            alt.training_loss >= exact.training_loss - 1e-9,
            "case {case}: alternating beat the exact optimum ({} < {})",
            alt.training_loss,
            exact.training_loss
        );
        assert!(
            alt.training_loss <= exact.training_loss * 1.05 + 1e-9,
            "case {case}: alternating loss {} more than 5% above exact {}",
            alt.training_loss,
            exact.training_loss
        );
    }
}

#[test]
fn weight_monotonicity_on_duplicated_day() {
    // Duplicating a training day (so its pattern carries more weight) must
    // not worsen that day's reconstruction.
    let spec = SyntheticSpec { s: 3, noise_sigma: 0.1, ..noiseless_spec() };
    let (ds, _, _) = generate_synthetic(&spec).unwrap();
    let prices_one = spec.prices().unwrap();
    let costs_one = spec.costs().unwrap();

    let day_err = |result: &flexio::fit::FitResult, day: &flexio::model::DaySample, s: usize| {
        let sol = &result.per_day[s];
        (0..spec.t)
            .map(|h| {
                let recon = result.d_bl[h] + sol.d_sf[h] + sol.d_sd[h] - day.gen_hat[h];
                (recon - day.demand_hat[h]).powi(2)
            })
            .sum::<f64>()
    };

    let bounds = default_bounds(&ds);
    let config = fit_config(&spec, SolverMode::Alternating);
    let base = fit(
        &ds.days,
        &bounds,
        &vec![prices_one.clone(); spec.s],
        &vec![costs_one.clone(); spec.s],
        &config,
    )
    .unwrap();
    let base_err = day_err(&base, &ds.days[spec.s - 1], spec.s - 1);

    let mut days2 = ds.days.clone();
    let mut dup = ds.days[spec.s - 1].clone();
    dup.day_index = spec.s;
    days2.push(dup);
    let mut bounds2 = bounds.clone();
    bounds2.push(bounds[spec.s - 1].clone());
    let more = fit(
        &days2,
        &bounds2,
        &vec![prices_one; spec.s + 1],
        &vec![costs_one; spec.s + 1],
        &config,
    )
    .unwrap();
    let more_err = day_err(&more, &days2[spec.s], spec.s);

    assert!(
        more_err <= base_err + 1e-6,
        "duplicated day's error grew: {base_err} -> {more_err}"
    );
}

#[test]
fn fitted_envelopes_respect_bounds_and_loss_is_consistent() {
    let spec = SyntheticSpec { noise_sigma: 0.15, seed: 77, ..noiseless_spec() };
    let (ds, _, _) = generate_synthetic(&spec).unwrap();
    let bounds = default_bounds(&ds);
    let prices = vec![spec.prices().unwrap(); spec.s];
    let costs = vec![spec.costs().unwrap(); spec.s];
    let result =
        fit(&ds.days, &bounds, &prices, &costs, &fit_config(&spec, SolverMode::Alternating))
            .unwrap();

    for s in 0..spec.s {
        for h in 0..spec.t {
            assert!(result.env_plus[s][h] >= -1e-12 && result.env_plus[s][h] <= bounds[s].k_sf_plus[h] + 1e-9);
            assert!(result.env_minus[s][h] >= -1e-12 && result.env_minus[s][h] <= bounds[s].k_sf_minus[h] + 1e-9);
            assert!(result.env_sd[s][h] >= -1e-12 && result.env_sd[s][h] <= bounds[s].k_sd[h] + 1e-9);
        }
    }

    let weights = compute_weights(0.0, spec.s).unwrap();
    let recomputed = reconstruction_loss(&result, &ds.days, &weights);
    assert!(
        (recomputed - result.training_loss).abs() <= 1e-9 * (1.0 + recomputed),
        "{recomputed} vs {}",
        result.training_loss
    );
}
