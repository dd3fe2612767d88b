//! Acceptance suite. Each test prints one PASS/FAIL line to stdout (bypassing
//! the harness capture) and then asserts its result.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use slowfold::critical::{epsilon_sweep, s_bound, s_grid_max, solve_critical_manifold};
use slowfold::experiment::{sample_slow_values, sample_states};
use slowfold::integrate::{fitted_decay_exponent, integrate_full, integrate_reduced, invariance_residual, Scheme};
use slowfold::lyapunov_perron::{
    backward_grid, backward_window, default_step, evaluate_manifold, sample_manifold_graph, Scaling, SolveOptions,
};
use slowfold::models::{
    make_parabolic_hyperbolic, make_parabolic_ode, make_scalar_linear, make_wave_wave, Common, CouplingParams,
    ModelSpec,
};
use slowfold::noise::{check_ou_scaling, TimeGrid};
use slowfold::spectral::StateVector;
use slowfold::tracking::{solve_tracking_point, tracking_grid, tracking_window, verify_tracking, TrackingOptions};

fn report(label: &str, pass: bool, detail: &str, started: Instant) {
    let line = format!(
        "{} {label}: {detail} [{:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
    assert!(pass, "{line}");
}

fn common(mu: f64, eps: f64, sigma: f64, modes: usize) -> Common {
    Common {
        mu,
        epsilon: eps,
        sigma,
        noise_modes: modes,
    }
}

fn uniform(c: f64) -> CouplingParams {
    CouplingParams {
        f_u: c,
        f_s: c,
        g_u: c,
        g_s: c,
    }
}

fn scalar(eps: f64, sigma: f64) -> ModelSpec {
    make_scalar_linear(1.0, 0.4, 0.3, common(0.3, eps, sigma, 1)).unwrap()
}

fn heat_wave(eps: f64) -> ModelSpec {
    make_parabolic_hyperbolic(2.0, 1.0, 4, uniform(0.1), common(0.5, eps, 0.3, 2)).unwrap()
}

fn reaction(eps: f64) -> ModelSpec {
    let c = CouplingParams {
        f_u: 0.1,
        f_s: 0.15,
        g_u: 0.1,
        g_s: 0.05,
    };
    make_parabolic_ode(3, 2, c, common(0.5, eps, 0.2, 2)).unwrap()
}

fn damped_wave(eps: f64) -> ModelSpec {
    make_wave_wave(0.8, 1.0, 3, uniform(0.03), common(0.2, eps, 0.5, 2)).unwrap()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[test]
fn picard_ratios_within_contraction_constants() {
    let started = Instant::now();
    let tol = 1e-10;
    let mut worst_backward: f64 = f64::NEG_INFINITY;
    let mut worst_forward: f64 = f64::NEG_INFINITY;
    let mut cells = 0;
    type Builder = fn(f64) -> ModelSpec;
    let builders: [(&str, Builder); 3] = [
        ("scalar_linear", |e| scalar(e, 0.5)),
        ("parabolic_hyperbolic", heat_wave),
        ("parabolic_ode", reaction),
    ];
    for (name, build) in builders {
        for eps in [0.1, 0.05, 0.02] {
            let model = build(eps);
            let sys = &model.system;
            let w = sys.weights();
            let (kappa, rho) = (w.contraction_factor().unwrap(), w.rho_factor().unwrap());
            let opts = SolveOptions::with_tol(tol);
            let grid = backward_grid(sys, Scaling::Original, tol, 1.0, 0.0).unwrap();
            let noise = sys.original_noise(grid, 101).unwrap();
            let y0s = sample_slow_values(sys, 6, 1.0, 5);
            let graph = sample_manifold_graph(&y0s, sys, &noise, Scaling::Original, &opts).unwrap();
            let back = graph.samples.iter().map(|s| s.measured_ratio).fold(0.0, f64::max);

            let horizon = 20.0 * eps;
            let topts = TrackingOptions::new(tol, horizon);
            let tgrid = tracking_grid(sys, tol, 3.0, horizon).unwrap();
            let tnoise = sys.original_noise(tgrid, 202).unwrap();
            let fwd = sample_states(sys, 3, 1.0, 9)
                .par_iter()
                .map(|z| solve_tracking_point(z, sys, &tnoise, &topts).unwrap().diagnostics.measured_ratio)
                .reduce(|| 0.0, f64::max);
            worst_backward = worst_backward.max(back - kappa);
            worst_forward = worst_forward.max(fwd - rho);
            cells += 1;
            assert!(back <= kappa + 0.05, "{name} eps {eps}: backward ratio {back} vs kappa {kappa}");
            assert!(fwd <= rho + 0.05, "{name} eps {eps}: tracking ratio {fwd} vs rho {rho}");
        }
    }
    let pass = worst_backward <= 0.05 && worst_forward <= 0.05;
    report(
        "contraction ratios",
        pass,
        &format!(
            "{cells} model/ε cells, max(ratio−κ) = {worst_backward:.4}, max(ratio−ρ) = {worst_forward:.4}, limit 0.05"
        ),
        started,
    );
}

/// Slow-eigenvector slope of `[[-a/eps, k/eps], [c, 0]]`.
fn eigen_slope(a: f64, k: f64, c: f64, eps: f64) -> f64 {
    let tr = -a / eps;
    let det = -c * k / eps;
    let lambda = 0.5 * (tr + (tr * tr - 4.0 * det).sqrt());
    // second row: c v_x = lambda v_y
    lambda / c
}

#[test]
fn scalar_benchmark_slopes() {
    let started = Instant::now();
    let model = scalar(0.01, 0.5);
    let sys = &model.system;
    let opts = SolveOptions::with_tol(1e-12);
    let grid = backward_grid(sys, Scaling::Original, 1e-12, 1.0, 0.0).unwrap();
    let noise = sys.original_noise(grid, 17).unwrap();
    let slope = evaluate_manifold(&[1.0], sys, &noise, &opts).unwrap()[0]
        - evaluate_manifold(&[0.0], sys, &noise, &opts).unwrap()[0];
    let oracle = eigen_slope(1.0, 0.4, 0.3, 0.01);
    assert!((oracle - 0.39952).abs() < 5e-6, "oracle {oracle}");

    let cgrid = backward_grid(sys, Scaling::Critical, 1e-12, 1.0, 0.0).unwrap();
    let xi = sys.unscaled_noise(cgrid, 17).unwrap();
    let critical = solve_critical_manifold(&[1.0], sys, &xi, &opts).unwrap()[0]
        - solve_critical_manifold(&[0.0], sys, &xi, &opts).unwrap()[0];
    let (e1, e2) = ((slope - oracle).abs(), (critical - 0.4).abs());
    report(
        "scalar benchmark",
        e1 <= 1e-6 && e2 <= 1e-10,
        &format!("H slope {slope:.8} vs oracle {oracle:.8} (err {e1:.1e} ≤ 1e-6), H0 slope err {e2:.1e} ≤ 1e-10"),
        started,
    );
}

#[test]
fn manifold_lipschitz_bound_holds() {
    let started = Instant::now();
    let tol = 1e-10;
    let opts = SolveOptions::with_tol(tol);
    let mut lines = Vec::new();
    let mut pass = true;
    let models = [scalar(0.1, 0.5), heat_wave(0.1), reaction(0.1), damped_wave(0.1)];
    for model in &models {
        let sys = &model.system;
        let bound = sys.weights().manifold_lipschitz_bound().unwrap();
        let grid = backward_grid(sys, Scaling::Original, tol, 2.0, 0.0).unwrap();
        let noise = sys.original_noise(grid, 33).unwrap();
        let y0s = sample_slow_values(sys, 200, 2.0, 44);
        let graph = sample_manifold_graph(&y0s, sys, &noise, Scaling::Original, &opts).unwrap();
        let worst = graph
            .samples
            .chunks(2)
            .map(|p| sys.fast.norm(&diff(&p[0].h, &p[1].h)) / sys.slow.norm(&diff(&p[0].y0, &p[1].y0)))
            .fold(0.0, f64::max);
        pass &= worst <= bound;
        lines.push(format!("{} {worst:.4} ≤ {bound:.4}", model.name));
    }
    report("manifold Lipschitz (100 pairs/model)", pass, &lines.join(", "), started);
}

#[test]
fn tracking_points_attract_exponentially() {
    let started = Instant::now();
    let tol = 1e-10;
    let mut worst_ratio: f64 = 0.0;
    let mut worst_exponent_margin = f64::INFINITY;
    let mut fitted = 0;
    for (model, seed) in [(heat_wave(0.05), 7u64), (reaction(0.05), 8)] {
        let sys = &model.system;
        let eps = sys.epsilon;
        let horizon = 20.0 * eps;
        let rate = sys.mu / eps;
        let opts = TrackingOptions::new(tol, horizon);
        let grid = tracking_grid(sys, tol, 3.0, horizon).unwrap();
        let noise = sys.original_noise(grid, seed).unwrap();
        let reports: Vec<_> = sample_states(sys, 10, 1.0, seed)
            .par_iter()
            .map(|z| {
                let pair = solve_tracking_point(z, sys, &noise, &opts).unwrap();
                verify_tracking(&pair, sys, &noise, horizon).unwrap()
            })
            .collect();
        for r in reports {
            worst_ratio = worst_ratio.max(r.max_weighted_ratio);
            if let Some(e) = r.fitted_exponent {
                fitted += 1;
                worst_exponent_margin = worst_exponent_margin.min(e / (0.9 * rate));
            }
        }
    }
    let pass = worst_ratio <= 1.1 && fitted == 20 && worst_exponent_margin >= 1.0;
    report(
        "tracking (20 Z0, 2 models)",
        pass,
        &format!(
            "max weighted ratio {worst_ratio:.4} ≤ 1.1, {fitted}/20 fitted, min exponent/(0.9 μ/ε) = {worst_exponent_margin:.3}"
        ),
        started,
    );
}

#[test]
fn critical_limit_error_is_first_order() {
    let started = Instant::now();
    let epsilons = [0.1, 0.05, 0.025, 0.0125];
    let opts = SolveOptions::with_tol(1e-11);

    let cut = make_parabolic_hyperbolic(
        2.0,
        1.0,
        4,
        CouplingParams {
            f_u: 0.05,
            f_s: 0.1,
            g_u: 0.1,
            g_s: 0.05,
        },
        common(0.5, 0.1, 0.3, 2),
    )
    .unwrap()
    .with_cutoff(4.0)
    .unwrap();
    let sys = &cut.system;
    let seeds: Vec<u64> = (0..20).collect();
    let y0s = sample_slow_values(sys, 3, 1.0, 77);
    let sweep = epsilon_sweep(sys, &seeds, &y0s, &epsilons, &opts).unwrap();
    let slope = sweep.slope().unwrap_or(f64::NAN);

    // noise-free benchmark: the error is exactly the slope gap
    let lin = scalar(0.1, 0.0);
    let lin_sweep = epsilon_sweep(&lin.system, &[0], &[vec![1.0]], &epsilons, &opts).unwrap();
    let (a, k, c) = (1.0, 0.4, 0.3);
    let worst_rel = epsilons
        .iter()
        .zip(&lin_sweep.mean_errors)
        .map(|(e, err)| (err / (k * k * c * e / (a * a * a)) - 1.0).abs())
        .fold(0.0, f64::max);
    report(
        "critical limit O(ε)",
        (0.8..=1.2).contains(&slope) && worst_rel <= 0.05,
        &format!(
            "cutoff model slope {slope:.4} in [0.8, 1.2] over 20 seeds, linear errors within {:.2}% of k²cε/a³",
            100.0 * worst_rel
        ),
        started,
    );
}

#[test]
fn ou_scaling_is_epsilon_invariant() {
    let started = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    for model in [heat_wave(0.1), damped_wave(0.1)] {
        let sys = &model.system;
        let r = check_ou_scaling(&sys.fast, sys.noise_modes, sys.sigma, &[1.0, 0.1, 0.01], 20_000, 5).unwrap();
        let z = r
            .rows
            .iter()
            .map(|row| (row.variance - row.expected).abs() / row.standard_error)
            .fold(0.0, f64::max);
        let ks = r.ks.iter().map(|(_, d, c)| d / c).fold(0.0, f64::max);
        pass &= r.variance_pass && r.ks_pass;
        lines.push(format!("{} max |z| {z:.2} ≤ 3, max KS/crit {ks:.2} ≤ 1", model.name));
    }
    report("noise scaling", pass, &lines.join(", "), started);
}

#[test]
fn invariance_and_reduction() {
    let started = Instant::now();
    let tol = 1e-10;
    let opts = SolveOptions::with_tol(tol);
    let mut lines = Vec::new();
    let mut pass = true;
    for (model, seed) in [(reaction(0.05), 3u64), (heat_wave(0.05), 4)] {
        let sys = &model.system;
        let eps = sys.epsilon;
        let horizon = 20.0 * eps;
        let rate = sys.mu / eps;
        let back = backward_window(sys, Scaling::Original, tol * 0.1, 3.0);
        let dt = default_step(sys, Scaling::Original, back);
        let forward = tracking_window(sys, tol, horizon).max(2.0) + dt;
        let grid = TimeGrid::covering(back + dt, forward, dt).unwrap();
        let noise = sys.original_noise(grid, seed).unwrap();

        let y0 = &sample_slow_values(sys, 1, 1.0, seed)[0];
        let x0 = evaluate_manifold(y0, sys, &noise, &opts).unwrap();
        let on = integrate_full(&StateVector::new(x0, y0.clone()), sys, &noise, 2.0, dt, Scheme::Trapezoidal).unwrap();
        let inv = invariance_residual(&on, sys, &noise, &opts, 10).unwrap();
        let budget = 10.0 * (tol + dt);

        let z0 = &sample_states(sys, 1, 1.0, seed)[0];
        let pair = solve_tracking_point(z0, sys, &noise, &TrackingOptions::new(tol, horizon)).unwrap();
        let full = integrate_full(z0, sys, &noise, horizon, dt, Scheme::Trapezoidal).unwrap();
        let reduced = integrate_reduced(&pair.zbar0.slow, sys, &noise, horizon, dt, Scheme::Trapezoidal, &opts).unwrap();
        let d = full.distances(&reduced, sys);
        let exponent = fitted_decay_exponent(&full.times, &d, (1e-9 * d[0]).max(100.0 * tol)).unwrap_or(f64::NAN);
        pass &= inv.max_residual <= budget && exponent >= 0.9 * rate;
        lines.push(format!(
            "{} residual {:.1e} ≤ {budget:.1e}, exponent {exponent:.2} ≥ {:.2}",
            model.name,
            inv.max_residual,
            0.9 * rate
        ));
    }
    report("invariance and reduction", pass, &lines.join(", "), started);
}

#[test]
fn s_bound_dominates_grid_maximum() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = f64::NEG_INFINITY;
    let mut tuples = 0;
    while tuples < 10 {
        let g1 = rng.random_range(0.5..3.0);
        let g2 = rng.random_range(0.01..2.0);
        let mu = g1 * rng.random_range(0.1..0.9);
        let eps = rng.random_range(0.001..0.5);
        if !(mu > eps * g2 && g1 > eps * g2) {
            continue;
        }
        let (_, bound) = s_bound(g1, g2, mu, eps).unwrap();
        let sampled = s_grid_max(g1, g2, mu, eps, -50.0 / mu, 100_000);
        worst = worst.max(sampled - bound);
        tuples += 1;
    }
    report(
        "S bound dominance",
        worst <= 1e-8,
        &format!("10 tuples × 1e5 points, max(grid max − bound) = {worst:.3e} ≤ 1e-8"),
        started,
    );
}
