use bdsde_rmc::basis::{assemble_basis, build_partitions, BasisSystem, Partition1D, DEFAULT_HARD_CAP};
use bdsde_rmc::grid_paths::{build_time_grid, simulate_paths, PathBatch, TimeGrid};
use bdsde_rmc::model::{make_builtin_case, CaseParams, CaseTag, ProblemSpec};
use bdsde_rmc::oracle::closed_form_discrete;
use bdsde_rmc::regression::{solve_least_squares, Spectrum};
use bdsde_rmc::solver::{backward_solve, evaluate_solution, rho_hat, xi, SolverOptions, TruncationProfile};
use bdsde_rmc::harness::error_metrics;
use bdsde_rmc::basis::SampleBasis;
use proptest::prelude::*;

fn setup(tag: CaseTag, n: usize, l: usize, m: usize, seed: u64) -> (ProblemSpec, TimeGrid, BasisSystem, PathBatch) {
    let (spec, _) = make_builtin_case(tag, CaseParams::default()).unwrap();
    let grid = build_time_grid(1.0, n).unwrap();
    let parts = build_partitions(&spec, &grid, l, 10_000, seed).unwrap();
    let basis = assemble_basis(parts, &grid, None, DEFAULT_HARD_CAP).unwrap();
    let batch = simulate_paths(&spec, &grid, m, seed + 1).unwrap();
    (spec, grid, basis, batch)
}

#[test]
fn forward_and_backward_noises_are_uncorrelated() {
    let (_, grid, _, batch) = setup(CaseTag::Martingale, 4, 2, 50_000, 1);
    let n = (batch.n_paths * 4) as f64;
    let (mut sw, mut sb, mut swb, mut sww, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for m in 0..batch.n_paths {
        for k in 0..4 {
            let (w, b) = (batch.dw(m, k), batch.db(m, k));
            sw += w;
            sb += b;
            swb += w * b;
            sww += w * w;
            sbb += b * b;
        }
    }
    let corr = (swb / n - sw * sb / (n * n)) / ((sww / n) * (sbb / n)).sqrt();
    assert!(corr.abs() < 4.0 / n.sqrt(), "corr {corr}");
    assert!((sww / n - grid.h).abs() < 4.0 * grid.h * (2.0 / n).sqrt());
    assert!((sbb / n - grid.h).abs() < 4.0 * grid.h * (2.0 / n).sqrt());
}

#[test]
fn martingale_sample_mean_is_preserved() {
    let (_, _, _, batch) = setup(CaseTag::Martingale, 4, 2, 40_000, 2);
    let mean = (0..batch.n_paths).map(|m| batch.x(m, 4)).sum::<f64>() / batch.n_paths as f64;
    assert!((mean - 1.0).abs() < 4.0 / (batch.n_paths as f64).sqrt());
}

#[test]
fn truncated_outputs_respect_bounds_and_invariance() {
    let (spec, grid, basis, batch) = setup(CaseTag::LinearG, 3, 3, 5_000, 3);
    let trunc = TruncationProfile::fixed(0.5).unwrap();
    let opts = SolverOptions {
        iterations: 2,
        keep_paths: true,
        ..Default::default()
    };
    let r = backward_solve(&spec, &grid, &basis, &batch, &opts, &trunc).unwrap();
    let paths = r.paths.as_ref().unwrap();
    let sqrt_h = grid.h.sqrt();
    let mut clipped = 0;
    for k in 0..=3 {
        let p = basis.eval_batch(k, &batch);
        for m in 0..batch.n_paths {
            let rho = trunc.level(p.norm(m));
            let raw = p.dot(m, &r.theta.alpha[k]);
            let y = paths.y(m, k);
            assert!(y.abs() <= 2.0 * rho + 1e-12);
            assert!((sqrt_h * paths.z(m, k)).abs() <= 2.0 * rho + 1e-12);
            if raw.abs() <= 1.5 * rho {
                assert_eq!(y, raw);
            } else {
                clipped += 1;
            }
        }
    }
    assert_eq!(r.y0_pathwise.len(), batch.n_paths);
    // a small C0 is meant to bite somewhere
    assert!(clipped > 0);
}

#[test]
fn localized_steps_have_well_conditioned_grams() {
    let (spec, grid, basis, batch) = setup(CaseTag::LinearF, 3, 2, 40_000, 4);
    let r = backward_solve(
        &spec,
        &grid,
        &basis,
        &batch,
        &SolverOptions::default(),
        &TruncationProfile::fixed(10.0).unwrap(),
    )
    .unwrap();
    let mut seen = 0;
    for s in &r.steps {
        let loc = &s.localization;
        assert_eq!(loc.event_ok, loc.norm_v <= grid.h && loc.norm_p <= grid.h);
        if loc.event_ok {
            seen += 1;
            assert!(loc.lambda_min >= 1.0 - grid.h);
            assert!(1.0 / loc.lambda_min <= 2.0);
        }
    }
    assert!(seen > 0);
    let ok_all = r.steps.iter().all(|s| s.localization.event_ok);
    assert_eq!(r.steps[0].cumulative_ok, ok_all);
}

#[test]
fn solve_does_not_depend_on_thread_count() {
    let (spec, grid, basis, _) = setup(CaseTag::ConstantG, 3, 3, 10, 5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let batch = simulate_paths(&spec, &grid, 9_000, 77).unwrap();
            let opts = SolverOptions {
                iterations: 2,
                keep_paths: true,
                ..Default::default()
            };
            backward_solve(&spec, &grid, &basis, &batch, &opts, &TruncationProfile::fixed(5.0).unwrap()).unwrap()
        })
    };
    assert!(run(1).same_results(&run(4)));
}

#[test]
fn constant_g_holdout_error_is_close_to_in_sample() {
    let (spec, cf) = make_builtin_case(
        CaseTag::ConstantG,
        CaseParams {
            c: 0.5,
            ..Default::default()
        },
    )
    .unwrap();
    let grid = build_time_grid(1.0, 3).unwrap();
    let parts = build_partitions(&spec, &grid, 3, 10_000, 6).unwrap();
    let basis = assemble_basis(parts, &grid, None, DEFAULT_HARD_CAP).unwrap();
    let batch = simulate_paths(&spec, &grid, 20_000, 7).unwrap();
    let opts = SolverOptions {
        iterations: 2,
        keep_paths: true,
        ..Default::default()
    };
    let r = backward_solve(&spec, &grid, &basis, &batch, &opts, &TruncationProfile::fixed(20.0).unwrap()).unwrap();
    let in_sample = error_metrics(
        r.paths.as_ref().unwrap(),
        &closed_form_discrete(&cf, &batch, &grid).unwrap(),
        grid.h,
    )
    .unwrap();
    let fresh = simulate_paths(&spec, &grid, 20_000, 8).unwrap();
    let held = error_metrics(
        &evaluate_solution(&r, &fresh, &basis).unwrap(),
        &closed_form_discrete(&cf, &fresh, &grid).unwrap(),
        grid.h,
    )
    .unwrap();
    let ratio = held.rmse_y / in_sample.rmse_y;
    assert!(ratio > 0.5 && ratio < 1.5, "ratio {ratio}");
}

#[test]
fn regression_is_a_minimizer() {
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|i| {
            let t = i as f64 / 7.0;
            vec![1.0, t.sin(), (2.0 * t).cos()]
        })
        .collect();
    let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect();
    let design = SampleBasis::from_dense(&rows).unwrap();
    let theta = solve_least_squares(&design, &x).unwrap().theta;
    let loss = |th: &[f64]| {
        rows.iter()
            .zip(&x)
            .map(|(r, xv)| (xv - r.iter().zip(th).map(|(a, b)| a * b).sum::<f64>()).powi(2))
            .sum::<f64>()
            / 50.0
    };
    let best = loss(theta.as_slice());
    for i in 0..100 {
        let a = i as f64 * 0.61;
        let d = [a.cos() * a.sin(), a.sin() * a.sin(), a.cos()];
        let th: Vec<f64> = theta.iter().zip(d).map(|(t, e)| t + 1e-3 * e).collect();
        assert!(loss(&th) >= best - 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn xi_is_odd_and_bounded(x in -50.0f64..50.0) {
        prop_assert_eq!(xi(-x), -xi(x));
        prop_assert!(xi(x).abs() <= 2.0);
        prop_assert!(xi(x).abs() <= x.abs());
    }

    #[test]
    fn rho_hat_is_contractive(rho in 0.01f64..100.0, a in -500.0f64..500.0, b in -500.0f64..500.0) {
        prop_assert!((rho_hat(rho, a) - rho_hat(rho, b)).abs() <= (a - b).abs() + 1e-12);
        prop_assert!(rho_hat(rho, a).abs() <= a.abs().min(2.0 * rho) + 1e-12);
    }

    #[test]
    fn cells_contain_their_points(samples in prop::collection::vec(-5.0f64..5.0, 60..300), cells in 1usize..6, x in -8.0f64..8.0) {
        let (part, _) = Partition1D::from_samples(&samples, cells).unwrap();
        let i = part.cell_of(x);
        prop_assert!(part.edges[i] <= x && x < part.edges[i + 1]);
        let total: f64 = part.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_basis_has_one_entry_per_block(x in -4.0f64..4.0, tail in prop::collection::vec(-2.0f64..2.0, 3)) {
        let (spec, grid, basis, _) = setup(CaseTag::Martingale, 3, 2, 1, 9);
        let _ = (&spec, &grid);
        for k in 0..=3 {
            let mut idx = Vec::new();
            let mut val = Vec::new();
            basis.eval_p_into(k, x, &tail[k..], &mut idx, &mut val);
            prop_assert_eq!(idx.len(), basis.n_blocks(k));
            for (b, &i) in basis.layouts[k].blocks.iter().zip(&idx) {
                prop_assert!((i as usize) >= b.offset && (i as usize) < b.offset + b.size);
            }
        }
    }

    #[test]
    fn gram_spectra_are_nonnegative(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..20)) {
        let design = SampleBasis::from_dense(&rows).unwrap();
        let g = bdsde_rmc::regression::gram(&design);
        prop_assert!((&g - g.transpose()).amax() <= 1e-12);
        prop_assert!(Spectrum::of(&g).min() >= -1e-10);
    }
}
