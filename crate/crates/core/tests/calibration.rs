use sslab::calibration::{
    estimate_ps_ratio, sample_area_stats, solve_local_resolution, sweep_scales, CalibrationError, Estimator,
    SolveRequest,
};
use sslab::viewgeom::{Fallback, ViewSetSpec};

/// Closed form of the mean ratio for uniform area sampling without rounding
/// or fallback: `(gc/lc)² · E[s_l] · E[1/s_g]`.
fn closed_form(spec: &ViewSetSpec) -> f64 {
    let e_local = (spec.s_min_local + spec.s_l) / 2.0;
    let e_inv_global = if spec.s_g < 1.0 { -spec.s_g.ln() / (1.0 - spec.s_g) } else { 1.0 };
    (spec.gc as f64 / spec.lc as f64).powi(2) * e_local * e_inv_global
}

fn spec(s: f64, gc: usize, lc: usize) -> ViewSetSpec {
    ViewSetSpec { s_g: s, s_l: s, gc, lc, ..ViewSetSpec::default() }
}

#[test]
fn published_settings_sit_near_unit_ratio() {
    for (s, lc) in [(0.3, 128), (0.14, 103)] {
        let r = estimate_ps_ratio(&spec(s, 224, lc), 224, 224, 1_000_000, 11, Estimator::MeanOfRatios).unwrap();
        assert!((0.85..=1.15).contains(&r.mean_ratio), "S={s} LC={lc}: {}", r.mean_ratio);
        assert!(r.std_err > 0.0 && r.n_samples == 1_000_000);
    }
}

#[test]
fn matches_closed_form_without_fallback() {
    for s in [0.14, 0.3, 0.5] {
        let sp = ViewSetSpec { aspect_lo: 1.0, aspect_hi: 1.0, fallback: Fallback::Resample, ..spec(s, 224, 96) };
        let r = estimate_ps_ratio(&sp, 224, 224, 1_000_000, 5, Estimator::MeanOfRatios).unwrap();
        assert_eq!(r.fallbacks, 0);
        let cf = closed_form(&sp);
        assert!((r.mean_ratio - cf).abs() / cf < 0.01, "S={s}: {} vs {cf}", r.mean_ratio);
    }
}

#[test]
fn symmetric_estimators_give_unit_ratio_for_identical_views() {
    // both roles drawn from the same range at the same resolution
    let sp = ViewSetSpec { s_g: 0.3, s_min_local: 0.3, s_l: 1.0, gc: 96, lc: 96, ..ViewSetSpec::default() };
    for est in [Estimator::RatioOfMeans, Estimator::GeometricMean] {
        let r = estimate_ps_ratio(&sp, 224, 224, 200_000, 2, est).unwrap();
        assert!((r.mean_ratio - 1.0).abs() <= 3.0 * r.std_err, "{est:?}: {} ± {}", r.mean_ratio, r.std_err);
    }
    // the per-pair mean is biased upward by Jensen: E[A]·E[1/A] > 1
    let r = estimate_ps_ratio(&sp, 224, 224, 200_000, 2, Estimator::MeanOfRatios).unwrap();
    assert!(r.mean_ratio > 1.0 + 3.0 * r.std_err);
}

#[test]
fn rescaling_identity_holds_on_shared_samples() {
    let sp = spec(0.3, 224, 128);
    let stats = sample_area_stats(&sp, 224, 224, 50_000, 9).unwrap();
    for est in [Estimator::MeanOfRatios, Estimator::RatioOfMeans, Estimator::GeometricMean] {
        let (base, _) = stats.estimate(224, 128, est);
        for lc in [64usize, 96, 112, 150, 224] {
            let (m, _) = stats.estimate(224, lc, est);
            let expect = base * (128.0 / lc as f64).powi(2);
            assert!((m - expect).abs() <= 1e-12 * expect);
        }
    }
}

#[test]
fn solver_recovers_published_resolutions() {
    let req = SolveRequest { n_samples: 1_000_000, seed: 3, tol: 0.05, ..Default::default() };
    let (lc, rep) = solve_local_resolution(&spec(0.3, 224, 1), 224, 224, &req).unwrap();
    assert!((118..=130).contains(&lc), "S=0.3 -> {lc}");
    assert!((rep.mean_ratio - 1.0).abs() <= req.tol + 3.0 * rep.std_err);
    let (lc, rep) = solve_local_resolution(&spec(0.14, 224, 1), 224, 224, &req).unwrap();
    assert!((99..=109).contains(&lc), "S=0.14 -> {lc}");
    assert!((rep.mean_ratio - 1.0).abs() <= req.tol + 3.0 * rep.std_err);
}

#[test]
fn solver_on_identical_distributions() {
    let sp = ViewSetSpec { s_g: 0.3, s_min_local: 0.3, s_l: 1.0, gc: 96, lc: 96, ..ViewSetSpec::default() };
    let geo = SolveRequest { n_samples: 200_000, estimator: Estimator::GeometricMean, tol: 0.02, ..Default::default() };
    assert_eq!(solve_local_resolution(&sp, 224, 224, &geo).unwrap().0, 96);
    // under the per-pair mean no lc <= gc reaches 1
    let mor = SolveRequest { estimator: Estimator::MeanOfRatios, ..geo };
    assert!(matches!(solve_local_resolution(&sp, 224, 224, &mor), Err(CalibrationError::Unreachable { .. })));
}

#[test]
fn sweep_is_monotone_and_deterministic() {
    let grid: Vec<_> = [0.14, 0.2, 0.3, 0.4, 0.6].iter().map(|&s_g| (s_g, 0.14, 96)).collect();
    let base = ViewSetSpec::default();
    let rows = sweep_scales(&grid, &base, 224, 224, 100_000, 1, Estimator::MeanOfRatios).unwrap();
    assert_eq!(rows.len(), 5);
    for w in rows.windows(2) {
        assert!(w[1].mean_ratio < w[0].mean_ratio, "{w:?}");
    }
    let again = sweep_scales(&grid, &base, 224, 224, 100_000, 1, Estimator::MeanOfRatios).unwrap();
    let csv = |r: &[sslab::calibration::SweepRow]| r.iter().map(|x| x.csv_row()).collect::<Vec<_>>().join("\n");
    assert_eq!(csv(&rows), csv(&again));
    let one = sweep_scales(&grid[..1], &base, 224, 224, 1000, 1, Estimator::MeanOfRatios).unwrap();
    assert_eq!(one.len(), 1);
    assert!(matches!(
        sweep_scales(&[], &base, 224, 224, 10, 1, Estimator::MeanOfRatios),
        Err(CalibrationError::EmptyGrid)
    ));
}

#[test]
fn zero_samples_is_an_error() {
    assert_eq!(
        estimate_ps_ratio(&ViewSetSpec::default(), 224, 224, 0, 0, Estimator::MeanOfRatios).unwrap_err(),
        CalibrationError::NoSamples
    );
}
