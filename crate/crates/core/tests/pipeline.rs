use std::f64::consts::PI;

use raycast_evidence::density::{
    self, by_name, make_gaussian, make_rotated_gaussian, make_with_flat_dims, BoundsBox, Problem,
};
use raycast_evidence::laplace::{laplace_log_z, HessianChoice, HessianKind};
use raycast_evidence::linalg::{self, SymMatrix};
use raycast_evidence::pipeline::{run, PipelineConfig, Preset};
use raycast_evidence::reduce::{reduce_relative, ReductionConfig};
use raycast_evidence::{Error, Stage};

fn rel_error(est: f64, truth: f64) -> f64 {
    (est - truth).exp_m1().abs()
}

#[test]
fn gaussian_d8_fast_seed42_within_budget() {
    let (p, t) = by_name("gaussian", 8).unwrap();
    let r = run(&p, &PipelineConfig::preset(Preset::Fast, 42)).unwrap();
    assert!(rel_error(r.log_z, t.true_log_integral) < 1e-9);
    assert!(r.eval_counts.total < 100_000, "{}", r.eval_counts.total);
    assert!(!r.unreliable);
    assert!(r.warnings.is_empty(), "{:?}", r.warnings);
}

#[test]
fn mixture4_d2_conservative() {
    let (p, t) = by_name("mixture4", 2).unwrap();
    let r = run(&p, &PipelineConfig::preset(Preset::Conservative, 1)).unwrap();
    assert_eq!(r.modes.len(), 4);
    assert!(rel_error(r.log_z, t.true_log_integral) <= 1e-4);
}

#[test]
fn eval_counts_partition_the_counter() {
    for (name, d, preset) in [
        ("gaussian", 4, Preset::Fast),
        ("correlated", 3, Preset::Slow),
        ("bimodal-asym", 2, Preset::Conservative),
        ("student-t-3", 2, Preset::Fast),
    ] {
        let (p, _) = by_name(name, d).unwrap();
        let mut config = PipelineConfig::preset(preset, 9);
        config.reduce = true;
        let r = run(&p, &config).unwrap();
        let c = &r.eval_counts;
        assert_eq!(c.stage_sum(), c.total, "{name}");
        assert_eq!(c.total, p.eval_count(), "{name}");
        assert_eq!(c.precheck, 2 * d as u64 + 1, "{name}");
    }
}

#[test]
fn repeated_runs_serialize_identically() {
    let (p, _) = by_name("rotated-cigar", 4).unwrap();
    let config = PipelineConfig::preset(Preset::Slow, 77);
    let a = run(&p, &config).unwrap().to_json();
    let b = run(&p.fresh(), &config).unwrap().to_json();
    assert_eq!(a, b);
}

#[test]
fn timing_is_opt_in() {
    let (p, _) = by_name("gaussian", 2).unwrap();
    let mut config = PipelineConfig::preset(Preset::Fast, 1);
    assert!(run(&p, &config).unwrap().timing.is_none());
    config.timing = true;
    assert!(run(&p, &config).unwrap().timing.is_some());
}

#[test]
fn permuting_axes_permutes_modes() {
    let mean = [1.5, -2.0, 0.25, 3.0, -0.5];
    let var = [0.5, 2.0, 1.0, 4.0, 0.1];
    let perm = [3, 0, 4, 1, 2];
    let (p, t) = make_gaussian(5, &mean, &var).unwrap();
    let pm: Vec<f64> = perm.iter().map(|&i| mean[i]).collect();
    let pv: Vec<f64> = perm.iter().map(|&i| var[i]).collect();
    let (q, _) = make_gaussian(5, &pm, &pv).unwrap();
    let config = PipelineConfig::preset(Preset::Fast, 5);
    let a = run(&p, &config).unwrap();
    let b = run(&q, &config).unwrap();
    assert!((a.log_z - b.log_z).abs() < 1e-10);
    assert!((a.log_z - t.true_log_integral).abs() < 1e-10);
    for (k, &i) in perm.iter().enumerate() {
        assert!((b.modes[0].location[k] - a.modes[0].location[i]).abs() < 1e-6);
    }
}

#[test]
fn full_and_diagonal_paths_agree_on_axis_aligned_targets() {
    for name in ["gaussian", "cigar"] {
        let (p, t) = by_name(name, 6).unwrap();
        let mut config = PipelineConfig::preset(Preset::Fast, 2);
        config.hessian = HessianChoice::Diagonal;
        let diag = run(&p, &config).unwrap();
        config.hessian = HessianChoice::Full;
        let full = run(&p.fresh(), &config).unwrap();
        assert_eq!(diag.modes[0].hessian_kind, HessianKind::Diagonal);
        assert_eq!(full.modes[0].hessian_kind, HessianKind::Full);
        assert!((diag.log_z - full.log_z).abs() < 1e-8, "{name}");
        assert!(rel_error(full.log_z, t.true_log_integral) < 1e-8, "{name}");
    }
}

#[test]
fn flat_padding_runs_in_the_active_subspace() {
    let (p, t) = make_with_flat_dims(
        make_gaussian(3, &[0.5, 0.0, -1.0], &[1.0, 2.0, 0.5]).unwrap(),
        2,
        5.0,
    )
    .unwrap();
    let r = run(&p, &PipelineConfig::preset(Preset::Fast, 3)).unwrap();
    assert_eq!(r.dim, 5);
    assert_eq!(r.active_dim, 3);
    assert_eq!(r.precheck.flat_dims, vec![3, 4]);
    assert_eq!(r.modes[0].location.len(), 5);
    assert!(rel_error(r.log_z, t.true_log_integral) < 1e-9);
}

#[test]
fn reduced_evidence_plus_nuisance_matches_full_evidence() {
    // Precision eigenvalues 4, 1 and 2e-7: the last is a nuisance direction.
    let q = density::random_rotation(3, 11);
    let prec = [4.0, 1.0, 2e-7];
    let mut cov = SymMatrix::zeros(3);
    let mut precision = SymMatrix::zeros(3);
    for i in 0..3 {
        for j in 0..=i {
            cov.set(i, j, (0..3).map(|k| q[k][i] * q[k][j] / prec[k]).sum());
            precision.set(i, j, (0..3).map(|k| q[k][i] * q[k][j] * prec[k]).sum());
        }
    }
    let (p, t) = make_rotated_gaussian(3, &cov).unwrap();
    let center = vec![0.0; 3];
    let full = laplace_log_z(
        p.evaluate(&center),
        3,
        linalg::log_det_pd(&precision).unwrap(),
    );
    assert!((full - t.true_log_integral).abs() < 1e-9);

    let (report, reduced) = reduce_relative(
        &p,
        &center,
        &precision.scaled(-1.0),
        &ReductionConfig::default(),
    )
    .unwrap();
    assert_eq!(report.d_eff, 2);
    assert_eq!(report.nuisance.len(), 1);
    assert!(report.degenerate.is_empty());
    let reduced = reduced.unwrap();
    let r = run(&reduced, &PipelineConfig::preset(Preset::Fast, 4)).unwrap();
    let total = r.log_z + report.log_z_nuisance + report.log_z_degen;
    assert!(
        (total - full).abs() < 1e-8 * full.abs().max(1.0),
        "{total} vs {full}"
    );
}

#[test]
fn pipeline_reduction_report_is_attached() {
    let (p, _) = by_name("correlated", 4).unwrap();
    let mut config = PipelineConfig::preset(Preset::Fast, 8);
    config.reduce = true;
    let r = run(&p, &config).unwrap();
    let rep = r.reduction.expect("reduction requested");
    assert_eq!(rep.d_eff, 4);
    assert_eq!(rep.eigenvalues.len(), 4);
}

#[test]
fn funnel_fails_in_discovery() {
    let (p, _) = by_name("funnel-3", 4).unwrap();
    let e = run(&p, &PipelineConfig::preset(Preset::Fast, 1)).unwrap_err();
    assert_eq!(e.stage(), Some(Stage::Discovery));
    assert_eq!(e.class(), "no_modes_found");
}

#[test]
fn ring_is_flagged() {
    let (p, _) = by_name("ring", 2).unwrap();
    match run(&p, &PipelineConfig::preset(Preset::Fast, 1)) {
        Ok(r) => assert!(r.unreliable && !r.warnings.is_empty()),
        Err(e) => assert!(matches!(
            e.root(),
            Error::NoValidMaxima { .. } | Error::NoModesFound { .. }
        )),
    }
}

#[test]
fn invalid_config_is_rejected() {
    let (p, _) = by_name("gaussian", 2).unwrap();
    let mut config = PipelineConfig::preset(Preset::Fast, 1);
    config.n_oscillations = 0;
    assert!(matches!(
        run(&p, &config).unwrap_err().root(),
        Error::InvalidParameter(_)
    ));
    let mut config = PipelineConfig::preset(Preset::Fast, 1);
    config.eps_rot = -1.0;
    assert!(run(&p, &config).is_err());
    assert_eq!(p.eval_count(), 0);
}

#[test]
fn non_finite_center_is_reported() {
    let p = Problem::from_fn("hole", BoundsBox::cube(2, -1.0, 1.0).unwrap(), |x| {
        if x.iter().all(|v| v.abs() < 1e-9) {
            f64::NAN
        } else {
            -x.iter().map(|v| v * v).sum::<f64>()
        }
    })
    .unwrap();
    let e = run(&p, &PipelineConfig::default()).unwrap_err();
    assert_eq!(e.stage(), Some(Stage::Precheck));
}

#[test]
fn correlated_2d_matches_closed_form() {
    let cov = SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let (p, t) = make_rotated_gaussian(2, &cov).unwrap();
    assert!((t.true_log_integral - ((2.0 * PI).ln() + 0.5 * 0.75f64.ln())).abs() < 1e-12);
    let r = run(&p, &PipelineConfig::preset(Preset::Conservative, 6)).unwrap();
    assert_eq!(r.modes[0].hessian_kind, HessianKind::Full);
    assert!(rel_error(r.log_z, t.true_log_integral) < 1e-8);
}
