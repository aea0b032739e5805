//! Full-scale reduction oracles on the 961-state default plant.

use nalgebra::{DMatrix, DVector};
use retherm_core::config::ScenarioConfig;
use retherm_core::io::{load_family, save_family};
use retherm_core::pipeline;
use retherm_core::reduction::compute_moments;

/// Moments computed through iterated LU solves must agree with an explicit
/// dense-inverse power chain to 1e-10 relative.
#[test]
fn moments_reproducible_across_factorization_orders() {
    let cfg = ScenarioConfig::default();
    let plant = pipeline::build_truth_plant(&cfg).unwrap();
    let model = plant.model(retherm_core::plant::RegimeId::NOMINAL).unwrap();
    let k = 3;

    let via_solves = compute_moments(&model, 0.0, k).unwrap();

    // oracle: explicit dense inverse, applied as repeated matrix powers
    let n = model.order();
    let inv = (DMatrix::<f64>::identity(n, n) * 0.0 - &model.a)
        .try_inverse()
        .unwrap();
    let mut w = DVector::from_column_slice(model.b_e.as_slice());
    let mut sign = 1.0;
    for j in 0..k {
        w = &inv * w;
        let m_oracle = &model.c * &w * sign;
        sign = -sign;
        let rel = (&via_solves[j] - &m_oracle).norm() / m_oracle.norm().max(1e-30);
        assert!(via_solves[j].iter().all(|v| v.is_finite()));
        assert!(rel <= 1e-10, "moment {j} differs across routes: {rel}");
    }
}

/// Every regime's reduction matches the full model's first three moments and
/// DC gain to 1e-8 relative.
#[test]
fn default_regimes_match_moments_and_dc_gain() {
    let cfg = ScenarioConfig::default();
    let modeling = pipeline::build_modeling_plant(&cfg).unwrap();
    let (family, report) = pipeline::build_family(&cfg).unwrap();
    assert!(report.all_pass, "moment report: {report:?}");
    assert_eq!(report.stabilized_count, 0);

    for regime in cfg.regimes() {
        let full = modeling.model(regime).unwrap();
        let reduced = &family.members[&regime];
        let m_full = compute_moments(&full, 0.0, 3).unwrap();
        let m_red = compute_moments(&reduced.ssm, 0.0, 3).unwrap();
        for j in 0..3 {
            let rel = (&m_full[j] - &m_red[j]).norm() / m_full[j].norm().max(1e-30);
            assert!(rel <= 1e-8, "regime {regime} moment {j}: {rel}");
        }
        // DC gain: -C A^{-1} B on both sides
        let dc_full = -&full.c * full.a.clone().lu().solve(&full.b_e).unwrap();
        let dc_red = -&reduced.ssm.c * reduced.ssm.a.clone().lu().solve(&reduced.ssm.b_e).unwrap();
        let rel = (&dc_full - &dc_red).norm() / dc_full.norm();
        assert!(rel <= 1e-8, "regime {regime} DC gain mismatch: {rel}");

        // basis orthonormality at full scale
        let gram = reduced.basis.transpose() * &reduced.basis;
        let eye = DMatrix::identity(gram.nrows(), gram.ncols());
        assert!((gram - eye).amax() <= 1e-10);
    }
}

/// Save/load round-trips the family exactly (matrices and metadata).
#[test]
fn family_round_trips_through_disk() {
    let cfg = ScenarioConfig::default();
    let (family, _) = pipeline::build_family(&cfg).unwrap();
    let dir = std::env::temp_dir().join("retherm_family_roundtrip");
    let _ = std::fs::remove_dir_all(&dir);
    save_family(&dir, &family).unwrap();
    let loaded = load_family(&dir).unwrap();

    assert_eq!(loaded.members.len(), family.members.len());
    for (regime, member) in &family.members {
        let back = &loaded.members[regime];
        assert_eq!(back.ssm.a, member.ssm.a);
        assert_eq!(back.ssm.b_e, member.ssm.b_e);
        assert_eq!(back.ssm.c, member.ssm.c);
        assert_eq!(back.basis, member.basis);
        assert_eq!(back.s0, member.s0);
        assert_eq!(back.k_moments, member.k_moments);
        let ds_orig = family.deltas[regime].scaling;
        let ds_back = loaded.deltas[regime].scaling;
        assert_eq!(ds_orig, ds_back);
    }
    // the rebuilt normalized deltas expose the same peak gains
    for (regime, delta) in &family.deltas {
        if delta.scaling > 0.0 {
            let a = delta.normalized.gain_at(0.0).unwrap();
            let b = loaded.deltas[regime].normalized.gain_at(0.0).unwrap();
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
}
