//! Certification pipeline on the default configuration, including the
//! negative controls.

use retherm_core::certify::{
    certify_guas, destabilizing_static_delta, empirical_decay_study, empirical_ultimate_bound,
    Excitation,
};
use retherm_core::config::ScenarioConfig;
use retherm_core::pipeline;

#[test]
fn default_family_certifies_and_inflated_bound_fails() {
    let cfg = ScenarioConfig::default();
    let (family, _) = pipeline::build_family(&cfg).unwrap();
    let (gp, delta) = pipeline::build_interconnection(&cfg, &family).unwrap();

    let cert = certify_guas(&gp, &delta).unwrap();
    assert!(cert.pass, "default certificate failed: {cert:?}");
    assert!(cert.margin > 0.0);

    let inflated = delta.inflated(10.0);
    let cert10 = certify_guas(&gp, &inflated).unwrap();
    assert!(!cert10.pass, "x10-inflated bound unexpectedly certified");
}

#[test]
fn certified_loop_decays_under_bounded_excitation() {
    let cfg = ScenarioConfig::default();
    let (family, _) = pipeline::build_family(&cfg).unwrap();
    let (gp, delta) = pipeline::build_interconnection(&cfg, &family).unwrap();
    let closed = gp.close_with(&delta).unwrap();
    assert!(closed.is_stable());

    let excitation = Excitation {
        amplitude: 1.0,
        hold_steps: 8,
        seed: 1000,
    };
    let results = empirical_decay_study(&closed, &excitation, 25, 240, 2.0).unwrap();
    let decayed = results.iter().filter(|r| r.decayed).count();
    assert!(decayed >= 25, "only {decayed}/25 seeds decayed");
    // boundedness: the tail never exceeds the driven response by much
    for r in &results {
        assert!(r.tail_sup <= r.peak_during * 1.5 + 1e-12);
    }
}

/// Negative control: within ten times the declared bound a destabilizing
/// static uncertainty exists, and its closed loop visibly fails to decay.
#[test]
fn inflated_bound_admits_a_destabilizing_uncertainty() {
    let cfg = ScenarioConfig::default();
    let (family, _) = pipeline::build_family(&cfg).unwrap();
    let (gp, delta) = pipeline::build_interconnection(&cfg, &family).unwrap();
    let cert = certify_guas(&gp, &delta).unwrap();
    assert!(cert.pass);

    // the certified bound leaves no static destabilizer in range
    let inside = destabilizing_static_delta(&gp, delta.bound).unwrap();
    assert!(
        inside.is_none(),
        "found a destabilizer within the certified bound"
    );

    let bad = destabilizing_static_delta(&gp, 10.0 * delta.bound)
        .unwrap()
        .expect("no destabilizing static uncertainty within 10x the bound");
    let closed = gp.close_with(&bad).unwrap();
    assert!(closed.spectral_abscissa() > 0.0);

    let bound = empirical_ultimate_bound(
        &closed,
        &Excitation {
            amplitude: 1.0,
            hold_steps: 8,
            seed: 7,
        },
        240,
        2.0,
    )
    .unwrap();
    assert!(!bound.decayed, "unstable loop still decayed: {bound:?}");
}
