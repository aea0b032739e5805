//! Glue between the scenario configuration and the pipeline stages: builds
//! the true plant, the reduced model family (from the modeling-plant
//! description), the feedback design and the certification inputs.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::certify::{
    assemble_lft, certify_guas, GeneralizedPlant, StabilityCertificate, UncertaintyRealization,
};
use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::harness::{RunOptions, Strategy};
use crate::plant::{FullOrderPlant, RegimeId};
use crate::predictor::{FeedbackDesign, Scheduler};
use crate::reduction::{center_models, krylov_reduce, moment_relative_errors, ModelFamily};

/// Moment-match verification for one regime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReportRow {
    pub regime: usize,
    pub order: usize,
    pub relative_errors: Vec<f64>,
    pub stabilized: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub tolerance: f64,
    pub rows: Vec<MomentReportRow>,
    pub all_pass: bool,
    pub stabilized_count: usize,
}

/// Moment agreement required between a member and its full-order source.
pub const MOMENT_MATCH_TOLERANCE: f64 = 1e-8;

/// The true plant the scenario simulates.
pub fn build_truth_plant(cfg: &ScenarioConfig) -> Result<FullOrderPlant> {
    FullOrderPlant::build(cfg.plant.clone(), cfg.image_area.clone(), &cfg.regimes())
}

/// The plant description the models are derived from (systematically
/// perturbed by the configured model mismatch).
pub fn build_modeling_plant(cfg: &ScenarioConfig) -> Result<FullOrderPlant> {
    FullOrderPlant::build(cfg.modeling_plant_config(), cfg.image_area.clone(), &cfg.regimes())
}

/// Reduces every configured regime of the modeling plant and centers the
/// result, verifying moment matching on the way.
pub fn build_family(cfg: &ScenarioConfig) -> Result<(ModelFamily, MomentReport)> {
    let modeling = build_modeling_plant(cfg)?;
    let mut members = BTreeMap::new();
    let mut rows = Vec::new();
    for regime in cfg.regimes() {
        let full = modeling.model(regime)?;
        let reduced = krylov_reduce(&full, regime, cfg.reduction.s0, cfg.reduction.k_moments)?;
        let errors = moment_relative_errors(&full, &reduced)?;
        rows.push(MomentReportRow {
            regime: regime.0,
            order: reduced.order(),
            pass: errors.iter().all(|e| *e <= MOMENT_MATCH_TOLERANCE),
            relative_errors: errors,
            stabilized: reduced.stabilized,
        });
        members.insert(regime, reduced);
    }
    let family = center_models(members)?;
    let report = MomentReport {
        tolerance: MOMENT_MATCH_TOLERANCE,
        all_pass: rows.iter().all(|r| r.pass),
        stabilized_count: rows.iter().filter(|r| r.stabilized).count(),
        rows,
    };
    Ok((family, report))
}

pub fn build_design(cfg: &ScenarioConfig, family: &ModelFamily) -> Result<FeedbackDesign> {
    FeedbackDesign::new(family.nominal(), cfg.mark_layout()?, cfg.feedback.rho)
}

pub fn build_scheduler(cfg: &ScenarioConfig, family: ModelFamily) -> Result<Scheduler> {
    cfg.build_scheduler(family)
}

/// Uncertainty class the certified (scheduled) loop actually faces: per
/// in-loop regime, the residual between the true dynamics and the deployed
/// member. The conditioning of the uncertainty set on the scheduler is read
/// as "whenever a regime is active, its member is deployed", so the family
/// spread itself never circulates — only the model-plant mismatch does. The
/// unclamped regime is excluded: no feedback signal exists off the clamp.
pub fn scheduled_residual_uncertainty(
    cfg: &ScenarioConfig,
    family: &ModelFamily,
) -> Result<UncertaintyRealization> {
    let truth = build_truth_plant(cfg)?;
    let mut worst: Option<(f64, crate::ssm::Lti)> = None;
    for regime in cfg.regimes() {
        if regime == RegimeId::UNCLAMPED {
            continue;
        }
        let truth_member =
            krylov_reduce(&truth.model(regime)?, regime, cfg.reduction.s0, cfg.reduction.k_moments)?;
        let residual = truth_member
            .ssm
            .exposure_channel()
            .parallel_sub(&family.member(regime)?.ssm.exposure_channel())?;
        let gain = crate::certify::hinf_norm(&residual, 1e-6)?;
        if worst.as_ref().map(|(g, _)| gain > *g).unwrap_or(true) {
            worst = Some((gain, residual));
        }
    }
    match worst {
        Some((gain, lti)) if gain > 0.0 => {
            UncertaintyRealization::new(lti, gain * (1.0 + 1e-9))
        }
        _ => Ok(UncertaintyRealization {
            lti: crate::ssm::Lti::zero(family.nominal().ssm.n_outputs(), 1),
            bound: 0.0,
        }),
    }
}

/// Assembles the certification interconnection: true plant, nominal
/// predictor with its feedback design, pulled-out uncertainty channel
/// carrying the scheduled-residual class.
pub fn build_interconnection(
    cfg: &ScenarioConfig,
    family: &ModelFamily,
) -> Result<(GeneralizedPlant, UncertaintyRealization)> {
    let truth = build_truth_plant(cfg)?;
    let design = build_design(cfg, family)?;
    let gp = assemble_lft(&truth.model(RegimeId::NOMINAL)?, family, &design)?;
    let delta = scheduled_residual_uncertainty(cfg, family)?
        .inflated(cfg.uncertainty.delta_inflation);
    Ok((gp, delta))
}

/// Full certification for a configuration and its family.
pub fn certify(cfg: &ScenarioConfig, family: &ModelFamily) -> Result<StabilityCertificate> {
    let (gp, delta) = build_interconnection(cfg, family)?;
    certify_guas(&gp, &delta)
}

/// Scenario run options implied by the configuration.
pub fn run_options(cfg: &ScenarioConfig) -> RunOptions {
    RunOptions {
        dt: cfg.dt,
        noise_std: cfg.noise_std,
        seed: cfg.seed,
        rho: cfg.feedback.rho,
        pellicle_at_reclamp: cfg.uncertainty.pellicle_on_reclamp,
        strategies: Strategy::ALL.to_vec(),
        feedback_enabled: true,
    }
}
