//! Scenario configuration: one JSON file drives plant construction, model
//! reduction, feedback design, scheduling and the lot-level experiment.
//! Unknown keys are rejected so typos fail loudly before any computation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{ImageArea, Mark, MarkGroup, MarkLayout};
use crate::harness::LotPlan;
use crate::plant::{PlantConfig, RegimeId};
use crate::predictor::{Scheduler, SchedulerRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub top_marks: usize,
    pub bottom_marks: usize,
    /// Total edge marks, split evenly between the left and right edges.
    pub edge_marks: usize,
    /// Distance of mark rows/columns from the reticle edge, mm.
    pub margin: f64,
    /// Groups measured by the model-based strategies (the status-quo
    /// surrogate always measures every group).
    pub active_groups: Vec<MarkGroup>,
    /// Explicit mark list; overrides the generated layout when present.
    pub explicit_marks: Option<Vec<Mark>>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            top_marks: 6,
            bottom_marks: 6,
            edge_marks: 8,
            margin: 8.0,
            active_groups: vec![MarkGroup::Top, MarkGroup::Bottom],
            explicit_marks: None,
        }
    }
}

impl LayoutConfig {
    pub fn build(&self, reticle_side: f64) -> Result<MarkLayout> {
        let active: BTreeSet<MarkGroup> = self.active_groups.iter().copied().collect();
        if active.is_empty() {
            return Err(Error::Config("at least one mark group must be active".into()));
        }
        let marks = match &self.explicit_marks {
            Some(marks) => marks.clone(),
            None => {
                let mut marks = Vec::new();
                let side = reticle_side;
                let m = self.margin;
                if m <= 0.0 || 2.0 * m >= side {
                    return Err(Error::Config(format!(
                        "layout margin {m} incompatible with reticle side {side}"
                    )));
                }
                let spread = |count: usize, lo: f64, hi: f64| -> Vec<f64> {
                    if count == 1 {
                        vec![0.5 * (lo + hi)]
                    } else {
                        (0..count)
                            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                            .collect()
                    }
                };
                for x in spread(self.top_marks, m, side - m) {
                    marks.push(Mark { x, y: side - m, group: MarkGroup::Top });
                }
                for x in spread(self.bottom_marks, m, side - m) {
                    marks.push(Mark { x, y: m, group: MarkGroup::Bottom });
                }
                let per_side = self.edge_marks / 2;
                let extra = self.edge_marks % 2;
                for y in spread(per_side + extra, 0.25 * side, 0.75 * side) {
                    marks.push(Mark { x: m, y, group: MarkGroup::Edge });
                }
                for y in spread(per_side, 0.25 * side, 0.75 * side) {
                    marks.push(Mark { x: side - m, y, group: MarkGroup::Edge });
                }
                marks
            }
        };
        let layout = MarkLayout::new(marks, active);
        layout.validate(reticle_side)?;
        if layout.n_active() == 0 {
            return Err(Error::Config("no marks fall in the active groups".into()));
        }
        Ok(layout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LotPlanConfig {
    pub n_lots: usize,
    pub wafers_per_lot: usize,
    pub wafer_expose_time: f64,
    pub wafer_swap_time: f64,
    /// Includes the unclamp/reclamp sequence between lots.
    pub lot_swap_time: f64,
    /// Extra alignment time per wafer when edge marks are measured.
    pub edge_mark_time: f64,
}

impl Default for LotPlanConfig {
    fn default() -> Self {
        LotPlanConfig {
            n_lots: 2,
            wafers_per_lot: 16,
            wafer_expose_time: 10.0,
            wafer_swap_time: 3.0,
            lot_swap_time: 30.0,
            edge_mark_time: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub dwell_min: f64,
    /// Explicit rule table; the default clamp-cycle rules are used when
    /// absent.
    pub rules: Option<Vec<SchedulerRule>>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            dwell_min: 1.0,
            rules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    /// Krylov expansion point, 1/s. DC by default: long-horizon drift
    /// accuracy dominates overlay.
    pub s0: f64,
    pub k_moments: usize,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        ReductionConfig { s0: 0.0, k_moments: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackConfig {
    /// Corrector speed relative to the open model (> 1).
    pub rho: f64,
    /// Regularization of the sparse-to-dense fit.
    pub lambda: f64,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig { rho: 1.5, lambda: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    /// Turn the pellicle on at the lot-2 reclamp (moves the plant to the
    /// pellicle-reclamp regime).
    pub pellicle_on_reclamp: bool,
    /// Multiplier on the declared uncertainty bound fed to certification.
    pub delta_inflation: f64,
    /// Relative systematic error of the plant description the model family
    /// is built from. The true plant keeps the configured parameters; the
    /// modeling plant perturbs them by this fraction, so predictions drift
    /// and measurements have real work to do.
    pub model_mismatch: f64,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        UncertaintyConfig {
            pellicle_on_reclamp: false,
            delta_inflation: 1.0,
            model_mismatch: 0.05,
        }
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub plant: PlantConfig,
    pub image_area: ImageArea,
    pub layout: LayoutConfig,
    pub lotplan: LotPlanConfig,
    pub scheduler: SchedulerConfig,
    pub reduction: ReductionConfig,
    pub feedback: FeedbackConfig,
    pub uncertainty: UncertaintyConfig,
    /// Measurement noise standard deviation, nm.
    pub noise_std: f64,
    pub seed: u64,
    /// Simulation step, s.
    pub dt: f64,
    pub out_dir: String,
    /// Regime indices the plant and family are built for.
    pub regimes: Vec<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            plant: PlantConfig::default(),
            image_area: ImageArea {
                x_min: 26.0,
                x_max: 126.0,
                y_min: 36.0,
                y_max: 116.0,
                exposure_power: 1000.0,
            },
            layout: LayoutConfig::default(),
            lotplan: LotPlanConfig::default(),
            scheduler: SchedulerConfig::default(),
            reduction: ReductionConfig::default(),
            feedback: FeedbackConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            noise_std: 0.1,
            seed: 7,
            dt: 0.5,
            out_dir: "out".into(),
            regimes: vec![0, 1, 2],
        }
    }
}

impl ScenarioConfig {
    /// The small-exposure variant of the default scenario.
    pub fn small_image_area() -> Self {
        ScenarioConfig {
            image_area: ImageArea {
                x_min: 56.0,
                x_max: 96.0,
                y_min: 61.0,
                y_max: 91.0,
                exposure_power: 1000.0,
            },
            ..ScenarioConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.image_area.validate(self.plant.reticle_side)?;
        self.layout.build(self.plant.reticle_side)?;

        if self.regimes.is_empty() {
            return Err(Error::Config("regime list must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for &r in &self.regimes {
            if !seen.insert(r) {
                return Err(Error::Config(format!("duplicate regime id {r}")));
            }
            RegimeId(r).conditions(&self.plant)?;
        }
        if !seen.contains(&0) {
            return Err(Error::Config("regime 0 (nominal) must be present".into()));
        }
        for needed in [1usize, 2] {
            if !seen.contains(&needed) {
                return Err(Error::Config(format!(
                    "the lot cycle visits regime {needed}; add it to `regimes`"
                )));
            }
        }
        if self.uncertainty.pellicle_on_reclamp && !seen.contains(&3) {
            return Err(Error::Config(
                "pellicle_on_reclamp needs regime 3 in `regimes`".into(),
            ));
        }

        if self.reduction.k_moments < 1 {
            return Err(Error::Config("k_moments must be at least 1".into()));
        }
        if self.feedback.rho <= 1.0 {
            return Err(Error::Config("feedback.rho must exceed 1".into()));
        }
        if self.feedback.lambda < 0.0 {
            return Err(Error::Config("feedback.lambda must be non-negative".into()));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.uncertainty.delta_inflation <= 0.0 {
            return Err(Error::Config("delta_inflation must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.uncertainty.model_mismatch) {
            return Err(Error::Config(
                "model_mismatch must lie in [0, 0.5)".into(),
            ));
        }
        self.modeling_plant_config().validate()?;
        if self.scheduler.dwell_min < 0.0 {
            return Err(Error::Config("dwell_min must be non-negative".into()));
        }

        let lp = &self.lotplan;
        if lp.wafers_per_lot < 1 {
            return Err(Error::Config("wafers_per_lot must be at least 1".into()));
        }
        if lp.n_lots < 1 {
            return Err(Error::Config("n_lots must be at least 1".into()));
        }
        for (name, v) in [
            ("wafer_expose_time", lp.wafer_expose_time),
            ("wafer_swap_time", lp.wafer_swap_time),
            ("lot_swap_time", lp.lot_swap_time),
            ("edge_mark_time", lp.edge_mark_time),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        // the simulated timeline advances in whole steps
        for (name, v) in [
            ("wafer_expose_time", lp.wafer_expose_time),
            ("wafer_swap_time", lp.wafer_swap_time),
            ("lot_swap_time", lp.lot_swap_time),
        ] {
            let steps = v / self.dt;
            if (steps - steps.round()).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "{name} = {v} is not an integer multiple of dt = {}",
                    self.dt
                )));
            }
        }
        Ok(())
    }

    pub fn regimes(&self) -> Vec<RegimeId> {
        self.regimes.iter().map(|&r| RegimeId(r)).collect()
    }

    /// Plant description the reduced family is built from: the true
    /// parameters systematically perturbed by `uncertainty.model_mismatch`
    /// (fixed signs, standing in for first-principles modeling bias).
    pub fn modeling_plant_config(&self) -> PlantConfig {
        let mm = self.uncertainty.model_mismatch;
        PlantConfig {
            diffusivity: self.plant.diffusivity * (1.0 + mm),
            loss_ambient: self.plant.loss_ambient * (1.0 - mm),
            cooling_flow: self.plant.cooling_flow * (1.0 + mm),
            clamp_conductance: self.plant.clamp_conductance * (1.0 - mm),
            absorption: self.plant.absorption * (1.0 - mm),
            expansion_coeff: self.plant.expansion_coeff * (1.0 + mm),
            reclamp_factor: self.plant.reclamp_factor * (1.0 + mm),
            ..self.plant.clone()
        }
    }

    pub fn mark_layout(&self) -> Result<MarkLayout> {
        self.layout.build(self.plant.reticle_side)
    }

    pub fn lot_plan(&self) -> Result<LotPlan> {
        Ok(LotPlan {
            n_lots: self.lotplan.n_lots,
            wafers_per_lot: self.lotplan.wafers_per_lot,
            wafer_expose_time: self.lotplan.wafer_expose_time,
            wafer_swap_time: self.lotplan.wafer_swap_time,
            lot_swap_time: self.lotplan.lot_swap_time,
            edge_mark_time: self.lotplan.edge_mark_time,
            image_area: self.image_area.clone(),
            layout: self.mark_layout()?,
        })
    }

    pub fn build_scheduler(&self, family: crate::reduction::ModelFamily) -> Result<Scheduler> {
        let rules = match &self.scheduler.rules {
            Some(rules) => rules.clone(),
            None => Scheduler::default_rules(self.uncertainty.pellicle_on_reclamp),
        };
        Scheduler::new(rules, self.scheduler.dwell_min, family)
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON encoding; recorded in
    /// result files so outputs can be traced back to their configuration.
    /// The output directory does not participate: it never affects the
    /// computation.
    pub fn hash(&self) -> u64 {
        let canonical = ScenarioConfig {
            out_dir: String::new(),
            ..self.clone()
        };
        let text = serde_json::to_string(&canonical).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ScenarioConfig::default().validate().unwrap();
        ScenarioConfig::small_image_area().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{ "seed": 3, "definitely_a_typo": 1 }"#;
        let parsed: std::result::Result<ScenarioConfig, _> = serde_json::from_str(text);
        assert!(parsed.is_err());
    }

    #[test]
    fn duplicate_regimes_rejected() {
        let cfg = ScenarioConfig {
            regimes: vec![0, 1, 1, 2],
            ..ScenarioConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_moment_count_rejected() {
        let cfg = ScenarioConfig {
            reduction: ReductionConfig { s0: 0.0, k_moments: 0 },
            ..ScenarioConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn misaligned_timeline_rejected() {
        let cfg = ScenarioConfig {
            lotplan: LotPlanConfig {
                wafer_expose_time: 10.3,
                ..LotPlanConfig::default()
            },
            ..ScenarioConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ScenarioConfig::default();
        let b = ScenarioConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = ScenarioConfig {
            seed: 8,
            ..ScenarioConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn generated_layout_counts_match_config() {
        let cfg = ScenarioConfig::default();
        let layout = cfg.mark_layout().unwrap();
        assert_eq!(layout.marks.len(), 6 + 6 + 8);
        assert_eq!(layout.n_active(), 12);
        let all = layout.with_active_groups([MarkGroup::Top, MarkGroup::Bottom, MarkGroup::Edge]);
        assert_eq!(all.n_active(), 20);
    }
}
