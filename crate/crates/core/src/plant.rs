//! Synthetic full-order reticle-heating plant.
//!
//! A 2-D finite-difference heat equation with lumped loss terms stands in for
//! the proprietary FEM plants used in production: a 5-point-stencil Laplacian
//! scaled by the diffusivity, uniform ambient/cooling losses on the diagonal,
//! and an extra clamp conductance on the two vertical boundary node columns
//! while the reticle is clamped. Temperature maps to in-plane displacement
//! through a Gaussian-bump expansion kernel, so each warm node pushes material
//! radially outward.
//!
//! Units: K, s, mm, nm.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{bilinear_sampler, EvalGrid, ImageArea, MarkLayout};
use crate::noise::gaussian_vector;
use crate::ssm::{OutputSemantics, StateSpaceModel};

/// Physical and discretization parameters of the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Reticle side length in mm.
    pub reticle_side: f64,
    /// Thermal diffusivity in mm^2/s.
    pub diffusivity: f64,
    /// Heat loss to the environment from top/bottom surfaces, 1/s.
    pub loss_ambient: f64,
    /// Conductance added on clamp-contact boundary nodes when clamped, 1/s.
    pub clamp_conductance: f64,
    /// Uniform cooling-flow loss, 1/s.
    pub cooling_flow: f64,
    /// Scaling of exposure power into node heat rate, K/(s*W).
    pub absorption: f64,
    /// Multiplier (>= 1) on effective heating when a pellicle is present.
    pub pellicle_factor: f64,
    /// Thermo-elastic gain, nm/(mm*K).
    pub expansion_coeff: f64,
    /// Dense evaluation grid resolution for overlay fields.
    pub eval_nx: usize,
    pub eval_ny: usize,
    /// Clamp-conductance multiplier applied in reclamped regimes.
    pub reclamp_factor: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            grid_nx: 31,
            grid_ny: 31,
            reticle_side: 152.0,
            diffusivity: 30.0,
            loss_ambient: 0.0008,
            clamp_conductance: 0.30,
            cooling_flow: 0.0012,
            absorption: 3.0e-5,
            pellicle_factor: 1.6,
            expansion_coeff: 2.0,
            eval_nx: 15,
            eval_ny: 15,
            reclamp_factor: 0.2,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_nx < 3 || self.grid_ny < 3 {
            return Err(Error::Config(format!(
                "grid must be at least 3x3, got {}x{}",
                self.grid_nx, self.grid_ny
            )));
        }
        if self.reticle_side <= 0.0 {
            return Err(Error::Config("reticle side must be positive".into()));
        }
        for (name, v) in [
            ("diffusivity", self.diffusivity),
            ("loss_ambient", self.loss_ambient),
            ("clamp_conductance", self.clamp_conductance),
            ("cooling_flow", self.cooling_flow),
            ("absorption", self.absorption),
            ("expansion_coeff", self.expansion_coeff),
            ("reclamp_factor", self.reclamp_factor),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.pellicle_factor < 1.0 {
            return Err(Error::Config(format!(
                "pellicle factor must be >= 1 (a pellicle only insulates), got {}",
                self.pellicle_factor
            )));
        }
        if self.loss_ambient + self.cooling_flow <= 0.0 {
            // Without uniform losses the unclamped regime has no dissipation
            // path and the state matrix is only semi-stable.
            return Err(Error::Config(
                "loss_ambient + cooling_flow must be positive for a stable plant".into(),
            ));
        }
        if self.eval_nx < 2 || self.eval_ny < 2 {
            return Err(Error::Config("evaluation grid must be at least 2x2".into()));
        }
        Ok(())
    }

    pub fn node_grid(&self) -> EvalGrid {
        EvalGrid {
            nx: self.grid_nx,
            ny: self.grid_ny,
            side: self.reticle_side,
        }
    }

    pub fn eval_grid(&self) -> EvalGrid {
        EvalGrid {
            nx: self.eval_nx,
            ny: self.eval_ny,
            side: self.reticle_side,
        }
    }
}

/// Operating-condition index. Index 0 is always the nominal regime.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct RegimeId(pub usize);

impl RegimeId {
    pub const NOMINAL: RegimeId = RegimeId(0);
    pub const UNCLAMPED: RegimeId = RegimeId(1);
    pub const RECLAMPED: RegimeId = RegimeId(2);
    pub const RECLAMPED_PELLICLE: RegimeId = RegimeId(3);
    pub const PELLICLE: RegimeId = RegimeId(4);

    pub fn is_nominal(self) -> bool {
        self.0 == 0
    }
}

impl std::fmt::Display for RegimeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "R{}", self.0)
    }
}

/// Boundary conditions and input scaling implied by a regime index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeConditions {
    pub clamped: bool,
    /// Multiplier on the clamp conductance while clamped.
    pub clamp_scale: f64,
    /// Multiplier on the exposure input column (0 when exposure impossible).
    pub exposure_scale: f64,
    pub pellicle: bool,
}

impl RegimeId {
    pub fn conditions(self, cfg: &PlantConfig) -> Result<RegimeConditions> {
        let c = match self.0 {
            0 => RegimeConditions {
                clamped: true,
                clamp_scale: 1.0,
                exposure_scale: 1.0,
                pellicle: false,
            },
            1 => RegimeConditions {
                clamped: false,
                clamp_scale: 0.0,
                exposure_scale: 0.0,
                pellicle: false,
            },
            2 => RegimeConditions {
                clamped: true,
                clamp_scale: cfg.reclamp_factor,
                exposure_scale: 1.0,
                pellicle: false,
            },
            3 => RegimeConditions {
                clamped: true,
                clamp_scale: cfg.reclamp_factor,
                exposure_scale: cfg.pellicle_factor,
                pellicle: true,
            },
            4 => RegimeConditions {
                clamped: true,
                clamp_scale: 1.0,
                exposure_scale: cfg.pellicle_factor,
                pellicle: true,
            },
            other => {
                return Err(Error::Config(format!(
                    "regime index {other} has no defined operating conditions"
                )))
            }
        };
        Ok(c)
    }
}

/// Dense in-plane displacement field on the evaluation grid, interleaved
/// (x, y) per point, in nm.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayField {
    pub grid: EvalGrid,
    pub values: DVector<f64>,
}

impl OverlayField {
    pub fn zeros(grid: EvalGrid) -> Self {
        let n = 2 * grid.n_points();
        OverlayField {
            grid,
            values: DVector::zeros(n),
        }
    }

    pub fn x_at(&self, point: usize) -> f64 {
        self.values[2 * point]
    }

    pub fn y_at(&self, point: usize) -> f64 {
        self.values[2 * point + 1]
    }

    pub fn rms(&self) -> f64 {
        (self.values.norm_squared() / self.values.len() as f64).sqrt()
    }

    /// RMS per axis restricted to the given point indices: (rms_x, rms_y).
    pub fn rms_over(&self, points: &[usize]) -> (f64, f64) {
        if points.is_empty() {
            return (0.0, 0.0);
        }
        let mut sx = 0.0;
        let mut sy = 0.0;
        for &p in points {
            sx += self.x_at(p) * self.x_at(p);
            sy += self.y_at(p) * self.y_at(p);
        }
        let n = points.len() as f64;
        ((sx / n).sqrt(), (sy / n).sqrt())
    }

    /// Max |value| per axis restricted to the given point indices.
    pub fn max_abs_over(&self, points: &[usize]) -> (f64, f64) {
        let mut mx = 0.0f64;
        let mut my = 0.0f64;
        for &p in points {
            mx = mx.max(self.x_at(p).abs());
            my = my.max(self.y_at(p).abs());
        }
        (mx, my)
    }
}

impl std::ops::Sub for &OverlayField {
    type Output = OverlayField;
    fn sub(self, rhs: &OverlayField) -> OverlayField {
        assert_eq!(self.grid, rhs.grid, "field grids differ");
        OverlayField {
            grid: self.grid.clone(),
            values: &self.values - &rhs.values,
        }
    }
}

/// Discretized thermal / thermo-elastic plant with regime-dependent state
/// matrices. Immutable after build; stepping is pure.
#[derive(Debug, Clone)]
pub struct FullOrderPlant {
    pub config: PlantConfig,
    pub image_area: ImageArea,
    pub node_grid: EvalGrid,
    pub eval_grid: EvalGrid,
    pub a_by_regime: BTreeMap<RegimeId, DMatrix<f64>>,
    /// Nominal exposure-input column (K/s per unit command at unit power).
    pub b_e: DVector<f64>,
    /// Per-regime multiplier applied to `b_e`.
    pub exposure_scale: BTreeMap<RegimeId, f64>,
    /// Dense thermo-elastic output map, (2 * eval points) x n, nm/K.
    pub c_z: DMatrix<f64>,
}

impl FullOrderPlant {
    /// Builds the plant for the requested regimes.
    pub fn build(config: PlantConfig, image_area: ImageArea, regimes: &[RegimeId]) -> Result<Self> {
        config.validate()?;
        image_area.validate(config.reticle_side)?;
        if regimes.is_empty() {
            return Err(Error::Config("at least one regime is required".into()));
        }
        let node_grid = config.node_grid();
        let eval_grid = config.eval_grid();
        let n = node_grid.n_points();

        let mut a_by_regime = BTreeMap::new();
        let mut exposure_scale = BTreeMap::new();
        for &r in regimes {
            let cond = r.conditions(&config)?;
            a_by_regime.insert(r, build_state_matrix(&config, &node_grid, &cond));
            exposure_scale.insert(r, cond.exposure_scale);
        }

        let nodes = node_grid.points();
        let mut b_e = DVector::zeros(n);
        for (q, &(x, y)) in nodes.iter().enumerate() {
            if image_area.contains(x, y) {
                b_e[q] = config.absorption * image_area.exposure_power;
            }
        }

        let c_z = expansion_output_map(&config, &node_grid, &eval_grid);

        Ok(FullOrderPlant {
            config,
            image_area,
            node_grid,
            eval_grid,
            a_by_regime,
            b_e,
            exposure_scale,
            c_z,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.b_e.len()
    }

    pub fn regimes(&self) -> Vec<RegimeId> {
        self.a_by_regime.keys().copied().collect()
    }

    fn regime_matrix(&self, regime: RegimeId) -> Result<&DMatrix<f64>> {
        self.a_by_regime
            .get(&regime)
            .ok_or_else(|| Error::Config(format!("regime {regime} not present in the plant")))
    }

    /// One implicit-Euler step `x+ = (I - dt A)^{-1} (x + dt B_e u_e)`.
    ///
    /// Factorizes per call; use [`PlantStepper`] in simulation loops.
    pub fn step(
        &self,
        state: &DVector<f64>,
        u_e: f64,
        regime: RegimeId,
        dt: f64,
    ) -> Result<DVector<f64>> {
        PlantStepper::new(self, regime, dt)?.step(state, u_e)
    }

    /// Dense overlay field and noisy sparse measurement for a state.
    ///
    /// Noise (standard deviation `noise_std`, nm) applies to the measurement
    /// only; the dense field is the latent performance variable.
    pub fn outputs(
        &self,
        state: &DVector<f64>,
        layout: &MarkLayout,
        noise_std: f64,
        rng: &mut impl Rng,
    ) -> Result<(OverlayField, DVector<f64>)> {
        if state.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "state has {} entries, expected {}",
                state.len(),
                self.state_dim()
            )));
        }
        let z = OverlayField {
            grid: self.eval_grid.clone(),
            values: &self.c_z * state,
        };
        let c_y = self.measurement_map(layout)?;
        let mut y = c_y * state;
        if noise_std > 0.0 {
            y += gaussian_vector(rng, y.len(), noise_std);
        }
        Ok((z, y))
    }

    /// Sparse measurement operator for the active marks of a layout: rows are
    /// bilinear interpolations of the dense output map at mark positions.
    pub fn measurement_map(&self, layout: &MarkLayout) -> Result<DMatrix<f64>> {
        layout.validate(self.config.reticle_side)?;
        let positions: Vec<(f64, f64)> = layout.active_marks().iter().map(|m| (m.x, m.y)).collect();
        let s = bilinear_sampler(&self.eval_grid, &positions)?;
        Ok(s * &self.c_z)
    }

    /// Full-order model of one regime for reduction: `(A_i, B_e, C_z)`.
    ///
    /// Regimes that cannot expose keep the nominal input footprint so that
    /// the reduction stays well posed; the exposure command is identically
    /// zero in those regimes anyway.
    pub fn model(&self, regime: RegimeId) -> Result<StateSpaceModel> {
        let a = self.regime_matrix(regime)?.clone();
        let scale = self.exposure_scale[&regime];
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let b = DMatrix::from_column_slice(self.state_dim(), 1, (self.b_e.clone() * scale).as_slice());
        StateSpaceModel::new(
            a,
            b,
            self.c_z.clone(),
            "exposure",
            OutputSemantics::DenseField(self.eval_grid.clone()),
        )
    }

    /// Writes all plant matrices as plain-text dumps into `dir`.
    pub fn dump_matrices(&self, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
        use crate::io::write_matrix;
        let mut written = Vec::new();
        for (r, a) in &self.a_by_regime {
            let path = dir.join(format!("A_{}.mat", r.0));
            write_matrix(&path, a)?;
            written.push(path);
        }
        let b = DMatrix::from_column_slice(self.state_dim(), 1, self.b_e.as_slice());
        let pb = dir.join("B_e.mat");
        write_matrix(&pb, &b)?;
        written.push(pb);
        let pc = dir.join("C_z.mat");
        write_matrix(&pc, &self.c_z)?;
        written.push(pc);
        Ok(written)
    }
}

/// Cached implicit-Euler stepper for one (regime, dt) pair.
pub struct PlantStepper {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    b_scaled: DVector<f64>,
    dt: f64,
}

impl PlantStepper {
    pub fn new(plant: &FullOrderPlant, regime: RegimeId, dt: f64) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {dt}")));
        }
        let a = plant.regime_matrix(regime)?;
        let n = a.nrows();
        let system = DMatrix::identity(n, n) - a * dt;
        Ok(PlantStepper {
            lu: system.lu(),
            b_scaled: plant.b_e.clone() * plant.exposure_scale[&regime],
            dt,
        })
    }

    pub fn step(&self, state: &DVector<f64>, u_e: f64) -> Result<DVector<f64>> {
        if state.len() != self.b_scaled.len() {
            return Err(Error::Dimension(format!(
                "state has {} entries, expected {}",
                state.len(),
                self.b_scaled.len()
            )));
        }
        if !u_e.is_finite() {
            return Err(Error::Numerical("non-finite exposure command".into()));
        }
        let rhs = state + &self.b_scaled * (u_e * self.dt);
        self.lu
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("implicit-Euler factorization failed".into()))
    }
}

fn build_state_matrix(cfg: &PlantConfig, grid: &EvalGrid, cond: &RegimeConditions) -> DMatrix<f64> {
    let n = grid.n_points();
    let (nx, ny) = (grid.nx, grid.ny);
    let kx = cfg.diffusivity / (grid.pitch_x() * grid.pitch_x());
    let ky = cfg.diffusivity / (grid.pitch_y() * grid.pitch_y());
    let uniform_loss = cfg.loss_ambient + cfg.cooling_flow;
    let clamp = if cond.clamped {
        cfg.clamp_conductance * cond.clamp_scale
    } else {
        0.0
    };
    let mut a = DMatrix::zeros(n, n);
    for j in 0..ny {
        for i in 0..nx {
            let p = j * nx + i;
            let mut diag = -uniform_loss;
            // clamp rails contact the two vertical boundary columns
            if i == 0 || i == nx - 1 {
                diag -= clamp;
            }
            if i + 1 < nx {
                let q = j * nx + i + 1;
                a[(p, q)] += kx;
                a[(q, p)] += kx;
                diag -= kx;
                a[(q, q)] -= kx;
            }
            if j + 1 < ny {
                let q = (j + 1) * nx + i;
                a[(p, q)] += ky;
                a[(q, p)] += ky;
                diag -= ky;
                a[(q, q)] -= ky;
            }
            a[(p, p)] += diag;
        }
    }
    a
}

/// Displacement kernel: each node contributes a radially outward push with a
/// Gaussian falloff of width two grid pitches,
/// `u(p) = expansion_coeff * sum_q (p - q) exp(-|p - q|^2 / (2 sigma^2)) T_q`.
fn expansion_output_map(cfg: &PlantConfig, nodes: &EvalGrid, eval: &EvalGrid) -> DMatrix<f64> {
    let sigma = 2.0 * 0.5 * (nodes.pitch_x() + nodes.pitch_y());
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let node_pts = nodes.points();
    let eval_pts = eval.points();
    let mut c = DMatrix::zeros(2 * eval_pts.len(), node_pts.len());
    for (k, &(px, py)) in eval_pts.iter().enumerate() {
        for (q, &(qx, qy)) in node_pts.iter().enumerate() {
            let dx = px - qx;
            let dy = py - qy;
            let w = (-(dx * dx + dy * dy) * inv_two_sigma2).exp();
            c[(2 * k, q)] = cfg.expansion_coeff * dx * w;
            c[(2 * k + 1, q)] = cfg.expansion_coeff * dy * w;
        }
    }
    c
}

/// Result of fitting `a (1 - exp(-t / tau))` to a trace.
#[derive(Debug, Clone, Copy)]
pub struct ExpFit {
    pub amplitude: f64,
    pub tau: f64,
    pub r_squared: f64,
}

/// Fits a first-order exponential approach to `(t, v)` samples by scanning
/// `tau` on a log grid with the amplitude solved in closed form.
pub fn fit_exponential_approach(ts: &[f64], vals: &[f64]) -> Result<ExpFit> {
    if ts.len() != vals.len() || ts.len() < 3 {
        return Err(Error::Config(
            "exponential fit needs at least 3 matching samples".into(),
        ));
    }
    let span = ts[ts.len() - 1] - ts[0];
    if span <= 0.0 {
        return Err(Error::Config("time samples must be increasing".into()));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let ss_tot: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();

    let mut best = ExpFit {
        amplitude: 0.0,
        tau: span,
        r_squared: f64::NEG_INFINITY,
    };
    let lo = (span / 1000.0).max(1e-9);
    let hi = span * 50.0;
    for tau in crate::linalg::logspace(lo, hi, 600) {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&t, &v) in ts.iter().zip(vals.iter()) {
            let g = 1.0 - (-t / tau).exp();
            num += v * g;
            den += g * g;
        }
        if den <= 0.0 {
            continue;
        }
        let a = num / den;
        let ss_res: f64 = ts
            .iter()
            .zip(vals.iter())
            .map(|(&t, &v)| {
                let e = v - a * (1.0 - (-t / tau).exp());
                e * e
            })
            .sum();
        let r2 = if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res < 1e-30 {
            1.0
        } else {
            0.0
        };
        if r2 > best.r_squared {
            best = ExpFit {
                amplitude: a,
                tau,
                r_squared: r2,
            };
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Mark, MarkGroup};
    use crate::linalg::{expm, spectral_abscissa};
    use approx::assert_abs_diff_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(nx: usize, ny: usize) -> PlantConfig {
        PlantConfig {
            grid_nx: nx,
            grid_ny: ny,
            eval_nx: 5,
            eval_ny: 5,
            diffusivity: 5.0,
            loss_ambient: 0.002,
            cooling_flow: 0.003,
            clamp_conductance: 0.05,
            reclamp_factor: 0.5,
            ..PlantConfig::default()
        }
    }

    fn centered_area(cfg: &PlantConfig) -> ImageArea {
        let s = cfg.reticle_side;
        ImageArea {
            x_min: 0.25 * s,
            x_max: 0.75 * s,
            y_min: 0.25 * s,
            y_max: 0.75 * s,
            exposure_power: 1000.0,
        }
    }

    fn test_layout(side: f64) -> MarkLayout {
        let marks = vec![
            Mark { x: 0.2 * side, y: 0.95 * side, group: MarkGroup::Top },
            Mark { x: 0.8 * side, y: 0.95 * side, group: MarkGroup::Top },
            Mark { x: 0.2 * side, y: 0.05 * side, group: MarkGroup::Bottom },
            Mark { x: 0.8 * side, y: 0.05 * side, group: MarkGroup::Bottom },
            Mark { x: 0.05 * side, y: 0.5 * side, group: MarkGroup::Edge },
        ];
        MarkLayout::new(
            marks,
            [MarkGroup::Top, MarkGroup::Bottom, MarkGroup::Edge]
                .into_iter()
                .collect(),
        )
    }

    #[test]
    fn zero_diffusivity_gives_diagonal_state_matrix() {
        let cfg = PlantConfig {
            diffusivity: 0.0,
            ..small_config(3, 3)
        };
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let a = &plant.a_by_regime[&RegimeId::NOMINAL];
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    assert_eq!(a[(i, j)], 0.0);
                }
            }
        }
        // the center node (1,1) is off the clamp columns
        let center = 1 * 3 + 1;
        assert_abs_diff_eq!(
            a[(center, center)],
            -(cfg.loss_ambient + cfg.cooling_flow),
            epsilon = 1e-15
        );
        // clamp columns carry the extra conductance
        assert_abs_diff_eq!(
            a[(0, 0)],
            -(cfg.loss_ambient + cfg.cooling_flow + cfg.clamp_conductance),
            epsilon = 1e-15
        );
    }

    #[test]
    fn default_plant_is_stable_by_eigenvalue_oracle() {
        let cfg = PlantConfig::default();
        let plant = FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL])
            .unwrap();
        let abscissa = spectral_abscissa(&plant.a_by_regime[&RegimeId::NOMINAL]);
        assert!(abscissa < 0.0, "spectral abscissa {abscissa} not negative");
    }

    #[test]
    fn clamped_dissipates_at_least_as_fast_as_unclamped() {
        let cfg = small_config(9, 9);
        let plant = FullOrderPlant::build(
            cfg.clone(),
            centered_area(&cfg),
            &[RegimeId::NOMINAL, RegimeId::UNCLAMPED],
        )
        .unwrap();
        let clamped = spectral_abscissa(&plant.a_by_regime[&RegimeId::NOMINAL]);
        let unclamped = spectral_abscissa(&plant.a_by_regime[&RegimeId::UNCLAMPED]);
        assert!(
            clamped <= unclamped + 1e-12,
            "clamped {clamped} vs unclamped {unclamped}"
        );
    }

    #[test]
    fn image_area_outside_reticle_rejected() {
        let cfg = small_config(5, 5);
        let bad = ImageArea {
            x_min: -5.0,
            x_max: 10.0,
            y_min: 0.0,
            y_max: 10.0,
            exposure_power: 1.0,
        };
        assert!(FullOrderPlant::build(cfg, bad, &[RegimeId::NOMINAL]).is_err());
    }

    #[test]
    fn degenerate_grid_rejected() {
        let cfg = PlantConfig {
            grid_nx: 2,
            ..small_config(5, 5)
        };
        let area = centered_area(&cfg);
        assert!(FullOrderPlant::build(cfg, area, &[RegimeId::NOMINAL]).is_err());
    }

    #[test]
    fn zero_state_zero_input_stays_at_equilibrium() {
        let cfg = small_config(5, 5);
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let x0 = DVector::zeros(plant.state_dim());
        let x1 = plant.step(&x0, 0.0, RegimeId::NOMINAL, 0.5).unwrap();
        assert_eq!(x1, x0);
    }

    #[test]
    fn implicit_euler_tracks_matrix_exponential() {
        let cfg = small_config(5, 5);
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let n = plant.state_dim();
        let dt = 0.1;
        let steps = 100;
        let stepper = PlantStepper::new(&plant, RegimeId::NOMINAL, dt).unwrap();
        let mut x = DVector::zeros(n);
        for _ in 0..steps {
            x = stepper.step(&x, 1.0).unwrap();
        }
        // exact response of x' = Ax + b via the augmented exponential
        let a = &plant.a_by_regime[&RegimeId::NOMINAL];
        let mut aug = DMatrix::zeros(n + 1, n + 1);
        aug.view_mut((0, 0), (n, n)).copy_from(a);
        aug.view_mut((0, n), (n, 1)).copy_from(&DMatrix::from_column_slice(
            n,
            1,
            plant.b_e.as_slice(),
        ));
        let e = expm(&(aug * (dt * steps as f64)));
        let exact = e.view((0, n), (n, 1)).clone_owned();
        let exact = DVector::from_column_slice(exact.as_slice());
        let rel = (&x - &exact).norm() / exact.norm();
        assert!(rel <= 1e-3, "relative error {rel}");
    }

    #[test]
    fn huge_step_stays_bounded() {
        let cfg = small_config(5, 5);
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let x0 = DVector::from_element(plant.state_dim(), 3.0);
        let x1 = plant.step(&x0, 0.0, RegimeId::NOMINAL, 1e6).unwrap();
        assert!(x1.norm() <= x0.norm());
        assert!(x1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn outputs_at_zero_state_are_noise_only() {
        let cfg = small_config(5, 5);
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let layout = test_layout(cfg.reticle_side);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = DVector::zeros(plant.state_dim());
        let (z, y) = plant.outputs(&x0, &layout, 0.1, &mut rng).unwrap();
        assert_eq!(z.values.norm(), 0.0);
        assert_eq!(y.len(), 2 * layout.n_active());
        assert!(y.norm() > 0.0 && y.amax() < 1.0);
    }

    #[test]
    fn uniform_temperature_gives_antisymmetric_displacement() {
        let cfg = small_config(7, 7);
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let x = DVector::from_element(plant.state_dim(), 2.5);
        let z = OverlayField {
            grid: plant.eval_grid.clone(),
            values: &plant.c_z * &x,
        };
        let (enx, eny) = (plant.eval_grid.nx, plant.eval_grid.ny);
        // center point of the odd-sized evaluation grid displaces by zero
        let center = (eny / 2) * enx + enx / 2;
        assert_abs_diff_eq!(z.x_at(center), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(z.y_at(center), 0.0, epsilon = 1e-9);
        // point reflection about the center flips the displacement
        for j in 0..eny {
            for i in 0..enx {
                let p = j * enx + i;
                let q = (eny - 1 - j) * enx + (enx - 1 - i);
                assert_abs_diff_eq!(z.x_at(p), -z.x_at(q), epsilon = 1e-9);
                assert_abs_diff_eq!(z.y_at(p), -z.y_at(q), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn noiseless_measurement_interpolates_dense_field() {
        let cfg = small_config(7, 7);
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let layout = test_layout(cfg.reticle_side);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DVector::from_fn(plant.state_dim(), |_, _| rng.random_range(-1.0..1.0));
        let (z, y) = plant.outputs(&x, &layout, 0.0, &mut rng).unwrap();
        let positions: Vec<(f64, f64)> = layout.active_marks().iter().map(|m| (m.x, m.y)).collect();
        let s = bilinear_sampler(&plant.eval_grid, &positions).unwrap();
        let interp = s * &z.values;
        assert!((interp - y).amax() < 1e-12);
    }

    #[test]
    fn free_decay_is_contracting_over_random_states() {
        let cfg = small_config(7, 7);
        let plant = FullOrderPlant::build(
            cfg.clone(),
            centered_area(&cfg),
            &[RegimeId::NOMINAL, RegimeId::UNCLAMPED],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for regime in [RegimeId::NOMINAL, RegimeId::UNCLAMPED] {
            let stepper = PlantStepper::new(&plant, regime, 0.5).unwrap();
            for _ in 0..500 {
                let x = DVector::from_fn(plant.state_dim(), |_, _| rng.random_range(-1.0..1.0));
                let x1 = stepper.step(&x, 0.0).unwrap();
                assert!(x1.norm() <= x.norm() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn clamped_steady_state_cooler_than_without_clamp() {
        let cfg = small_config(9, 9);
        let area = centered_area(&cfg);
        let clamped =
            FullOrderPlant::build(cfg.clone(), area.clone(), &[RegimeId::NOMINAL]).unwrap();
        let no_clamp_cfg = PlantConfig {
            clamp_conductance: 0.0,
            ..cfg
        };
        let unclamped =
            FullOrderPlant::build(no_clamp_cfg, area, &[RegimeId::NOMINAL]).unwrap();
        // steady state under constant exposure: x_ss = -A^{-1} B
        let ss = |p: &FullOrderPlant| {
            let a = &p.a_by_regime[&RegimeId::NOMINAL];
            let b = DVector::from_column_slice(p.b_e.as_slice());
            (-a.clone()).lu().solve(&b).unwrap().mean()
        };
        let t_clamped = ss(&clamped);
        let t_free = ss(&unclamped);
        assert!(
            t_clamped < t_free,
            "clamped mean {t_clamped} not below clamp-free {t_free}"
        );
    }

    #[test]
    fn pellicle_amplifies_steady_state_deformation() {
        let cfg = small_config(9, 9);
        let area = centered_area(&cfg);
        let plant = FullOrderPlant::build(
            cfg.clone(),
            area,
            &[RegimeId::NOMINAL, RegimeId::PELLICLE],
        )
        .unwrap();
        let ss_norm = |regime: RegimeId| {
            let a = &plant.a_by_regime[&regime];
            let b = DVector::from_column_slice(
                (plant.b_e.clone() * plant.exposure_scale[&regime]).as_slice(),
            );
            let x = (-a.clone()).lu().solve(&b).unwrap();
            (&plant.c_z * x).norm()
        };
        assert!(ss_norm(RegimeId::PELLICLE) > ss_norm(RegimeId::NOMINAL));
    }

    #[test]
    fn mean_temperature_follows_exponential_heating() {
        let cfg = small_config(9, 9);
        let plant =
            FullOrderPlant::build(cfg.clone(), centered_area(&cfg), &[RegimeId::NOMINAL]).unwrap();
        let dt = 2.0;
        let steps = 1500;
        let stepper = PlantStepper::new(&plant, RegimeId::NOMINAL, dt).unwrap();
        let mut x = DVector::zeros(plant.state_dim());
        let mut ts = Vec::new();
        let mut ms = Vec::new();
        for k in 0..steps {
            x = stepper.step(&x, 1.0).unwrap();
            ts.push((k + 1) as f64 * dt);
            ms.push(x.mean());
        }
        // fit over the final 80% of the transient
        let start = steps / 5;
        let fit = fit_exponential_approach(&ts[start..], &ms[start..]).unwrap();
        assert!(
            fit.r_squared >= 0.99,
            "R^2 {} below 0.99 (tau {}, amplitude {})",
            fit.r_squared,
            fit.tau,
            fit.amplitude
        );
    }

    #[test]
    fn exponential_fit_recovers_known_parameters() {
        let ts: Vec<f64> = (0..200).map(|k| k as f64 * 0.5).collect();
        let vals: Vec<f64> = ts.iter().map(|&t| 3.2 * (1.0 - (-t / 12.0).exp())).collect();
        let fit = fit_exponential_approach(&ts, &vals).unwrap();
        assert!((fit.amplitude - 3.2).abs() < 0.01);
        assert!((fit.tau - 12.0).abs() / 12.0 < 0.02);
        assert!(fit.r_squared > 0.9999);
    }
}
