//! Closed-loop assembly in generalized (LFT) form and small-gain
//! certification of the switching-predictor interconnection.
//!
//! The certified loop is a prediction loop: the physical plant is never
//! actuated by the predictor, so the uncertainty channel threads through the
//! measurement-correction path only. The pulled-out block maps the model's
//! effective exposure drive (exposure command plus the heating-equivalent
//! content of the feedback correction) to an additive perturbation on the
//! predicted dense field. Closing that channel with a member's centered
//! difference realization reproduces the closed loop in which the predictor
//! runs that member.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{logspace, spectral_abscissa};
use crate::predictor::{measurement_operator, FeedbackDesign};
use crate::reduction::ModelFamily;
use crate::ssm::{Lti, StateSpaceModel};

/// Peak gain of a stable system over `omega in [0, inf)`.
///
/// Coarse sweep on a log grid anchored to the spectrum of `A` (1000 points,
/// at least 8 decades), `omega = 0` and the feedthrough limit included, then
/// golden-section refinement around the grid peak. The result is within
/// `tol` (relative) of the true norm for systems whose response varies
/// smoothly on the grid.
pub fn hinf_norm(system: &Lti, tol: f64) -> Result<f64> {
    let tol = if tol > 0.0 { tol } else { 1e-4 };
    if system.order() == 0 {
        return Ok(system.d.clone().svd(false, false).singular_values.max());
    }
    if !system.is_stable() {
        return Err(Error::NormInfinite);
    }
    if system.b.ncols() == 0 || system.c.nrows() == 0 {
        return Ok(0.0);
    }

    let grid = frequency_grid(&system.a, 1000);
    let mut best_gain = system.gain_at(0.0)?;
    let mut best_idx = 0usize; // 0 stands for omega = 0
    for (i, &w) in grid.iter().enumerate() {
        let g = system.gain_at(w)?;
        if g > best_gain {
            best_gain = g;
            best_idx = i + 1;
        }
    }
    // feedthrough is the omega -> infinity limit
    let d_gain = system.d.clone().svd(false, false).singular_values.max();
    if d_gain > best_gain {
        return Ok(d_gain);
    }

    // bracket the peak between the neighbors of the best grid point
    let (lo, hi) = if best_idx == 0 {
        (0.0, grid[0])
    } else {
        let i = best_idx - 1;
        let lo = if i == 0 { 0.0 } else { grid[i - 1] };
        let hi = if i + 1 < grid.len() { grid[i + 1] } else { grid[i] * 10.0 };
        (lo, hi)
    };
    let refined = golden_section_max(
        |w| system.gain_at(w).unwrap_or(0.0),
        lo,
        hi,
        tol,
    );
    Ok(refined.max(best_gain))
}

/// Log grid spanning the spectral content of `a`: `|lambda|_min / 100` to
/// `|lambda|_max * 100`, widened to at least 8 decades.
fn frequency_grid(a: &DMatrix<f64>, points: usize) -> Vec<f64> {
    let magnitudes: Vec<f64> = if crate::linalg::is_symmetric(a) {
        a.clone().symmetric_eigen().eigenvalues.iter().map(|l| l.abs()).collect()
    } else {
        a.clone().complex_eigenvalues().iter().map(|l| l.norm()).collect()
    };
    let nonzero: Vec<f64> = magnitudes.into_iter().filter(|m| *m > 1e-12).collect();
    let (mut lo, mut hi) = if nonzero.is_empty() {
        (1e-4, 1e4)
    } else {
        let min = nonzero.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = nonzero.iter().cloned().fold(0.0f64, f64::max);
        (min / 100.0, max * 100.0)
    };
    let min_decades = 8.0;
    let decades = (hi / lo).log10();
    if decades < min_decades {
        let pad = 10f64.powf((min_decades - decades) / 2.0);
        lo /= pad;
        hi *= pad;
    }
    logspace(lo, hi, points)
}

fn golden_section_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    const PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - PHI * (b - a);
    let mut x2 = a + PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if (b - a) <= tol * b.max(1e-12) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + PHI * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - PHI * (b - a);
            f1 = f(x1);
        }
    }
    f1.max(f2)
}

/// Block dimensions of a [`GeneralizedPlant`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub n_plant: usize,
    pub n_pred: usize,
    /// 2 x active marks.
    pub n_meas: usize,
    /// Dense output dimension.
    pub n_out: usize,
}

/// Block-partitioned open realization of the prediction loop.
///
/// States are `[plant; predictor]`. Inputs are the exposure command `u_e`,
/// the feedback innovation `u_f` and the uncertainty output `u_i`; outputs
/// are the innovation `y` and the prediction error `z`. Feedthrough from
/// `u_e` is structurally zero. Closing `u_f = y` engages the corrector;
/// closing `u_i = Delta(y_i)` with the probe signal
/// `y_i = u_e + probe * L * y` injects the uncertain dynamics.
#[derive(Debug, Clone)]
pub struct GeneralizedPlant {
    pub a: DMatrix<f64>,
    pub b_e: DMatrix<f64>,
    pub b_f: DMatrix<f64>,
    pub b_i: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub c_z: DMatrix<f64>,
    pub d_fy: DMatrix<f64>,
    pub d_iy: DMatrix<f64>,
    pub d_fz: DMatrix<f64>,
    pub d_iz: DMatrix<f64>,
    /// Equivalent-exposure projection of predictor-state corrections (1 x r).
    pub probe: DMatrix<f64>,
    /// Observer gain used by the corrector (r x n_meas).
    pub gain: DMatrix<f64>,
    pub dims: BlockDims,
}

/// Assembles plant, nominal predictor and the pulled-out uncertainty channel.
pub fn assemble_lft(
    plant_model: &StateSpaceModel,
    family: &ModelFamily,
    design: &FeedbackDesign,
) -> Result<GeneralizedPlant> {
    let nominal = family.nominal();
    if plant_model.n_outputs() != nominal.ssm.n_outputs() {
        return Err(Error::Dimension(format!(
            "plant has {} outputs but the nominal model has {} (block C_z)",
            plant_model.n_outputs(),
            nominal.ssm.n_outputs()
        )));
    }
    let plant_grid = plant_model
        .grid()
        .ok_or_else(|| Error::Config("plant model must carry a dense-field output map".into()))?;
    let model_grid = nominal
        .ssm
        .grid()
        .ok_or_else(|| Error::Config("nominal model must carry a dense-field output map".into()))?;
    if plant_grid != model_grid {
        return Err(Error::Dimension(
            "plant and predictor evaluate their fields on different grids (block C_z)".into(),
        ));
    }

    // bare mark sampler S (n_meas x p) and the composed maps S*C
    let positions: Vec<(f64, f64)> = design
        .layout
        .active_marks()
        .iter()
        .map(|m| (m.x, m.y))
        .collect();
    if positions.is_empty() {
        return Err(Error::EmptyLayout);
    }
    let s_bare = crate::geometry::bilinear_sampler(model_grid, &positions)?;
    let n_p = plant_model.order();
    let r = nominal.order();
    let n_meas = s_bare.nrows();
    let p = plant_model.n_outputs();
    if design.gain.nrows() != r || design.gain.ncols() != n_meas {
        return Err(Error::Dimension(format!(
            "gain is {}x{}, expected {}x{} (block B_f)",
            design.gain.nrows(),
            design.gain.ncols(),
            r,
            n_meas
        )));
    }

    // probe = pseudo-inverse of the nominal exposure column
    let b_n = &nominal.ssm.b_e;
    let b_norm2 = b_n.norm_squared();
    if b_norm2 <= 0.0 {
        return Err(Error::Config(
            "nominal model has a zero exposure channel; cannot form the uncertainty probe".into(),
        ));
    }
    let probe = DMatrix::from_fn(1, r, |_, j| b_n[(j, 0)] / b_norm2);

    // mark sampling applied to each block's output map
    let s_cp = measurement_operator(plant_model, &design.layout)?;
    let s_cn = measurement_operator(&nominal.ssm, &design.layout)?;

    let mut a = DMatrix::zeros(n_p + r, n_p + r);
    a.view_mut((0, 0), (n_p, n_p)).copy_from(&plant_model.a);
    a.view_mut((n_p, n_p), (r, r)).copy_from(&nominal.ssm.a);

    let mut b_e = DMatrix::zeros(n_p + r, 1);
    b_e.view_mut((0, 0), (n_p, 1)).copy_from(&plant_model.b_e);
    b_e.view_mut((n_p, 0), (r, 1)).copy_from(&nominal.ssm.b_e);

    let mut b_f = DMatrix::zeros(n_p + r, n_meas);
    b_f.view_mut((n_p, 0), (r, n_meas)).copy_from(&design.gain);

    let b_i = DMatrix::zeros(n_p + r, p);

    // innovation y = S C_p x_p - S C_n x_hat - S u_i
    let mut c_y = DMatrix::zeros(n_meas, n_p + r);
    c_y.view_mut((0, 0), (n_meas, n_p)).copy_from(&s_cp);
    c_y.view_mut((0, n_p), (n_meas, r)).copy_from(&(-&s_cn));

    // prediction error z = C_n x_hat + u_i - C_p x_p
    let mut c_z = DMatrix::zeros(p, n_p + r);
    c_z.view_mut((0, 0), (p, n_p)).copy_from(&(-&plant_model.c));
    c_z.view_mut((0, n_p), (p, r)).copy_from(&nominal.ssm.c);

    // u_i perturbs the model output before sampling
    let d_iy = -&s_bare;

    Ok(GeneralizedPlant {
        a,
        b_e,
        b_f,
        b_i,
        c_y,
        c_z,
        d_fy: DMatrix::zeros(n_meas, n_meas),
        d_iy,
        d_fz: DMatrix::zeros(p, n_meas),
        d_iz: DMatrix::identity(p, p),
        probe,
        gain: design.gain.clone(),
        dims: BlockDims {
            n_plant: n_p,
            n_pred: r,
            n_meas,
            n_out: p,
        },
    })
}

impl GeneralizedPlant {
    fn n_states(&self) -> usize {
        self.dims.n_plant + self.dims.n_pred
    }

    /// Closes the corrector loop `u_f = y`, leaving inputs `(u_e, u_i)` and
    /// outputs `(z, y_i)` where `y_i` is the signal the uncertainty reads.
    fn close_feedback(&self) -> ClosedCorrector {
        let a_cl = &self.a + &self.b_f * &self.c_y;
        let b_i_cl = &self.b_i + &self.b_f * &self.d_iy;
        let probe_gain = &self.probe * &self.gain; // 1 x n_meas
        let c_yi = &probe_gain * &self.c_y; // 1 x n
        let d_yi_i = &probe_gain * &self.d_iy; // 1 x p
        ClosedCorrector {
            a: a_cl,
            b_e: self.b_e.clone(),
            b_i: b_i_cl,
            c_z: self.c_z.clone(),
            d_zi: self.d_iz.clone(),
            c_yi,
            d_yi_i,
        }
    }

    /// Nominal closed loop (`u_i = 0`): exposure to prediction error.
    pub fn nominal_closed_loop(&self) -> Result<Lti> {
        let cl = self.close_feedback();
        Lti::new(
            cl.a,
            cl.b_e,
            cl.c_z,
            DMatrix::zeros(self.dims.n_out, 1),
        )
    }

    /// Transfer seen by the uncertainty, `u_i -> y_i`, with the corrector
    /// loop closed. The physical plant is unreachable from `u_i`, so the
    /// realization only involves the predictor block.
    pub fn loop_seen_by_delta(&self) -> Result<Lti> {
        let cl = self.close_feedback();
        let n_p = self.dims.n_plant;
        let r = self.dims.n_pred;
        // structural check: u_i must not reach the plant states
        let plant_rows = cl.b_i.view((0, 0), (n_p, cl.b_i.ncols()));
        if plant_rows.amax() > 0.0 {
            return Err(Error::Numerical(
                "uncertainty channel unexpectedly reaches the plant states".into(),
            ));
        }
        let a = cl.a.view((n_p, n_p), (r, r)).clone_owned();
        let b = cl.b_i.view((n_p, 0), (r, cl.b_i.ncols())).clone_owned();
        let c = cl.c_yi.view((0, n_p), (1, r)).clone_owned();
        Lti::new(a, b, c, cl.d_yi_i.clone())
    }

    /// Same transfer realized on the full state; used to cross-check the
    /// reduced extraction.
    pub fn loop_seen_by_delta_full(&self) -> Result<Lti> {
        let cl = self.close_feedback();
        Lti::new(cl.a, cl.b_i, cl.c_yi, cl.d_yi_i)
    }

    /// Stability of the nominal interconnection. The closed A is block lower
    /// triangular (the prediction loop cannot actuate the plant), so the
    /// check runs blockwise; returns the offending spectral abscissa when
    /// unstable.
    pub fn nominal_unstable_abscissa(&self) -> Option<f64> {
        let cl = self.close_feedback();
        let n_p = self.dims.n_plant;
        let r = self.dims.n_pred;
        let plant = cl.a.view((0, 0), (n_p, n_p)).clone_owned();
        let pred = cl.a.view((n_p, n_p), (r, r)).clone_owned();
        if crate::linalg::is_hurwitz(&plant) && crate::linalg::is_hurwitz(&pred) {
            return None;
        }
        Some(spectral_abscissa(&plant).max(spectral_abscissa(&pred)))
    }

    /// Closes `u_i = delta(y_i)` and returns the monolithic loop
    /// `u_e -> z` including the uncertainty states.
    pub fn close_with(&self, delta: &UncertaintyRealization) -> Result<Lti> {
        let cl = self.close_feedback();
        let n = self.n_states();
        let n_d = delta.lti.order();
        let p = self.dims.n_out;
        if delta.lti.n_outputs() != p || delta.lti.n_inputs() != 1 {
            return Err(Error::Dimension(format!(
                "uncertainty must map the scalar probe to {p} outputs, got {} -> {}",
                delta.lti.n_inputs(),
                delta.lti.n_outputs()
            )));
        }

        // well-posedness: u_i = C_d x_d + D_d (y_i), y_i = u_e + c_yi x + d_yi_i u_i
        let w = DMatrix::identity(p, p) - &delta.lti.d * &cl.d_yi_i;
        let w_lu = w.lu();
        let solve = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            w_lu.solve(m).ok_or_else(|| {
                Error::Numerical("algebraic loop between uncertainty and corrector is ill-posed".into())
            })
        };
        // u_i = W^{-1} (C_d x_d + D_d c_yi x + D_d u_e)
        let ui_xd = solve(&delta.lti.c)?;
        let ui_x = solve(&(&delta.lti.d * &cl.c_yi))?;
        let ui_ue = solve(&delta.lti.d)?;

        // y_i = u_e + c_yi x + d_yi_i u_i
        let yi_x = &cl.c_yi + &cl.d_yi_i * &ui_x;
        let yi_xd = &cl.d_yi_i * &ui_xd;
        let yi_ue = DMatrix::identity(1, 1) + &cl.d_yi_i * &ui_ue;

        let mut a = DMatrix::zeros(n + n_d, n + n_d);
        a.view_mut((0, 0), (n, n)).copy_from(&(&cl.a + &cl.b_i * &ui_x));
        a.view_mut((0, n), (n, n_d)).copy_from(&(&cl.b_i * &ui_xd));
        a.view_mut((n, 0), (n_d, n)).copy_from(&(&delta.lti.b * &yi_x));
        a.view_mut((n, n), (n_d, n_d))
            .copy_from(&(&delta.lti.a + &delta.lti.b * &yi_xd));

        let mut b = DMatrix::zeros(n + n_d, 1);
        b.view_mut((0, 0), (n, 1)).copy_from(&(&cl.b_e + &cl.b_i * &ui_ue));
        b.view_mut((n, 0), (n_d, 1)).copy_from(&(&delta.lti.b * &yi_ue));

        let mut c = DMatrix::zeros(p, n + n_d);
        c.view_mut((0, 0), (p, n)).copy_from(&(&cl.c_z + &cl.d_zi * &ui_x));
        c.view_mut((0, n), (p, n_d)).copy_from(&(&cl.d_zi * &ui_xd));

        let d = &cl.d_zi * &ui_ue;
        Lti::new(a, b, c, d)
    }
}

/// Intermediate realization after closing the corrector loop.
struct ClosedCorrector {
    a: DMatrix<f64>,
    b_e: DMatrix<f64>,
    b_i: DMatrix<f64>,
    c_z: DMatrix<f64>,
    d_zi: DMatrix<f64>,
    c_yi: DMatrix<f64>,
    d_yi_i: DMatrix<f64>,
}

/// Stable uncertain block with a declared peak-gain bound.
#[derive(Debug, Clone)]
pub struct UncertaintyRealization {
    pub lti: Lti,
    /// Declared peak-gain bound (delta-bar).
    pub bound: f64,
}

impl UncertaintyRealization {
    /// Validates stability and that the measured peak gain does not exceed
    /// the declared bound (tolerance 1e-6).
    pub fn new(lti: Lti, bound: f64) -> Result<Self> {
        if !lti.is_stable() {
            return Err(Error::UnstableDelta(format!(
                "spectral abscissa {:.3e} >= 0",
                lti.spectral_abscissa()
            )));
        }
        let measured = hinf_norm(&lti, 1e-6)?;
        if measured > bound + 1e-6 {
            return Err(Error::Config(format!(
                "uncertainty peak gain {measured:.6e} exceeds the declared bound {bound:.6e}"
            )));
        }
        Ok(UncertaintyRealization { lti, bound })
    }

    /// Worst family member's raw difference realization, bounded by its
    /// centering scaling. Falls back to the zero system when every member
    /// equals the nominal model.
    pub fn from_family(family: &ModelFamily) -> Result<Self> {
        Self::worst_of(family, |_| true)
    }

    /// Worst member among the regimes that can actually run inside the
    /// measurement loop. The unclamped member is excluded: no feedback
    /// signal exists while the reticle is off its clamp, so its model error
    /// never circulates through the corrector.
    pub fn from_family_in_loop(family: &ModelFamily) -> Result<Self> {
        Self::worst_of(family, |r| r != crate::plant::RegimeId::UNCLAMPED)
    }

    fn worst_of(
        family: &ModelFamily,
        keep: impl Fn(crate::plant::RegimeId) -> bool,
    ) -> Result<Self> {
        let worst = family
            .deltas
            .iter()
            .filter(|(r, d)| keep(**r) && d.scaling > 0.0)
            .max_by(|a, b| a.1.scaling.total_cmp(&b.1.scaling));
        match worst {
            Some((_, delta)) => {
                UncertaintyRealization::new(delta.raw(), delta.scaling * (1.0 + 1e-9))
            }
            None => Ok(UncertaintyRealization {
                lti: Lti::zero(family.nominal().ssm.n_outputs(), 1),
                bound: 0.0,
            }),
        }
    }

    /// Scales both the realization and the declared bound.
    pub fn inflated(&self, factor: f64) -> Self {
        UncertaintyRealization {
            lti: self.lti.scale_output(factor),
            bound: self.bound * factor,
        }
    }
}

/// Outcome of the small-gain test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// Peak gain of the interconnection seen by the uncertainty.
    pub gamma: f64,
    /// Declared uncertainty bound.
    pub delta_bound: f64,
    /// `1 - gamma * delta_bound`; positive means certified.
    pub margin: f64,
    pub pass: bool,
    pub norm_tolerance: f64,
    pub frequency_points: usize,
    /// The small-gain condition is sufficient only; a failed certificate is
    /// not a proof of instability.
    pub sufficient_only: bool,
}

/// Certifies the interconnection by the small-gain condition
/// `gamma * delta_bound < 1`.
///
/// Aborts with [`Error::AssumptionViolated`] when the nominal interconnection
/// itself (uncertainty channel open) is not stable.
pub fn certify_guas(
    gp: &GeneralizedPlant,
    delta: &UncertaintyRealization,
) -> Result<StabilityCertificate> {
    if !delta.lti.is_stable() {
        return Err(Error::UnstableDelta(format!(
            "spectral abscissa {:.3e} >= 0",
            delta.lti.spectral_abscissa()
        )));
    }
    if let Some(abscissa) = gp.nominal_unstable_abscissa() {
        return Err(Error::AssumptionViolated(format!(
            "nominal interconnection has spectral abscissa {abscissa:.3e}"
        )));
    }
    let tol = 1e-4;
    let loop_tf = gp.loop_seen_by_delta()?;
    let gamma = hinf_norm(&loop_tf, tol)?;
    let margin = 1.0 - gamma * delta.bound;
    Ok(StabilityCertificate {
        gamma,
        delta_bound: delta.bound,
        margin,
        pass: margin > 0.0,
        norm_tolerance: tol,
        frequency_points: 1000,
        sufficient_only: true,
    })
}

/// Bounded excitation profile for the empirical corroboration runs.
#[derive(Debug, Clone)]
pub struct Excitation {
    pub amplitude: f64,
    /// Steps between re-draws of the piecewise-constant input.
    pub hold_steps: usize,
    pub seed: u64,
}

/// Result of one empirical ultimate-bound run.
#[derive(Debug, Clone)]
pub struct UltimateBound {
    /// sup ||z|| while the excitation is active.
    pub peak_during: f64,
    /// sup ||z|| after the input is removed.
    pub tail_sup: f64,
    /// True when the windowed envelope of ||z|| is non-increasing over the
    /// tail.
    pub decayed: bool,
}

/// Simulates the closed loop under bounded excitation for the first half of
/// the horizon and zero input afterwards, and checks that `||z||` decays.
pub fn empirical_ultimate_bound(
    closed_loop: &Lti,
    excitation: &Excitation,
    horizon: usize,
    dt: f64,
) -> Result<UltimateBound> {
    if horizon < 8 {
        return Err(Error::Config("horizon too short for a tail estimate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(excitation.seed);
    let active = horizon / 2;
    let mut inputs = Vec::with_capacity(horizon);
    let mut level = 0.0;
    for k in 0..horizon {
        if k < active {
            if k % excitation.hold_steps.max(1) == 0 {
                level = rng.random_range(-excitation.amplitude..=excitation.amplitude);
            }
            inputs.push(DVector::from_element(1, level));
        } else {
            inputs.push(DVector::zeros(1));
        }
    }
    let outputs = closed_loop.simulate(&DVector::zeros(closed_loop.order()), &inputs, dt)?;
    let norms: Vec<f64> = outputs.iter().map(|z| z.norm()).collect();
    Ok(assess_decay(&norms, active))
}

/// Searches for a static uncertainty within `max_gain` that destabilizes the
/// loop. Successful searches document that an inflated bound is not merely a
/// bookkeeping failure; `None` means no static gain in range destabilizes.
///
/// The search runs on the reduced loop seen by the uncertainty (the plant
/// block is unreachable from the channel, so small-loop instability is
/// interconnection instability).
pub fn destabilizing_static_delta(
    gp: &GeneralizedPlant,
    max_gain: f64,
) -> Result<Option<UncertaintyRealization>> {
    let loop_tf = gp.loop_seen_by_delta()?;
    let t0 = loop_tf.freq_response(0.0)?;
    // align with the DC response; t0 is 1 x p
    let mut direction = DVector::from_fn(t0.ncols(), |j, _| t0[(0, j)].re);
    let norm = direction.norm();
    if norm <= 0.0 {
        return Ok(None);
    }
    direction /= norm;
    for &sign in &[1.0, -1.0] {
        for steps in 1..=40 {
            let gain = max_gain * steps as f64 / 40.0;
            let d = DMatrix::from_fn(t0.ncols(), 1, |i, _| sign * gain * direction[i]);
            // close the scalar probe loop: u_i = d * y_i
            let wellposed = 1.0 - (&loop_tf.d * &d)[(0, 0)];
            if wellposed.abs() < 1e-12 {
                continue;
            }
            let a_closed =
                &loop_tf.a + &loop_tf.b * &d * (&loop_tf.c / wellposed);
            if spectral_abscissa(&a_closed) > 0.0 {
                return Ok(Some(UncertaintyRealization {
                    lti: Lti::from_gain(d),
                    bound: gain,
                }));
            }
        }
    }
    Ok(None)
}

/// Runs [`empirical_ultimate_bound`] over consecutive seeds with one shared
/// factorization of the closed loop. Returns the per-seed results.
pub fn empirical_decay_study(
    closed_loop: &Lti,
    base: &Excitation,
    n_seeds: u64,
    horizon: usize,
    dt: f64,
) -> Result<Vec<UltimateBound>> {
    if horizon < 8 {
        return Err(Error::Config("horizon too short for a tail estimate".into()));
    }
    let n = closed_loop.order();
    let stepper = (DMatrix::identity(n, n) - &closed_loop.a * dt).lu();
    let active = horizon / 2;
    let mut results = Vec::with_capacity(n_seeds as usize);
    for offset in 0..n_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(base.seed + offset);
        let mut x = DVector::zeros(n);
        let mut level = 0.0;
        let mut norms = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let u = if k < active {
                if k % base.hold_steps.max(1) == 0 {
                    level = rng.random_range(-base.amplitude..=base.amplitude);
                }
                level
            } else {
                0.0
            };
            let rhs = &x + &closed_loop.b * DVector::from_element(1, u) * dt;
            x = stepper
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("implicit-Euler factorization failed".into()))?;
            let z = &closed_loop.c * &x + &closed_loop.d * DVector::from_element(1, u);
            norms.push(z.norm());
        }
        results.push(assess_decay(&norms, active));
    }
    Ok(results)
}

fn assess_decay(norms: &[f64], active: usize) -> UltimateBound {
    let peak_during = norms[..active].iter().cloned().fold(0.0, f64::max);
    let tail = &norms[active..];
    let tail_sup = tail.iter().cloned().fold(0.0, f64::max);
    let windows = 4;
    let len = (tail.len() / windows).max(1);
    let mut decayed = true;
    let mut prev = f64::INFINITY;
    for w in 0..windows {
        let lo = w * len;
        if lo >= tail.len() {
            break;
        }
        let seg = &tail[lo..((w + 1) * len).min(tail.len())];
        let m = seg.iter().cloned().fold(0.0, f64::max);
        if m > prev * (1.0 + 1e-9) + 1e-15 {
            decayed = false;
        }
        prev = m;
    }
    UltimateBound {
        peak_during,
        tail_sup,
        decayed,
    }
}
