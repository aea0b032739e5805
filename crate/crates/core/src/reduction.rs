//! Krylov moment-matching model reduction and family centering.
//!
//! Per regime, an orthonormal basis of the rational Krylov space at the
//! expansion point `s0` projects the full-order model onto a small one whose
//! leading transfer-function moments match the full model. The resulting
//! member set is then centered into a nominal model plus difference
//! realizations whose peak gains normalize the uncertainty set.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use crate::certify::hinf_norm;
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, spectral_abscissa};
use crate::plant::RegimeId;
use crate::ssm::{Lti, StateSpaceModel};

/// Reduced-order model with its projection metadata.
#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub ssm: StateSpaceModel,
    pub regime: RegimeId,
    /// Orthonormal projection basis, full-order rows by reduced columns.
    pub basis: DMatrix<f64>,
    /// Expansion point used for the reduction, 1/s.
    pub s0: f64,
    /// Number of matched moments (equals the reduced order).
    pub k_moments: usize,
    /// True when the projected state matrix had to be post-stabilized by
    /// reflecting unstable eigenvalues across the imaginary axis.
    pub stabilized: bool,
}

impl ReducedModel {
    pub fn order(&self) -> usize {
        self.ssm.order()
    }
}

/// Transfer-function moments of the exposure channel about `s0`.
///
/// Returns the Taylor coefficients of `H(s0 + sigma)` in `sigma`, i.e.
/// `m_j = (-1)^j C ((s0 I - A)^{-1})^{j+1} B_e` for `j = 0..k-1`. With this
/// sign convention a first-order lag `1/(s + 1)` at `s0 = 0` yields
/// `(1, -1, 1, ...)`, matching its geometric series `1 - s + s^2 - ...`.
pub fn compute_moments(model: &StateSpaceModel, s0: f64, k: usize) -> Result<Vec<DVector<f64>>> {
    if k < 1 {
        return Err(Error::Config("moment count must be at least 1".into()));
    }
    let n = model.order();
    let shifted = DMatrix::identity(n, n) * s0 - &model.a;
    let lu = shifted.lu();
    let mut moments = Vec::with_capacity(k);
    let mut w = DVector::from_column_slice(model.b_e.as_slice());
    let mut sign = 1.0;
    for _ in 0..k {
        w = lu.solve(&w).ok_or(Error::ExpansionOnSpectrum)?;
        moments.push(&model.c * &w * sign);
        sign = -sign;
    }
    Ok(moments)
}

/// Relative mismatch per moment between a full model and its reduction.
pub fn moment_relative_errors(full: &StateSpaceModel, reduced: &ReducedModel) -> Result<Vec<f64>> {
    let k = reduced.k_moments.max(1);
    let m_full = compute_moments(full, reduced.s0, k)?;
    let m_red = compute_moments(&reduced.ssm, reduced.s0, k)?;
    Ok(m_full
        .iter()
        .zip(m_red.iter())
        .map(|(f, r)| (f - r).norm() / f.norm().max(1e-30))
        .collect())
}

/// Reduces a stable model by one-sided (Galerkin) projection onto the
/// order-`k` rational Krylov space at `s0`.
///
/// The returned model matches the first `k` moments of the full model at
/// `s0`. If the Krylov vectors are rank deficient the reduced order (and the
/// matched-moment count) shrinks accordingly. If the projection destabilizes
/// the state matrix, unstable eigenvalues are reflected across the imaginary
/// axis and the result is flagged via [`ReducedModel::stabilized`].
pub fn krylov_reduce(
    model: &StateSpaceModel,
    regime: RegimeId,
    s0: f64,
    k: usize,
) -> Result<ReducedModel> {
    if k < 1 {
        return Err(Error::Config("reduction order must be at least 1".into()));
    }
    if !crate::linalg::is_hurwitz(&model.a) {
        return Err(Error::Numerical(
            "krylov_reduce requires a stable full-order model".into(),
        ));
    }
    let n = model.order();
    let shifted = DMatrix::identity(n, n) * s0 - &model.a;
    let lu = shifted.lu();

    let basis = if model.b_e.amax() == 0.0 {
        // zero input column: every moment is zero and trivially matched by
        // any projection; keep the dominant output directions so the model
        // can still track measured states
        let svd = model.c.clone().svd(false, true);
        let v_t = svd.v_t.as_ref().ok_or_else(|| Error::Numerical("SVD failed".into()))?;
        let kept = k.min(v_t.nrows());
        let mut cols = DMatrix::zeros(n, kept);
        for j in 0..kept {
            cols.set_column(j, &v_t.row(j).transpose());
        }
        orthonormalize(&cols, 1e-12)
    } else {
        let mut vectors = DMatrix::zeros(n, k.min(n));
        let mut w = DVector::from_column_slice(model.b_e.as_slice());
        for j in 0..vectors.ncols() {
            w = lu.solve(&w).ok_or(Error::ExpansionOnSpectrum)?;
            vectors.set_column(j, &w);
        }
        orthonormalize(&vectors, 1e-12)
    };
    if basis.ncols() == 0 {
        return Err(Error::Numerical(
            "Krylov space is empty (zero model?)".into(),
        ));
    }

    let mut a_r = basis.transpose() * &model.a * &basis;
    let b_r = basis.transpose() * &model.b_e;
    let c_r = &model.c * &basis;

    let mut stabilized = false;
    if spectral_abscissa(&a_r) >= 0.0 {
        a_r = reflect_unstable(&a_r)?;
        stabilized = true;
    }

    let k_moments = basis.ncols();
    let ssm = StateSpaceModel::new(
        a_r,
        b_r,
        c_r,
        model.input_label.clone(),
        model.output.clone(),
    )?;
    Ok(ReducedModel {
        ssm,
        regime,
        basis,
        s0,
        k_moments,
        stabilized,
    })
}

/// Reflects eigenvalues with positive real part across the imaginary axis
/// using the real Schur form.
fn reflect_unstable(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let schur = a
        .clone()
        .try_schur(1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("Schur iteration failed during stabilization".into()))?;
    let (q, mut t) = schur.unpack();
    let mut i = 0;
    while i < n {
        let two_by_two = i + 1 < n && t[(i + 1, i)].abs() > 1e-14;
        if two_by_two {
            let re = 0.5 * (t[(i, i)] + t[(i + 1, i + 1)]);
            if re >= 0.0 {
                let shift = 2.0 * re.max(1e-12);
                t[(i, i)] -= shift;
                t[(i + 1, i + 1)] -= shift;
            }
            i += 2;
        } else {
            if t[(i, i)] >= 0.0 {
                t[(i, i)] = -t[(i, i)].max(1e-12);
            }
            i += 1;
        }
    }
    Ok(&q * t * q.transpose())
}

/// One normalized uncertainty direction of the family.
#[derive(Debug, Clone)]
pub struct DeltaModel {
    /// Difference realization scaled so its peak gain is at most 1
    /// (the zero system when the member equals the nominal model).
    pub normalized: Lti,
    /// Peak gain of the raw difference `M_i - M_n`.
    pub scaling: f64,
}

impl DeltaModel {
    /// The raw difference realization `scaling * normalized`.
    pub fn raw(&self) -> Lti {
        self.normalized.scale_output(self.scaling)
    }
}

/// Nominal model plus normalized uncertainty set, indexed by regime.
#[derive(Debug, Clone)]
pub struct ModelFamily {
    /// Scheduler table: regime to family member. The regime-0 entry is the
    /// nominal model exactly.
    pub members: BTreeMap<RegimeId, ReducedModel>,
    pub deltas: BTreeMap<RegimeId, DeltaModel>,
}

impl ModelFamily {
    pub fn nominal(&self) -> &ReducedModel {
        &self.members[&RegimeId::NOMINAL]
    }

    pub fn member(&self, regime: RegimeId) -> Result<&ReducedModel> {
        self.members
            .get(&regime)
            .ok_or_else(|| Error::Config(format!("no family member for regime {regime}")))
    }

    /// `M_n + scaling_i * Delta_i` as one realization; reproduces member
    /// `i`'s exposure-channel response exactly.
    pub fn reconstructed(&self, regime: RegimeId) -> Result<Lti> {
        let delta = self
            .deltas
            .get(&regime)
            .ok_or_else(|| Error::Config(format!("no delta entry for regime {regime}")))?;
        let nominal = self.nominal().ssm.exposure_channel();
        parallel_add(&nominal, &delta.raw())
    }

    pub fn max_scaling(&self) -> f64 {
        self.deltas.values().map(|d| d.scaling).fold(0.0, f64::max)
    }

    /// Regime with the largest uncertainty scaling, if any is nonzero.
    pub fn worst_regime(&self) -> Option<RegimeId> {
        self.deltas
            .iter()
            .filter(|(_, d)| d.scaling > 0.0)
            .max_by(|a, b| a.1.scaling.total_cmp(&b.1.scaling))
            .map(|(r, _)| *r)
    }

    pub fn stabilized_count(&self) -> usize {
        self.members.values().filter(|m| m.stabilized).count()
    }
}

fn parallel_add(a: &Lti, b: &Lti) -> Result<Lti> {
    let neg = b.scale_output(-1.0);
    a.parallel_sub(&neg)
}

/// Centers a member set around its nominal (regime 0) model.
///
/// Each delta is the parallel difference `M_i - M_n` on the exposure channel
/// with scaling equal to its peak gain; the stored realization is the
/// difference divided by that scaling, so its own peak gain is 1.
pub fn center_models(members: BTreeMap<RegimeId, ReducedModel>) -> Result<ModelFamily> {
    assemble_family(members, None)
}

/// Shared construction for [`center_models`] and family deserialization.
/// When `known_scalings` is given (load path) the peak-gain computation is
/// skipped and the stored values are trusted.
pub fn assemble_family(
    members: BTreeMap<RegimeId, ReducedModel>,
    known_scalings: Option<BTreeMap<RegimeId, f64>>,
) -> Result<ModelFamily> {
    if !members.contains_key(&RegimeId::NOMINAL) {
        return Err(Error::Config(
            "model family requires a regime-0 (nominal) member".into(),
        ));
    }
    let n_out = members[&RegimeId::NOMINAL].ssm.n_outputs();
    for (r, m) in &members {
        if m.ssm.n_outputs() != n_out {
            return Err(Error::Dimension(format!(
                "member {r} has {} outputs, nominal has {n_out}",
                m.ssm.n_outputs()
            )));
        }
    }
    let nominal_channel = members[&RegimeId::NOMINAL].ssm.exposure_channel();
    let mut deltas = BTreeMap::new();
    for (&regime, member) in &members {
        let diff = member.ssm.exposure_channel().parallel_sub(&nominal_channel)?;
        if !diff.is_stable() {
            return Err(Error::UnstableDelta(format!(
                "difference realization for regime {regime} is unstable; cannot normalize by a finite peak gain"
            )));
        }
        let scaling = match &known_scalings {
            Some(map) => *map.get(&regime).ok_or_else(|| {
                Error::Config(format!("missing stored scaling for regime {regime}"))
            })?,
            None => {
                if regime.is_nominal() {
                    0.0
                } else {
                    let gain = hinf_norm(&diff, 1e-6)?;
                    // identical members leave only rounding noise behind
                    if gain < 1e-12 {
                        0.0
                    } else {
                        gain
                    }
                }
            }
        };
        let normalized = if scaling > 0.0 {
            diff.scale_output(1.0 / scaling)
        } else {
            Lti::zero(n_out, 1)
        };
        deltas.insert(regime, DeltaModel { normalized, scaling });
    }
    Ok(ModelFamily { members, deltas })
}
