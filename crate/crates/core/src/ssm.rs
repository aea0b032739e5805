//! State-space system types.
//!
//! [`Lti`] is the general (A, B, C, D) block used by the norm engine and the
//! LFT machinery. [`StateSpaceModel`] is the domain-facing realization with a
//! scalar exposure channel, an optional feedback channel and labeled output
//! semantics.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EvalGrid;
use crate::linalg::spectral_abscissa;

type C64 = Complex<f64>;

/// General linear time-invariant block `x' = Ax + Bu, y = Cx + Du`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl Lti {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension("A must be square".into()));
        }
        let n = a.nrows();
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "B has {} rows, expected {}",
                b.nrows(),
                n
            )));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!(
                "C has {} columns, expected {}",
                c.ncols(),
                n
            )));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Dimension(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        Ok(Lti { a, b, c, d })
    }

    /// Static gain block `y = D u`.
    pub fn from_gain(d: DMatrix<f64>) -> Self {
        let (p, m) = (d.nrows(), d.ncols());
        Lti {
            a: DMatrix::zeros(0, 0),
            b: DMatrix::zeros(0, m),
            c: DMatrix::zeros(p, 0),
            d,
        }
    }

    /// Zero system with the given output/input dimensions.
    pub fn zero(n_out: usize, n_in: usize) -> Self {
        Lti::from_gain(DMatrix::zeros(n_out, n_in))
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_abscissa(&self) -> f64 {
        spectral_abscissa(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.order() == 0 || self.spectral_abscissa() < 0.0
    }

    /// Frequency response `C (jw I - A)^{-1} B + D`.
    pub fn freq_response(&self, omega: f64) -> Result<DMatrix<C64>> {
        let n = self.order();
        let d_c = self.d.map(|x| C64::new(x, 0.0));
        if n == 0 {
            return Ok(d_c);
        }
        let mut m = self.a.map(|x| C64::new(-x, 0.0));
        for i in 0..n {
            m[(i, i)] += C64::new(0.0, omega);
        }
        let b_c = self.b.map(|x| C64::new(x, 0.0));
        let x = m
            .lu()
            .solve(&b_c)
            .ok_or_else(|| Error::Numerical(format!("(jwI - A) singular at omega = {omega}")))?;
        Ok(self.c.map(|x| C64::new(x, 0.0)) * x + d_c)
    }

    /// Largest singular value of the frequency response at `omega`.
    pub fn gain_at(&self, omega: f64) -> Result<f64> {
        let g = self.freq_response(omega)?;
        Ok(g.singular_values().max())
    }

    /// Parallel difference `self - other` as one realization (shared input,
    /// outputs subtracted).
    pub fn parallel_sub(&self, other: &Lti) -> Result<Lti> {
        if self.n_inputs() != other.n_inputs() || self.n_outputs() != other.n_outputs() {
            return Err(Error::Dimension(
                "parallel difference needs matching input/output dimensions".into(),
            ));
        }
        let (n1, n2) = (self.order(), other.order());
        let mut a = DMatrix::zeros(n1 + n2, n1 + n2);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, n1), (n2, n2)).copy_from(&other.a);
        let mut b = DMatrix::zeros(n1 + n2, self.n_inputs());
        b.view_mut((0, 0), (n1, self.n_inputs())).copy_from(&self.b);
        b.view_mut((n1, 0), (n2, self.n_inputs())).copy_from(&other.b);
        let mut c = DMatrix::zeros(self.n_outputs(), n1 + n2);
        c.view_mut((0, 0), (self.n_outputs(), n1)).copy_from(&self.c);
        c.view_mut((0, n1), (self.n_outputs(), n2)).copy_from(&(-&other.c));
        Lti::new(a, b, c, &self.d - &other.d)
    }

    /// Output scaled by `alpha`.
    pub fn scale_output(&self, alpha: f64) -> Lti {
        Lti {
            a: self.a.clone(),
            b: self.b.clone(),
            c: &self.c * alpha,
            d: &self.d * alpha,
        }
    }

    /// Implicit-Euler simulation from `x0` under the given input sequence.
    /// Returns the outputs after each step.
    pub fn simulate(&self, x0: &DVector<f64>, inputs: &[DVector<f64>], dt: f64) -> Result<Vec<DVector<f64>>> {
        if x0.len() != self.order() {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, expected {}",
                x0.len(),
                self.order()
            )));
        }
        if dt <= 0.0 {
            return Err(Error::Config(format!("step size must be positive, got {dt}")));
        }
        let n = self.order();
        let stepper = (DMatrix::identity(n, n) - &self.a * dt).lu();
        let mut x = x0.clone();
        let mut out = Vec::with_capacity(inputs.len());
        for u in inputs {
            if u.len() != self.n_inputs() {
                return Err(Error::Dimension(format!(
                    "input has {} entries, expected {}",
                    u.len(),
                    self.n_inputs()
                )));
            }
            let rhs = &x + &self.b * u * dt;
            x = stepper
                .solve(&rhs)
                .ok_or_else(|| Error::Numerical("implicit-Euler factorization failed".into()))?;
            out.push(&self.c * &x + &self.d * u);
        }
        Ok(out)
    }
}

/// What the rows of an output matrix mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutputSemantics {
    /// Interleaved (x, y) displacement in nm at the points of a dense grid.
    DenseField(EvalGrid),
    /// Anything else; carries a free-form label.
    Generic(String),
}

impl OutputSemantics {
    pub fn grid(&self) -> Option<&EvalGrid> {
        match self {
            OutputSemantics::DenseField(g) => Some(g),
            OutputSemantics::Generic(_) => None,
        }
    }
}

/// Strictly proper model with a scalar exposure input, an optional feedback
/// input channel and labeled outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b_e: DMatrix<f64>,
    pub b_f: Option<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub input_label: String,
    pub output: OutputSemantics,
}

impl StateSpaceModel {
    pub fn new(
        a: DMatrix<f64>,
        b_e: DMatrix<f64>,
        c: DMatrix<f64>,
        input_label: impl Into<String>,
        output: OutputSemantics,
    ) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension("A must be square".into()));
        }
        if b_e.nrows() != a.nrows() || b_e.ncols() != 1 {
            return Err(Error::Dimension(format!(
                "B_e must be {}x1, got {}x{}",
                a.nrows(),
                b_e.nrows(),
                b_e.ncols()
            )));
        }
        if c.ncols() != a.nrows() {
            return Err(Error::Dimension(format!(
                "C has {} columns, expected {}",
                c.ncols(),
                a.nrows()
            )));
        }
        if let OutputSemantics::DenseField(grid) = &output {
            if c.nrows() != 2 * grid.n_points() {
                return Err(Error::Dimension(format!(
                    "C has {} rows but the dense grid has {} points (expect {} rows)",
                    c.nrows(),
                    grid.n_points(),
                    2 * grid.n_points()
                )));
            }
        }
        Ok(StateSpaceModel {
            a,
            b_e,
            b_f: None,
            c,
            input_label: input_label.into(),
            output,
        })
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn grid(&self) -> Option<&EvalGrid> {
        self.output.grid()
    }

    /// The exposure-to-output channel as a general block.
    pub fn exposure_channel(&self) -> Lti {
        Lti {
            a: self.a.clone(),
            b: self.b_e.clone(),
            c: self.c.clone(),
            d: DMatrix::zeros(self.n_outputs(), 1),
        }
    }

    pub fn spectral_abscissa(&self) -> f64 {
        spectral_abscissa(&self.a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn first_order() -> Lti {
        // H(s) = 1 / (s + 1)
        Lti::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn freq_response_of_first_order_lag() {
        let sys = first_order();
        let g0 = sys.freq_response(0.0).unwrap();
        assert_abs_diff_eq!(g0[(0, 0)].re, 1.0, epsilon = 1e-12);
        let g1 = sys.freq_response(1.0).unwrap();
        assert_abs_diff_eq!(g1[(0, 0)].norm(), 1.0 / 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn parallel_sub_of_identical_systems_is_zero() {
        let sys = first_order();
        let diff = sys.parallel_sub(&sys).unwrap();
        for w in [0.0, 0.3, 2.0, 50.0] {
            assert!(diff.gain_at(w).unwrap() < 1e-14);
        }
    }

    #[test]
    fn simulate_tracks_step_response() {
        let sys = first_order();
        let dt = 1e-3;
        let steps = 2000;
        let inputs = vec![DVector::from_element(1, 1.0); steps];
        let out = sys.simulate(&DVector::zeros(1), &inputs, dt).unwrap();
        let t = steps as f64 * dt;
        let expected = 1.0 - (-t).exp();
        assert_abs_diff_eq!(out.last().unwrap()[0], expected, epsilon = 2e-3);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let bad = Lti::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
        );
        assert!(bad.is_err());
        let grid = EvalGrid::new(2, 2, 1.0).unwrap();
        let bad_model = StateSpaceModel::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(3, 1), // should be 8 rows for a 2x2 grid
            "exposure",
            OutputSemantics::DenseField(grid),
        );
        assert!(bad_model.is_err());
    }
}
