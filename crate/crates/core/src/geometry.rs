//! Reticle-plane geometry: evaluation grids, exposure image areas and
//! alignment-mark layouts. Lengths are in mm throughout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Uniform rectangular grid of field-evaluation points spanning the full
/// reticle, `[0, side] x [0, side]`, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub nx: usize,
    pub ny: usize,
    pub side: f64,
}

impl EvalGrid {
    pub fn new(nx: usize, ny: usize, side: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Config(format!(
                "evaluation grid must be at least 2x2, got {nx}x{ny}"
            )));
        }
        if side <= 0.0 {
            return Err(Error::Config(format!("grid side must be positive, got {side}")));
        }
        Ok(EvalGrid { nx, ny, side })
    }

    pub fn n_points(&self) -> usize {
        self.nx * self.ny
    }

    pub fn pitch_x(&self) -> f64 {
        self.side / (self.nx - 1) as f64
    }

    pub fn pitch_y(&self) -> f64 {
        self.side / (self.ny - 1) as f64
    }

    /// Grid points in row-major order (`idx = j * nx + i`).
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::with_capacity(self.n_points());
        for j in 0..self.ny {
            for i in 0..self.nx {
                pts.push((i as f64 * self.pitch_x(), j as f64 * self.pitch_y()));
            }
        }
        pts
    }

    /// Indices of grid points lying inside the given rectangle (inclusive).
    pub fn points_inside(&self, area: &ImageArea) -> Vec<usize> {
        self.points()
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| area.contains(x, y))
            .map(|(idx, _)| idx)
            .collect()
    }
}

/// Rectangular exposure region on the reticle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageArea {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Exposure source power in W.
    pub exposure_power: f64,
}

impl ImageArea {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn validate(&self, reticle_side: f64) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Config(format!(
                "degenerate image area [{}, {}] x [{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        if self.x_min < 0.0 || self.y_min < 0.0 || self.x_max > reticle_side || self.y_max > reticle_side {
            return Err(Error::Config(format!(
                "image area [{}, {}] x [{}, {}] extends outside the reticle (side {})",
                self.x_min, self.x_max, self.y_min, self.y_max, reticle_side
            )));
        }
        if self.exposure_power < 0.0 {
            return Err(Error::Config("exposure power must be non-negative".into()));
        }
        Ok(())
    }
}

/// Alignment-mark group. Edge marks are the ones the proposed strategy skips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkGroup {
    Top,
    Bottom,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub x: f64,
    pub y: f64,
    pub group: MarkGroup,
}

/// Sparse measurement layout: mark positions plus the set of groups that are
/// actually measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkLayout {
    pub marks: Vec<Mark>,
    pub active_groups: BTreeSet<MarkGroup>,
}

impl MarkLayout {
    pub fn new(marks: Vec<Mark>, active_groups: BTreeSet<MarkGroup>) -> Self {
        MarkLayout { marks, active_groups }
    }

    /// Marks belonging to an active group, in layout order.
    pub fn active_marks(&self) -> Vec<&Mark> {
        self.marks
            .iter()
            .filter(|m| self.active_groups.contains(&m.group))
            .collect()
    }

    pub fn n_active(&self) -> usize {
        self.active_marks().len()
    }

    /// Same marks with a different active-group selection.
    pub fn with_active_groups(&self, groups: impl IntoIterator<Item = MarkGroup>) -> MarkLayout {
        MarkLayout {
            marks: self.marks.clone(),
            active_groups: groups.into_iter().collect(),
        }
    }

    pub fn validate(&self, reticle_side: f64) -> Result<()> {
        for m in &self.marks {
            if m.x < 0.0 || m.x > reticle_side || m.y < 0.0 || m.y > reticle_side {
                return Err(Error::Config(format!(
                    "mark at ({}, {}) lies outside the reticle (side {})",
                    m.x, m.y, reticle_side
                )));
            }
        }
        Ok(())
    }
}

/// Builds the bilinear sampling operator from an interleaved (x, y) field on
/// `grid` to interleaved (x, y) values at `points`.
///
/// Row `2k` of the result samples the x component at point `k`, row `2k + 1`
/// the y component; columns follow the same interleaving over grid points.
pub fn bilinear_sampler(grid: &EvalGrid, points: &[(f64, f64)]) -> Result<DMatrix<f64>> {
    let mut s = DMatrix::zeros(2 * points.len(), 2 * grid.n_points());
    for (k, &(x, y)) in points.iter().enumerate() {
        if x < -1e-9 || x > grid.side + 1e-9 || y < -1e-9 || y > grid.side + 1e-9 {
            return Err(Error::Config(format!(
                "sample point ({x}, {y}) outside the grid (side {})",
                grid.side
            )));
        }
        let fx = (x / grid.pitch_x()).clamp(0.0, (grid.nx - 1) as f64);
        let fy = (y / grid.pitch_y()).clamp(0.0, (grid.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(grid.nx - 2);
        let j0 = (fy.floor() as usize).min(grid.ny - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let weights = [
            (i0, j0, (1.0 - tx) * (1.0 - ty)),
            (i0 + 1, j0, tx * (1.0 - ty)),
            (i0, j0 + 1, (1.0 - tx) * ty),
            (i0 + 1, j0 + 1, tx * ty),
        ];
        for (i, j, w) in weights {
            let p = j * grid.nx + i;
            s[(2 * k, 2 * p)] += w;
            s[(2 * k + 1, 2 * p + 1)] += w;
        }
    }
    Ok(s)
}

/// Thin-plate spline interpolation of scattered scalar samples, evaluated at
/// query points. Used by the status-quo strategy surrogate.
pub fn thin_plate_interpolate(
    sites: &[(f64, f64)],
    values: &[f64],
    queries: &[(f64, f64)],
) -> Result<Vec<f64>> {
    if sites.len() != values.len() {
        return Err(Error::Dimension(format!(
            "{} interpolation sites but {} values",
            sites.len(),
            values.len()
        )));
    }
    if sites.len() < 3 {
        return Err(Error::Config(
            "thin-plate interpolation needs at least 3 sites".into(),
        ));
    }
    let n = sites.len();
    let kernel = |r2: f64| {
        if r2 <= 0.0 {
            0.0
        } else {
            0.5 * r2 * r2.ln()
        }
    };
    // [K P; P^T 0] [w; a] = [v; 0] with affine polynomial part P = [1 x y].
    let dim = n + 3;
    let mut m = DMatrix::zeros(dim, dim);
    let mut rhs = nalgebra::DVector::zeros(dim);
    for i in 0..n {
        for j in 0..n {
            let dx = sites[i].0 - sites[j].0;
            let dy = sites[i].1 - sites[j].1;
            m[(i, j)] = kernel(dx * dx + dy * dy);
        }
        m[(i, n)] = 1.0;
        m[(i, n + 1)] = sites[i].0;
        m[(i, n + 2)] = sites[i].1;
        m[(n, i)] = 1.0;
        m[(n + 1, i)] = sites[i].0;
        m[(n + 2, i)] = sites[i].1;
        rhs[i] = values[i];
    }
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("thin-plate system is singular (collinear sites?)".into()))?;
    let mut out = Vec::with_capacity(queries.len());
    for &(qx, qy) in queries {
        let mut v = sol[n] + sol[n + 1] * qx + sol[n + 2] * qy;
        for i in 0..n {
            let dx = qx - sites[i].0;
            let dy = qy - sites[i].1;
            v += sol[i] * kernel(dx * dx + dy * dy);
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_points_row_major() {
        let g = EvalGrid::new(3, 2, 10.0).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], (0.0, 0.0));
        assert_eq!(pts[2], (10.0, 0.0));
        assert_eq!(pts[3], (0.0, 10.0));
    }

    #[test]
    fn image_area_outside_rejected() {
        let a = ImageArea {
            x_min: -1.0,
            x_max: 5.0,
            y_min: 0.0,
            y_max: 5.0,
            exposure_power: 1.0,
        };
        assert!(a.validate(10.0).is_err());
    }

    #[test]
    fn bilinear_reproduces_linear_fields() {
        let g = EvalGrid::new(4, 4, 9.0).unwrap();
        // field values f(x, y) = 2x - y on both components
        let pts = g.points();
        let mut field = nalgebra::DVector::zeros(2 * pts.len());
        for (k, &(x, y)) in pts.iter().enumerate() {
            field[2 * k] = 2.0 * x - y;
            field[2 * k + 1] = x + 0.5 * y;
        }
        let queries = [(0.7, 1.3), (4.5, 4.5), (9.0, 9.0), (0.0, 0.0)];
        let s = bilinear_sampler(&g, &queries).unwrap();
        let sampled = s * &field;
        for (k, &(x, y)) in queries.iter().enumerate() {
            assert_abs_diff_eq!(sampled[2 * k], 2.0 * x - y, epsilon = 1e-12);
            assert_abs_diff_eq!(sampled[2 * k + 1], x + 0.5 * y, epsilon = 1e-12);
        }
    }

    #[test]
    fn thin_plate_interpolates_sites_exactly() {
        let sites = vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.3, 0.7)];
        let values = vec![1.0, 2.0, -1.0, 0.5, 0.0];
        let at_sites = thin_plate_interpolate(&sites, &values, &sites).unwrap();
        for (a, b) in at_sites.iter().zip(values.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn active_marks_filters_groups() {
        let layout = MarkLayout::new(
            vec![
                Mark { x: 1.0, y: 9.0, group: MarkGroup::Top },
                Mark { x: 1.0, y: 1.0, group: MarkGroup::Bottom },
                Mark { x: 0.0, y: 5.0, group: MarkGroup::Edge },
            ],
            [MarkGroup::Top, MarkGroup::Bottom].into_iter().collect(),
        );
        assert_eq!(layout.n_active(), 2);
        let all = layout.with_active_groups([MarkGroup::Top, MarkGroup::Bottom, MarkGroup::Edge]);
        assert_eq!(all.n_active(), 3);
    }
}
