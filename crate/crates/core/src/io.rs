//! On-disk formats: plain-text matrix dumps, reduced-model families and
//! certificate JSON.
//!
//! The matrix dump is one header line `rows cols` followed by one row of
//! whitespace-separated values per line, row-major. Floats are written with
//! full round-trip precision so that load-save-load is exact.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::EvalGrid;
use crate::plant::RegimeId;
use crate::reduction::{assemble_family, ModelFamily, ReducedModel};
use crate::ssm::{OutputSemantics, StateSpaceModel};

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 24 + 16);
    out.push_str(&format!("{} {}\n", m.nrows(), m.ncols()));
    for i in 0..m.nrows() {
        let mut first = true;
        for j in 0..m.ncols() {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{:e}", m[(i, j)]));
            first = false;
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty file"))?;
    let mut dims = header.split_whitespace();
    let rows: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path.display().to_string(), "bad header row count"))?;
    let cols: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(path.display().to_string(), "bad header column count"))?;
    let mut values = Vec::with_capacity(rows * cols);
    for line in lines {
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path.display().to_string(), format!("bad value: {tok}")))?;
            values.push(v);
        }
    }
    if values.len() != rows * cols {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {} values, found {}", rows * cols, values.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// JSON header stored next to each reduced model's matrix dumps.
#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    regime: usize,
    s0: f64,
    k_moments: usize,
    scaling: f64,
    stabilized: bool,
    input_label: String,
    grid: Option<EvalGrid>,
    generic_label: Option<String>,
}

/// Top-level family manifest.
#[derive(Debug, Serialize, Deserialize)]
struct FamilyManifest {
    regimes: Vec<usize>,
    nominal: usize,
}

/// Writes a family as one directory per regime containing `A.mat`, `B_e.mat`,
/// `C.mat`, `V.mat` and `meta.json`, plus a `family.json` manifest.
pub fn save_family(dir: &Path, family: &ModelFamily) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = FamilyManifest {
        regimes: family.members.keys().map(|r| r.0).collect(),
        nominal: 0,
    };
    write_json(&dir.join("family.json"), &manifest)?;
    for (regime, member) in &family.members {
        let scaling = family
            .deltas
            .get(regime)
            .map(|d| d.scaling)
            .unwrap_or(0.0);
        let sub = dir.join(format!("regime_{}", regime.0));
        fs::create_dir_all(&sub).map_err(|e| Error::io(sub.display().to_string(), e))?;
        write_matrix(&sub.join("A.mat"), &member.ssm.a)?;
        write_matrix(&sub.join("B_e.mat"), &member.ssm.b_e)?;
        write_matrix(&sub.join("C.mat"), &member.ssm.c)?;
        write_matrix(&sub.join("V.mat"), &member.basis)?;
        let (grid, generic_label) = match &member.ssm.output {
            OutputSemantics::DenseField(g) => (Some(g.clone()), None),
            OutputSemantics::Generic(l) => (None, Some(l.clone())),
        };
        let meta = ModelMeta {
            regime: regime.0,
            s0: member.s0,
            k_moments: member.k_moments,
            scaling,
            stabilized: member.stabilized,
            input_label: member.ssm.input_label.clone(),
            grid,
            generic_label,
        };
        write_json(&sub.join("meta.json"), &meta)?;
    }
    Ok(())
}

/// Loads a family saved by [`save_family`]. The normalized uncertainty
/// realizations are rebuilt from the stored members and scalings.
pub fn load_family(dir: &Path) -> Result<ModelFamily> {
    let manifest: FamilyManifest = read_json(&dir.join("family.json"))?;
    let mut members = BTreeMap::new();
    let mut scalings = BTreeMap::new();
    for idx in manifest.regimes {
        let regime = RegimeId(idx);
        let sub = dir.join(format!("regime_{idx}"));
        let meta: ModelMeta = read_json(&sub.join("meta.json"))?;
        let a = read_matrix(&sub.join("A.mat"))?;
        let b_e = read_matrix(&sub.join("B_e.mat"))?;
        let c = read_matrix(&sub.join("C.mat"))?;
        let basis = read_matrix(&sub.join("V.mat"))?;
        let output = match (meta.grid, meta.generic_label) {
            (Some(g), _) => OutputSemantics::DenseField(g),
            (None, Some(l)) => OutputSemantics::Generic(l),
            (None, None) => OutputSemantics::Generic(String::new()),
        };
        let ssm = StateSpaceModel::new(a, b_e, c, meta.input_label, output)?;
        members.insert(
            regime,
            ReducedModel {
                ssm,
                regime,
                basis,
                s0: meta.s0,
                k_moments: meta.k_moments,
                stabilized: meta.stabilized,
            },
        );
        scalings.insert(regime, meta.scaling);
    }
    assemble_family(members, Some(scalings))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Creates `dir` (and parents) if needed and returns it.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir.to_path_buf())
}
