//! Grid field files.
//!
//! 1D and 2D fields are CSV: a single row in 1D, one row per index of the
//! first axis in 2D. Volumes are raw little-endian `f32` in row-major order
//! with a JSON sidecar `{"shape", "spacing", "order": "row-major"}` and an
//! optional `"origin"` (lower domain corner, the domain being centred on zero
//! otherwise).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::GridField;
use crate::geometry::{Domain, Grid};

pub fn field_to_csv(field: &GridField) -> Result<String> {
    let shape = field.grid().shape();
    let v = field.values();
    let row = |r: &[f64]| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    match shape.len() {
        1 => Ok(format!("{}\n", row(v))),
        2 => Ok(v.chunks(shape[1]).map(|r| row(r) + "\n").collect()),
        d => Err(Error::InvalidConfig(format!("CSV fields are 1D or 2D, got {d}D"))),
    }
}

/// Parses a CSV field onto a grid over `domain`, inferring the shape.
pub fn field_from_csv(text: &str, domain: &Domain) -> Result<GridField> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::MalformedHeader(format!("row {}: {e}", i + 1)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, |r| r.len());
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::MalformedHeader("ragged or empty CSV field".into()));
    }
    let shape = match domain.dim() {
        1 if rows.len() == 1 => vec![cols],
        2 => vec![rows.len(), cols],
        d => {
            return Err(Error::ShapeMismatch {
                expected: d,
                found: if rows.len() == 1 { 1 } else { 2 },
            })
        }
    };
    GridField::new(Grid::new(domain.clone(), shape)?, rows.concat())
}

pub fn write_field_csv(field: &GridField, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, field_to_csv(field)?)?;
    Ok(())
}

pub fn read_field_csv(path: impl AsRef<Path>, domain: &Domain) -> Result<GridField> {
    field_from_csv(&fs::read_to_string(path)?, domain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Vec<f64>>,
}

impl VolumeHeader {
    pub fn for_grid(grid: &Grid) -> Self {
        Self {
            shape: grid.shape().to_vec(),
            spacing: (0..grid.dim()).map(|k| grid.spacing(k)).collect(),
            order: "row-major".into(),
            origin: Some(grid.domain().lower().to_vec()),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        if self.order != "row-major" {
            return Err(Error::MalformedHeader(format!("unsupported order {:?}", self.order)));
        }
        let d = self.shape.len();
        if !(1..=3).contains(&d) || self.spacing.len() != d || self.origin.as_ref().is_some_and(|o| o.len() != d) {
            return Err(Error::MalformedHeader(
                "shape, spacing and origin lengths disagree".into(),
            ));
        }
        if self.shape.contains(&0) || self.spacing.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::MalformedHeader("shape and spacing must be positive".into()));
        }
        let extent: Vec<f64> = self
            .shape
            .iter()
            .zip(&self.spacing)
            .map(|(n, h)| *n as f64 * h)
            .collect();
        let lower = match &self.origin {
            Some(o) => o.clone(),
            None => extent.iter().map(|e| -0.5 * e).collect(),
        };
        let upper = lower.iter().zip(&extent).map(|(l, e)| l + e).collect();
        Grid::new(Domain::new(lower, upper)?, self.shape.clone())
    }
}

/// Sidecar path: the payload path with its extension replaced by `json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_volume(field: &GridField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = field.values().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let header = VolumeHeader::for_grid(field.grid());
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

/// Reads a raw volume and its sidecar.
pub fn ingest_volume(path: impl AsRef<Path>) -> Result<GridField> {
    let path = path.as_ref();
    let header_text = fs::read_to_string(sidecar_path(path))?;
    let header: VolumeHeader = serde_json::from_str(&header_text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let grid = header.grid()?;
    let bytes = fs::read(path)?;
    if bytes.len() != 4 * grid.len() {
        return Err(Error::ShapeMismatch {
            expected: grid.len(),
            found: bytes.len() / 4,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    GridField::new(grid, values)
}

/// CSV for 1D/2D, raw + sidecar for 3D.
pub fn write_field(field: &GridField, path: impl AsRef<Path>) -> Result<()> {
    if field.grid().dim() == 3 {
        write_volume(field, path)
    } else {
        write_field_csv(field, path)
    }
}

/// Reads a field written by [`write_field`]; `domain` is needed for CSV.
pub fn read_field(path: impl AsRef<Path>, domain: Option<&Domain>) -> Result<GridField> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "csv") {
        let domain = domain.ok_or_else(|| Error::InvalidConfig("a domain is needed to read a CSV field".into()))?;
        read_field_csv(path, domain)
    } else {
        ingest_volume(path)
    }
}
