//! Correspondence sets and the plain-text particle format.
//!
//! A particle file holds one point per line as three whitespace-separated
//! decimal coordinates. Values are written with the shortest representation
//! that parses back to the same `f64`, so write/read is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type Point = [f64; 3];

/// Ordered surface points of one shape; index `j` denotes the same location on every shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub sample_id: String,
    pub points: Vec<Point>,
}

impl CorrespondenceSet {
    pub fn new(sample_id: impl Into<String>, points: Vec<Point>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("correspondence coordinates must be finite".into()));
        }
        Ok(Self { sample_id: sample_id.into(), points })
    }

    /// Builds a set from `[x0, y0, z0, x1, ...]`.
    pub fn from_flat(sample_id: impl Into<String>, flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(CoreError::Dimension(format!("flat length {} is not a multiple of 3", flat.len())));
        }
        Self::new(sample_id, flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }
}

/// Checks that a population is non-empty with a common particle count, returning it.
pub fn common_size(population: &[CorrespondenceSet]) -> Result<usize> {
    let first = population.first().ok_or_else(|| CoreError::Invalid("empty population".into()))?;
    let m = first.len();
    if let Some(bad) = population.iter().find(|s| s.len() != m) {
        return Err(CoreError::Dimension(format!(
            "sample {} has {} points, expected {m}",
            bad.sample_id,
            bad.len()
        )));
    }
    Ok(m)
}

fn parse_rows(path: &Path, columns: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| CoreError::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != columns {
            return Err(parse_err(format!("expected {columns} values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err("non-finite value".into()));
        }
        rows.push(vals);
    }
    Ok(rows)
}

pub fn read_particles(path: &Path) -> Result<Vec<Point>> {
    Ok(parse_rows(path, 3)?.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Reads a particle file, naming the set after the file stem.
pub fn read_correspondences(path: &Path) -> Result<CorrespondenceSet> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    CorrespondenceSet::new(id, read_particles(path)?)
}

pub fn write_particles(path: &Path, points: &[Point]) -> Result<()> {
    let mut out = String::with_capacity(points.len() * 64);
    for p in points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

/// Particle file with a fourth scalar column (for per-point fields on a mean shape).
pub fn write_scalar_particles(path: &Path, points: &[Point], values: &[f64]) -> Result<()> {
    if points.len() != values.len() {
        return Err(CoreError::Dimension(format!("{} points vs {} values", points.len(), values.len())));
    }
    let mut out = String::with_capacity(points.len() * 80);
    for (p, v) in points.iter().zip(values) {
        let _ = writeln!(out, "{} {} {} {}", p[0], p[1], p[2], v);
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

pub fn read_scalar_particles(path: &Path) -> Result<(Vec<Point>, Vec<f64>)> {
    let rows = parse_rows(path, 4)?;
    Ok(rows.into_iter().map(|r| ([r[0], r[1], r[2]], r[3])).unzip())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip() {
        let s = CorrespondenceSet::from_flat("a", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(s.points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(s.flatten(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(CorrespondenceSet::from_flat("a", &[1.0]).is_err());
    }

    #[test]
    fn reader_tolerates_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.particles");
        fs::write(&p, "1 2 3  \n\t4.5 -6 7e-3\n\n").unwrap();
        assert_eq!(read_particles(&p).unwrap(), vec![[1.0, 2.0, 3.0], [4.5, -6.0, 7e-3]]);
        fs::write(&p, "1 2\n").unwrap();
        assert!(matches!(read_particles(&p), Err(CoreError::Parse { line: 1, .. })));
    }
}
