//! Ranked groups of derived images and their CSV manifest.

use std::path::Path;

use thiserror::Error;

use crate::image::Image;
use crate::ranking::{ComparabilityLabels, RankingError};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: row {row}: {reason}")]
    Row { path: String, row: usize, reason: String },
}

/// A set of images derived from one source whose ground-truth targets are
/// ordered like their transform parameters φ: `φ_i < φ_j` implies
/// `target_i ≤ target_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedGroup {
    pub source_id: usize,
    pub phi: Vec<f64>,
    pub images: Vec<Image>,
}

impl RankedGroup {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Ordered pairs `(i, j)` with `φ_i < φ_j`.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.phi.len() {
            for j in 0..self.phi.len() {
                if self.phi[i] < self.phi[j] {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Comparability labels for this group alone.
    pub fn labels(&self) -> Result<ComparabilityLabels, RankingError> {
        ComparabilityLabels::from_groups(&vec![Some(0); self.len()], &self.phi)
    }
}

/// One manifest line: `group_id, member_index, phi, image_path`.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub group_id: usize,
    pub member_index: usize,
    pub phi: f64,
    pub image_path: String,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), ManifestError> {
    let err = |source| ManifestError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["group_id", "member_index", "phi", "image_path"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.group_id.to_string(),
            r.member_index.to_string(),
            format!("{}", r.phi),
            r.image_path.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, ManifestError> {
    let p = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|source| ManifestError::Csv {
        path: p.clone(),
        source,
    })?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|source| ManifestError::Csv {
            path: p.clone(),
            source,
        })?;
        let bad = |reason: String| ManifestError::Row {
            path: p.clone(),
            row: i + 1,
            reason,
        };
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let field = |k: usize| rec.get(k).unwrap_or_default();
        rows.push(ManifestRow {
            group_id: field(0).parse().map_err(|_| bad(format!("bad group_id `{}`", field(0))))?,
            member_index: field(1)
                .parse()
                .map_err(|_| bad(format!("bad member_index `{}`", field(1))))?,
            phi: field(2).parse().map_err(|_| bad(format!("bad phi `{}`", field(2))))?,
            image_path: field(3).to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            ManifestRow {
                group_id: 0,
                member_index: 0,
                phi: -0.0,
                image_path: "g0/0.pgm".into(),
            },
            ManifestRow {
                group_id: 0,
                member_index: 1,
                phi: -1.0,
                image_path: "g0/1.pgm".into(),
            },
            ManifestRow {
                group_id: 1,
                member_index: 0,
                phi: 0.1 + 0.2,
                image_path: "g1/0.pgm".into(),
            },
        ];
        write_manifest(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("group_id,member_index,phi,image_path\n"));
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }

    #[test]
    fn rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "group_id,member_index,phi,image_path\nx,0,1,a\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(ManifestError::Row { row: 1, .. })));
    }

    #[test]
    fn ordered_pairs_follow_phi() {
        let img = Image::filled(2, 2, 1, 0.0).unwrap();
        let g = RankedGroup {
            source_id: 0,
            phi: vec![0.0, -1.0, -2.0],
            images: vec![img.clone(), img.clone(), img],
        };
        assert_eq!(g.ordered_pairs(), vec![(1, 0), (2, 0), (2, 1)]);
        let l = g.labels().unwrap();
        assert_eq!(l.comparable_pairs(), 3);
        assert_eq!(l.get(2, 0), 1);
    }
}
