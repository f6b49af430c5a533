//! Line-delimited JSON landmark manifests. Points are stored in pixel
//! coordinates of the recorded frame and normalized on load.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{denormalize, normalize, Frame, LandmarkSet, LandmarkTopology};
use crate::registry::TargetId;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
}

/// One line of a manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub image_path: String,
    pub target_id: TargetId,
    #[serde(default)]
    pub split: Split,
    pub frame: Frame,
    pub points: Vec<[f64; 2]>,
    /// Shared-expression index; records of different identities with the
    /// same index depict the same expression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    /// As written in the manifest (relative paths are relative to it).
    pub image_path: String,
    pub target_id: TargetId,
    pub split: Split,
    pub frame: Frame,
    pub landmarks: LandmarkSet,
    pub expression: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Parses and validates a manifest against `topology`.
pub fn load_manifest(path: &Path, topology: &LandmarkTopology) -> Result<DatasetManifest> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, message: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| bad(n, e.to_string()))?;
        let target_id = TargetId::new(raw.target_id.as_str()).map_err(|e| bad(n, e.to_string()))?;
        if raw.points.len() != topology.point_count {
            return Err(bad(
                n,
                format!(
                    "record {} has {} points, expected {}",
                    records.len(),
                    raw.points.len(),
                    topology.point_count
                ),
            ));
        }
        let norm = normalize(&raw.points, raw.frame).map_err(|e| bad(n, e.to_string()))?;
        records.push(ManifestRecord {
            image_path: raw.image_path,
            target_id,
            split: raw.split,
            frame: raw.frame,
            landmarks: norm.landmarks,
            expression: raw.expression,
        });
    }
    Ok(DatasetManifest {
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        records,
    })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let raw = RawRecord {
            image_path: r.image_path.clone(),
            target_id: r.target_id.clone(),
            split: r.split,
            frame: r.frame,
            points: denormalize(&r.landmarks, r.frame),
            expression: r.expression,
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
