//! Landmark files and the edits applied to them: group translation,
//! per-point moves and group scaling about the group centroid.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize, Frame, LandmarkSet, LandmarkTopology};

/// On-disk landmark file, in the manifest point format. Without a frame the
/// points are already normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<Frame>,
    pub points: Vec<[f64; 2]>,
}

pub fn load_landmarks(path: &Path) -> Result<LandmarkSet> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let file: LandmarkFile = serde_json::from_str(&text)?;
    match file.frame {
        Some(frame) => Ok(normalize(&file.points, frame)?.landmarks),
        None => LandmarkSet::from_points(file.points),
    }
}

pub fn save_landmarks(path: &Path, lms: &LandmarkSet) -> Result<()> {
    let file = LandmarkFile {
        frame: None,
        points: lms.points().to_vec(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum Edit {
    /// `group:dx,dy`
    Shift { group: String, dx: f64, dy: f64 },
    /// `index:x,y`
    Move { index: usize, x: f64, y: f64 },
    /// `group:factor`
    Scale { group: String, factor: f64 },
}

fn parse_pair(s: &str) -> Option<(f64, f64)> {
    let (a, b) = s.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl Edit {
    pub fn parse_shift(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("shift `{s}` should look like group:dx,dy"));
        let (group, pair) = s.split_once(':').ok_or_else(bad)?;
        let (dx, dy) = parse_pair(pair).ok_or_else(bad)?;
        Ok(Edit::Shift {
            group: group.to_string(),
            dx,
            dy,
        })
    }

    pub fn parse_move(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("move `{s}` should look like index:x,y"));
        let (index, pair) = s.split_once(':').ok_or_else(bad)?;
        let (x, y) = parse_pair(pair).ok_or_else(bad)?;
        Ok(Edit::Move {
            index: index.trim().parse().map_err(|_| bad())?,
            x,
            y,
        })
    }

    pub fn parse_scale(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("scale `{s}` should look like group:factor"));
        let (group, f) = s.split_once(':').ok_or_else(bad)?;
        Ok(Edit::Scale {
            group: group.to_string(),
            factor: f.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for Edit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Edit::Shift { group, dx, dy } => write!(f, "shift {group} by ({dx}, {dy})"),
            Edit::Move { index, x, y } => write!(f, "move point {index} to ({x}, {y})"),
            Edit::Scale { group, factor } => write!(f, "scale {group} by {factor}"),
        }
    }
}

impl FromStr for Edit {
    type Err = Error;

    /// `shift=group:dx,dy`, `move=index:x,y` or `scale=group:factor`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some(("shift", v)) => Edit::parse_shift(v),
            Some(("move", v)) => Edit::parse_move(v),
            Some(("scale", v)) => Edit::parse_scale(v),
            _ => Err(Error::Config(format!("unknown edit `{s}`"))),
        }
    }
}

/// Moves larger than this (normalized units) are reported as extreme.
pub const EXTREME_MOVE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Edited {
    pub landmarks: LandmarkSet,
    pub warnings: Vec<String>,
}

/// Applies `edits` in order. Points pushed outside `[0,1]` are clamped and
/// reported; large moves are reported but kept.
pub fn apply_edits(
    lms: &LandmarkSet,
    topology: &LandmarkTopology,
    edits: &[Edit],
) -> Result<Edited> {
    if lms.len() != topology.point_count {
        return Err(Error::Dimension {
            what: "landmarks",
            expected: topology.point_count,
            got: lms.len(),
        });
    }
    let mut cur = lms.clone();
    let mut warnings = Vec::new();
    for e in edits {
        let (next, clamped) = match e {
            Edit::Shift { group, dx, dy } => {
                if !(dx.is_finite() && dy.is_finite()) {
                    return Err(Error::Config(format!("{e}: offsets must be finite")));
                }
                let idx: Vec<usize> = topology.require_group(group)?.indices().collect();
                cur.map_clamped(|i, p| {
                    if idx.contains(&i) {
                        [p[0] + dx, p[1] + dy]
                    } else {
                        p
                    }
                })
            }
            Edit::Move { index, x, y } => {
                if *index >= topology.point_count {
                    return Err(Error::Config(format!(
                        "{e}: index out of range for {} points",
                        topology.point_count
                    )));
                }
                if !(x.is_finite() && y.is_finite()) {
                    return Err(Error::Config(format!("{e}: coordinates must be finite")));
                }
                cur.map_clamped(|i, p| if i == *index { [*x, *y] } else { p })
            }
            Edit::Scale { group, factor } => {
                if !(*factor > 0.0 && factor.is_finite()) {
                    return Err(Error::Config(format!("{e}: factor must be positive")));
                }
                let idx: Vec<usize> = topology.require_group(group)?.indices().collect();
                if *factor == 1.0 {
                    (cur.clone(), 0)
                } else {
                    let c = cur.centroid(idx.iter().copied());
                    cur.map_clamped(|i, p| {
                        if idx.contains(&i) {
                            [c[0] + (p[0] - c[0]) * factor, c[1] + (p[1] - c[1]) * factor]
                        } else {
                            p
                        }
                    })
                }
            }
        };
        if clamped > 0 {
            warnings.push(format!("{e}: {clamped} point(s) clamped into [0,1]"));
        }
        let far = cur
            .points()
            .iter()
            .zip(next.points())
            .filter(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]) > EXTREME_MOVE)
            .count();
        if far > 0 {
            warnings.push(format!(
                "{e}: {far} point(s) moved more than {EXTREME_MOVE}; expect artifacts"
            ));
        }
        cur = next;
    }
    Ok(Edited {
        landmarks: cur,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::canonical_basis;

    #[test]
    fn shift_touches_only_the_group() {
        let topo = LandmarkTopology::toy12();
        let base = canonical_basis(&topo).unwrap();
        let out =
            apply_edits(&base, &topo, &[Edit::parse_shift("mouth:0,-0.05").unwrap()]).unwrap();
        let mouth: Vec<usize> = topo.require_group("mouth").unwrap().indices().collect();
        for (i, (a, b)) in base.points().iter().zip(out.landmarks.points()).enumerate() {
            if mouth.contains(&i) {
                assert!((a[1] - 0.05 - b[1]).abs() < 1e-12 && a[0] == b[0]);
            } else {
                assert_eq!(a, b);
            }
        }
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn scale_one_is_a_no_op_and_zero_is_rejected() {
        let topo = LandmarkTopology::toy12();
        let base = canonical_basis(&topo).unwrap();
        let same = apply_edits(&base, &topo, &[Edit::parse_scale("contour:1").unwrap()]).unwrap();
        assert_eq!(same.landmarks, base);
        assert!(apply_edits(&base, &topo, &[Edit::parse_scale("contour:0").unwrap()]).is_err());
        assert!(apply_edits(&base, &topo, &[Edit::parse_scale("ears:1.1").unwrap()]).is_err());
    }

    #[test]
    fn extreme_edits_warn() {
        let topo = LandmarkTopology::toy12();
        let base = canonical_basis(&topo).unwrap();
        let out = apply_edits(&base, &topo, &["shift=eyes:0,-0.9".parse().unwrap()]).unwrap();
        assert_eq!(out.warnings.len(), 2);
        assert!(out.landmarks.points().iter().all(|p| p[1] >= 0.0));
    }
}
