//! Toy identities: a canonical landmark basis deformed by an identity
//! affine, plus a shared expression model (pose shift, mouth opening and
//! per-point jitter) that can be applied to any identity.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, LandmarkTopology, Region};
use crate::registry::TargetId;

/// Sampled landmarks must stay inside `[MARGIN, 1 − MARGIN]²`.
pub const MARGIN: f64 = 0.05;
/// Truncation of every standard-normal draw, in standard deviations.
pub const TRUNCATION: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [u8; 3],
    pub skin: [u8; 3],
    pub brow: [u8; 3],
    pub eye: [u8; 3],
    pub nose: [u8; 3],
    pub mouth: [u8; 3],
}

impl Palette {
    pub fn color(&self, region: Region) -> [u8; 3] {
        match region {
            Region::Background => self.background,
            Region::Skin => self.skin,
            Region::Brow => self.brow,
            Region::Eye => self.eye,
            Region::Nose => self.nose,
            Region::Mouth => self.mouth,
        }
    }

    /// Color in `[-1, 1]` units.
    pub fn signed(&self, region: Region) -> [f64; 3] {
        self.color(region).map(|c| c as f64 / 127.5 - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub target_id: TargetId,
    pub display_name: String,
    pub topology: String,
    pub canonical: LandmarkSet,
    /// Vertical scale about the image center.
    pub scale: f64,
    /// Horizontal scale relative to `scale`.
    pub aspect: f64,
    pub jitter_sigma: f64,
    pub pose_sigma: f64,
    /// Lower-lip drop at full mouth opening, normalized units.
    pub mouth_open_max: f64,
    pub palette: Palette,
    pub texture_seed: u64,
}

/// Identity-independent state of one face: where it sits, how open the
/// mouth is, and small per-point offsets. Values are in standard units and
/// are scaled by each identity's sigmas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub shift: [f64; 2],
    pub mouth_open: f64,
    pub jitter: Vec<[f64; 2]>,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNCATION {
            return z;
        }
    }
}

impl Expression {
    pub fn neutral(points: usize) -> Self {
        Self {
            shift: [0.0, 0.0],
            mouth_open: 0.0,
            jitter: vec![[0.0, 0.0]; points],
        }
    }

    pub fn sample<R: Rng + ?Sized>(points: usize, rng: &mut R) -> Self {
        let shift = [truncated_normal(rng), truncated_normal(rng)];
        let mouth_open = rng.random_range(0.0..1.0);
        let jitter = (0..points)
            .map(|_| [truncated_normal(rng), truncated_normal(rng)])
            .collect();
        Self {
            shift,
            mouth_open,
            jitter,
        }
    }
}

/// Indices of mouth points that sit below the mouth centroid (the lower lip).
pub fn lower_lip(topology: &LandmarkTopology, canonical: &LandmarkSet) -> Vec<usize> {
    let Some(mouth) = topology.group("mouth") else {
        return Vec::new();
    };
    let cy = canonical.centroid(mouth.indices())[1];
    mouth
        .indices()
        .filter(|&i| canonical.points()[i][1] > cy + 1e-9)
        .collect()
}

impl IdentitySpec {
    pub fn topology(&self) -> Result<LandmarkTopology> {
        LandmarkTopology::by_name(&self.topology)
    }

    fn deform(&self, topology: &LandmarkTopology, expr: &Expression) -> Vec<[f64; 2]> {
        let lower = lower_lip(topology, &self.canonical);
        let (sx, sy) = (self.scale * self.aspect, self.scale);
        self.canonical
            .points()
            .iter()
            .enumerate()
            .map(|(i, &[x, mut y])| {
                if lower.contains(&i) {
                    y += expr.mouth_open * self.mouth_open_max;
                }
                let j = expr.jitter.get(i).copied().unwrap_or([0.0, 0.0]);
                // Written as an offset from the basis so the neutral case is exact.
                [
                    x + (x - 0.5) * (sx - 1.0)
                        + expr.shift[0] * self.pose_sigma
                        + j[0] * self.jitter_sigma,
                    y + (y - 0.5) * (sy - 1.0)
                        + expr.shift[1] * self.pose_sigma
                        + j[1] * self.jitter_sigma,
                ]
            })
            .collect()
    }

    /// This identity's landmarks for `expr`.
    pub fn landmarks(&self, expr: &Expression) -> Result<LandmarkSet> {
        let topo = self.topology()?;
        if expr.jitter.len() != topo.point_count {
            return Err(Error::Dimension {
                what: "expression jitter entries",
                expected: topo.point_count,
                got: expr.jitter.len(),
            });
        }
        LandmarkSet::new(self.deform(&topo, expr), &topo)
    }

    /// Draws an expression and applies it.
    pub fn sample_landmarks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LandmarkSet> {
        let n = self.canonical.len();
        self.landmarks(&Expression::sample(n, rng))
    }

    /// Checks that every reachable sample (all draws within truncation, any
    /// mouth opening) stays inside the margin box.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::IdentitySpec {
            id: self.target_id.to_string(),
            reason,
        };
        let topo = self.topology().map_err(|e| bad(e.to_string()))?;
        if self.canonical.len() != topo.point_count {
            return Err(bad(format!(
                "canonical basis has {} points, topology {} needs {}",
                self.canonical.len(),
                topo.name,
                topo.point_count
            )));
        }
        let positive = [self.scale, self.aspect];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(bad("scale and aspect must be positive".into()));
        }
        let sigmas = [self.jitter_sigma, self.pose_sigma, self.mouth_open_max];
        if sigmas.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(bad("sigmas must be non-negative".into()));
        }
        let spread = TRUNCATION * (self.pose_sigma + self.jitter_sigma);
        let (lo, hi) = (MARGIN, 1.0 - MARGIN);
        for open in [0.0, 1.0] {
            let mut e = Expression::neutral(topo.point_count);
            e.mouth_open = open;
            for (i, p) in self.deform(&topo, &e).iter().enumerate() {
                for c in p {
                    if c - spread < lo || c + spread > hi {
                        return Err(bad(format!(
                            "landmark {i} can leave [{lo}, {hi}] (center {c:.3}, spread {spread:.3})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Canonical (mean-identity, neutral-expression) basis for a topology.
pub fn canonical_basis(topology: &LandmarkTopology) -> Result<LandmarkSet> {
    let points = match topology.name.as_str() {
        "toy12" => vec![
            [0.22, 0.50],
            [0.50, 0.84],
            [0.78, 0.50],
            [0.50, 0.16],
            [0.33, 0.42],
            [0.45, 0.42],
            [0.55, 0.42],
            [0.67, 0.42],
            [0.50, 0.56],
            [0.38, 0.70],
            [0.62, 0.70],
            [0.50, 0.74],
        ],
        "wflw98" => wflw_basis(),
        other => {
            return Err(Error::Config(format!(
                "no canonical basis for topology `{other}`"
            )))
        }
    };
    LandmarkSet::new(points, topology)
}

fn ellipse(
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    from: f64,
    to: f64,
    n: usize,
    closed: bool,
) -> Vec<[f64; 2]> {
    let steps = if closed { n } else { n - 1 };
    (0..n)
        .map(|k| {
            let a = from + (to - from) * k as f64 / steps as f64;
            [cx + rx * a.cos(), cy + ry * a.sin()]
        })
        .collect()
}

fn wflw_basis() -> Vec<[f64; 2]> {
    let mut p = Vec::with_capacity(98);
    // Jaw: left temple, chin, right temple.
    p.extend(ellipse(0.5, 0.45, 0.29, 0.38, PI, 0.0, 33, false));
    for cx in [0.36, 0.64] {
        let mut upper = ellipse(cx, 0.33, 0.09, 0.03, PI, 2.0 * PI, 5, false);
        let lower = ellipse(cx, 0.335, 0.075, 0.012, 0.0, PI, 6, false);
        upper.extend_from_slice(&lower[1..5]);
        p.extend(upper);
    }
    p.extend((0..4).map(|k| [0.5, 0.40 + 0.045 * k as f64]));
    p.extend((0..5).map(|k| {
        let x = 0.44 + 0.03 * k as f64;
        [x, 0.57 + 0.012 * (1.0 - ((x - 0.5) / 0.06).powi(2))]
    }));
    for cx in [0.37, 0.63] {
        p.extend(ellipse(cx, 0.43, 0.06, 0.022, PI, 3.0 * PI, 8, true));
    }
    p.extend(ellipse(0.5, 0.70, 0.10, 0.045, PI, 3.0 * PI, 12, true));
    p.extend(ellipse(0.5, 0.70, 0.07, 0.02, PI, 3.0 * PI, 8, true));
    p.push([0.37, 0.43]);
    p.push([0.63, 0.43]);
    p
}

/// The five default toy identities. Faces differ in width and height by
/// up to about 25% and in every palette color except the background.
pub fn default_identities(topology: &LandmarkTopology) -> Result<Vec<IdentitySpec>> {
    let canonical = canonical_basis(topology)?;
    let background = [40, 44, 52];
    let rows: [(&str, &str, f64, f64, [[u8; 3]; 5]); 5] = [
        (
            "ada",
            "Ada",
            1.00,
            1.00,
            [
                [224, 182, 150],
                [90, 60, 40],
                [60, 110, 170],
                [190, 140, 110],
                [170, 60, 70],
            ],
        ),
        (
            "boris",
            "Boris",
            0.86,
            1.25,
            [
                [196, 140, 100],
                [40, 30, 25],
                [70, 140, 80],
                [160, 105, 75],
                [130, 40, 50],
            ],
        ),
        (
            "chen",
            "Chen",
            1.10,
            0.80,
            [
                [240, 210, 170],
                [120, 90, 50],
                [90, 70, 40],
                [215, 170, 135],
                [200, 90, 100],
            ],
        ),
        (
            "dara",
            "Dara",
            0.84,
            0.95,
            [
                [140, 95, 70],
                [25, 20, 20],
                [50, 40, 35],
                [115, 75, 55],
                [110, 45, 55],
            ],
        ),
        (
            "emil",
            "Emil",
            1.08,
            1.15,
            [
                [250, 225, 200],
                [200, 160, 90],
                [100, 150, 210],
                [230, 190, 160],
                [220, 120, 130],
            ],
        ),
    ];
    rows.iter()
        .enumerate()
        .map(|(k, (id, name, scale, aspect, colors))| {
            let spec = IdentitySpec {
                target_id: TargetId::new(*id)?,
                display_name: name.to_string(),
                topology: topology.name.clone(),
                canonical: canonical.clone(),
                scale: *scale,
                aspect: *aspect,
                jitter_sigma: 0.004,
                pose_sigma: 0.02,
                mouth_open_max: 0.05,
                palette: Palette {
                    background,
                    skin: colors[0],
                    brow: colors[1],
                    eye: colors[2],
                    nose: colors[3],
                    mouth: colors[4],
                },
                texture_seed: 1000 + k as u64,
            };
            spec.validate()?;
            Ok(spec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neutral_identity_affine_returns_canonical() {
        let topo = LandmarkTopology::toy12();
        let mut spec = default_identities(&topo).unwrap().remove(0);
        spec.scale = 1.0;
        spec.aspect = 1.0;
        let out = spec.landmarks(&Expression::neutral(12)).unwrap();
        assert_eq!(out, spec.canonical);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let topo = LandmarkTopology::toy12();
        let spec = &default_identities(&topo).unwrap()[1];
        let a = spec
            .sample_landmarks(&mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = spec
            .sample_landmarks(&mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wflw_identities_validate() {
        let topo = LandmarkTopology::wflw98();
        let ids = default_identities(&topo).unwrap();
        assert_eq!(ids.len(), 5);
        let lower = lower_lip(&topo, &ids[0].canonical);
        assert!(!lower.is_empty());
    }

    #[test]
    fn out_of_bounds_spec_is_rejected() {
        let topo = LandmarkTopology::toy12();
        let mut spec = default_identities(&topo).unwrap().remove(0);
        spec.scale = 1.4;
        assert!(matches!(spec.validate(), Err(Error::IdentitySpec { .. })));
    }

    #[test]
    fn toy_lower_lip_is_single_point() {
        let topo = LandmarkTopology::toy12();
        let c = canonical_basis(&topo).unwrap();
        assert_eq!(lower_lip(&topo, &c), vec![11]);
    }
}
