//! Landmark representations, the fixed landmark topology and normalization.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{expect_len, Error, Result};

/// A named subset of landmark indices (e.g. `mouth`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkGroup {
    pub name: String,
    pub ranges: Vec<Range<usize>>,
}

impl LandmarkGroup {
    fn new(name: &str, ranges: &[Range<usize>]) -> Self {
        Self {
            name: name.to_string(),
            ranges: ranges.to_vec(),
        }
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Paint region of a rendered face; also the key into an identity palette.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background,
    Skin,
    Brow,
    Eye,
    Nose,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 6] = [
        Region::Background,
        Region::Skin,
        Region::Brow,
        Region::Eye,
        Region::Nose,
        Region::Mouth,
    ];
}

/// How a feature is drawn from its landmarks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Closed smooth curve through the points, in order.
    ClosedCurve(Vec<usize>),
    /// Open jaw line closed by an arc over the forehead.
    JawArc(Vec<usize>),
    /// Almond eye spanned by its two corners.
    EyeCorners(usize, usize),
    /// Mouth from left corner, right corner and lower-lip point.
    MouthTriple(usize, usize, usize),
    Polygon(Vec<usize>),
    Polyline(Vec<usize>),
    Dot(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub region: Region,
    pub shape: Shape,
}

/// Fixed landmark layout shared by every module (and by the studio UI).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTopology {
    pub name: String,
    pub point_count: usize,
    pub groups: Vec<LandmarkGroup>,
    pub connectivity: Vec<[usize; 2]>,
    pub features: Vec<Feature>,
}

fn chain(r: Range<usize>, closed: bool) -> Vec<[usize; 2]> {
    let idx: Vec<usize> = r.collect();
    let mut out: Vec<[usize; 2]> = idx.windows(2).map(|w| [w[0], w[1]]).collect();
    if closed && idx.len() > 2 {
        out.push([idx[idx.len() - 1], idx[0]]);
    }
    out
}

impl LandmarkTopology {
    /// 12-point desk-scale layout: 4 contour, 2 per eye, 1 nose, 3 mouth.
    pub fn toy12() -> Self {
        let mut connectivity = chain(0..4, true);
        connectivity.extend([[4, 5], [6, 7], [9, 11], [11, 10], [10, 9]]);
        Self {
            name: "toy12".into(),
            point_count: 12,
            groups: vec![
                LandmarkGroup::new("contour", &[0..4]),
                LandmarkGroup::new("brows", &[]),
                LandmarkGroup::new("eyes", &[4..8]),
                LandmarkGroup::new("nose", &[8..9]),
                LandmarkGroup::new("mouth", &[9..12]),
            ],
            connectivity,
            features: vec![
                Feature {
                    region: Region::Skin,
                    shape: Shape::ClosedCurve(vec![0, 1, 2, 3]),
                },
                Feature {
                    region: Region::Eye,
                    shape: Shape::EyeCorners(4, 5),
                },
                Feature {
                    region: Region::Eye,
                    shape: Shape::EyeCorners(6, 7),
                },
                Feature {
                    region: Region::Nose,
                    shape: Shape::Dot(8),
                },
                Feature {
                    region: Region::Mouth,
                    shape: Shape::MouthTriple(9, 10, 11),
                },
            ],
        }
    }

    /// 98-point WFLW layout.
    pub fn wflw98() -> Self {
        let mut connectivity = chain(0..33, false);
        connectivity.extend(chain(33..42, true));
        connectivity.extend(chain(42..51, true));
        connectivity.extend(chain(51..55, false));
        connectivity.extend(chain(55..60, false));
        connectivity.extend(chain(60..68, true));
        connectivity.extend(chain(68..76, true));
        connectivity.extend(chain(76..88, true));
        connectivity.extend(chain(88..96, true));
        Self {
            name: "wflw98".into(),
            point_count: 98,
            groups: vec![
                LandmarkGroup::new("contour", &[0..33]),
                LandmarkGroup::new("brows", &[33..51]),
                LandmarkGroup::new("nose", &[51..60]),
                LandmarkGroup::new("eyes", &[60..76, 96..98]),
                LandmarkGroup::new("mouth", &[76..96]),
            ],
            connectivity,
            features: vec![
                Feature {
                    region: Region::Skin,
                    shape: Shape::JawArc((0..33).collect()),
                },
                Feature {
                    region: Region::Brow,
                    shape: Shape::Polygon((33..42).collect()),
                },
                Feature {
                    region: Region::Brow,
                    shape: Shape::Polygon((42..51).collect()),
                },
                Feature {
                    region: Region::Nose,
                    shape: Shape::Polyline((51..55).collect()),
                },
                Feature {
                    region: Region::Nose,
                    shape: Shape::Polyline((55..60).collect()),
                },
                Feature {
                    region: Region::Eye,
                    shape: Shape::Polygon((60..68).collect()),
                },
                Feature {
                    region: Region::Eye,
                    shape: Shape::Polygon((68..76).collect()),
                },
                Feature {
                    region: Region::Mouth,
                    shape: Shape::Polygon((76..88).collect()),
                },
                Feature {
                    region: Region::Eye,
                    shape: Shape::Dot(96),
                },
                Feature {
                    region: Region::Eye,
                    shape: Shape::Dot(97),
                },
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy12" => Ok(Self::toy12()),
            "wflw98" => Ok(Self::wflw98()),
            other => Err(Error::Config(format!(
                "unknown topology `{other}` (expected toy12 or wflw98)"
            ))),
        }
    }

    /// Checks group coverage and index bounds.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None::<&str>; self.point_count];
        for g in &self.groups {
            for i in g.indices() {
                if i >= self.point_count {
                    return Err(Error::Config(format!(
                        "group `{}` index {i} out of range {}",
                        g.name, self.point_count
                    )));
                }
                if let Some(prev) = owner[i] {
                    return Err(Error::Config(format!(
                        "index {i} in both `{prev}` and `{}`",
                        g.name
                    )));
                }
                owner[i] = Some(&g.name);
            }
        }
        if let Some(i) = owner.iter().position(|o| o.is_none()) {
            return Err(Error::Config(format!("index {i} belongs to no group")));
        }
        let in_range = |i: usize| i < self.point_count;
        if !self
            .connectivity
            .iter()
            .all(|[a, b]| in_range(*a) && in_range(*b))
        {
            return Err(Error::Config("connectivity index out of range".into()));
        }
        for f in &self.features {
            let ok = match &f.shape {
                Shape::ClosedCurve(v)
                | Shape::JawArc(v)
                | Shape::Polygon(v)
                | Shape::Polyline(v) => v.iter().all(|&i| in_range(i)),
                Shape::EyeCorners(a, b) => in_range(*a) && in_range(*b),
                Shape::MouthTriple(a, b, c) => in_range(*a) && in_range(*b) && in_range(*c),
                Shape::Dot(a) => in_range(*a),
            };
            if !ok {
                return Err(Error::Config("feature index out of range".into()));
            }
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Option<&LandmarkGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Group lookup with an error listing the available names.
    pub fn require_group(&self, name: &str) -> Result<&LandmarkGroup> {
        self.group(name).ok_or_else(|| {
            let names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
            Error::Config(format!(
                "unknown landmark group `{name}` (groups: {})",
                names.join(", ")
            ))
        })
    }

    pub fn vector_len(&self) -> usize {
        2 * self.point_count
    }
}

/// Width/height of the pixel frame landmarks were measured in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub w: f64,
    pub h: f64,
}

impl Frame {
    pub fn square(size: usize) -> Self {
        Self {
            w: size as f64,
            h: size as f64,
        }
    }
}

/// L points in normalized `[0,1]²` image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    /// Validates the point count against `topology` and the `[0,1]` range.
    pub fn new(points: Vec<[f64; 2]>, topology: &LandmarkTopology) -> Result<Self> {
        expect_len("landmarks", topology.point_count, points.len())?;
        Self::from_points(points)
    }

    /// Validates the `[0,1]` range only.
    pub fn from_points(points: Vec<[f64; 2]>) -> Result<Self> {
        for (index, p) in points.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::NonFinitePoint { index });
            }
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::Shape(format!(
                    "landmark {index} at ({}, {}) is outside [0,1]",
                    p[0], p[1]
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_vector(&self) -> LandmarkVector {
        LandmarkVector {
            values: self.points.iter().flat_map(|p| [p[0], p[1]]).collect(),
        }
    }

    /// Mean position of the listed points.
    pub fn centroid(&self, indices: impl IntoIterator<Item = usize>) -> [f64; 2] {
        let mut acc = [0.0, 0.0];
        let mut n = 0.0;
        for i in indices {
            acc[0] += self.points[i][0];
            acc[1] += self.points[i][1];
            n += 1.0;
        }
        [acc[0] / n, acc[1] / n]
    }

    /// Point-wise transform, clamping results into `[0,1]`.
    pub fn map_clamped(&self, f: impl Fn(usize, [f64; 2]) -> [f64; 2]) -> (LandmarkSet, usize) {
        let mut clamped = 0;
        let points = self
            .points
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let q = f(i, p);
                let c = [q[0].clamp(0.0, 1.0), q[1].clamp(0.0, 1.0)];
                if c != q {
                    clamped += 1;
                }
                c
            })
            .collect();
        (LandmarkSet { points }, clamped)
    }
}

/// Flat `(x0, y0, x1, y1, …)` landmark vector of length 2L.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkVector {
    values: Vec<f64>,
}

impl LandmarkVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &LandmarkVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Mean Euclidean distance between corresponding points.
    pub fn mean_point_distance(&self, other: &LandmarkVector) -> f64 {
        let n = self.values.len() / 2;
        self.values
            .chunks(2)
            .zip(other.values.chunks(2))
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / n as f64
    }

    pub fn to_set(&self) -> Result<LandmarkSet> {
        if self.values.len() % 2 != 0 {
            return Err(Error::Shape(format!(
                "landmark vector of odd length {}",
                self.values.len()
            )));
        }
        LandmarkSet::from_points(self.values.chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    /// Like [`to_set`](Self::to_set) but clamps into `[0,1]`, reporting how
    /// many points moved.
    pub fn to_set_clamped(&self) -> (LandmarkSet, usize) {
        let raw = LandmarkSet {
            points: self.values.chunks(2).map(|c| [c[0], c[1]]).collect(),
        };
        raw.map_clamped(|_, p| p)
    }
}

/// Result of [`normalize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub landmarks: LandmarkSet,
    pub clamped: usize,
}

/// Pixel coordinates → `[0,1]` coordinates, clamping out-of-frame points.
pub fn normalize(points: &[[f64; 2]], frame: Frame) -> Result<Normalized> {
    if !(frame.w > 0.0 && frame.h > 0.0) {
        return Err(Error::ZeroFrame {
            width: frame.w,
            height: frame.h,
        });
    }
    if let Some(index) = points
        .iter()
        .position(|p| !(p[0].is_finite() && p[1].is_finite()))
    {
        return Err(Error::NonFinitePoint { index });
    }
    let raw = LandmarkSet {
        points: points.to_vec(),
    };
    let (landmarks, clamped) = raw.map_clamped(|_, p| [p[0] / frame.w, p[1] / frame.h]);
    if clamped > 0 {
        log::warn!("{clamped} landmark(s) outside the frame were clamped");
    }
    Ok(Normalized { landmarks, clamped })
}

/// `[0,1]` coordinates → pixel coordinates.
pub fn denormalize(landmarks: &LandmarkSet, frame: Frame) -> Vec<[f64; 2]> {
    landmarks
        .points
        .iter()
        .map(|p| [p[0] * frame.w, p[1] * frame.h])
        .collect()
}

/// Scales the flattened vector to unit Euclidean norm.
pub fn unit_l2(v: &LandmarkVector) -> Result<LandmarkVector> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(LandmarkVector::new(
        v.values.iter().map(|x| x / n).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_topologies_are_valid() {
        LandmarkTopology::toy12().validate().unwrap();
        LandmarkTopology::wflw98().validate().unwrap();
        assert_eq!(LandmarkTopology::wflw98().group("eyes").unwrap().len(), 18);
    }

    #[test]
    fn overlapping_groups_are_rejected() {
        let mut t = LandmarkTopology::toy12();
        t.groups[0].ranges = vec![0..5];
        assert!(t.validate().is_err());
        let mut t = LandmarkTopology::toy12();
        t.groups[4].ranges = vec![9..11];
        assert!(t.validate().is_err());
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&[[128.0, 64.0], [0.0, 0.0]], Frame::square(256)).unwrap();
        assert_eq!(n.landmarks.points(), &[[0.5, 0.25], [0.0, 0.0]]);
        assert_eq!(n.clamped, 0);

        let n = normalize(&[[300.0, 10.0]], Frame::square(256)).unwrap();
        assert_eq!(n.landmarks.points(), &[[1.0, 0.0390625]]);
        assert_eq!(n.clamped, 1);
    }

    #[test]
    fn normalize_rejects_bad_input() {
        assert!(matches!(
            normalize(&[[1.0, 1.0], [f64::NAN, 0.0]], Frame::square(8)),
            Err(Error::NonFinitePoint { index: 1 })
        ));
        assert!(matches!(
            normalize(&[[1.0, 1.0]], Frame { w: 0.0, h: 8.0 }),
            Err(Error::ZeroFrame { .. })
        ));
    }

    #[test]
    fn denormalize_examples() {
        let s = LandmarkSet::from_points(vec![[0.5, 0.5]]).unwrap();
        assert_eq!(denormalize(&s, Frame::square(64)), vec![[32.0, 32.0]]);
        let s = LandmarkSet::from_points(vec![[1.0, 1.0]]).unwrap();
        assert_eq!(denormalize(&s, Frame::square(256)), vec![[256.0, 256.0]]);
    }

    #[test]
    fn unit_l2_examples() {
        let mut v = vec![0.0; 24];
        v[0] = 3.0;
        v[1] = 4.0;
        let u = unit_l2(&LandmarkVector::new(v)).unwrap();
        assert!((u.values()[0] - 0.6).abs() < 1e-15);
        assert!((u.values()[1] - 0.8).abs() < 1e-15);
        assert!(u.values()[2..].iter().all(|&x| x == 0.0));
        assert!(matches!(
            unit_l2(&LandmarkVector::new(vec![0.0; 4])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn unit_l2_matches_scalar_loop_on_196_dims() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let v: Vec<f64> = (0..196).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut ss = 0.0;
        for x in &v {
            ss += x * x;
        }
        let norm = ss.sqrt();
        let u = unit_l2(&LandmarkVector::new(v.clone())).unwrap();
        for (a, b) in u.values().iter().zip(&v) {
            assert!((a - b / norm).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn normalize_denormalize_round_trip(
            pts in prop::collection::vec((0.0f64..256.0, 0.0f64..192.0), 98),
        ) {
            let frame = Frame { w: 256.0, h: 192.0 };
            let points: Vec<[f64; 2]> = pts.iter().map(|&(x, y)| [x, y]).collect();
            let n = normalize(&points, frame).unwrap();
            prop_assert_eq!(n.clamped, 0);
            let back = denormalize(&n.landmarks, frame);
            for (a, b) in back.iter().zip(&points) {
                prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }

        #[test]
        fn unit_l2_is_unit_and_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..200)) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
            let u = unit_l2(&LandmarkVector::new(v)).unwrap();
            prop_assert!((u.norm() - 1.0).abs() < 1e-7);
            let uu = unit_l2(&u).unwrap();
            for (a, b) in u.values().iter().zip(uu.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn vector_set_round_trip_is_exact(pts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 12)) {
            let set = LandmarkSet::from_points(pts.iter().map(|&(x, y)| [x, y]).collect()).unwrap();
            prop_assert_eq!(set.to_vector().to_set().unwrap(), set);
        }
    }
}
