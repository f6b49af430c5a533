//! Deterministic supersampled rasterizer for toy faces.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::identity::IdentitySpec;
use crate::error::{expect_len, Result};
use crate::geometry::{LandmarkSet, LandmarkTopology, Region, Shape};
use crate::image::ImageTensor;
use facemark_tensor::Tensor;

/// Samples per pixel along each axis.
const SUPERSAMPLE: usize = 4;
const TEXTURE_AMPLITUDE: f64 = 0.04;

type Pt = [f64; 2];

enum Prim {
    Fill(Vec<Pt>),
    Stroke(Vec<Pt>, f64),
    Disk(Pt, f64),
}

struct Painted {
    region: Region,
    prim: Prim,
    bbox: [f64; 4],
}

fn bbox(points: &[Pt], pad: f64) -> [f64; 4] {
    let mut b = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for p in points {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    [b[0] - pad, b[1] - pad, b[2] + pad, b[3] + pad]
}

fn inside_polygon(poly: &[Pt], p: Pt) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segment_distance(a: Pt, b: Pt, p: Pt) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * d[0], a[1] + t * d[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

impl Painted {
    fn new(region: Region, prim: Prim) -> Self {
        let bbox = match &prim {
            Prim::Fill(v) => bbox(v, 0.0),
            Prim::Stroke(v, w) => bbox(v, *w),
            Prim::Disk(c, r) => bbox(&[*c], *r),
        };
        Self { region, prim, bbox }
    }

    fn contains(&self, p: Pt) -> bool {
        let b = self.bbox;
        if p[0] < b[0] || p[0] > b[2] || p[1] < b[1] || p[1] > b[3] {
            return false;
        }
        match &self.prim {
            Prim::Fill(v) => v.len() >= 3 && inside_polygon(v, p),
            Prim::Stroke(v, w) => v.windows(2).any(|s| segment_distance(s[0], s[1], p) <= *w),
            Prim::Disk(c, r) => (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= r * r,
        }
    }
}

/// Closed Catmull-Rom spline through `pts`.
fn closed_curve(pts: &[Pt], per_segment: usize) -> Vec<Pt> {
    let n = pts.len();
    let mut out = Vec::with_capacity(n * per_segment);
    for i in 0..n {
        let p0 = pts[(i + n - 1) % n];
        let p1 = pts[i];
        let p2 = pts[(i + 1) % n];
        let p3 = pts[(i + 2) % n];
        for k in 0..per_segment {
            let t = k as f64 / per_segment as f64;
            let (t2, t3) = (t * t, t * t * t);
            let c = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b
                    + (c - a) * t
                    + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2
                    + (3.0 * b - a - 3.0 * c + d) * t3)
            };
            out.push([c(p0[0], p1[0], p2[0], p3[0]), c(p0[1], p1[1], p2[1], p3[1])]);
        }
    }
    out
}

fn quad_bezier(a: Pt, ctrl: Pt, b: Pt, n: usize) -> Vec<Pt> {
    (0..=n)
        .map(|k| {
            let t = k as f64 / n as f64;
            let u = 1.0 - t;
            [
                u * u * a[0] + 2.0 * u * t * ctrl[0] + t * t * b[0],
                u * u * a[1] + 2.0 * u * t * ctrl[1] + t * t * b[1],
            ]
        })
        .collect()
}

/// Curve from `a` to `b` that passes through `through` at its midpoint.
fn bezier_through(a: Pt, through: Pt, b: Pt, n: usize) -> Vec<Pt> {
    let ctrl = [
        2.0 * through[0] - 0.5 * (a[0] + b[0]),
        2.0 * through[1] - 0.5 * (a[1] + b[1]),
    ];
    quad_bezier(a, ctrl, b, n)
}

fn almond(a: Pt, b: Pt) -> Vec<Pt> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let normal = if len > 0.0 {
        [d[1] / len, -d[0] / len]
    } else {
        [0.0, -1.0]
    };
    let half = 0.22 * len;
    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    let up = [mid[0] + normal[0] * half, mid[1] + normal[1] * half];
    let down = [mid[0] - normal[0] * half, mid[1] - normal[1] * half];
    let mut poly = bezier_through(a, up, b, 12);
    let lower = bezier_through(b, down, a, 12);
    poly.extend_from_slice(&lower[1..lower.len() - 1]);
    poly
}

fn mouth(l: Pt, r: Pt, bottom: Pt) -> Vec<Pt> {
    let width = ((r[0] - l[0]).powi(2) + (r[1] - l[1]).powi(2)).sqrt();
    let mid = [(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0];
    let top = [mid[0], mid[1] - 0.12 * width];
    let mut poly = bezier_through(l, top, r, 12);
    let lower = bezier_through(r, bottom, l, 12);
    poly.extend_from_slice(&lower[1..lower.len() - 1]);
    poly
}

/// Jaw line closed by an elliptic arc over the forehead.
fn jaw_arc(jaw: &[Pt]) -> Vec<Pt> {
    let (first, last) = (jaw[0], jaw[jaw.len() - 1]);
    let c = [(first[0] + last[0]) / 2.0, (first[1] + last[1]) / 2.0];
    let rx = ((last[0] - first[0]).powi(2) + (last[1] - first[1]).powi(2)).sqrt() / 2.0;
    let depth = jaw.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) - c[1];
    let ry = 0.8 * depth.max(rx * 0.5);
    let mut poly = jaw.to_vec();
    for k in 1..24 {
        let a = std::f64::consts::PI * k as f64 / 24.0;
        poly.push([c[0] + rx * a.cos(), c[1] - ry * a.sin()]);
    }
    poly
}

fn primitives(lms: &LandmarkSet, topology: &LandmarkTopology, size: f64) -> Vec<Painted> {
    let px = |i: usize| {
        let p = lms.points()[i];
        [p[0] * size, p[1] * size]
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| px(i)).collect::<Vec<_>>();
    let stroke = (size / 64.0).max(0.6);
    topology
        .features
        .iter()
        .map(|f| {
            let prim = match &f.shape {
                Shape::ClosedCurve(idx) => Prim::Fill(closed_curve(&pick(idx), 16)),
                Shape::JawArc(idx) => Prim::Fill(jaw_arc(&pick(idx))),
                Shape::EyeCorners(a, b) => Prim::Fill(almond(px(*a), px(*b))),
                Shape::MouthTriple(l, r, b) => Prim::Fill(mouth(px(*l), px(*r), px(*b))),
                Shape::Polygon(idx) => Prim::Fill(pick(idx)),
                Shape::Polyline(idx) => Prim::Stroke(pick(idx), stroke),
                Shape::Dot(i) => Prim::Disk(px(*i), 0.035 * size),
            };
            Painted::new(f.region, prim)
        })
        .collect()
}

/// Smooth low-amplitude skin pattern fixed per identity, in normalized
/// image coordinates.
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wave = || {
            (
                rng.random_range(4.0..12.0),
                rng.random_range(4.0..12.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        Self {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        TEXTURE_AMPLITUDE
            * self
                .waves
                .iter()
                .map(|(fx, fy, ph)| (fx * x + fy * y + ph).sin())
                .sum::<f64>()
            / 3.0
    }
}

/// A rendered face with the per-pixel region at each pixel center.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: ImageTensor,
    pub labels: Vec<Region>,
    pub size: usize,
}

impl Rendered {
    /// Centroid `(x, y)` in pixels of pixels labelled `region`.
    pub fn centroid(&self, region: Region) -> Option<[f64; 2]> {
        let mut acc = [0.0, 0.0];
        let mut n = 0usize;
        for (i, r) in self.labels.iter().enumerate() {
            if *r == region {
                acc[0] += (i % self.size) as f64 + 0.5;
                acc[1] += (i / self.size) as f64 + 0.5;
                n += 1;
            }
        }
        (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64])
    }
}

pub fn render_with_labels(
    lms: &LandmarkSet,
    spec: &IdentitySpec,
    resolution: usize,
) -> Result<Rendered> {
    let topology = spec.topology()?;
    expect_len("landmarks", topology.point_count, lms.len())?;
    let size = resolution as f64;
    let prims = primitives(lms, &topology, size);
    let texture = Texture::new(spec.texture_seed);
    let colors: Vec<[f64; 3]> = prims
        .iter()
        .map(|p| spec.palette.signed(p.region))
        .collect();
    let background = spec.palette.signed(Region::Background);
    let region_at = |p: Pt| prims.iter().rposition(|q| q.contains(p));

    let plane = resolution * resolution;
    let mut data = vec![0.0; 3 * plane];
    let mut labels = Vec::with_capacity(plane);
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..resolution {
        for x in 0..resolution {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let p = [
                        x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                        y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                    ];
                    let (c, t) = match region_at(p) {
                        Some(k) if prims[k].region == Region::Skin => {
                            (colors[k], texture.at(p[0] / size, p[1] / size))
                        }
                        Some(k) => (colors[k], 0.0),
                        None => (background, 0.0),
                    };
                    for ch in 0..3 {
                        acc[ch] += c[ch] + t;
                    }
                }
            }
            for ch in 0..3 {
                data[ch * plane + y * resolution + x] = (acc[ch] * inv).clamp(-1.0, 1.0);
            }
            labels.push(match region_at([x as f64 + 0.5, y as f64 + 0.5]) {
                Some(k) => prims[k].region,
                None => Region::Background,
            });
        }
    }
    Ok(Rendered {
        image: ImageTensor::new(Tensor::new(&[3, resolution, resolution], data))?,
        labels,
        size: resolution,
    })
}

pub fn render_toy_face(
    lms: &LandmarkSet,
    spec: &IdentitySpec,
    resolution: usize,
) -> Result<ImageTensor> {
    Ok(render_with_labels(lms, spec, resolution)?.image)
}
