//! Reenactment and its metrics: cyclic landmark difference, SSIM and
//! identity distance.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, LandmarkVector};
use crate::image::ImageTensor;
use crate::registry::{ModelRegistry, TargetId};

/// Everything a reenactment produced along the way.
#[derive(Clone, Debug, PartialEq)]
pub struct Reenactment {
    pub detected: LandmarkSet,
    /// Landmarks fed to the generator (converted unless bypassed).
    pub fed: LandmarkVector,
    pub image: ImageTensor,
}

/// Detect, convert into `target`'s geometry, synthesize.
pub fn reenact_with(
    models: &ModelRegistry,
    src: &ImageTensor,
    target: &TargetId,
    bypass: bool,
) -> Result<Reenactment> {
    models.target(target)?;
    let detected = models.detector.detect(src)?;
    let (image, fed) = models.synthesize_from(target, &detected.to_vector(), bypass)?;
    Ok(Reenactment {
        detected,
        fed,
        image,
    })
}

pub fn reenact(
    src: &ImageTensor,
    target: &TargetId,
    models: &ModelRegistry,
) -> Result<ImageTensor> {
    Ok(reenact_with(models, src, target, false)?.image)
}

/// The pieces of a reenactment system the metrics need.
pub trait Reenactor {
    fn check_target(&self, id: &TargetId) -> Result<()>;
    fn detect(&self, img: &ImageTensor) -> Result<LandmarkSet>;
    fn reenact(&self, img: &ImageTensor, target: &TargetId) -> Result<ImageTensor>;
}

impl Reenactor for ModelRegistry {
    fn check_target(&self, id: &TargetId) -> Result<()> {
        self.target(id).map(|_| ())
    }

    fn detect(&self, img: &ImageTensor) -> Result<LandmarkSet> {
        self.detector.detect(img)
    }

    fn reenact(&self, img: &ImageTensor, target: &TargetId) -> Result<ImageTensor> {
        reenact(img, target, self)
    }
}

/// A registry with the converter switched off, for ablations.
pub struct Bypassed<'a>(pub &'a ModelRegistry);

impl Reenactor for Bypassed<'_> {
    fn check_target(&self, id: &TargetId) -> Result<()> {
        self.0.check_target(id)
    }

    fn detect(&self, img: &ImageTensor) -> Result<LandmarkSet> {
        self.0.detect(img)
    }

    fn reenact(&self, img: &ImageTensor, target: &TargetId) -> Result<ImageTensor> {
        Ok(reenact_with(self.0, img, target, true)?.image)
    }
}

/// Landmark difference in both reductions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LandmarkDifference {
    /// Mean over points of the Euclidean point distance.
    pub per_point: f64,
    /// Sum over points of the Euclidean point distance.
    pub summed: f64,
}

impl LandmarkDifference {
    pub fn between(a: &LandmarkSet, b: &LandmarkSet) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Dimension {
                what: "landmark points",
                expected: a.len(),
                got: b.len(),
            });
        }
        let summed: f64 = a
            .points()
            .iter()
            .zip(b.points())
            .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
            .sum();
        Ok(Self {
            per_point: summed / a.len().max(1) as f64,
            summed,
        })
    }
}

/// Cyclic difference of one source image: src → target → back to `src_id`.
pub fn cyclic_lmk(
    models: &dyn Reenactor,
    src: &ImageTensor,
    src_id: &TargetId,
    target: &TargetId,
) -> Result<(LandmarkDifference, ImageTensor)> {
    let there = models.reenact(src, target)?;
    let back = models.reenact(&there, src_id)?;
    let d = LandmarkDifference::between(&models.detect(src)?, &models.detect(&back)?)?;
    Ok((d, back))
}

/// Mean cyclic landmark difference over `src_imgs`.
pub fn metric_lmk(
    src_imgs: &[ImageTensor],
    src_id: &TargetId,
    target: &TargetId,
    models: &dyn Reenactor,
) -> Result<LandmarkDifference> {
    models.check_target(src_id)?;
    models.check_target(target)?;
    let mut acc = LandmarkDifference::default();
    for src in src_imgs {
        let (d, _) = cyclic_lmk(models, src, src_id, target)?;
        acc.per_point += d.per_point;
        acc.summed += d.summed;
    }
    let n = src_imgs.len().max(1) as f64;
    Ok(LandmarkDifference {
        per_point: acc.per_point / n,
        summed: acc.summed / n,
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over valid window positions.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|i| k[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW)
                .map(|i| k[i] * rows[(y0 + i) * ow + x0])
                .sum();
        }
    }
    out
}

/// Single-scale SSIM on `[0, 1]`-rescaled RGB, averaged over windows and
/// channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (h, w) = (a.height(), a.width());
    if (h, w) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "ssim needs equal shapes, got {h}x{w} and {}x{}",
            b.height(),
            b.width()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x: Vec<f64> = a.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| (v + 1.0) / 2.0)
            .collect();
        let y: Vec<f64> = b.data()[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| (v + 1.0) / 2.0)
            .collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let exx = filter_valid(&prod(&x, &x), h, w, &k);
        let eyy = filter_valid(&prod(&y, &y), h, w, &k);
        let exy = filter_valid(&prod(&x, &y), h, w, &k);
        for i in 0..mx.len() {
            let vx = exx[i] - mx[i] * mx[i];
            let vy = eyy[i] - my[i] * my[i];
            let cxy = exy[i] - mx[i] * my[i];
            let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
            let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Maps a face image to a fixed-length identity vector.
pub trait Embedder {
    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>>;
}

/// Same vector for every image.
pub struct ConstantEmbedder(pub Vec<f64>);

impl Embedder for ConstantEmbedder {
    fn embed(&self, _img: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Palette and silhouette statistics of a toy face: mean color and coarse
/// per-channel histograms of the foreground, plus its extent and aspect.
/// The background is taken from the image corners.
#[derive(Clone, Copy, Debug)]
pub struct ToyEmbedder {
    pub bins: usize,
    /// Summed absolute channel difference from the background that marks
    /// a pixel as foreground, in `[-1, 1]` units.
    pub threshold: f64,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self {
            bins: 4,
            threshold: 0.15,
        }
    }
}

impl Embedder for ToyEmbedder {
    fn embed(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        let (h, w) = (img.height(), img.width());
        let corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)];
        let mut bg = [0.0; 3];
        for &(y, x) in &corners {
            let p = img.pixel(y, x);
            for c in 0..3 {
                bg[c] += p[c] / 4.0;
            }
        }
        let mut mean = [0.0; 3];
        let mut hist = vec![0.0; 3 * self.bins];
        let (mut n, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(y, x);
                let d: f64 = (0..3).map(|c| (p[c] - bg[c]).abs()).sum();
                if d <= self.threshold {
                    continue;
                }
                n += 1.0;
                let (fx, fy) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                sx += fx;
                sy += fy;
                sxx += fx * fx;
                syy += fy * fy;
                for c in 0..3 {
                    mean[c] += p[c];
                    let v = ((p[c].clamp(-1.0, 1.0) + 1.0) / 2.0 * self.bins as f64) as usize;
                    hist[c * self.bins + v.min(self.bins - 1)] += 1.0;
                }
            }
        }
        if n == 0.0 {
            return Err(Error::Shape("no foreground pixels to embed".into()));
        }
        let mut out: Vec<f64> = mean.iter().map(|m| m / n).collect();
        out.extend(hist.iter().map(|v| v / n));
        let (mx, my) = (sx / n, sy / n);
        let std_x = (sxx / n - mx * mx).max(0.0).sqrt();
        let std_y = (syy / n - my * my).max(0.0).sqrt();
        out.extend([
            n / (h * w) as f64,
            4.0 * std_x,
            4.0 * std_y,
            std_x / std_y.max(1e-9),
        ]);
        Ok(out)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "embedding",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdScore {
    /// Mean over images that embedded successfully.
    pub mean: f64,
    pub n: usize,
    /// `(image index, message)` for every image the embedder rejected.
    pub failures: Vec<(usize, String)>,
}

/// Mean embedding distance between each synthesized face and `reference`.
pub fn metric_id(
    synth_imgs: &[ImageTensor],
    reference: &ImageTensor,
    embedder: &dyn Embedder,
) -> Result<IdScore> {
    let r = embedder.embed(reference)?;
    let mut score = IdScore::default();
    let mut sum = 0.0;
    for (i, img) in synth_imgs.iter().enumerate() {
        match embedder.embed(img).and_then(|e| euclidean(&e, &r)) {
            Ok(d) => {
                sum += d;
                score.n += 1;
            }
            Err(e) => score.failures.push((i, e.to_string())),
        }
    }
    score.mean = if score.n > 0 {
        sum / score.n as f64
    } else {
        0.0
    };
    Ok(score)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub lmk: f64,
    pub lmk_summed: f64,
    pub ssim: f64,
    /// `None` when the embedder failed on this sample.
    pub id: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: TargetId,
    pub target: TargetId,
    pub lmk: f64,
    pub lmk_summed: f64,
    pub ssim: f64,
    pub id: f64,
    pub n: usize,
    pub id_failures: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    fn from_records(source: TargetId, target: TargetId, records: Vec<EvalRecord>) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let ids: Vec<f64> = records.iter().filter_map(|r| r.id).collect();
        Self {
            lmk: mean(&|r| r.lmk),
            lmk_summed: mean(&|r| r.lmk_summed),
            ssim: mean(&|r| r.ssim),
            id: if ids.is_empty() {
                0.0
            } else {
                ids.iter().sum::<f64>() / ids.len() as f64
            },
            id_failures: n - ids.len(),
            n,
            source,
            target,
            records,
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>8} {:>10} {:>8} {:>8}",
            "source -> target", "LMK↓", "LMK(sum)↓", "SSIM↑", "ID↓"
        )?;
        writeln!(
            f,
            "{:<24} {:>8.4} {:>10.4} {:>8.4} {:>8.4}",
            format!("{} -> {}", self.source, self.target),
            self.lmk,
            self.lmk_summed,
            self.ssim,
            self.id
        )?;
        write!(f, "n = {}", self.n)?;
        if self.id_failures > 0 {
            write!(f, ", ID skipped on {} samples", self.id_failures)?;
        }
        Ok(())
    }
}

/// Cyclic protocol over `src_imgs`: LMK and SSIM compare each source with
/// its round trip through `target`; ID compares the target-side face with
/// `reference`.
pub fn evaluate(
    models: &dyn Reenactor,
    embedder: &dyn Embedder,
    src_imgs: &[ImageTensor],
    src_id: &TargetId,
    target: &TargetId,
    reference: &ImageTensor,
) -> Result<EvalReport> {
    models.check_target(src_id)?;
    models.check_target(target)?;
    let r = embedder.embed(reference)?;
    let mut records = Vec::with_capacity(src_imgs.len());
    for (index, src) in src_imgs.iter().enumerate() {
        let there = models.reenact(src, target)?;
        let back = models.reenact(&there, src_id)?;
        let d = LandmarkDifference::between(&models.detect(src)?, &models.detect(&back)?)?;
        let id = embedder.embed(&there).and_then(|e| euclidean(&e, &r)).ok();
        records.push(EvalRecord {
            index,
            lmk: d.per_point,
            lmk_summed: d.summed,
            ssim: ssim(src, &back)?,
            id,
        });
    }
    Ok(EvalReport::from_records(
        src_id.clone(),
        target.clone(),
        records,
    ))
}

/// Held-out scores against renderer ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScores {
    /// Mean |I_t − synthesize(t, L_t)| over held-out samples.
    pub l2i: f64,
    /// Mean |I_t(expr) − synthesize(t, fed(L_s(expr)))| over held-out pairs
    /// of different identities sharing an expression.
    pub cross_l2i: f64,
    /// Mean per-point distance between the landmarks fed in the cross-identity
    /// term and the target's true landmarks for that expression.
    pub cross_landmarks: f64,
    /// Mean per-point distance between detector output on synthesized faces
    /// and the landmarks they were synthesized from.
    pub redetect: f64,
    /// Mean per-point detector error on held-out real images.
    pub detect: f64,
    pub samples: usize,
    pub pairs: usize,
}

/// Scores `models` on the held-out split of `data`. With `bypass` the
/// cross-identity term feeds raw source landmarks to the generator.
pub fn held_out_scores(
    models: &ModelRegistry,
    data: &Dataset,
    bypass: bool,
) -> Result<HeldOutScores> {
    let mut s = HeldOutScores::default();
    for sample in data.samples.iter().filter(|s| s.split == Split::Val) {
        let lms = sample.landmarks.to_vector();
        let synth = models.synthesize(&sample.target, &lms)?;
        s.l2i += synth.mean_abs_diff(&sample.image)?;
        let found = models.detector.detect(&synth)?;
        s.redetect += LandmarkDifference::between(&found, &sample.landmarks)?.per_point;
        let found = models.detector.detect(&sample.image)?;
        s.detect += LandmarkDifference::between(&found, &sample.landmarks)?.per_point;
        s.samples += 1;
    }
    for group in data.paired_val().values() {
        for (t, &ti) in group {
            for (src, &si) in group {
                if src == t {
                    continue;
                }
                let lms = data.samples[si].landmarks.to_vector();
                let (img, fed) = models.synthesize_from(t, &lms, bypass)?;
                let truth = &data.samples[ti].landmarks;
                s.cross_landmarks +=
                    LandmarkDifference::between(&fed.to_set_clamped().0, truth)?.per_point;
                s.cross_l2i += img.mean_abs_diff(&data.samples[ti].image)?;
                s.pairs += 1;
            }
        }
    }
    if s.samples == 0 {
        return Err(Error::Config("dataset has no held-out samples".into()));
    }
    let n = s.samples as f64;
    s.l2i /= n;
    s.redetect /= n;
    s.detect /= n;
    s.cross_l2i /= s.pairs.max(1) as f64;
    s.cross_landmarks /= s.pairs.max(1) as f64;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facemark_tensor::Tensor;

    fn noise(seed: u64, h: usize) -> ImageTensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::new(
            &[3, h, h],
            (0..3 * h * h)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        ))
        .unwrap()
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = noise(1, 24);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let black = ImageTensor::filled(16, 16, [-1.0; 3]);
        let white = ImageTensor::filled(16, 16, [1.0; 3]);
        assert!(ssim(&black, &white).unwrap() < 0.05);
        assert!(ssim(&black, &ImageTensor::filled(8, 8, [0.0; 3])).is_err());
    }

    #[test]
    fn report_means_match_records() {
        let recs = vec![
            EvalRecord {
                index: 0,
                lmk: 0.1,
                lmk_summed: 1.2,
                ssim: 0.5,
                id: Some(0.2),
            },
            EvalRecord {
                index: 1,
                lmk: 0.3,
                lmk_summed: 3.6,
                ssim: 0.7,
                id: None,
            },
        ];
        let r = EvalReport::from_records("a".into(), "b".into(), recs);
        assert!((r.lmk - 0.2).abs() < 1e-15 && (r.ssim - 0.6).abs() < 1e-15);
        assert_eq!((r.id, r.id_failures, r.n), (0.2, 1, 2));
        assert!(r.to_string().contains("SSIM↑"));
    }
}
