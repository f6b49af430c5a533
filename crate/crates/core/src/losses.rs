//! Training objectives: image reconstruction, re-detection, landmark
//! autoencoding, cross-identity cycle and the adversarial term.

use facemark_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adversary::PatchScoreMap;
use crate::converter::LatentCode;
use crate::detector::{mean_point_distance_var, LandmarkDetector};
use crate::error::{expect_len, Error, Result};
use crate::geometry::{unit_l2, LandmarkVector};
use crate::image::ImageTensor;

/// How a landmark residual `[N, 2L]` is reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkReduction {
    /// Euclidean norm of the whole 2L residual, averaged over the batch.
    #[default]
    Norm,
    /// Euclidean distance per point, averaged over points and batch.
    PerPoint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    /// Generator maximizes `log σ(fake)`.
    #[default]
    NonSaturating,
    /// Generator minimizes `log(1 − σ(fake))` as written in the minimax game.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l2i: f64,
    pub i2l: f64,
    pub l2l: f64,
    pub x_l2l: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2i: 1.0,
            i2l: 1.0,
            l2l: 1.0,
            x_l2l: 1.0,
            gan: 1.0,
        }
    }
}

/// Unweighted values of every term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l2i: f64,
    pub i2l: f64,
    pub l2l: f64,
    pub x_l2l: f64,
    pub gan_g: f64,
    pub gan_d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2i: f64,
    pub i2l: f64,
    pub l2l: f64,
    pub x_l2l: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub overall: f64,
    pub weights: LossWeights,
}

/// Weighted sum of the five generator-side terms.
pub fn loss_overall(terms: LossTerms, weights: LossWeights) -> Result<LossBreakdown> {
    let named = [
        ("l2i", terms.l2i),
        ("i2l", terms.i2l),
        ("l2l", terms.l2l),
        ("x_l2l", terms.x_l2l),
        ("gan_g", terms.gan_g),
        ("gan_d", terms.gan_d),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss term {name} ({v})"),
            });
        }
    }
    let overall = weights.l2i * terms.l2i
        + weights.i2l * terms.i2l
        + weights.l2l * terms.l2l
        + weights.x_l2l * terms.x_l2l
        + weights.gan * terms.gan_g;
    Ok(LossBreakdown {
        l2i: terms.l2i,
        i2l: terms.i2l,
        l2l: terms.l2l,
        x_l2l: terms.x_l2l,
        gan_g: terms.gan_g,
        gan_d: terms.gan_d,
        overall,
        weights,
    })
}

/// Mean absolute difference of two image batches.
pub fn l2i_var(g: &Graph, real: Var, synth: Var) -> Var {
    g.mean(g.abs(g.sub(real, synth)))
}

/// Reduces the residual between two `[N, 2L]` landmark batches.
pub fn landmark_distance_var(g: &Graph, a: Var, b: Var, reduction: LandmarkReduction) -> Var {
    match reduction {
        LandmarkReduction::Norm => {
            let d = g.sub(a, b);
            g.mean(g.sqrt(g.sum_rows(g.square(d))))
        }
        LandmarkReduction::PerPoint => mean_point_distance_var(g, a, b),
    }
}

/// Box-downsamples `img` to the detector input, detects, and compares to `target`.
pub fn i2l_var(
    g: &Graph,
    target: Var,
    synth: Var,
    detector: &dyn LandmarkDetector,
    reduction: LandmarkReduction,
) -> Result<Var> {
    let s = g.shape(synth);
    let size = detector.input_size();
    if s.len() != 4 || s[2] != s[3] || s[2] % size != 0 {
        return Err(Error::Shape(format!(
            "image {s:?} cannot be resized to detector input {size}"
        )));
    }
    let fitted = g.avg_pool(synth, s[2] / size);
    let detected = detector.detect_var(g, fitted)?;
    Ok(landmark_distance_var(g, target, detected, reduction))
}

/// Row-wise unit-norm targets for the latent term.
pub fn unit_rows(lms: &Tensor) -> Result<Tensor> {
    let (_, k) = lms.dims2();
    let mut out = Vec::with_capacity(lms.numel());
    for row in lms.data().chunks(k) {
        out.extend(unit_l2(&LandmarkVector::new(row.to_vec()))?.into_values());
    }
    Ok(Tensor::new(lms.shape(), out))
}

/// `‖L − recon‖ + ‖unit_l2(L) − latent‖` on `[N, 2L]` batches.
pub fn l2l_var(
    g: &Graph,
    lms: &Tensor,
    recon: Var,
    latent: Var,
    reduction: LandmarkReduction,
) -> Result<Var> {
    let unit = g.input(unit_rows(lms)?);
    let l = g.input(lms.clone());
    let a = landmark_distance_var(g, l, recon, reduction);
    let b = landmark_distance_var(g, unit, latent, reduction);
    Ok(g.add(a, b))
}

pub fn xl2l_var(g: &Graph, lms: Var, cycled: Var, reduction: LandmarkReduction) -> Var {
    landmark_distance_var(g, lms, cycled, reduction)
}

/// `−mean log σ(real) − mean log(1 − σ(fake))`.
pub fn gan_d_var(g: &Graph, real: Var, fake: Var) -> Var {
    let r = g.mean(g.log_sigmoid(real));
    let f = g.mean(g.log_sigmoid(g.scale(fake, -1.0)));
    g.scale(g.add(r, f), -1.0)
}

pub fn gan_g_var(g: &Graph, fake: Var, form: GanForm) -> Var {
    match form {
        GanForm::NonSaturating => g.scale(g.mean(g.log_sigmoid(fake)), -1.0),
        GanForm::Literal => g.mean(g.log_sigmoid(g.scale(fake, -1.0))),
    }
}

fn vector_row(g: &Graph, v: &LandmarkVector) -> Var {
    g.input(Tensor::new(&[1, v.len()], v.values().to_vec()))
}

pub fn loss_l2i(real: &ImageTensor, synth: &ImageTensor) -> Result<f64> {
    real.mean_abs_diff(synth)
}

pub fn loss_i2l(
    target: &LandmarkVector,
    synth: &ImageTensor,
    detector: &dyn LandmarkDetector,
    reduction: LandmarkReduction,
) -> Result<f64> {
    let g = Graph::new();
    let t = vector_row(&g, target);
    let img = g.input(synth.to_batch());
    let loss = i2l_var(&g, t, img, detector, reduction)?;
    Ok(g.value(loss).item())
}

pub fn loss_l2l(
    lms: &LandmarkVector,
    recon: &LandmarkVector,
    latent: &LatentCode,
    reduction: LandmarkReduction,
) -> Result<f64> {
    expect_len("reconstruction entries", lms.len(), recon.len())?;
    expect_len("latent entries", lms.len(), latent.values().len())?;
    let g = Graph::new();
    let lt = Tensor::new(&[1, lms.len()], lms.values().to_vec());
    let r = vector_row(&g, recon);
    let z = vector_row(&g, &LandmarkVector::new(latent.values().to_vec()));
    let loss = l2l_var(&g, &lt, r, z, reduction)?;
    Ok(g.value(loss).item())
}

pub fn loss_xl2l(
    lms: &LandmarkVector,
    cycled: &LandmarkVector,
    reduction: LandmarkReduction,
) -> Result<f64> {
    expect_len("cycled entries", lms.len(), cycled.len())?;
    let g = Graph::new();
    let loss = xl2l_var(&g, vector_row(&g, lms), vector_row(&g, cycled), reduction);
    Ok(g.value(loss).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLoss {
    pub d_loss: f64,
    pub g_loss: f64,
}

pub fn loss_gan(real: &PatchScoreMap, fake: &PatchScoreMap, form: GanForm) -> GanLoss {
    let g = Graph::new();
    let r = g.input(real.scores().clone());
    let f = g.input(fake.scores().clone());
    let d = gan_d_var(&g, r, f);
    let gl = gan_g_var(&g, f, form);
    GanLoss {
        d_loss: g.value(d).item(),
        g_loss: g.value(gl).item(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_rejects_non_finite_term_by_name() {
        let terms = LossTerms {
            i2l: f64::NAN,
            ..Default::default()
        };
        let err = loss_overall(terms, LossWeights::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("i2l"), "{err}");
    }

    #[test]
    fn literal_generator_loss_is_log_one_minus_d() {
        let fake = PatchScoreMap::new(Tensor::full(&[2, 2], 0.0)).unwrap();
        let l = loss_gan(&fake, &fake, GanForm::Literal);
        assert!((l.g_loss + std::f64::consts::LN_2).abs() < 1e-12);
    }
}
