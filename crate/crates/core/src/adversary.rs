//! Patch discriminator: a stack of 4×4 convolutions ending in one logit per
//! receptive-field patch.

use facemark_tensor::{leaky_relu_gain, scoped, Graph, Module, Padding, Param, Tensor, Var};
use rand::Rng;

use crate::config::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Conv, LEAKY_SLOPE};

/// Real-vs-fake logits, one per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScoreMap {
    scores: Tensor,
}

impl PatchScoreMap {
    /// Accepts `[Hp, Wp]` or `[N, 1, Hp, Wp]` logits.
    pub fn new(scores: Tensor) -> Result<Self> {
        if !scores.all_finite() {
            return Err(Error::NonFinite {
                what: "patch scores".into(),
            });
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn height(&self) -> usize {
        self.scores.shape()[self.scores.rank() - 2]
    }

    pub fn width(&self) -> usize {
        self.scores.shape()[self.scores.rank() - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<Conv>,
    pub head: Conv,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(cfg: &DiscriminatorConfig, rng: &mut R) -> Self {
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        let mut layers = Vec::new();
        let mut c = 3;
        for &out in &cfg.strided_channels {
            layers.push(Conv::new(c, out, 4, 2, Padding::Zero(1), gain, rng));
            c = out;
        }
        for &out in &cfg.extra_channels {
            layers.push(Conv::new(c, out, 4, 1, Padding::Zero(1), gain, rng));
            c = out;
        }
        let head = Conv::new(c, 1, 4, 1, Padding::Zero(1), 1.0, rng);
        Self { layers, head }
    }

    /// `[N, 3, H, W]` → `[N, 1, Hp, Wp]` logits.
    pub fn forward(&self, g: &Graph, img: Var) -> Result<Var> {
        let s = g.shape(img);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!(
                "discriminator expects [N, 3, H, W], got {s:?}"
            )));
        }
        let mut h = img;
        for layer in &self.layers {
            h = g.leaky_relu(layer.forward(g, h), LEAKY_SLOPE);
        }
        Ok(self.head.forward(g, h))
    }

    pub fn patch_scores(&self, img: &ImageTensor) -> Result<PatchScoreMap> {
        let g = Graph::new();
        let x = g.input(img.to_batch());
        let y = self.forward(&g, x)?;
        let t = (*g.value(y)).clone();
        let (_, _, h, w) = t.dims4();
        PatchScoreMap::new(t.reshape(&[h, w]))
    }
}

impl Module for Discriminator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.layers.iter().enumerate() {
            c.visit(&mut |n, p| f(&scoped(&format!("layers.{i}"), n), p));
        }
        self.head.visit(&mut |n, p| f(&scoped("head", n), p));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.layers.iter_mut().enumerate() {
            c.visit_mut(&mut |n, p| f(&scoped(&format!("layers.{i}"), n), p));
        }
        self.head.visit_mut(&mut |n, p| f(&scoped("head", n), p));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_score_map_is_7x7_and_deterministic() {
        let cfg = ModelConfig::desk().discriminator;
        let d = Discriminator::new(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let img = ImageTensor::filled(64, 64, [0.2, 0.0, -0.3]);
        let s = d.patch_scores(&img).unwrap();
        assert_eq!((s.height(), s.width()), (7, 7));
        assert_eq!(s, d.patch_scores(&img).unwrap());
        let big = d
            .patch_scores(&ImageTensor::filled(128, 128, [0.0; 3]))
            .unwrap();
        assert_eq!(big.height(), cfg.score_map_size(128));
    }
}
