//! Network shape configuration with the full-size and desk-scale presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LandmarkTopology;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConverterConfig {
    /// Hidden widths; encoder and decoders have `hidden.len() + 1` layers.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub fc_hidden: usize,
    pub base_size: usize,
    pub base_channels: usize,
    /// Output channels of each upscale block (one ×2 block per entry).
    pub upscale_channels: Vec<usize>,
    pub normalization: Normalization,
}

impl GeneratorConfig {
    pub fn output_size(&self) -> usize {
        self.base_size << self.upscale_channels.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub channels: usize,
    pub levels: usize,
    pub temperature: f64,
    /// Std-dev in heatmap cells of the regularizer's target Gaussian.
    pub heatmap_sigma: f64,
    pub regularizer_weight: f64,
}

impl DetectorConfig {
    pub fn heatmap_size(&self) -> usize {
        self.input_size / 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Channels of the stride-2 4×4 layers.
    pub strided_channels: Vec<usize>,
    /// Channels of additional stride-1 4×4 layers before the head.
    pub extra_channels: Vec<usize>,
}

impl DiscriminatorConfig {
    /// Side of the patch score map for a square input (pad 1 everywhere).
    pub fn score_map_size(&self, input: usize) -> usize {
        let mut s = input;
        for _ in &self.strided_channels {
            s = (s + 2 - 4) / 2 + 1;
        }
        for _ in 0..=self.extra_channels.len() {
            s = s + 2 - 4 + 1;
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub topology: String,
    pub converter: ConverterConfig,
    pub generator: GeneratorConfig,
    pub detector: DetectorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// Full-size networks: 98 landmarks, 256² output.
    pub fn full() -> Self {
        Self {
            topology: "wflw98".into(),
            converter: ConverterConfig {
                hidden: vec![512; 4],
            },
            generator: GeneratorConfig {
                fc_hidden: 1024,
                base_size: 4,
                base_channels: 512,
                upscale_channels: vec![256, 128, 64, 32, 16, 16],
                normalization: Normalization::None,
            },
            detector: DetectorConfig {
                input_size: 256,
                channels: 128,
                levels: 4,
                temperature: 1.0,
                heatmap_sigma: 1.0,
                regularizer_weight: 1.0,
            },
            discriminator: DiscriminatorConfig {
                strided_channels: vec![64, 128, 256],
                extra_channels: vec![512],
            },
        }
    }

    /// Laptop-sized networks: 12 landmarks, 64² output.
    pub fn desk() -> Self {
        Self {
            topology: "toy12".into(),
            converter: ConverterConfig {
                hidden: vec![128; 4],
            },
            generator: GeneratorConfig {
                fc_hidden: 256,
                base_size: 4,
                base_channels: 64,
                upscale_channels: vec![48, 32, 16, 8],
                normalization: Normalization::None,
            },
            detector: DetectorConfig {
                input_size: 64,
                channels: 64,
                levels: 3,
                temperature: 1.0,
                heatmap_sigma: 1.0,
                regularizer_weight: 1.0,
            },
            discriminator: DiscriminatorConfig {
                strided_channels: vec![16, 32, 64],
                extra_channels: vec![],
            },
        }
    }

    pub fn topology(&self) -> Result<LandmarkTopology> {
        LandmarkTopology::by_name(&self.topology)
    }

    pub fn image_size(&self) -> usize {
        self.generator.output_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.topology()?.validate()?;
        let g = &self.generator;
        if g.upscale_channels.is_empty() || g.base_size == 0 || g.base_channels == 0 {
            return Err(Error::Config(
                "generator needs a base map and ≥1 upscale block".into(),
            ));
        }
        let d = &self.detector;
        if d.input_size % 4 != 0 || (d.input_size / 4) % (1 << d.levels) != 0 {
            return Err(Error::Config(format!(
                "detector input {} must be divisible by 4·2^{}",
                d.input_size, d.levels
            )));
        }
        if d.channels < 2 || d.channels % 2 != 0 {
            return Err(Error::Config("detector channels must be even".into()));
        }
        if !(d.temperature > 0.0) {
            return Err(Error::Config("DSNT temperature must be positive".into()));
        }
        let out = self.image_size();
        if out % d.input_size != 0 {
            return Err(Error::Config(format!(
                "generator output {out} is not a multiple of detector input {}",
                d.input_size
            )));
        }
        if self.discriminator.strided_channels.is_empty() {
            return Err(Error::Config("discriminator needs ≥1 strided layer".into()));
        }
        if self.discriminator.score_map_size(out) == 0 {
            return Err(Error::Config("discriminator collapses the image".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn output_sizes() {
        assert_eq!(ModelConfig::full().image_size(), 256);
        assert_eq!(ModelConfig::desk().image_size(), 64);
        assert_eq!(ModelConfig::desk().detector.heatmap_size(), 16);
    }

    #[test]
    fn score_map_table() {
        let desk = ModelConfig::desk().discriminator;
        assert_eq!(desk.score_map_size(64), 7);
        assert_eq!(desk.score_map_size(128), 15);
        let full = ModelConfig::full().discriminator;
        assert_eq!(full.score_map_size(256), 30);
    }
}
