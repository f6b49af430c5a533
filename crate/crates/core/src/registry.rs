//! Target identities and the per-identity networks keyed by them.

use std::collections::BTreeMap;
use std::fmt;

use facemark_tensor::{scoped, Module, Param};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::Discriminator;
use crate::config::ModelConfig;
use crate::converter::Converter;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::geometry::{LandmarkSet, LandmarkTopology, LandmarkVector};
use crate::image::ImageTensor;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetId(String);

impl TargetId {
    /// Ids are non-empty and use only ASCII letters, digits, `-` and `_`.
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let ok = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(Error::Config(format!("invalid target id {id:?}")));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for TargetId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    pub id: TargetId,
    pub display_name: String,
    /// Mean training landmarks of this identity.
    pub canonical: LandmarkSet,
}

/// Shared encoder, per-target decoders, generators and discriminators, and
/// the landmark detector.
#[derive(Clone, Debug)]
pub struct ModelRegistry {
    pub config: ModelConfig,
    topology: LandmarkTopology,
    targets: BTreeMap<TargetId, TargetInfo>,
    pub converter: Converter,
    pub generators: BTreeMap<TargetId, Generator>,
    pub discriminators: BTreeMap<TargetId, Discriminator>,
    pub detector: Detector,
}

impl ModelRegistry {
    /// Freshly initialized networks for `targets`, seeded deterministically.
    pub fn new(config: ModelConfig, targets: Vec<TargetInfo>, seed: u64) -> Result<Self> {
        config.validate()?;
        if targets.is_empty() {
            return Err(Error::Config(
                "a model needs at least one target identity".into(),
            ));
        }
        let topology = config.topology()?;
        let dim = topology.vector_len();
        let mut map = BTreeMap::new();
        for t in targets {
            if t.canonical.len() != topology.point_count {
                return Err(Error::Config(format!(
                    "canonical landmarks of {} have {} points, expected {}",
                    t.id,
                    t.canonical.len(),
                    topology.point_count
                )));
            }
            if map.insert(t.id.clone(), t.clone()).is_some() {
                return Err(Error::Config(format!("duplicate target id {}", t.id)));
            }
        }
        let ids: Vec<TargetId> = map.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let converter = Converter::new(dim, &config.converter, &ids, &mut rng);
        let generators = ids
            .iter()
            .map(|id| (id.clone(), Generator::new(dim, &config.generator, &mut rng)))
            .collect();
        let discriminators = ids
            .iter()
            .map(|id| {
                (
                    id.clone(),
                    Discriminator::new(&config.discriminator, &mut rng),
                )
            })
            .collect();
        let detector = Detector::new(topology.point_count, &config.detector, &mut rng);
        Ok(Self {
            config,
            topology,
            targets: map,
            converter,
            generators,
            discriminators,
            detector,
        })
    }

    pub fn topology(&self) -> &LandmarkTopology {
        &self.topology
    }

    /// Registered identities in id order.
    pub fn targets(&self) -> impl Iterator<Item = &TargetInfo> {
        self.targets.values()
    }

    pub fn target_ids(&self) -> Vec<TargetId> {
        self.targets.keys().cloned().collect()
    }

    pub fn unknown(&self, id: &TargetId) -> Error {
        Error::UnknownTarget {
            id: id.to_string(),
            available: self.targets.keys().map(|t| t.to_string()).collect(),
        }
    }

    pub fn target(&self, id: &TargetId) -> Result<&TargetInfo> {
        self.targets.get(id).ok_or_else(|| self.unknown(id))
    }

    pub fn generator(&self, id: &TargetId) -> Result<&Generator> {
        self.generators.get(id).ok_or_else(|| self.unknown(id))
    }

    pub fn generator_mut(&mut self, id: &TargetId) -> Result<&mut Generator> {
        let err = self.unknown(id);
        self.generators.get_mut(id).ok_or(err)
    }

    pub fn discriminator(&self, id: &TargetId) -> Result<&Discriminator> {
        self.discriminators.get(id).ok_or_else(|| self.unknown(id))
    }

    pub fn discriminator_mut(&mut self, id: &TargetId) -> Result<&mut Discriminator> {
        let err = self.unknown(id);
        self.discriminators.get_mut(id).ok_or(err)
    }

    pub fn set_canonical(&mut self, id: &TargetId, canonical: LandmarkSet) -> Result<()> {
        let err = self.unknown(id);
        self.targets.get_mut(id).ok_or(err)?.canonical = canonical;
        Ok(())
    }

    pub fn convert(&self, lms: &LandmarkVector, target: &TargetId) -> Result<LandmarkVector> {
        self.target(target)?;
        self.converter.convert(lms, target)
    }

    /// Image of `target` driven by `lms` as given.
    pub fn synthesize(&self, target: &TargetId, lms: &LandmarkVector) -> Result<ImageTensor> {
        self.generator(target)?.synthesize(lms)
    }

    /// Converts `lms` into `target`'s geometry (unless `bypass`) and
    /// synthesizes; returns the image and the landmarks fed to the generator.
    pub fn synthesize_from(
        &self,
        target: &TargetId,
        lms: &LandmarkVector,
        bypass: bool,
    ) -> Result<(ImageTensor, LandmarkVector)> {
        let fed = if bypass {
            self.target(target)?;
            lms.clone()
        } else {
            self.convert(lms, target)?
        };
        Ok((self.synthesize(target, &fed)?, fed))
    }

    /// Named parameter sections, in checkpoint order.
    pub fn sections(&self) -> Vec<(String, &dyn Module)> {
        let mut out: Vec<(String, &dyn Module)> = vec![("converter".into(), &self.converter)];
        for (id, g) in &self.generators {
            out.push((format!("generator:{id}"), g));
        }
        out.push(("detector".into(), &self.detector));
        for (id, d) in &self.discriminators {
            out.push((format!("discriminator:{id}"), d));
        }
        out
    }

    pub fn sections_mut(&mut self) -> Vec<(String, &mut dyn Module)> {
        let mut out: Vec<(String, &mut dyn Module)> =
            vec![("converter".into(), &mut self.converter)];
        for (id, g) in self.generators.iter_mut() {
            out.push((format!("generator:{id}"), g));
        }
        out.push(("detector".into(), &mut self.detector));
        for (id, d) in self.discriminators.iter_mut() {
            out.push((format!("discriminator:{id}"), d));
        }
        out
    }
}

impl Module for ModelRegistry {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (name, m) in self.sections() {
            m.visit(&mut |n, p| f(&scoped(&name, n), p));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (name, m) in self.sections_mut() {
            m.visit_mut(&mut |n, p| f(&scoped(&name, n), p));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(id: &str) -> TargetInfo {
        let topo = LandmarkTopology::toy12();
        TargetInfo {
            id: id.into(),
            display_name: id.to_uppercase(),
            canonical: LandmarkSet::new(vec![[0.5, 0.5]; topo.point_count], &topo).unwrap(),
        }
    }

    #[test]
    fn ids_are_validated() {
        assert!(TargetId::new("alice_01").is_ok());
        assert!(TargetId::new("").is_err());
        assert!(TargetId::new("a b").is_err());
    }

    #[test]
    fn unknown_target_lists_registered() {
        let reg = ModelRegistry::new(ModelConfig::desk(), vec![info("b"), info("a")], 1).unwrap();
        let ids: Vec<_> = reg.targets().map(|t| t.id.to_string()).collect();
        assert_eq!(ids, ["a", "b"]);
        let msg = reg
            .synthesize(&"zed".into(), &LandmarkVector::new(vec![0.5; 24]))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("zed") && msg.contains("a") && msg.contains("b"));
    }

    #[test]
    fn rejects_empty_and_duplicate_targets() {
        assert!(ModelRegistry::new(ModelConfig::desk(), vec![], 1).is_err());
        assert!(ModelRegistry::new(ModelConfig::desk(), vec![info("a"), info("a")], 1).is_err());
    }
}
