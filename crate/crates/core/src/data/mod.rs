//! Datasets: manifests of image/landmark pairs and the procedural toy-face
//! world used for desk-scale training and verification.

pub mod identity;
pub mod manifest;
pub mod render;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Frame, LandmarkSet, LandmarkTopology};
use crate::image::ImageTensor;
use crate::registry::{TargetId, TargetInfo};

pub use identity::{canonical_basis, default_identities, Expression, IdentitySpec, Palette};
pub use manifest::{load_manifest, write_manifest, DatasetManifest, ManifestRecord, Split};
pub use render::{render_toy_face, render_with_labels, Rendered};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub target: TargetId,
    pub landmarks: LandmarkSet,
    pub image: ImageTensor,
    pub split: Split,
    pub expression: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub topology: LandmarkTopology,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every image of `manifest`; each record's target must be one of `known`.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        topology: LandmarkTopology,
        known: &[TargetId],
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            if !known.contains(&r.target_id) {
                return Err(Error::UnknownTarget {
                    id: r.target_id.to_string(),
                    available: known.iter().map(|t| t.to_string()).collect(),
                });
            }
            samples.push(Sample {
                target: r.target_id.clone(),
                landmarks: r.landmarks.clone(),
                image: ImageTensor::load(&manifest.resolve(r))?,
                split: r.split,
                expression: r.expression,
            });
        }
        Ok(Self { topology, samples })
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn targets(&self) -> Vec<TargetId> {
        let mut t: Vec<TargetId> = self.samples.iter().map(|s| s.target.clone()).collect();
        t.sort();
        t.dedup();
        t
    }

    /// Sample indices per target within `split`.
    pub fn index(&self, split: Split) -> BTreeMap<TargetId, Vec<usize>> {
        let mut out: BTreeMap<TargetId, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.split == split {
                out.entry(s.target.clone()).or_default().push(i);
            }
        }
        out
    }

    /// Mean training landmarks of every target.
    pub fn canonical_means(&self) -> Result<BTreeMap<TargetId, LandmarkSet>> {
        let mut out = BTreeMap::new();
        for (t, idx) in self.index(Split::Train) {
            let l = self.topology.point_count;
            let mut acc = vec![[0.0; 2]; l];
            for &i in &idx {
                for (a, p) in acc.iter_mut().zip(self.samples[i].landmarks.points()) {
                    a[0] += p[0];
                    a[1] += p[1];
                }
            }
            let n = idx.len() as f64;
            let mean = acc.into_iter().map(|a| [a[0] / n, a[1] / n]).collect();
            out.insert(t, LandmarkSet::new(mean, &self.topology)?);
        }
        Ok(out)
    }

    /// Index of the image of `target` whose landmarks sit closest to
    /// `canonical`: the most neutral face, used as an identity reference.
    pub fn reference_index(&self, target: &TargetId, canonical: &LandmarkSet) -> Option<usize> {
        let c = canonical.to_vector();
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| &s.target == target)
            .min_by(|(_, a), (_, b)| {
                let d = |s: &Sample| s.landmarks.to_vector().distance(&c);
                d(a).total_cmp(&d(b))
            })
            .map(|(i, _)| i)
    }

    /// Held-out samples grouped by shared expression: expression index →
    /// target → sample index.
    pub fn paired_val(&self) -> BTreeMap<u64, BTreeMap<TargetId, usize>> {
        let mut out: BTreeMap<u64, BTreeMap<TargetId, usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if let (Split::Val, Some(e)) = (s.split, s.expression) {
                out.entry(e).or_default().insert(s.target.clone(), i);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub resolution: usize,
    pub train_per_identity: usize,
    /// Expressions rendered for every identity in the held-out split.
    pub val_expressions: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            train_per_identity: 300,
            val_expressions: 20,
            seed: 7,
        }
    }
}

/// Identity metadata for a registry, with canonical landmarks set to the
/// dataset's per-target training means.
pub fn target_infos(identities: &[IdentitySpec], dataset: &Dataset) -> Result<Vec<TargetInfo>> {
    let means = dataset.canonical_means()?;
    Ok(identities
        .iter()
        .map(|s| TargetInfo {
            id: s.target_id.clone(),
            display_name: s.display_name.clone(),
            canonical: means
                .get(&s.target_id)
                .cloned()
                .unwrap_or_else(|| s.canonical.clone()),
        })
        .collect())
}

/// Renders the toy world. Training samples use independent expressions per
/// identity; held-out samples reuse one expression across all identities so
/// cross-identity ground truth exists.
pub fn generate_toy(identities: &[IdentitySpec], cfg: &ToyConfig) -> Result<Dataset> {
    let first = identities
        .first()
        .ok_or_else(|| Error::Config("no identities to render".into()))?;
    let topology = first.topology()?;
    for s in identities {
        s.validate()?;
        if s.topology != topology.name {
            return Err(Error::Config("identities use different topologies".into()));
        }
    }
    let mut samples = Vec::new();
    for (k, spec) in identities.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + k as u64);
        for _ in 0..cfg.train_per_identity {
            let expr = Expression::sample(topology.point_count, &mut rng);
            let landmarks = spec.landmarks(&expr)?;
            let image = render_toy_face(&landmarks, spec, cfg.resolution)?;
            samples.push(Sample {
                target: spec.target_id.clone(),
                landmarks,
                image,
                split: Split::Train,
                expression: None,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for e in 0..cfg.val_expressions {
        let expr = Expression::sample(topology.point_count, &mut rng);
        for spec in identities {
            let landmarks = spec.landmarks(&expr)?;
            let image = render_toy_face(&landmarks, spec, cfg.resolution)?;
            samples.push(Sample {
                target: spec.target_id.clone(),
                landmarks,
                image,
                split: Split::Val,
                expression: Some(e as u64),
            });
        }
    }
    Ok(Dataset { topology, samples })
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IDENTITIES_FILE: &str = "identities.json";
pub const TOPOLOGY_FILE: &str = "topology.json";

/// Writes `images/*.png`, the manifest, the identity specs and the topology.
pub fn write_dataset(dir: &Path, dataset: &Dataset, identities: &[IdentitySpec]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(dataset.samples.len());
    let mut counters: BTreeMap<(TargetId, Split), usize> = BTreeMap::new();
    for s in &dataset.samples {
        let k = counters.entry((s.target.clone(), s.split)).or_default();
        let split = match s.split {
            Split::Train => "train",
            Split::Val => "val",
        };
        let name = format!("images/{}_{split}_{:05}.png", s.target, k);
        *k += 1;
        s.image.save_png(&dir.join(&name))?;
        records.push(ManifestRecord {
            image_path: name,
            target_id: s.target.clone(),
            split: s.split,
            frame: Frame {
                w: s.image.width() as f64,
                h: s.image.height() as f64,
            },
            landmarks: s.landmarks.clone(),
            expression: s.expression,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    fs::write(
        dir.join(IDENTITIES_FILE),
        serde_json::to_string_pretty(identities)?,
    )?;
    fs::write(
        dir.join(TOPOLOGY_FILE),
        serde_json::to_string_pretty(&dataset.topology)?,
    )?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vec<IdentitySpec>)> {
    let ids_path = dir.join(IDENTITIES_FILE);
    let text = fs::read_to_string(&ids_path)
        .map_err(|e| Error::Missing(format!("{}: {e}", ids_path.display())))?;
    let identities: Vec<IdentitySpec> = serde_json::from_str(&text)?;
    let topology = match identities.first() {
        Some(s) => s.topology()?,
        None => {
            return Err(Error::Config(format!(
                "{} lists no identities",
                ids_path.display()
            )))
        }
    };
    let manifest = load_manifest(&dir.join(MANIFEST_FILE), &topology)?;
    let known: Vec<TargetId> = identities.iter().map(|s| s.target_id.clone()).collect();
    Ok((
        Dataset::from_manifest(&manifest, topology, &known)?,
        identities,
    ))
}
