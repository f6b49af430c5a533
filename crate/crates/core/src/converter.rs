//! Landmark converter: a shared encoder into an identity-neutral latent and
//! one decoder per target identity.

use std::collections::BTreeMap;

use facemark_tensor::{scoped, Graph, Module, Param, Tensor, Var};
use rand::Rng;

use crate::config::ConverterConfig;
use crate::error::{expect_len, Error, Result};
use crate::geometry::LandmarkVector;
use crate::nn::{Mlp, OutputActivation};
use crate::registry::TargetId;

/// Encoder output; same length (2L) as the landmark vector it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    values: Vec<f64>,
}

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug)]
pub struct Converter {
    dim: usize,
    encoder: Mlp,
    decoders: BTreeMap<TargetId, Mlp>,
}

fn widths(dim: usize, cfg: &ConverterConfig) -> Vec<usize> {
    let mut w = vec![dim];
    w.extend(&cfg.hidden);
    w.push(dim);
    w
}

impl Converter {
    /// `dim` is the flattened landmark length 2L.
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        cfg: &ConverterConfig,
        targets: &[TargetId],
        rng: &mut R,
    ) -> Self {
        let w = widths(dim, cfg);
        let encoder = Mlp::new(&w, OutputActivation::Identity, rng);
        let decoders = targets
            .iter()
            .map(|t| (t.clone(), Mlp::new(&w, OutputActivation::Sigmoid, rng)))
            .collect();
        Self {
            dim,
            encoder,
            decoders,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn targets(&self) -> impl Iterator<Item = &TargetId> {
        self.decoders.keys()
    }

    pub fn decoder(&self, target: &TargetId) -> Result<&Mlp> {
        self.decoders
            .get(target)
            .ok_or_else(|| self.unknown(target))
    }

    pub fn decoder_mut(&mut self, target: &TargetId) -> Result<&mut Mlp> {
        if !self.decoders.contains_key(target) {
            return Err(self.unknown(target));
        }
        Ok(self.decoders.get_mut(target).unwrap())
    }

    fn unknown(&self, target: &TargetId) -> Error {
        Error::UnknownTarget {
            id: target.to_string(),
            available: self.decoders.keys().map(|t| t.to_string()).collect(),
        }
    }

    /// Φ on a batch `x: [N, 2L]`.
    pub fn encode_var(&self, g: &Graph, x: Var) -> Var {
        self.encoder.forward(g, x)
    }

    /// Ψ_t on a batch of latents.
    pub fn decode_var(&self, g: &Graph, target: &TargetId, z: Var) -> Result<Var> {
        Ok(self.decoder(target)?.forward(g, z))
    }

    /// Ψ_t(Φ(x)).
    pub fn convert_var(&self, g: &Graph, x: Var, target: &TargetId) -> Result<Var> {
        let z = self.encode_var(g, x);
        self.decode_var(g, target, z)
    }

    /// Ψ_back(Φ(Ψ_via(Φ(x)))).
    pub fn cycle_var(&self, g: &Graph, x: Var, via: &TargetId, back: &TargetId) -> Result<Var> {
        let there = self.convert_var(g, x, via)?;
        self.convert_var(g, there, back)
    }

    fn check_len(&self, got: usize) -> Result<()> {
        expect_len("landmark vector entries", self.dim, got)
    }

    fn row(&self, g: &Graph, values: &[f64]) -> Var {
        g.input(Tensor::new(&[1, self.dim], values.to_vec()))
    }

    fn unrow(g: &Graph, v: Var) -> Vec<f64> {
        g.value(v).data().to_vec()
    }

    pub fn encode(&self, lms: &LandmarkVector) -> Result<LatentCode> {
        self.check_len(lms.len())?;
        let g = Graph::new();
        let z = self.encode_var(&g, self.row(&g, lms.values()));
        Ok(LatentCode::new(Self::unrow(&g, z)))
    }

    pub fn decode(&self, target: &TargetId, z: &LatentCode) -> Result<LandmarkVector> {
        self.check_len(z.values.len())?;
        let dec = self.decoder(target)?;
        let g = Graph::new();
        let out = dec.forward(&g, self.row(&g, &z.values));
        Ok(LandmarkVector::new(Self::unrow(&g, out)))
    }

    /// Source landmarks reshaped to the target's geometry: `decode(t, encode(x))`.
    pub fn convert(&self, lms: &LandmarkVector, target: &TargetId) -> Result<LandmarkVector> {
        let z = self.encode(lms)?;
        self.decode(target, &z)
    }

    /// Round trip through `via` and then into `back`.
    pub fn cycle(
        &self,
        lms: &LandmarkVector,
        via: &TargetId,
        back: &TargetId,
    ) -> Result<LandmarkVector> {
        let there = self.convert(lms, via)?;
        self.convert(&there, back)
    }

    /// Adds a freshly initialized decoder for a new target.
    pub fn add_target<R: Rng + ?Sized>(
        &mut self,
        target: TargetId,
        cfg: &ConverterConfig,
        rng: &mut R,
    ) {
        let w = widths(self.dim, cfg);
        self.decoders
            .insert(target, Mlp::new(&w, OutputActivation::Sigmoid, rng));
    }
}

impl Module for Converter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder.visit(&mut |n, p| f(&scoped("encoder", n), p));
        for (t, d) in &self.decoders {
            d.visit(&mut |n, p| f(&scoped(&format!("decoder.{t}"), n), p));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder
            .visit_mut(&mut |n, p| f(&scoped("encoder", n), p));
        for (t, d) in self.decoders.iter_mut() {
            d.visit_mut(&mut |n, p| f(&scoped(&format!("decoder.{t}"), n), p));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use facemark_tensor::{check_inputs, check_module, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(targets: &[&str]) -> Converter {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ids: Vec<TargetId> = targets.iter().map(|t| TargetId::from(*t)).collect();
        Converter::new(
            24,
            &ConverterConfig {
                hidden: vec![32; 4],
            },
            &ids,
            &mut rng,
        )
    }

    fn sample_vec(seed: u64) -> LandmarkVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LandmarkVector::new((0..24).map(|_| rng.random_range(0.1..0.9)).collect())
    }

    #[test]
    fn five_layers_on_each_side() {
        let c = small(&["a", "b"]);
        assert_eq!(c.encoder().layers.len(), 5);
        assert_eq!(c.decoder(&"a".into()).unwrap().layers.len(), 5);
        assert_eq!(c.encoder().widths(), vec![24, 32, 32, 32, 32, 24]);
    }

    #[test]
    fn zero_weights_give_bias_only_output() {
        let mut c = small(&["a"]);
        c.encoder_mut().visit_mut(&mut |name, p| {
            let v = if name.ends_with("bias") { 0.25 } else { 0.0 };
            let shape = p.value().shape().to_vec();
            p.set(Tensor::full(&shape, v));
        });
        let z = c.encode(&sample_vec(1)).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn unknown_target_lists_registered() {
        let c = small(&["alice", "bob"]);
        let err = c.convert(&sample_vec(1), &"carol".into()).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("carol") && msg.contains("alice") && msg.contains("bob"),
            "{msg}"
        );
    }

    #[test]
    fn wrong_length_is_rejected() {
        let c = small(&["a"]);
        assert!(matches!(
            c.encode(&LandmarkVector::new(vec![0.5; 22])),
            Err(Error::Dimension {
                expected: 24,
                got: 22,
                ..
            })
        ));
    }

    #[test]
    fn convert_and_cycle_are_exact_compositions() {
        let c = small(&["a", "b"]);
        let (a, b) = (TargetId::from("a"), TargetId::from("b"));
        let v = sample_vec(5);
        let via = c.decode(&a, &c.encode(&v).unwrap()).unwrap();
        assert_eq!(c.convert(&v, &a).unwrap(), via);
        assert_eq!(
            c.cycle(&v, &b, &a).unwrap(),
            c.convert(&c.convert(&v, &b).unwrap(), &a).unwrap()
        );
        assert_eq!(
            c.cycle(&v, &a, &a).unwrap(),
            c.convert(&c.convert(&v, &a).unwrap(), &a).unwrap()
        );
    }

    #[test]
    fn untrained_outputs_stay_in_unit_box() {
        let c = small(&["a", "b"]);
        for s in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
            let v = LandmarkVector::new((0..24).map(|_| rng.random_range(-50.0..50.0)).collect());
            let out = c.cycle(&v, &"a".into(), &"b".into()).unwrap();
            assert!(out.values().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn encode_decode_gradients_match_finite_differences() {
        let c = small(&["a"]);
        let x = Tensor::new(&[1, 24], sample_vec(9).into_values());
        let opts = GradCheckOptions {
            coords_per_tensor: 24,
            ..Default::default()
        };
        let r = check_inputs(&[x.clone()], |g, v| g.sum(c.encode_var(g, v[0])), opts);
        assert!(r.max_rel_err < 1e-4, "encode {r:?}");
        let r = check_inputs(
            &[x],
            |g, v| g.sum(c.decode_var(g, &"a".into(), v[0]).unwrap()),
            opts,
        );
        assert!(r.max_rel_err < 1e-4, "decode {r:?}");
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut c = small(&["a", "b"]);
        let x = Tensor::new(
            &[2, 24],
            [sample_vec(1).into_values(), sample_vec(2).into_values()].concat(),
        );
        let r = check_module(
            &mut c,
            |c, g| {
                let xv = g.input(x.clone());
                let y = c.cycle_var(g, xv, &"a".into(), &"b".into()).unwrap();
                g.sum(g.square(y))
            },
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
