//! Optimization loops: converter pre-training, joint training of converter,
//! generators and discriminators, and supervised detector training.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;

use facemark_tensor::{Graph, Module, RmsProp, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::losses::{self, loss_overall, LossBreakdown, LossTerms};
use crate::registry::{ModelRegistry, TargetId};

pub use checkpoint::{RngState, TrainingState};
pub use config::{LrDecay, Phase, Pretrain, TrainConfig};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    pub l2i: f64,
    pub i2l: f64,
    pub l2l: f64,
    pub x_l2l: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub overall: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl LogRecord {
    fn new(
        step: usize,
        phase: Phase,
        lr: f64,
        b: &LossBreakdown,
        grad_norm: f64,
        clip: Option<f64>,
    ) -> Self {
        Self {
            step,
            phase,
            lr,
            l2i: b.l2i,
            i2l: b.i2l,
            l2l: b.l2l,
            x_l2l: b.x_l2l,
            gan_g: b.gan_g,
            gan_d: b.gan_d,
            overall: b.overall,
            grad_norm,
            clipped: clip.is_some_and(|c| grad_norm > c),
        }
    }
}

/// Training data grouped by identity.
struct Pools {
    ids: Vec<TargetId>,
    by_target: BTreeMap<TargetId, Vec<usize>>,
}

impl Pools {
    fn new(data: &Dataset, registry: &ModelRegistry, wanted: &[TargetId]) -> Result<Self> {
        let mut by_target = data.index(Split::Train);
        for id in by_target.keys() {
            registry.target(id)?;
        }
        if !wanted.is_empty() {
            for id in wanted {
                registry.target(id)?;
            }
            by_target.retain(|id, _| wanted.contains(id));
        }
        let ids: Vec<TargetId> = by_target.keys().cloned().collect();
        Ok(Self { ids, by_target })
    }

    fn batch<R: Rng>(&self, id: &TargetId, n: usize, rng: &mut R) -> Vec<usize> {
        let pool = &self.by_target[id];
        (0..n)
            .map(|_| *pool.choose(rng).expect("non-empty pool"))
            .collect()
    }

    /// A target and a different source identity, uniformly.
    fn pair<R: Rng>(&self, rng: &mut R) -> (TargetId, TargetId) {
        let t = rng.random_range(0..self.ids.len());
        let mut s = rng.random_range(0..self.ids.len() - 1);
        if s >= t {
            s += 1;
        }
        (self.ids[t].clone(), self.ids[s].clone())
    }
}

fn landmark_batch(data: &Dataset, idx: &[usize]) -> Tensor {
    let rows: Vec<f64> = idx
        .iter()
        .flat_map(|&i| data.samples[i].landmarks.to_vector().into_values())
        .collect();
    Tensor::new(&[idx.len(), rows.len() / idx.len()], rows)
}

fn image_batch(data: &Dataset, idx: &[usize]) -> Tensor {
    let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &data.samples[i].image).collect();
    ImageTensor::batch(&imgs)
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    if b.overall.is_finite() && b.gan_d.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("training loss, aborting: {b:?}"),
        })
    }
}

/// Owns the sampling RNG, step counter and optimizer state of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
    opt: RmsProp,
    opt_disc: RmsProp,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let opt = RmsProp::new(cfg.lr_initial, cfg.rms_alpha, cfg.rms_eps);
        let opt_disc = opt.clone();
        Ok(Self {
            cfg,
            rng,
            step: 0,
            opt,
            opt_disc,
        })
    }

    /// Continues from a saved step and RNG position (optimizer moments restart).
    pub fn resume(cfg: TrainConfig, state: &TrainingState) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        t.step = state.step;
        if let Some(r) = state.rng {
            t.rng = ChaCha8Rng::seed_from_u64(r.seed);
            t.rng.set_stream(r.stream);
            t.rng.set_word_pos(r.word_pos);
        }
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            step: self.step,
            rng: Some(RngState {
                seed: self.cfg.seed,
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            }),
            train_config: Some(self.cfg.clone()),
        }
    }

    /// Runs until `max_iterations`, calling `on_log` every `log_every` steps
    /// and after the last one.
    pub fn run(
        &mut self,
        registry: &mut ModelRegistry,
        data: &Dataset,
        on_log: &mut dyn FnMut(&LogRecord),
    ) -> Result<Vec<LogRecord>> {
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let pools = Pools::new(data, registry, &self.cfg.identities)?;
        if pools.ids.is_empty() {
            return Err(Error::Config(
                "no training samples for the selected identities".into(),
            ));
        }
        if self.cfg.phase != Phase::Detector && pools.ids.len() < 2 {
            return Err(Error::Config(
                "converter and joint training need at least two identities: the cycle term maps through a second identity s ≠ t"
                    .into(),
            ));
        }
        if self.cfg.phase == Phase::Joint {
            if let Some(p) = self
                .cfg
                .pretrain
                .filter(|_| self.step == 0 && !self.cfg.converter_bypass)
            {
                let mut pre = self.cfg.clone();
                pre.phase = Phase::Converter;
                pre.batch_size = p.batch_size;
                pre.lr_initial = p.lr;
                pre.lr_decay = None;
                pre.max_iterations = p.iterations;
                pre.pretrain = None;
                let mut t = Trainer::new(pre)?;
                t.rng = self.rng.clone();
                t.run(registry, data, on_log)?;
                self.rng = t.rng;
            }
        }
        let mut history = Vec::new();
        while self.step < self.cfg.max_iterations {
            let rec = self.train_step(registry, data, &pools)?;
            self.step += 1;
            if self.step % self.cfg.log_every == 0
                || self.step == self.cfg.max_iterations
                || self.step == 1
            {
                on_log(&rec);
            }
            history.push(rec);
        }
        Ok(history)
    }

    fn train_step(
        &mut self,
        registry: &mut ModelRegistry,
        data: &Dataset,
        pools: &Pools,
    ) -> Result<LogRecord> {
        let lr = self.cfg.lr_at(self.step);
        self.opt.lr = lr;
        self.opt_disc.lr = lr;
        match self.cfg.phase {
            Phase::Converter => self.converter_step(registry, data, pools, lr),
            Phase::Joint => self.joint_step(registry, data, pools, lr),
            Phase::Detector => self.detector_step(registry, data, pools, lr),
        }
    }

    fn converter_step(
        &mut self,
        reg: &mut ModelRegistry,
        data: &Dataset,
        pools: &Pools,
        lr: f64,
    ) -> Result<LogRecord> {
        let (t, s) = pools.pair(&mut self.rng);
        let idx = pools.batch(&t, self.cfg.batch_size, &mut self.rng);
        let lms = landmark_batch(data, &idx);
        let red = self.cfg.reduction;
        let w = self.cfg.weights;

        let g = Graph::new();
        let x = g.input(lms.clone());
        let z = reg.converter.encode_var(&g, x);
        let recon = reg.converter.decode_var(&g, &t, z)?;
        let l2l = losses::l2l_var(&g, &lms, recon, z, red)?;
        let cycled = reg.converter.cycle_var(&g, x, &s, &t)?;
        let xl2l = losses::xl2l_var(&g, x, cycled, red);
        let total = g.add(g.scale(l2l, w.l2l), g.scale(xl2l, w.x_l2l));
        let terms = LossTerms {
            l2l: g.value(l2l).item(),
            x_l2l: g.value(xl2l).item(),
            ..Default::default()
        };
        let b = loss_overall(terms, w)?;
        check_finite(&b)?;
        let grads = g.backward(total);
        let norm = self
            .opt
            .step(&mut [&mut reg.converter], &grads, self.cfg.clip_norm);
        Ok(LogRecord::new(
            self.step,
            Phase::Converter,
            lr,
            &b,
            norm,
            self.cfg.clip_norm,
        ))
    }

    fn joint_step(
        &mut self,
        reg: &mut ModelRegistry,
        data: &Dataset,
        pools: &Pools,
        lr: f64,
    ) -> Result<LogRecord> {
        let (t, s) = pools.pair(&mut self.rng);
        let idx_t = pools.batch(&t, self.cfg.batch_size, &mut self.rng);
        let idx_s = pools.batch(&s, self.cfg.batch_size, &mut self.rng);
        let lms_t = landmark_batch(data, &idx_t);
        let lms_s = landmark_batch(data, &idx_s);
        let real = image_batch(data, &idx_t);
        let red = self.cfg.reduction;
        let w = self.cfg.weights;
        let bypass = self.cfg.converter_bypass;

        let (terms, fake_value, grads) = {
            let g = Graph::new();
            g.freeze(&reg.detector);
            g.freeze(reg.discriminator(&t)?);
            let gen = reg.generator(&t)?;
            let xt = g.input(lms_t.clone());
            let xs = g.input(lms_s);
            let real_v = g.input(real.clone());

            let recon_img = gen.forward(&g, xt)?;
            let l2i = losses::l2i_var(&g, real_v, recon_img);
            let i2l = losses::i2l_var(&g, xt, recon_img, &reg.detector, red)?;

            let mut total = g.add(g.scale(l2i, w.l2i), g.scale(i2l, w.i2l));
            let (mut l2l_v, mut xl2l_v) = (0.0, 0.0);
            let fed = if bypass {
                xs
            } else {
                let z = reg.converter.encode_var(&g, xt);
                let recon = reg.converter.decode_var(&g, &t, z)?;
                let l2l = losses::l2l_var(&g, &lms_t, recon, z, red)?;
                let cycled = reg.converter.cycle_var(&g, xt, &s, &t)?;
                let xl2l = losses::xl2l_var(&g, xt, cycled, red);
                total = g.add(total, g.add(g.scale(l2l, w.l2l), g.scale(xl2l, w.x_l2l)));
                l2l_v = g.value(l2l).item();
                xl2l_v = g.value(xl2l).item();
                reg.converter.convert_var(&g, xs, &t)?
            };
            let fake = gen.forward(&g, fed)?;
            let fake_scores = reg.discriminator(&t)?.forward(&g, fake)?;
            let gan_g = losses::gan_g_var(&g, fake_scores, self.cfg.gan_form);
            total = g.add(total, g.scale(gan_g, w.gan));
            let terms = LossTerms {
                l2i: g.value(l2i).item(),
                i2l: g.value(i2l).item(),
                l2l: l2l_v,
                x_l2l: xl2l_v,
                gan_g: g.value(gan_g).item(),
                gan_d: 0.0,
            };
            let fake_value = (*g.value(fake)).clone();
            (terms, fake_value, g.backward(total))
        };
        check_finite(&loss_overall(terms, w)?)?;
        let norm = {
            let gen = reg.generators.get_mut(&t).expect("target checked");
            if bypass {
                self.opt.step(&mut [gen], &grads, self.cfg.clip_norm)
            } else {
                self.opt
                    .step(&mut [&mut reg.converter, gen], &grads, self.cfg.clip_norm)
            }
        };
        drop(grads);

        let g = Graph::new();
        let disc = reg.discriminator(&t)?;
        let real_scores = disc.forward(&g, g.input(real))?;
        let fake_scores = disc.forward(&g, g.input(fake_value))?;
        let d_loss = losses::gan_d_var(&g, real_scores, fake_scores);
        let mut terms = terms;
        terms.gan_d = g.value(d_loss).item();
        let b = loss_overall(terms, w)?;
        check_finite(&b)?;
        let grads = g.backward(d_loss);
        let disc = reg.discriminators.get_mut(&t).expect("target checked");
        self.opt_disc.step(&mut [disc], &grads, self.cfg.clip_norm);
        Ok(LogRecord::new(
            self.step,
            Phase::Joint,
            lr,
            &b,
            norm,
            self.cfg.clip_norm,
        ))
    }

    fn detector_step(
        &mut self,
        reg: &mut ModelRegistry,
        data: &Dataset,
        pools: &Pools,
        lr: f64,
    ) -> Result<LogRecord> {
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| {
                let id = pools.ids.choose(&mut self.rng).expect("non-empty");
                pools.batch(id, 1, &mut self.rng)[0]
            })
            .collect();
        let size = reg.detector.config.input_size;
        let imgs: Vec<ImageTensor> = idx
            .iter()
            .map(|&i| {
                let img = &data.samples[i].image;
                img.downsample(img.height() / size)
            })
            .collect::<Result<_>>()?;
        let img = ImageTensor::batch(&imgs.iter().collect::<Vec<_>>());
        let target = landmark_batch(data, &idx);
        let g = Graph::new();
        let (loss, coord, _js) = reg.detector.supervised_loss(&g, g.input(img), &target)?;
        let total = g.value(loss).item();
        let terms = LossTerms {
            i2l: coord,
            ..Default::default()
        };
        let mut b = loss_overall(terms, self.cfg.weights)?;
        b.overall = total;
        check_finite(&b)?;
        let grads = g.backward(loss);
        let norm = self
            .opt
            .step(&mut [&mut reg.detector], &grads, self.cfg.clip_norm);
        Ok(LogRecord::new(
            self.step,
            Phase::Detector,
            lr,
            &b,
            norm,
            self.cfg.clip_norm,
        ))
    }
}

/// Parameter values of `module`, for before/after comparisons.
pub fn snapshot(module: &dyn Module) -> Vec<Tensor> {
    let mut out = Vec::new();
    module.visit(&mut |_, p| out.push(p.value().clone()));
    out
}
