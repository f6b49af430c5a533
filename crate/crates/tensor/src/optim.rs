use std::collections::HashMap;

use crate::graph::Gradients;
use crate::param::{Module, Param};
use crate::tensor::Tensor;

/// RMSProp with the conventional running average of squared gradients:
/// `v ← αv + (1−α)g²`, `θ ← θ − lr·g / (√v + ε)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: HashMap<u64, Tensor>,
}

impl RmsProp {
    pub fn new(lr: f64, alpha: f64, eps: f64) -> Self {
        Self {
            lr,
            alpha,
            eps,
            square_avg: HashMap::new(),
        }
    }

    pub fn update(&mut self, p: &mut Param, grad: &Tensor) {
        let (alpha, lr, eps) = (self.alpha, self.lr, self.eps);
        let v = self
            .square_avg
            .entry(p.id())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        for (s, &g) in v.data_mut().iter_mut().zip(grad.data()) {
            *s = alpha * *s + (1.0 - alpha) * g * g;
        }
        let v = &*v;
        for ((w, &g), &s) in p
            .value_mut()
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(v.data())
        {
            *w -= lr * g / (s.sqrt() + eps);
        }
    }

    /// Steps every parameter of `modules` that received a gradient, after
    /// rescaling so the global gradient norm is at most `clip_norm`.
    /// Returns the pre-clip norm.
    pub fn step(
        &mut self,
        modules: &mut [&mut dyn Module],
        grads: &Gradients,
        clip_norm: Option<f64>,
    ) -> f64 {
        let mut sq = 0.0;
        for m in modules.iter() {
            m.visit(&mut |_, p| {
                if let Some(g) = grads.param(p) {
                    sq += g.sq_norm();
                }
            });
        }
        let norm = sq.sqrt();
        let factor = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for m in modules.iter_mut() {
            m.visit_mut(&mut |_, p| {
                if let Some(g) = grads.param(p) {
                    if factor == 1.0 {
                        self.update(p, g);
                    } else {
                        self.update(p, &g.map(|v| v * factor));
                    }
                }
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn first_step_matches_closed_form() {
        // v = (1-α)g² ⇒ Δ = lr·g / (√(1-α)|g| + ε)
        let mut p = Param::new(Tensor::new(&[2], vec![1.0, -2.0]));
        let g = Tensor::new(&[2], vec![0.5, -4.0]);
        let mut opt = RmsProp::new(0.01, 0.99, 1e-8);
        opt.update(&mut p, &g);
        for (i, (&w0, &gv)) in [1.0f64, -2.0].iter().zip(g.data()).enumerate() {
            let want = w0 - 0.01 * gv / ((0.01f64).sqrt() * gv.abs() + 1e-8);
            assert!((p.value().data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_rescales_large_gradients() {
        struct M(Param);
        impl Module for M {
            fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
                f("p", &self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
                f("p", &mut self.0)
            }
        }
        let mut m = M(Param::new(Tensor::new(&[2], vec![3.0, 4.0])));
        let g = Graph::new();
        let v = g.param(&m.0);
        let loss = g.scale(g.sum(g.square(v)), 10.0);
        let grads = g.backward(loss);
        drop(g);
        let mut opt = RmsProp::new(0.1, 0.99, 1e-8);
        let norm = opt.step(&mut [&mut m], &grads, Some(10.0));
        assert!((norm - 100.0).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(Tensor::new(&[3], vec![2.0, -1.0, 0.5]));
        let mut opt = RmsProp::new(0.01, 0.99, 1e-8);
        for _ in 0..2000 {
            let grad = p.value().map(|v| 2.0 * v);
            opt.update(&mut p, &grad);
        }
        assert!(p.value().sq_norm() < 1e-3);
    }
}
