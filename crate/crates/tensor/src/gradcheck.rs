//! Central finite-difference checks of reverse-mode gradients.
//!
//! Each checked tensor contributes a sample of individual coordinates
//! (compared as a vector, relative error in the 2-norm) and every check adds
//! whole-model directional derivatives along random Gaussian directions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::param::Module;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub coords_per_tensor: usize,
    pub directions: usize,
    pub seed: u64,
    /// Times the step is divided by ten when the one-sided slopes disagree,
    /// which happens when the step straddles a kink such as a ReLU hinge.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            coords_per_tensor: 12,
            directions: 3,
            seed: 0x5eed,
            kink_retries: 3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub evaluations: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: String, analytic: &[f64], numeric: &[f64]) {
        let diff: f64 = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(1e-8);
        if rel > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(rel);
            if rel >= self.max_rel_err {
                self.worst = label;
            }
        }
    }
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

/// Central difference of `f(h)` at `h = 0`, where `base = f(0)`. If the
/// forward and backward slopes disagree the step is shrunk and retried.
fn central(
    f: &mut dyn FnMut(f64) -> f64,
    base: f64,
    opts: &GradCheckOptions,
    evaluations: &mut usize,
) -> f64 {
    let mut eps = opts.eps;
    let mut estimate = 0.0;
    for attempt in 0..=opts.kink_retries {
        let (plus, minus) = (f(eps), f(-eps));
        *evaluations += 2;
        estimate = (plus - minus) / (2.0 * eps);
        let forward = (plus - base) / eps;
        let backward = (base - minus) / eps;
        let scale = forward.abs().max(backward.abs()).max(1e-8);
        if (forward - backward).abs() <= 1e-3 * scale || attempt == opts.kink_retries {
            break;
        }
        eps /= 10.0;
    }
    estimate
}

/// Checks gradients of `f` with respect to each of `inputs`.
pub fn check_inputs(
    inputs: &[Tensor],
    f: impl Fn(&Graph, &[Var]) -> Var,
    opts: GradCheckOptions,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    drop(g);

    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars);
        scalar(&g, out)
    };

    let mut report = GradCheckReport::default();
    let base = eval(inputs);
    report.evaluations += 1;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let picks = pick(&mut rng, t.numel(), opts.coords_per_tensor);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &picks {
            let orig = work[ti].data()[i];
            let mut at = |h: f64| {
                work[ti].data_mut()[i] = orig + h;
                let v = eval(&work);
                work[ti].data_mut()[i] = orig;
                v
            };
            a.push(analytic[ti].data()[i]);
            n.push(central(&mut at, base, &opts, &mut report.evaluations));
        }
        report.record(format!("input[{ti}] coords"), &a, &n);
    }
    for d in 0..opts.directions {
        let dirs = unit_directions(&mut rng, inputs.iter().map(|t| t.shape()));
        let mut along = |h: f64| -> f64 {
            let moved: Vec<Tensor> = inputs
                .iter()
                .zip(&dirs)
                .map(|(t, dir)| t.zip_map(dir, |x, u| x + h * u))
                .collect();
            eval(&moved)
        };
        let numeric = central(&mut along, base, &opts, &mut report.evaluations);
        let exact: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(a, u)| {
                a.data()
                    .iter()
                    .zip(u.data())
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum();
        report.record(format!("direction {d}"), &[exact], &[numeric]);
    }
    report
}

/// Checks gradients of `loss` with respect to every parameter of `module`.
pub fn check_module<M: Module>(
    module: &mut M,
    loss: impl Fn(&M, &Graph) -> Var,
    opts: GradCheckOptions,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut analytic = Vec::new();
    {
        let g = Graph::new();
        let out = loss(module, &g);
        let grads = g.backward(out);
        module.visit(&mut |name, p| {
            names.push(name.to_string());
            shapes.push(p.value().shape().to_vec());
            analytic.push(
                grads
                    .param(p)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value().shape())),
            );
        });
    }

    let eval = |m: &M| -> f64 {
        let g = Graph::new();
        let out = loss(m, &g);
        scalar(&g, out)
    };
    let nudge = |m: &mut M, target: usize, coord: usize, delta: f64| {
        let mut k = 0;
        m.visit_mut(&mut |_, p| {
            if k == target {
                p.value_mut().data_mut()[coord] += delta;
            }
            k += 1;
        });
    };

    let mut report = GradCheckReport::default();
    let base = eval(module);
    report.evaluations += 1;
    let originals: Vec<Tensor> = {
        let mut o = Vec::new();
        module.visit(&mut |_, p| o.push(p.value().clone()));
        o
    };
    for (pi, name) in names.iter().enumerate() {
        let numel: usize = shapes[pi].iter().product();
        let picks = pick(&mut rng, numel, opts.coords_per_tensor);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &picks {
            let mut at = |h: f64| {
                nudge(module, pi, i, h);
                let v = eval(module);
                restore(module, &originals);
                v
            };
            a.push(analytic[pi].data()[i]);
            n.push(central(&mut at, base, &opts, &mut report.evaluations));
        }
        report.record(name.clone(), &a, &n);
    }

    for d in 0..opts.directions {
        let dirs = unit_directions(&mut rng, shapes.iter().map(|s| s.as_slice()));
        let mut along = |h: f64| {
            let mut k = 0;
            module.visit_mut(&mut |_, p| {
                for (v, u) in p.value_mut().data_mut().iter_mut().zip(dirs[k].data()) {
                    *v += h * u;
                }
                k += 1;
            });
            let v = eval(module);
            restore(module, &originals);
            v
        };
        let numeric = central(&mut along, base, &opts, &mut report.evaluations);
        let exact: f64 = analytic
            .iter()
            .zip(&dirs)
            .map(|(a, u)| {
                a.data()
                    .iter()
                    .zip(u.data())
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum();
        report.record(format!("direction {d}"), &[exact], &[numeric]);
    }
    report
}

fn restore<M: Module>(module: &mut M, originals: &[Tensor]) {
    let mut k = 0;
    module.visit_mut(&mut |_, p| {
        p.set(originals[k].clone());
        k += 1;
    });
}

/// Gaussian direction over all tensors, scaled to unit total norm.
fn unit_directions<'a>(
    rng: &mut ChaCha8Rng,
    shapes: impl Iterator<Item = &'a [usize]>,
) -> Vec<Tensor> {
    let mut dirs: Vec<Tensor> = shapes
        .map(|s| Tensor::from_fn(s, |_| StandardNormal.sample(&mut *rng)))
        .collect();
    let norm = dirs
        .iter()
        .map(|d| d.sq_norm())
        .sum::<f64>()
        .sqrt()
        .max(1e-300);
    for d in &mut dirs {
        d.scale_inplace(1.0 / norm);
    }
    dirs
}

fn pick(rng: &mut ChaCha8Rng, numel: usize, count: usize) -> Vec<usize> {
    if numel <= count {
        (0..numel).collect()
    } else {
        sample(rng, numel, count).into_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::Padding;
    use crate::param::Param;

    #[test]
    fn step_shrinks_when_it_straddles_a_hinge() {
        let x = Tensor::new(&[1], vec![3e-5]);
        let f = |g: &Graph, v: &[Var]| g.sum(g.relu(v[0]));
        let opts = GradCheckOptions {
            coords_per_tensor: 1,
            directions: 0,
            ..Default::default()
        };
        let naive = check_inputs(
            &[x.clone()],
            f,
            GradCheckOptions {
                kink_retries: 0,
                ..opts
            },
        );
        assert!(naive.max_rel_err > 0.1, "{naive:?}");
        let r = check_inputs(&[x], f, opts);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn elementwise_ops_pass() {
        let x = Tensor::from_fn(&[2, 3], |i| 0.3 + 0.17 * i as f64);
        let y = Tensor::from_fn(&[2, 3], |i| -0.5 + 0.21 * i as f64);
        let r = check_inputs(
            &[x, y],
            |g, v| {
                let a = g.mul(g.sigmoid(v[0]), g.tanh(v[1]));
                let b = g.log(g.add_scalar(g.square(v[1]), 1.0));
                let c = g.sqrt(g.add_scalar(g.abs(v[0]), 0.5));
                let d = g.log_sigmoid(g.sub(v[0], v[1]));
                g.sum(g.add(g.add(a, b), g.add(c, g.leaky_relu(d, 0.2))))
            },
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn matmul_softmax_and_rows_pass() {
        let a = Tensor::from_fn(&[3, 4], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6);
        let b = Tensor::from_fn(&[5, 4], |i| ((i * 3) % 7) as f64 * 0.2 - 0.5);
        let c = Tensor::from_fn(&[4, 2], |i| (i as f64).cos());
        let r = check_inputs(
            &[a, b, c],
            |g, v| {
                let ab = g.matmul(v[0], v[1], true);
                let p = g.softmax_rows(ab);
                let ac = g.matmul(v[0], v[2], false);
                let s = g.sum_rows(g.square(ac));
                g.add(g.sum(g.square(p)), g.sum(s))
            },
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn spatial_ops_pass() {
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| {
            ((i * 31) % 17) as f64 / 17.0 - 0.4 + i as f64 * 1e-3
        });
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 11) % 13) as f64 / 13.0 - 0.5);
        let w2 = Tensor::from_fn(&[2, 4, 4, 4], |i| ((i * 5) % 9) as f64 / 9.0 - 0.5);
        let bias = Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.0]);
        let r = check_inputs(
            &[x, w, w2, bias],
            |g, v| {
                let h = g.conv2d(v[0], v[1], 1, Padding::Reflect(1));
                let h = g.add_bias(h, v[3]);
                let h = g.leaky_relu(h, 0.2);
                let p = g.max_pool2(h);
                let u = g.upsample2(p);
                let h = g.add(h, u);
                let h = g.avg_pool(h, 2);
                let o = g.conv2d(h, v[2], 2, Padding::Zero(1));
                let o = g.reshape(o, &[2, 8]);
                g.sum(g.square(o))
            },
            GradCheckOptions {
                coords_per_tensor: 40,
                ..Default::default()
            },
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn module_check_sees_all_params() {
        struct Lin {
            w: Param,
            b: Param,
        }
        impl Module for Lin {
            fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
                f("w", &self.w);
                f("b", &self.b);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
                f("w", &mut self.w);
                f("b", &mut self.b);
            }
        }
        let mut m = Lin {
            w: Param::new(Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1)),
            b: Param::new(Tensor::new(&[3], vec![0.1, 0.2, -0.3])),
        };
        let x = Tensor::new(&[4, 2], vec![1.0, -1.0, 0.5, 0.2, -0.3, 0.8, 0.0, 1.5]);
        let r = check_module(
            &mut m,
            |m, g| {
                let xv = g.input(x.clone());
                let y = g.add_bias(g.matmul(xv, g.param(&m.w), true), g.param(&m.b));
                g.sum(g.tanh(y))
            },
            GradCheckOptions::default(),
        );
        assert!(r.max_rel_err < 1e-7, "{r:?}");
        assert_eq!(m.w.value().data()[1], 0.1);
    }
}
