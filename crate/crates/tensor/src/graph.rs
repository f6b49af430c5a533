//! Define-by-run computation tape with reverse-mode differentiation.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::conv::{self, Padding};
use crate::param::{Module, Param};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation implemented outside this crate.
///
/// `backward` receives the forward inputs, the forward output and the
/// incoming gradient, and returns one gradient per input (`None` to skip).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Log,
    Sqrt,
    Abs,
    Square,
    LogSigmoid,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Unary(Var, Unary),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: Padding,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    AvgPool {
        x: Var,
        k: usize,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    SumRows(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass. Build one per step and drop it afterwards.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<u64, Var>>,
    frozen: RefCell<HashSet<u64>>,
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `module` enter this graph as constants.
    pub fn freeze(&self, module: &dyn Module) {
        let mut frozen = self.frozen.borrow_mut();
        module.visit(&mut |_, p| {
            frozen.insert(p.id());
        });
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A constant input (no gradient).
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated binds of the same parameter share a node.
    pub fn param(&self, p: &Param) -> Var {
        if let Some(&v) = self.params.borrow().get(&p.id()) {
            return v;
        }
        let trainable = !self.frozen.borrow().contains(&p.id());
        let v = self.push_shared(p.shared(), Op::Leaf, trainable);
        self.params.borrow_mut().insert(p.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.zip_map(&nodes[b.0].value, f)
        };
        let rg = self.needs(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        let rg = self.needs(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Adds `bias: [C]` along axis 1 of `x: [N, C, ...]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = xv.shape()[1];
        assert_eq!(
            bv.shape(),
            &[c],
            "bias shape {:?} vs {c} channels",
            bv.shape()
        );
        let inner: usize = xv.shape()[2..].iter().product();
        let mut out = (*xv).clone();
        for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = bv.data()[chunk_idx % c];
            for v in chunk {
                *v += b;
            }
        }
        let rg = self.needs(&[x, bias]);
        self.push(out, Op::AddBias { x, bias }, rg)
    }

    /// `a · b` for `a: [M,K]`, `b: [K,N]`; with `transpose_b`, `b: [N,K]`.
    pub fn matmul(&self, a: Var, b: Var, transpose_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = av.dims2();
        let (n, bk, b_rs, b_cs) = if transpose_b {
            let (n, bk) = bv.dims2();
            (n, bk, 1, bk as isize)
        } else {
            let (bk, n) = bv.dims2();
            (n, bk, n as isize, 1)
        };
        assert_eq!(k, bk, "matmul inner dims {k} vs {bk}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            k as isize,
            1,
            bv.data(),
            b_rs,
            b_cs,
            0.0,
            &mut out,
        );
        let rg = self.needs(&[a, b]);
        self.push(
            Tensor::new(&[m, n], out),
            Op::MatMul { a, b, transpose_b },
            rg,
        )
    }

    fn unary(&self, x: Var, kind: Unary) -> Var {
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::LeakyRelu(_) => |v, s| if v > 0.0 { v } else { v * s },
            Unary::Sigmoid => |v, _| stable_sigmoid(v),
            Unary::Tanh => |v, _| v.tanh(),
            Unary::Log => |v, _| v.ln(),
            Unary::Sqrt => |v, _| v.sqrt(),
            Unary::Abs => |v, _| v.abs(),
            Unary::Square => |v, _| v * v,
            Unary::LogSigmoid => |v, _| log_sigmoid(v),
        };
        let slope = match kind {
            Unary::LeakyRelu(s) => s,
            _ => 0.0,
        };
        let out = self.value(x).map(|v| f(v, slope));
        let rg = self.needs(&[x]);
        self.push(out, Op::Unary(x, kind), rg)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::LeakyRelu(0.0))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&self, x: Var) -> Var {
        self.unary(x, Unary::LogSigmoid)
    }

    pub fn conv2d(&self, x: Var, w: Var, stride: usize, padding: Padding) -> Var {
        let out = conv::conv2d(&self.value(x), &self.value(w), stride, padding);
        let rg = self.needs(&[x, w]);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            rg,
        )
    }

    pub fn max_pool2(&self, x: Var) -> Var {
        let (out, argmax) = conv::max_pool2(&self.value(x));
        let rg = self.needs(&[x]);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn upsample2(&self, x: Var) -> Var {
        let out = conv::upsample2(&self.value(x));
        let rg = self.needs(&[x]);
        self.push(out, Op::Upsample2(x), rg)
    }

    pub fn avg_pool(&self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let out = conv::avg_pool(&self.value(x), k);
        let rg = self.needs(&[x]);
        self.push(out, Op::AvgPool { x, k }, rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = (*self.value(x)).clone().reshape(shape);
        let rg = self.needs(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let xv = self.value(x);
        let k = *xv.shape().last().expect("softmax of a scalar");
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.needs(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Sum over the last axis.
    pub fn sum_rows(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let k = *shape.last().expect("sum_rows of a scalar");
        let data: Vec<f64> = xv.data().chunks(k).map(|r| r.iter().sum()).collect();
        let out = Tensor::new(&shape[..shape.len() - 1], data);
        let rg = self.needs(&[x]);
        self.push(out, Op::SumRows(x), rg)
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.needs(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Records an externally computed forward result with its backward rule.
    pub fn custom(&self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss, got {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        }

        let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(g) => g.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if rg(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|v| v * k)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::AddBias { x, bias } => {
                    if rg(*bias) {
                        let c = val(*bias).numel();
                        let inner: usize = g.shape()[2..].iter().product();
                        let mut gb = vec![0.0; c];
                        for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                            gb[chunk_idx % c] += chunk.iter().sum::<f64>();
                        }
                        acc(&mut grads, *bias, Tensor::new(&[c], gb));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MatMul { a, b, transpose_b } => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (m, k) = av.dims2();
                    let n = g.shape()[1];
                    if rg(*a) {
                        let mut ga = vec![0.0; m * k];
                        if *transpose_b {
                            gemm(
                                m,
                                n,
                                k,
                                g.data(),
                                n as isize,
                                1,
                                bv.data(),
                                k as isize,
                                1,
                                0.0,
                                &mut ga,
                            );
                        } else {
                            gemm(
                                m,
                                n,
                                k,
                                g.data(),
                                n as isize,
                                1,
                                bv.data(),
                                1,
                                n as isize,
                                0.0,
                                &mut ga,
                            );
                        }
                        acc(&mut grads, *a, Tensor::new(&[m, k], ga));
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; k * n];
                        if *transpose_b {
                            gemm(
                                n,
                                m,
                                k,
                                g.data(),
                                1,
                                n as isize,
                                av.data(),
                                k as isize,
                                1,
                                0.0,
                                &mut gb,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                av.data(),
                                1,
                                k as isize,
                                g.data(),
                                n as isize,
                                1,
                                0.0,
                                &mut gb,
                            );
                        }
                        acc(&mut grads, *b, Tensor::new(bv.shape(), gb));
                    }
                }
                Op::Unary(x, kind) => {
                    let xv = val(*x);
                    let yv = &node.value;
                    let mut gx = g;
                    match *kind {
                        Unary::LeakyRelu(s) => {
                            for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                                if v <= 0.0 {
                                    *d *= s;
                                }
                            }
                        }
                        Unary::Sigmoid => {
                            for (d, &y) in gx.data_mut().iter_mut().zip(yv.data()) {
                                *d *= y * (1.0 - y);
                            }
                        }
                        Unary::Tanh => {
                            for (d, &y) in gx.data_mut().iter_mut().zip(yv.data()) {
                                *d *= 1.0 - y * y;
                            }
                        }
                        Unary::Log => {
                            for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                                *d /= v;
                            }
                        }
                        Unary::Sqrt => {
                            for (d, &y) in gx.data_mut().iter_mut().zip(yv.data()) {
                                *d = if y > 0.0 { *d / (2.0 * y) } else { 0.0 };
                            }
                        }
                        Unary::Abs => {
                            for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                                *d *= if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                            }
                        }
                        Unary::Square => {
                            for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                                *d *= 2.0 * v;
                            }
                        }
                        Unary::LogSigmoid => {
                            for (d, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                                *d *= stable_sigmoid(-v);
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (gx, gw) = conv::conv2d_backward(
                        val(*x),
                        val(*w),
                        &g,
                        *stride,
                        *padding,
                        rg(*x),
                        rg(*w),
                    );
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(&mut grads, *w, gw);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = Tensor::zeros(val(*x).shape());
                    let d = gx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src] += gv;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Upsample2(x) => acc(&mut grads, *x, conv::upsample2_backward(&g)),
                Op::AvgPool { x, k } => acc(&mut grads, *x, conv::avg_pool_backward(&g, *k)),
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&shape));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let k = *y.shape().last().unwrap();
                    let mut gx = g;
                    for (gr, yr) in gx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, &yy) in gr.iter_mut().zip(yr) {
                            *d = yy * (*d - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::SumRows(x) => {
                    let xv = val(*x);
                    let k = *xv.shape().last().unwrap();
                    let mut gx = Tensor::zeros(xv.shape());
                    for (row, &gv) in gx.data_mut().chunks_mut(k).zip(g.data()) {
                        row.fill(gv);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(val(*x).shape(), g.item());
                    acc(&mut grads, *x, gx);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                    let outs = op.backward(&ins, &node.value, &g);
                    assert_eq!(
                        outs.len(),
                        inputs.len(),
                        "{} returned wrong arity",
                        op.name()
                    );
                    for (v, gi) in inputs.iter().zip(outs) {
                        if let Some(gi) = gi {
                            assert_eq!(gi.shape(), val(*v).shape(), "{} gradient shape", op.name());
                            acc(&mut grads, *v, gi);
                        }
                    }
                }
            }
        }

        Gradients {
            grads,
            params: self.params.borrow().clone(),
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<u64, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|v| self.get(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_param_binds_once_and_accumulates() {
        let g = Graph::new();
        let p = Param::new(Tensor::new(&[2], vec![1.0, 2.0]));
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        let s = g.sum(g.mul(a, b));
        let grads = g.backward(s);
        assert_eq!(grads.param(&p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        struct One(Param);
        impl Module for One {
            fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
                f("w", &self.0)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
                f("w", &mut self.0)
            }
        }
        let m = One(Param::new(Tensor::new(&[1], vec![3.0])));
        let g = Graph::new();
        g.freeze(&m);
        let x = g.variable(Tensor::new(&[1], vec![2.0]));
        let y = g.sum(g.mul(g.param(&m.0), x));
        let grads = g.backward(y);
        assert!(grads.param(&m.0).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }
}
