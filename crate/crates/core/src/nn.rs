//! Layer building blocks shared by the networks.

use facemark_tensor::{leaky_relu_gain, scoped, Graph, Module, Padding, Param, Var};
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Fully connected layer, weight stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::kaiming(&[output, input], input, gain, rng),
            bias: Param::zeros(&[output]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    /// `x: [N, in]` → `[N, out]`.
    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let y = g.matmul(x, g.param(&self.weight), true);
        g.add_bias(y, g.param(&self.bias))
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        Self {
            weight: Param::kaiming(&[output, input, kernel, kernel], fan_in, gain, rng),
            bias: Param::zeros(&[output]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let y = g.conv2d(x, g.param(&self.weight), self.stride, self.padding);
        g.add_bias(y, g.param(&self.bias))
    }
}

impl Module for Conv {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

/// Stack of fully connected layers with leaky-ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: OutputActivation,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first: `[in, h1, …, out]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output: OutputActivation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let hidden_gain = leaky_relu_gain(LEAKY_SLOPE);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i == last { 1.0 } else { hidden_gain };
                Linear::new(w[0], w[1], gain, rng)
            })
            .collect();
        Self { layers, output }
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().unwrap().out_features()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_features()];
        w.extend(self.layers.iter().map(|l| l.out_features()));
        w
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        match self.output {
            OutputActivation::Identity => h,
            OutputActivation::Sigmoid => g.sigmoid(h),
        }
    }
}

impl Module for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&mut |n, p| f(&scoped(&format!("layers.{i}"), n), p));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&mut |n, p| f(&scoped(&format!("layers.{i}"), n), p));
        }
    }
}
