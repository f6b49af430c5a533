//! Landmark-to-face generator: two FC layers, a stack of ×2 pixel-shuffle
//! upscale blocks and a final RGB convolution with tanh.

use facemark_tensor::{
    leaky_relu_gain, scoped, CustomOp, Graph, Module, Padding, Param, Tensor, Var,
};
use rand::Rng;

use crate::config::{GeneratorConfig, Normalization};
use crate::error::{expect_len, Error, Result};
use crate::geometry::LandmarkVector;
use crate::image::ImageTensor;
use crate::nn::{Conv, Linear, LEAKY_SLOPE};

fn check_shuffle_channels(c: usize, r: usize) -> Result<()> {
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "{c} channels not divisible by r²={}",
            r * r
        )));
    }
    Ok(())
}

/// `[N, C·r², H, W]` → `[N, C, rH, rW]`, with
/// `out[c, y, x] = in[c·r² + (y % r)·r + (x % r), y / r, x / r]`.
pub fn pixel_shuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    let (n, cin, h, w) = t.dims4();
    check_shuffle_channels(cin, r)?;
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    let mut o = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let ic = ch * r * r + (y % r) * r + x % r;
                    out[o] = src[((b * cin + ic) * h + y / r) * w + x / r];
                    o += 1;
                }
            }
        }
    }
    Ok(Tensor::new(&[n, c, oh, ow], out))
}

/// Inverse of [`pixel_shuffle`]: `[N, C, rH, rW]` → `[N, C·r², H, W]`.
pub fn space_to_depth(t: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = t.dims4();
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::Shape(format!("{oh}x{ow} not divisible by {r}")));
    }
    let (h, w) = (oh / r, ow / r);
    let cout = c * r * r;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let oc = ch * r * r + (y % r) * r + x % r;
                    out[((b * cout + oc) * h + y / r) * w + x / r] = src[i];
                    i += 1;
                }
            }
        }
    }
    Ok(Tensor::new(&[n, cout, h, w], out))
}

struct PixelShuffleOp(usize);

impl CustomOp for PixelShuffleOp {
    fn name(&self) -> &'static str {
        "pixel_shuffle"
    }
    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(
            space_to_depth(grad, self.0).expect("gradient has output shape"),
        )]
    }
}

pub fn pixel_shuffle_var(g: &Graph, x: Var, r: usize) -> Result<Var> {
    let out = pixel_shuffle(&g.value(x), r)?;
    Ok(g.custom(&[x], out, Box::new(PixelShuffleOp(r))))
}

const INSTANCE_EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization without affine parameters.
struct InstanceNormOp {
    inv_std: Vec<f64>,
}

impl CustomOp for InstanceNormOp {
    fn name(&self) -> &'static str {
        "instance_norm"
    }
    fn backward(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = output.dims4();
        let hw = h * w;
        let mut dx = vec![0.0; output.numel()];
        for plane in 0..n * c {
            let ys = &output.data()[plane * hw..(plane + 1) * hw];
            let gs = &grad.data()[plane * hw..(plane + 1) * hw];
            let mg = gs.iter().sum::<f64>() / hw as f64;
            let mgy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / hw as f64;
            for i in 0..hw {
                dx[plane * hw + i] = self.inv_std[plane] * (gs[i] - mg - ys[i] * mgy);
            }
        }
        vec![Some(Tensor::new(output.shape(), dx))]
    }
}

pub fn instance_norm_var(g: &Graph, x: Var) -> Var {
    let xv = g.value(x);
    let (n, c, h, w) = xv.dims4();
    let hw = h * w;
    let mut out = vec![0.0; xv.numel()];
    let mut inv_std = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let xs = &xv.data()[plane * hw..(plane + 1) * hw];
        let mean = xs.iter().sum::<f64>() / hw as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hw as f64;
        let k = 1.0 / (var + INSTANCE_EPS).sqrt();
        for i in 0..hw {
            out[plane * hw + i] = (xs[i] - mean) * k;
        }
        inv_std.push(k);
    }
    g.custom(
        &[x],
        Tensor::new(xv.shape(), out),
        Box::new(InstanceNormOp { inv_std }),
    )
}

/// 3×3 reflect-padded conv to `4·out` channels, pixel shuffle ×2, leaky ReLU.
#[derive(Clone, Debug)]
pub struct UpscaleBlock {
    pub conv: Conv,
    pub normalization: Normalization,
}

impl UpscaleBlock {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        normalization: Normalization,
        rng: &mut R,
    ) -> Self {
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        Self {
            conv: Conv::new(input, 4 * output, 3, 1, Padding::Reflect(1), gain, rng),
            normalization,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels() / 4
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.conv.in_channels() {
            return Err(Error::Shape(format!(
                "upscale block expects {} input channels, got shape {s:?}",
                self.conv.in_channels()
            )));
        }
        let y = self.conv.forward(g, x);
        let mut y = pixel_shuffle_var(g, y, 2)?;
        if self.normalization == Normalization::Instance {
            y = instance_norm_var(g, y);
        }
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

impl Module for UpscaleBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&mut |n, p| f(&scoped("conv", n), p));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&mut |n, p| f(&scoped("conv", n), p));
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub fc: [Linear; 2],
    pub upscales: Vec<UpscaleBlock>,
    pub to_rgb: Conv,
    base_size: usize,
    base_channels: usize,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(landmark_dim: usize, cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        let base = cfg.base_channels * cfg.base_size * cfg.base_size;
        let fc = [
            Linear::new(landmark_dim, cfg.fc_hidden, gain, rng),
            Linear::new(cfg.fc_hidden, base, gain, rng),
        ];
        let mut upscales = Vec::new();
        let mut c = cfg.base_channels;
        for &out in &cfg.upscale_channels {
            upscales.push(UpscaleBlock::new(c, out, cfg.normalization, rng));
            c = out;
        }
        let to_rgb = Conv::new(c, 3, 3, 1, Padding::Reflect(1), 1.0, rng);
        Self {
            fc,
            upscales,
            to_rgb,
            base_size: cfg.base_size,
            base_channels: cfg.base_channels,
        }
    }

    pub fn landmark_dim(&self) -> usize {
        self.fc[0].in_features()
    }

    pub fn output_size(&self) -> usize {
        self.base_size << self.upscales.len()
    }

    /// `lms: [N, 2L]` → `[N, 3, S, S]` in `[-1, 1]`.
    pub fn forward(&self, g: &Graph, lms: Var) -> Result<Var> {
        let s = g.shape(lms);
        if s.len() != 2 {
            return Err(Error::Shape(format!(
                "generator input must be [N, 2L], got {s:?}"
            )));
        }
        expect_len("landmark vector entries", self.landmark_dim(), s[1])?;
        let mut h = g.leaky_relu(self.fc[0].forward(g, lms), LEAKY_SLOPE);
        h = g.leaky_relu(self.fc[1].forward(g, h), LEAKY_SLOPE);
        h = g.reshape(
            h,
            &[s[0], self.base_channels, self.base_size, self.base_size],
        );
        for block in &self.upscales {
            h = block.forward(g, h)?;
        }
        Ok(g.tanh(self.to_rgb.forward(g, h)))
    }

    pub fn synthesize(&self, lms: &LandmarkVector) -> Result<ImageTensor> {
        expect_len("landmark vector entries", self.landmark_dim(), lms.len())?;
        let g = Graph::new();
        let x = g.input(Tensor::new(&[1, lms.len()], lms.values().to_vec()));
        let y = self.forward(&g, x)?;
        let img = (*g.value(y)).clone();
        ImageTensor::new(img)
    }
}

impl Module for Generator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, l) in self.fc.iter().enumerate() {
            l.visit(&mut |n, p| f(&scoped(&format!("fc.{i}"), n), p));
        }
        for (i, b) in self.upscales.iter().enumerate() {
            b.visit(&mut |n, p| f(&scoped(&format!("upscales.{i}"), n), p));
        }
        self.to_rgb.visit(&mut |n, p| f(&scoped("to_rgb", n), p));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, l) in self.fc.iter_mut().enumerate() {
            l.visit_mut(&mut |n, p| f(&scoped(&format!("fc.{i}"), n), p));
        }
        for (i, b) in self.upscales.iter_mut().enumerate() {
            b.visit_mut(&mut |n, p| f(&scoped(&format!("upscales.{i}"), n), p));
        }
        self.to_rgb
            .visit_mut(&mut |n, p| f(&scoped("to_rgb", n), p));
    }
}
