//! Differentiable landmark detector: a single-stack hourglass producing one
//! score map per landmark, followed by a soft-argmax (DSNT) readout.

use facemark_tensor::{leaky_relu_gain, scoped, Graph, Module, Padding, Param, Tensor, Var};
use rand::Rng;

use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, LandmarkVector};
use crate::image::ImageTensor;
use crate::nn::{Conv, LEAKY_SLOPE};

/// Pixel-center coordinates of an `h×w` map: `gx = (x + 0.5)/w`, `gy = (y + 0.5)/h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoordinateGrid {
    pub height: usize,
    pub width: usize,
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn gx(&self, _y: usize, x: usize) -> f64 {
        (x as f64 + 0.5) / self.width as f64
    }

    pub fn gy(&self, y: usize, _x: usize) -> f64 {
        (y as f64 + 0.5) / self.height as f64
    }

    /// `[H·W, 2]` matrix of `(gx, gy)` rows in raster order.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[h * w, 2], |i| {
            let cell = i / 2;
            if i % 2 == 0 {
                self.gx(cell / w, cell % w)
            } else {
                self.gy(cell / w, cell % w)
            }
        })
    }
}

/// Per-landmark spatial probability maps (each channel sums to one).
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    maps: Tensor,
}

impl HeatmapStack {
    /// Spatial softmax of raw `[L, H, W]` scores.
    pub fn from_scores(raw: &Tensor, temperature: f64) -> Result<Self> {
        check_scores(raw)?;
        let (l, h, w) = dims3(raw)?;
        let g = Graph::new();
        let x = g.input(raw.clone().reshape(&[l, h * w]));
        let p = g.softmax_rows(g.scale(x, 1.0 / temperature));
        Ok(Self {
            maps: (*g.value(p)).clone().reshape(&[l, h, w]),
        })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn channel(&self, l: usize) -> &[f64] {
        let s = self.maps.shape();
        let hw = s[1] * s[2];
        &self.maps.data()[l * hw..(l + 1) * hw]
    }
}

fn dims3(raw: &Tensor) -> Result<(usize, usize, usize)> {
    match raw.shape() {
        [l, h, w] => Ok((*l, *h, *w)),
        [1, l, h, w] => Ok((*l, *h, *w)),
        s => Err(Error::Shape(format!(
            "expected [L, H, W] score maps, got {s:?}"
        ))),
    }
}

fn check_scores(raw: &Tensor) -> Result<()> {
    if raw.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "detector score map".into(),
        })
    }
}

/// Soft-argmax on a batch of raw score maps `[N, L, H, W]` → `[N, 2L]`
/// interleaved `(x, y)` per landmark.
pub fn dsnt_var(g: &Graph, raw: Var, temperature: f64) -> Var {
    let s = g.shape(raw);
    let (n, l, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = g.reshape(raw, &[n * l, h * w]);
    let flat = if temperature == 1.0 {
        flat
    } else {
        g.scale(flat, 1.0 / temperature)
    };
    let p = g.softmax_rows(flat);
    let grid = g.input(CoordinateGrid::new(h, w).to_tensor());
    let xy = g.matmul(p, grid, false);
    g.reshape(xy, &[n, 2 * l])
}

/// Soft-argmax of one image's `[L, H, W]` scores.
pub fn dsnt(raw: &Tensor, temperature: f64) -> Result<LandmarkSet> {
    check_scores(raw)?;
    let (l, h, w) = dims3(raw)?;
    let g = Graph::new();
    let x = g.input(raw.clone().reshape(&[1, l, h, w]));
    let out = dsnt_var(&g, x, temperature);
    LandmarkVector::new(g.value(out).data().to_vec()).to_set()
}

/// Anything that maps a batch of images at `input_size()` to `[N, 2L]`
/// landmarks differentiably.
pub trait LandmarkDetector {
    fn input_size(&self) -> usize;
    fn detect_var(&self, g: &Graph, img: Var) -> Result<Var>;
}

/// Bottleneck residual block `x + conv1×1(conv3×3(conv1×1(x)))`.
#[derive(Clone, Debug)]
pub struct Residual {
    pub convs: [Conv; 3],
}

impl Residual {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        let mid = channels / 2;
        Self {
            convs: [
                Conv::new(channels, mid, 1, 1, Padding::Zero(0), gain, rng),
                Conv::new(mid, mid, 3, 1, Padding::Zero(1), gain, rng),
                Conv::new(mid, channels, 1, 1, Padding::Zero(0), 0.5, rng),
            ],
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let mut h = g.leaky_relu(self.convs[0].forward(g, x), LEAKY_SLOPE);
        h = g.leaky_relu(self.convs[1].forward(g, h), LEAKY_SLOPE);
        h = self.convs[2].forward(g, h);
        g.add(x, h)
    }
}

impl Module for Residual {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&mut |n, p| f(&scoped(&format!("convs.{i}"), n), p));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&mut |n, p| f(&scoped(&format!("convs.{i}"), n), p));
        }
    }
}

/// One hourglass level: a skip branch at this resolution plus a pooled
/// branch that recurses (or bottoms out) and is upsampled back.
#[derive(Clone, Debug)]
pub struct Hourglass {
    pub skip: Residual,
    pub down: Residual,
    pub inner: Box<HourglassInner>,
    pub up: Residual,
}

#[derive(Clone, Debug)]
pub enum HourglassInner {
    Level(Hourglass),
    Bottom(Residual),
}

impl Hourglass {
    pub fn new<R: Rng + ?Sized>(levels: usize, channels: usize, rng: &mut R) -> Self {
        assert!(levels >= 1);
        let skip = Residual::new(channels, rng);
        let down = Residual::new(channels, rng);
        let inner = if levels > 1 {
            HourglassInner::Level(Hourglass::new(levels - 1, channels, rng))
        } else {
            HourglassInner::Bottom(Residual::new(channels, rng))
        };
        let up = Residual::new(channels, rng);
        Self {
            skip,
            down,
            inner: Box::new(inner),
            up,
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let skip = self.skip.forward(g, x);
        let low = self.down.forward(g, g.max_pool2(x));
        let low = match &*self.inner {
            HourglassInner::Level(h) => h.forward(g, low),
            HourglassInner::Bottom(r) => r.forward(g, low),
        };
        let low = self.up.forward(g, low);
        g.add(skip, g.upsample2(low))
    }
}

impl Module for Hourglass {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.skip.visit(&mut |n, p| f(&scoped("skip", n), p));
        self.down.visit(&mut |n, p| f(&scoped("down", n), p));
        match &*self.inner {
            HourglassInner::Level(h) => h.visit(&mut |n, p| f(&scoped("inner", n), p)),
            HourglassInner::Bottom(r) => r.visit(&mut |n, p| f(&scoped("bottom", n), p)),
        }
        self.up.visit(&mut |n, p| f(&scoped("up", n), p));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.skip.visit_mut(&mut |n, p| f(&scoped("skip", n), p));
        self.down.visit_mut(&mut |n, p| f(&scoped("down", n), p));
        match &mut *self.inner {
            HourglassInner::Level(h) => h.visit_mut(&mut |n, p| f(&scoped("inner", n), p)),
            HourglassInner::Bottom(r) => r.visit_mut(&mut |n, p| f(&scoped("bottom", n), p)),
        }
        self.up.visit_mut(&mut |n, p| f(&scoped("up", n), p));
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub stem: [Conv; 2],
    pub hourglass: Hourglass,
    pub head_res: Residual,
    pub head: [Conv; 2],
    pub config: DetectorConfig,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(landmarks: usize, cfg: &DetectorConfig, rng: &mut R) -> Self {
        let gain = leaky_relu_gain(LEAKY_SLOPE);
        let c = cfg.channels;
        Self {
            stem: [
                Conv::new(3, c / 2, 3, 2, Padding::Zero(1), gain, rng),
                Conv::new(c / 2, c, 3, 2, Padding::Zero(1), gain, rng),
            ],
            hourglass: Hourglass::new(cfg.levels, c, rng),
            head_res: Residual::new(c, rng),
            head: [
                Conv::new(c, c, 1, 1, Padding::Zero(0), gain, rng),
                Conv::new(c, landmarks, 1, 1, Padding::Zero(0), 1.0, rng),
            ],
            config: cfg.clone(),
        }
    }

    pub fn landmarks(&self) -> usize {
        self.head[1].out_channels()
    }

    /// Raw scores `[N, L, S/4, S/4]` for images `[N, 3, S, S]` at the input size.
    pub fn heatmaps_var(&self, g: &Graph, img: Var) -> Result<Var> {
        let s = g.shape(img);
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Shape(format!(
                "detector expects [N, 3, {size}, {size}], got {s:?}"
            )));
        }
        let mut h = g.leaky_relu(self.stem[0].forward(g, img), LEAKY_SLOPE);
        h = g.leaky_relu(self.stem[1].forward(g, h), LEAKY_SLOPE);
        h = self.hourglass.forward(g, h);
        h = self.head_res.forward(g, h);
        h = g.leaky_relu(self.head[0].forward(g, h), LEAKY_SLOPE);
        Ok(self.head[1].forward(g, h))
    }

    pub fn heatmaps(&self, img: &ImageTensor) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.input(img.to_batch());
        let raw = self.heatmaps_var(&g, x)?;
        let t = (*g.value(raw)).clone();
        let s = t.shape()[1..].to_vec();
        Ok(t.reshape(&s))
    }

    pub fn dsnt(&self, raw: &Tensor) -> Result<LandmarkSet> {
        dsnt(raw, self.config.temperature)
    }

    /// `dsnt(heatmaps(img))`; images larger than the input size by an integer
    /// factor are box-downsampled first.
    pub fn detect(&self, img: &ImageTensor) -> Result<LandmarkSet> {
        let img = self.fit(img)?;
        self.dsnt(&self.heatmaps(&img)?)
    }

    fn fit(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let size = self.config.input_size;
        if img.height() != img.width() || img.height() % size != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image cannot be resized to the detector input {size}",
                img.height(),
                img.width()
            )));
        }
        img.downsample(img.height() / size)
    }

    /// Coordinate loss (mean per-point Euclidean distance) plus the weighted
    /// Jensen-Shannon divergence between each heatmap and a Gaussian at the
    /// target. `target` is `[N, 2L]`.
    pub fn supervised_loss(&self, g: &Graph, img: Var, target: &Tensor) -> Result<(Var, f64, f64)> {
        let raw = self.heatmaps_var(g, img)?;
        let s = g.shape(raw);
        let (n, l, h, w) = (s[0], s[1], s[2], s[3]);
        if target.shape() != [n, 2 * l] {
            return Err(Error::Shape(format!(
                "target {:?} does not match [{n}, {}]",
                target.shape(),
                2 * l
            )));
        }
        let pred = dsnt_var(g, raw, self.config.temperature);
        let coord = mean_point_distance_var(g, pred, g.input(target.clone()));

        let flat = g.reshape(raw, &[n * l, h * w]);
        let p = g.softmax_rows(g.scale(flat, 1.0 / self.config.temperature));
        let q = gaussian_targets(target, h, w, self.config.heatmap_sigma);
        let js = g.mean(js_divergence_rows(g, p, g.input(q)));

        let total = g.add(coord, g.scale(js, self.config.regularizer_weight));
        Ok((total, g.value(coord).item(), g.value(js).item()))
    }
}

impl LandmarkDetector for Detector {
    fn input_size(&self) -> usize {
        self.config.input_size
    }
    fn detect_var(&self, g: &Graph, img: Var) -> Result<Var> {
        let raw = self.heatmaps_var(g, img)?;
        Ok(dsnt_var(g, raw, self.config.temperature))
    }
}

impl Module for Detector {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.stem.iter().enumerate() {
            c.visit(&mut |n, p| f(&scoped(&format!("stem.{i}"), n), p));
        }
        self.hourglass
            .visit(&mut |n, p| f(&scoped("hourglass", n), p));
        self.head_res
            .visit(&mut |n, p| f(&scoped("head_res", n), p));
        for (i, c) in self.head.iter().enumerate() {
            c.visit(&mut |n, p| f(&scoped(&format!("head.{i}"), n), p));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.stem.iter_mut().enumerate() {
            c.visit_mut(&mut |n, p| f(&scoped(&format!("stem.{i}"), n), p));
        }
        self.hourglass
            .visit_mut(&mut |n, p| f(&scoped("hourglass", n), p));
        self.head_res
            .visit_mut(&mut |n, p| f(&scoped("head_res", n), p));
        for (i, c) in self.head.iter_mut().enumerate() {
            c.visit_mut(&mut |n, p| f(&scoped(&format!("head.{i}"), n), p));
        }
    }
}

/// Mean over batch and points of the per-point Euclidean distance between
/// two `[N, 2L]` landmark batches.
pub fn mean_point_distance_var(g: &Graph, a: Var, b: Var) -> Var {
    let s = g.shape(a);
    let d = g.sub(a, b);
    let sq = g.reshape(g.square(d), &[s[0] * s[1] / 2, 2]);
    g.mean(g.sqrt(g.sum_rows(sq)))
}

const JS_EPS: f64 = 1e-12;

/// Row-wise Jensen-Shannon divergence of two `[R, K]` distributions → `[R]`.
fn js_divergence_rows(g: &Graph, p: Var, q: Var) -> Var {
    let m = g.scale(g.add(p, q), 0.5);
    let log_m = g.log(g.add_scalar(m, JS_EPS));
    let kl = |a: Var| {
        let log_a = g.log(g.add_scalar(a, JS_EPS));
        g.sum_rows(g.mul(a, g.sub(log_a, log_m)))
    };
    g.scale(g.add(kl(p), kl(q)), 0.5)
}

/// Normalized Gaussians `[N·L, H·W]` centered on each target point, with
/// `sigma` in heatmap cells.
pub fn gaussian_targets(target: &Tensor, h: usize, w: usize, sigma: f64) -> Tensor {
    let points = target.numel() / 2;
    let mut out = Vec::with_capacity(points * h * w);
    for pt in target.data().chunks(2) {
        let cx = pt[0] * w as f64 - 0.5;
        let cy = pt[1] * h as f64 - 0.5;
        let start = out.len();
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                out.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
        let z: f64 = out[start..].iter().sum();
        if z > 0.0 {
            out[start..].iter_mut().for_each(|v| *v /= z);
        } else {
            out[start..]
                .iter_mut()
                .for_each(|v| *v = 1.0 / (h * w) as f64);
        }
    }
    Tensor::new(&[points, h * w], out)
}
