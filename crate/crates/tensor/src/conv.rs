//! Spatial kernels: im2col convolution, pooling and nearest upsampling.

use crate::tensor::{gemm, Tensor};

/// Border handling for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    Reflect(usize),
}

impl Padding {
    pub fn amount(self) -> usize {
        match self {
            Padding::Zero(p) | Padding::Reflect(p) => p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let p = padding.amount();
        assert!(stride > 0, "conv stride must be positive");
        assert!(
            height + 2 * p >= kernel && width + 2 * p >= kernel,
            "kernel {kernel} larger than padded input {height}x{width}"
        );
        if let Padding::Reflect(p) = padding {
            assert!(
                p < height && p < width,
                "reflect padding {p} too large for {height}x{width}"
            );
        }
        Self {
            in_channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * p - kernel) / stride + 1,
            out_width: (width + 2 * p - kernel) / stride + 1,
        }
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding.amount() == 0
    }

    /// Source index along an axis of extent `n`, or `None` for a zero pad.
    #[inline]
    fn source(&self, pos: isize, n: usize) -> Option<usize> {
        if pos >= 0 && (pos as usize) < n {
            return Some(pos as usize);
        }
        match self.padding {
            Padding::Zero(_) => None,
            Padding::Reflect(_) => {
                let last = n as isize - 1;
                let r = if pos < 0 { -pos } else { 2 * last - pos };
                Some(r as usize)
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding.amount() as isize);
    let ncol = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_height {
                    let sy = g.source(oy as isize * s + ky as isize - p, g.height);
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    match sy {
                        None => line.fill(0.0),
                        Some(sy) => {
                            let src = &plane[sy * g.width..(sy + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox as isize * s + kx as isize - p, g.width) {
                                    Some(sx) => src[sx],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (k, s, p) = (g.kernel, g.stride as isize, g.padding.amount() as isize);
    let ncol = g.col_cols();
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_height {
                    let Some(sy) = g.source(oy as isize * s + ky as isize - p, g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, v) in line.iter().enumerate() {
                        if let Some(sx) = g.source(ox as isize * s + kx as isize - p, g.width) {
                            plane[sy * g.width + sx] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x: [N,C,H,W]` with `w: [O,C,k,k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, kh, kw) = w.dims4();
    assert_eq!(c, wc, "conv2d: input has {c} channels, kernel expects {wc}");
    assert_eq!(kh, kw, "conv2d: only square kernels are supported");
    let g = ConvGeometry::new(c, h, wd, kh, stride, padding);
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; n * o * ncol];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * ncol]
    };
    for b in 0..n {
        let xb = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm(
            o,
            rows,
            ncol,
            w.data(),
            rows as isize,
            1,
            src,
            ncol as isize,
            1,
            0.0,
            &mut out[b * o * ncol..(b + 1) * o * ncol],
        );
    }
    Tensor::new(&[n, o, g.out_height, g.out_width], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: Padding,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let g = ConvGeometry::new(c, h, wd, k, stride, padding);
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let mut dx = need_input.then(|| vec![0.0; x.numel()]);
    let mut dw = need_kernel.then(|| vec![0.0; w.numel()]);
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let go = &grad_out.data()[b * o * ncol..(b + 1) * o * ncol];
        let xb = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
        if let Some(dw) = dw.as_mut() {
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            // dW[o, r] += Σ_j go[o, j] · cols[r, j]
            gemm(
                o,
                ncol,
                rows,
                go,
                ncol as isize,
                1,
                src,
                1,
                ncol as isize,
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * c * h * wd..(b + 1) * c * h * wd];
            if g.is_pointwise() {
                gemm(
                    rows,
                    o,
                    ncol,
                    w.data(),
                    1,
                    rows as isize,
                    go,
                    ncol as isize,
                    1,
                    1.0,
                    dxb,
                );
            } else {
                gemm(
                    rows,
                    o,
                    ncol,
                    w.data(),
                    1,
                    rows as isize,
                    go,
                    ncol as isize,
                    1,
                    0.0,
                    &mut cols,
                );
                col2im(&cols, &g, dxb);
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape(), d)),
        dw.map(|d| Tensor::new(w.shape(), d)),
    )
}

/// 2×2 max pooling with stride 2; returns the pooled map and flat argmax indices.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "max_pool2 needs even spatial dims, got {h}x{w}"
    );
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                idx.push(best);
            }
        }
    }
    (Tensor::new(&[n, c, ho, wo], out), idx)
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = vec![0.0; n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

/// Block-sum of a gradient from the ×2 grid back to the source grid.
pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    avg_pool(grad, 2).map(|v| v * 4.0)
}

/// Non-overlapping `k×k` average pooling.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(
        h % k == 0 && w % k == 0,
        "avg_pool: {h}x{w} not divisible by {k}"
    );
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![0.0; n * c * ho * wo];
    let inv = 1.0 / (k * k) as f64;
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / k) * wo + xx / k] += src[y * w + xx] * inv;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn avg_pool_backward(grad: &Tensor, k: usize) -> Tensor {
    let (n, c, ho, wo) = grad.dims4();
    let (h, w) = (ho * k, wo * k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / k) * wo + xx / k] * inv;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}
