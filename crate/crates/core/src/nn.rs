//! Minimal layers with hand-written backward passes.
//!
//! Layers keep their gradients next to their values. A forward pass borrows
//! the layer immutably; the matching backward pass takes the forward input
//! again and accumulates into `Param::grad`, so a layer applied several times
//! in one step (the shared backbone) sums the contributions of every use.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, Tensor3};
use crate::{Error, Result};

/// A named-by-position trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("finite std");
            for v in &mut p.value {
                *v = dist.sample(rng);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything owning trainable parameters. Names are dotted paths.
pub trait Module {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// 2-D convolution (cross-correlation) with square kernel, stride and zero
/// padding. Weight layout: `out × in × k × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self::with_std(
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            (2.0 / fan_in).sqrt(),
            rng,
        )
    }

    pub fn with_std<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::normal(&[out_channels, in_channels, kernel, kernel], std, rng),
            bias: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        if x.height() + 2 * self.padding < self.kernel || x.width() + 2 * self.padding < self.kernel
        {
            return Err(Error::Shape(format!(
                "input {}x{} smaller than kernel {}",
                x.height(),
                x.width(),
                self.kernel
            )));
        }
        Ok(())
    }

    /// Unfolds `x` into a `(in·k·k) × (oh·ow)` matrix.
    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let (h, w) = (x.height() as isize, x.width() as isize);
        let n = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * n];
        for c in 0..self.in_channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let n = oh * ow;
        let mut out = Tensor3::zeros(self.in_channels, h, w);
        for c in 0..self.in_channels {
            let plane = out.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.height(), x.width());
        let n = oh * ow;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = vec![0.0; self.out_channels * n];
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(self.bias.value[o]);
        }
        if self.is_pointwise() {
            gemm(self.out_channels, kdim, n, 1.0, &self.weight.value, false, x.data(), false, 1.0, &mut out);
        } else {
            let cols = self.im2col(x, oh, ow);
            gemm(self.out_channels, kdim, n, 1.0, &self.weight.value, false, &cols, false, 1.0, &mut out);
        }
        Tensor3::from_vec(self.out_channels, oh, ow, out)
    }

    /// Parameter gradients only, for layers fed directly by data.
    pub fn backward_weights(&mut self, x: &Tensor3, grad_out: &Tensor3) {
        let (oh, ow) = self.output_size(x.height(), x.width());
        let n = oh * ow;
        let kdim = self.in_channels * self.kernel * self.kernel;
        for (o, g) in grad_out.data().chunks(n).enumerate() {
            self.bias.grad[o] += g.iter().sum::<f64>();
        }
        if self.is_pointwise() {
            gemm(self.out_channels, n, kdim, 1.0, grad_out.data(), false, x.data(), true, 1.0, &mut self.weight.grad);
        } else {
            let cols = self.im2col(x, oh, ow);
            gemm(self.out_channels, n, kdim, 1.0, grad_out.data(), false, &cols, true, 1.0, &mut self.weight.grad);
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
        let (oh, ow) = self.output_size(x.height(), x.width());
        debug_assert_eq!(grad_out.shape(), (self.out_channels, oh, ow));
        let n = oh * ow;
        let kdim = self.in_channels * self.kernel * self.kernel;
        for (o, g) in grad_out.data().chunks(n).enumerate() {
            self.bias.grad[o] += g.iter().sum::<f64>();
        }
        if self.is_pointwise() {
            gemm(self.out_channels, n, kdim, 1.0, grad_out.data(), false, x.data(), true, 1.0, &mut self.weight.grad);
            let mut dx = vec![0.0; kdim * n];
            gemm(kdim, self.out_channels, n, 1.0, &self.weight.value, true, grad_out.data(), false, 0.0, &mut dx);
            Tensor3::from_vec(self.in_channels, x.height(), x.width(), dx).expect("shape")
        } else {
            let cols = self.im2col(x, oh, ow);
            gemm(self.out_channels, n, kdim, 1.0, grad_out.data(), false, &cols, true, 1.0, &mut self.weight.grad);
            let mut dcols = cols;
            gemm(kdim, self.out_channels, n, 1.0, &self.weight.value, true, grad_out.data(), false, 0.0, &mut dcols);
            self.col2im(&dcols, x.height(), x.width(), oh, ow)
        }
    }
}

impl Module for Conv2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Fully-connected layer over a row-major batch `n × in`. Weight layout:
/// `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_features: usize,
    out_features: usize,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self::with_std(in_features, out_features, (2.0 / in_features as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Param::normal(&[out_features, in_features], std, rng),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
        }
    }

    /// Builds a layer from explicit row-major weights.
    pub fn from_parts(weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let out_features = bias.len();
        if out_features == 0 || weight.len() % out_features != 0 {
            return Err(Error::Shape(format!(
                "weight of {} values does not match {} outputs",
                weight.len(),
                out_features
            )));
        }
        let in_features = weight.len() / out_features;
        Ok(Self {
            weight: Param {
                shape: vec![out_features, in_features],
                grad: vec![0.0; weight.len()],
                value: weight,
            },
            bias: Param {
                shape: vec![out_features],
                grad: vec![0.0; out_features],
                value: bias,
            },
            in_features,
            out_features,
        })
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        if x.len() != batch * self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} features per row, got {} values for {batch} rows",
                self.in_features,
                x.len()
            )));
        }
        let mut out = Vec::with_capacity(batch * self.out_features);
        for _ in 0..batch {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(batch, self.in_features, self.out_features, 1.0, x, false, &self.weight.value, true, 1.0, &mut out);
        Ok(out)
    }

    pub fn backward(&mut self, x: &[f64], grad_out: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), batch * self.out_features);
        for row in grad_out.chunks(self.out_features) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        gemm(self.out_features, batch, self.in_features, 1.0, grad_out, true, x, false, 1.0, &mut self.weight.grad);
        let mut dx = vec![0.0; batch * self.in_features];
        gemm(batch, self.out_features, self.in_features, 1.0, grad_out, false, &self.weight.value, false, 0.0, &mut dx);
        dx
    }
}

impl Module for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Masks `grad` by the positive entries of the ReLU output.
pub fn relu_backward_in_place(output: &[f64], grad: &mut [f64]) {
    for (g, y) in grad.iter_mut().zip(output) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
