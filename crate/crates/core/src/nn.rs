//! Minimal f64 layer toolkit with hand-written backward passes.
//!
//! Everything operates on a single sample; batching lives in the callers,
//! which fan samples out with rayon and reduce gradients in index order so
//! results stay bitwise reproducible regardless of thread count.
//!
//! Feature maps use `(C, H, W)` layout. Convolution is im2col plus a matrix
//! product so the heavy lifting lands in ndarray's gemm.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Feature map / image tensor in `(C, H, W)` layout.
pub type FeatureMap = Array3<f64>;

/// Parameter container walkable as named tensors.
///
/// One visitor serves four masters: checkpoint serialization, flat-vector
/// export for the optimizer, flat import for loading, and finite-difference
/// perturbation in tests. Visit order must be stable.
pub trait Params {
    /// Visit every parameter tensor as `(name, shape, data)`.
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    /// Visit every parameter tensor mutably, in the same order as `visit`.
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Load parameters from a flat vector produced by [`Params::to_flat`].
    ///
    /// Panics if `flat` has the wrong length; callers validate sizes at the
    /// checkpoint boundary.
    fn load_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        self.visit_mut(&mut |_, d| {
            d.copy_from_slice(&flat[pos..pos + d.len()]);
            pos += d.len();
        });
        assert_eq!(pos, flat.len(), "flat parameter vector length mismatch");
    }

    /// Named tensors for checkpointing.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, shape, data| {
            out.push((name.to_string(), shape.to_vec(), data.to_vec()));
        });
        out
    }

    /// Add `rhs` parameters into `self` element-wise (gradient reduction).
    fn add_from(&mut self, rhs: &Self)
    where
        Self: Sized,
    {
        let flat = rhs.to_flat();
        let mut pos = 0;
        self.visit_mut(&mut |_, d| {
            for v in d.iter_mut() {
                *v += flat[pos];
                pos += 1;
            }
        });
    }
}

/// Hidden-layer activation. Smooth by default so numerical gradient checks
/// are well conditioned; leaky ReLU is available for conventional GAN runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    LeakyRelu,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "silu" => Some(Activation::Silu),
            "leaky_relu" => Some(Activation::LeakyRelu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::LeakyRelu => "leaky_relu",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Activation::Silu => 0,
            Activation::LeakyRelu => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Activation::Silu),
            1 => Some(Activation::LeakyRelu),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.2 * x
                }
            }
        }
    }

    /// Derivative expressed in terms of the pre-activation input.
    #[inline]
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.2
                }
            }
        }
    }

    /// Apply in place, returning the cached pre-activation input.
    pub fn forward(self, mut x: FeatureMap) -> (FeatureMap, FeatureMap) {
        let pre = x.clone();
        x.mapv_inplace(|v| self.eval(v));
        (x, pre)
    }

    pub fn backward(self, dy: &FeatureMap, pre: &FeatureMap) -> FeatureMap {
        let mut dx = dy.clone();
        dx.zip_mut_with(pre, |g, &x| *g *= self.grad(x));
        dx
    }

    pub fn forward_vec(self, mut x: Array1<f64>) -> (Array1<f64>, Array1<f64>) {
        let pre = x.clone();
        x.mapv_inplace(|v| self.eval(v));
        (x, pre)
    }

    pub fn backward_vec(self, dy: &Array1<f64>, pre: &Array1<f64>) -> Array1<f64> {
        let mut dx = dy.clone();
        dx.zip_mut_with(pre, |g, &x| *g *= self.grad(x));
        dx
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Stable `ln σ(x) = -softplus(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// 2-D convolution, square kernel, zero padding.
///
/// Weights are kept pre-flattened as `(cout, cin*k*k)` to match the im2col
/// patch matrix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    name: String,
}

/// Cached forward state a conv layer needs for its backward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-uniform initialization scaled by `gain` (1.0 for hidden layers).
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let limit = gain * (6.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((cout, cin * k * k), |_| rng.gen_range(-limit..limit));
        Conv2d {
            w,
            b: Array1::zeros(cout),
            cin,
            cout,
            k,
            stride,
            pad,
            name: name.to_string(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            ..self.clone()
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for di in 0..k {
                for dj in 0..k {
                    let row = (ci * k + di) * k + dj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + di) as isize - self.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + dj) as isize - self.pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, h: usize, w: usize) -> FeatureMap {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut dx = FeatureMap::zeros((self.cin, h, w));
        for ci in 0..self.cin {
            for di in 0..k {
                for dj in 0..k {
                    let row = (ci * k + di) * k + dj;
                    for oi in 0..oh {
                        let ii = (oi * self.stride + di) as isize - self.pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj * self.stride + dj) as isize - self.pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            dx[[ci, ii as usize, jj as usize]] += dcols[[row, oi * ow + oj]];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv {}: input channel mismatch", self.name);
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let mut y2 = self.w.dot(&cols);
        for (mut row, &b) in y2.rows_mut().into_iter().zip(self.b.iter()) {
            row += b;
        }
        let y = y2
            .into_shape_with_order((self.cout, oh, ow))
            .expect("conv output reshape");
        (
            y,
            ConvCache {
                cols,
                in_hw: (h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Backward pass: accumulates into `grad`, returns the input gradient.
    pub fn backward(&self, dy: &FeatureMap, cache: &ConvCache, grad: &mut Conv2d) -> FeatureMap {
        let (oh, ow) = cache.out_hw;
        let dy2 = dy
            .to_shape((self.cout, oh * ow))
            .expect("conv dy reshape")
            .into_owned();
        grad.w += &dy2.dot(&cache.cols.t());
        grad.b += &dy2.sum_axis(ndarray::Axis(1));
        let dcols = self.w.t().dot(&dy2);
        self.col2im(&dcols, cache.in_hw.0, cache.in_hw.1)
    }
}

impl Params for Conv2d {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{}.w", self.name),
            &[self.cout, self.cin, self.k, self.k],
            self.w.as_slice().expect("conv w layout"),
        );
        f(
            &format!("{}.b", self.name),
            &[self.cout],
            self.b.as_slice().expect("conv b layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{}.w", self.name),
            self.w.as_slice_mut().expect("conv w layout"),
        );
        f(
            &format!("{}.b", self.name),
            self.b.as_slice_mut().expect("conv b layout"),
        );
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    name: String,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = gain * (6.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..limit));
        Linear {
            w,
            b: Array1::zeros(fan_out),
            name: name.to_string(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            name: self.name.clone(),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    /// Returns dx; accumulates dW, db into `grad`.
    pub fn backward(&self, dy: &Array1<f64>, x: &Array1<f64>, grad: &mut Linear) -> Array1<f64> {
        for (i, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                let mut row = grad.w.row_mut(i);
                row.scaled_add(g, x);
            }
        }
        grad.b += dy;
        self.w.t().dot(dy)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let (o, i) = self.w.dim();
        f(
            &format!("{}.w", self.name),
            &[o, i],
            self.w.as_slice().expect("linear w layout"),
        );
        f(
            &format!("{}.b", self.name),
            &[o],
            self.b.as_slice().expect("linear b layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{}.w", self.name),
            self.w.as_slice_mut().expect("linear w layout"),
        );
        f(
            &format!("{}.b", self.name),
            self.b.as_slice_mut().expect("linear b layout"),
        );
    }
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-channel normalization state shared by the plain and the
/// style-conditioned variants.
pub struct NormCache {
    pub xhat: FeatureMap,
    pub inv_std: Array1<f64>,
}

fn normalize_channels(x: &FeatureMap) -> NormCache {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(c);
    for ci in 0..c {
        let mut ch = xhat.index_axis_mut(ndarray::Axis(0), ci);
        let mean = ch.sum() / n;
        let mut var = 0.0;
        for v in ch.iter() {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let istd = 1.0 / (var + NORM_EPS).sqrt();
        ch.mapv_inplace(|v| (v - mean) * istd);
        inv_std[ci] = istd;
    }
    NormCache { xhat, inv_std }
}

/// Gradient of per-channel normalization given d(xhat).
fn normalize_backward(dxhat: &FeatureMap, cache: &NormCache) -> FeatureMap {
    let (c, h, w) = dxhat.dim();
    let n = (h * w) as f64;
    let mut dx = FeatureMap::zeros((c, h, w));
    for ci in 0..c {
        let g = dxhat.index_axis(ndarray::Axis(0), ci);
        let xh = cache.xhat.index_axis(ndarray::Axis(0), ci);
        let sum_g = g.sum();
        let mut sum_gx = 0.0;
        for (gv, xv) in g.iter().zip(xh.iter()) {
            sum_gx += gv * xv;
        }
        let istd = cache.inv_std[ci];
        let mut out = dx.index_axis_mut(ndarray::Axis(0), ci);
        for ((o, gv), xv) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = istd * (gv - sum_g / n - xv * sum_gx / n);
        }
    }
    dx
}

/// Instance normalization with learned per-channel affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    name: String,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            name: name.to_string(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        InstanceNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
            name: self.name.clone(),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> (FeatureMap, NormCache) {
        let cache = normalize_channels(x);
        let mut y = cache.xhat.clone();
        for (ci, mut ch) in y.axis_iter_mut(ndarray::Axis(0)).enumerate() {
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            ch.mapv_inplace(|v| g * v + b);
        }
        (y, cache)
    }

    pub fn backward(
        &self,
        dy: &FeatureMap,
        cache: &NormCache,
        grad: &mut InstanceNorm,
    ) -> FeatureMap {
        let c = dy.dim().0;
        let mut dxhat = dy.clone();
        for ci in 0..c {
            let g = dy.index_axis(ndarray::Axis(0), ci);
            let xh = cache.xhat.index_axis(ndarray::Axis(0), ci);
            let mut dg = 0.0;
            let mut db = 0.0;
            for (gv, xv) in g.iter().zip(xh.iter()) {
                dg += gv * xv;
                db += gv;
            }
            grad.gamma[ci] += dg;
            grad.beta[ci] += db;
            dxhat
                .index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v * self.gamma[ci]);
        }
        normalize_backward(&dxhat, cache)
    }
}

impl Params for InstanceNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &format!("{}.gamma", self.name),
            &[self.gamma.len()],
            self.gamma.as_slice().expect("norm gamma layout"),
        );
        f(
            &format!("{}.beta", self.name),
            &[self.beta.len()],
            self.beta.as_slice().expect("norm beta layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &format!("{}.gamma", self.name),
            self.gamma.as_slice_mut().expect("norm gamma layout"),
        );
        f(
            &format!("{}.beta", self.name),
            self.beta.as_slice_mut().expect("norm beta layout"),
        );
    }
}

/// Style-conditioned normalization: the per-channel scale and shift are
/// affine functions of the style code, `y = (1 + a(s)) * xhat + b(s)`.
///
/// The affine maps start near zero so the layer behaves like plain
/// normalization at initialization while still responding to style
/// perturbations.
#[derive(Debug, Clone)]
pub struct StyleNorm {
    pub scale: Linear,
    pub shift: Linear,
}

pub struct StyleNormCache {
    pub norm: NormCache,
    pub a: Array1<f64>,
}

impl StyleNorm {
    pub fn new(name: &str, style_dim: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        StyleNorm {
            scale: Linear::new(&format!("{name}.scale"), style_dim, channels, 0.1, rng),
            shift: Linear::new(&format!("{name}.shift"), style_dim, channels, 0.1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        StyleNorm {
            scale: self.scale.zeros_like(),
            shift: self.shift.zeros_like(),
        }
    }

    pub fn forward(&self, x: &FeatureMap, s: &Array1<f64>) -> (FeatureMap, StyleNormCache) {
        let norm = normalize_channels(x);
        let a = self.scale.forward(s);
        let b = self.shift.forward(s);
        let mut y = norm.xhat.clone();
        for (ci, mut ch) in y.axis_iter_mut(ndarray::Axis(0)).enumerate() {
            let (ai, bi) = (1.0 + a[ci], b[ci]);
            ch.mapv_inplace(|v| ai * v + bi);
        }
        (y, StyleNormCache { norm, a })
    }

    /// Returns `(dx, ds)`.
    pub fn backward(
        &self,
        dy: &FeatureMap,
        cache: &StyleNormCache,
        s: &Array1<f64>,
        grad: &mut StyleNorm,
    ) -> (FeatureMap, Array1<f64>) {
        let c = dy.dim().0;
        let mut da = Array1::zeros(c);
        let mut db = Array1::zeros(c);
        let mut dxhat = dy.clone();
        for ci in 0..c {
            let g = dy.index_axis(ndarray::Axis(0), ci);
            let xh = cache.norm.xhat.index_axis(ndarray::Axis(0), ci);
            let mut dai = 0.0;
            let mut dbi = 0.0;
            for (gv, xv) in g.iter().zip(xh.iter()) {
                dai += gv * xv;
                dbi += gv;
            }
            da[ci] = dai;
            db[ci] = dbi;
            dxhat
                .index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v * (1.0 + cache.a[ci]));
        }
        let dx = normalize_backward(&dxhat, &cache.norm);
        let ds_scale = self.scale.backward(&da, s, &mut grad.scale);
        let ds_shift = self.shift.backward(&db, s, &mut grad.shift);
        (dx, ds_scale + &ds_shift)
    }
}

impl Params for StyleNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.scale.visit(f);
        self.shift.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.scale.visit_mut(f);
        self.shift.visit_mut(f);
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2x(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.dim();
    let mut y = FeatureMap::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[[ci, i, j]];
                y[[ci, 2 * i, 2 * j]] = v;
                y[[ci, 2 * i + 1, 2 * j]] = v;
                y[[ci, 2 * i, 2 * j + 1]] = v;
                y[[ci, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &FeatureMap) -> FeatureMap {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = FeatureMap::zeros((c, h, w));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                dx[[ci, i, j]] = dy[[ci, 2 * i, 2 * j]]
                    + dy[[ci, 2 * i + 1, 2 * j]]
                    + dy[[ci, 2 * i, 2 * j + 1]]
                    + dy[[ci, 2 * i + 1, 2 * j + 1]];
            }
        }
    }
    dx
}

/// Spatial mean per channel.
pub fn global_avg_pool(x: &FeatureMap) -> Array1<f64> {
    let (_, h, w) = x.dim();
    let n = (h * w) as f64;
    Array1::from_iter(
        x.axis_iter(ndarray::Axis(0))
            .map(|ch| ch.sum() / n),
    )
}

pub fn global_avg_pool_backward(dy: &Array1<f64>, c: usize, h: usize, w: usize) -> FeatureMap {
    let n = (h * w) as f64;
    let mut dx = FeatureMap::zeros((c, h, w));
    for ci in 0..c {
        dx.index_axis_mut(ndarray::Axis(0), ci).fill(dy[ci] / n);
    }
    dx
}

pub fn tanh_forward(mut x: FeatureMap) -> (FeatureMap, FeatureMap) {
    x.mapv_inplace(f64::tanh);
    let y = x.clone();
    (x, y)
}

pub fn tanh_backward(dy: &FeatureMap, y: &FeatureMap) -> FeatureMap {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &t| *g *= 1.0 - t * t);
    dx
}

/// Softmax over a logit vector.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p = logits.mapv(|v| (v - m).exp());
    let z = p.sum();
    p /= z;
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// FD-checks d(sum of squares of layer output)/d(param and input).
    #[test]
    fn conv_backward_matches_finite_difference() {
        let mut r = rng();
        let conv = Conv2d::new("c", 2, 3, 3, 2, 1, 1.0, &mut r);
        let x = rand_map(&mut r, 2, 8, 8);

        let loss = |c: &Conv2d, x: &FeatureMap| {
            let (y, _) = c.forward(x);
            y.iter().map(|v| v * v).sum::<f64>()
        };

        let (y, cache) = conv.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&dy, &cache, &mut grad);

        let h = 1e-6;
        let flat = conv.to_flat();
        let gflat = grad.to_flat();
        for idx in [0usize, 5, 17, flat.len() - 1] {
            let mut plus = conv.clone();
            let mut minus = conv.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            plus.load_flat(&fp);
            fp[idx] -= 2.0 * h;
            minus.load_flat(&fp);
            let num = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            assert!(
                rel_err(num, gflat[idx]) < 1e-6,
                "param {idx}: fd {num} vs analytic {}",
                gflat[idx]
            );
        }
        for (i, &g) in dx.iter().enumerate().step_by(23) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!(rel_err(num, g) < 1e-6, "input {i}: fd {num} vs analytic {g}");
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_difference() {
        let mut r = rng();
        let mut norm = InstanceNorm::new("n", 3);
        // non-trivial affine
        norm.gamma = Array1::from_shape_fn(3, |_| r.gen_range(0.5..1.5));
        norm.beta = Array1::from_shape_fn(3, |_| r.gen_range(-0.3..0.3));
        let x = rand_map(&mut r, 3, 5, 5);

        let loss = |n: &InstanceNorm, x: &FeatureMap| {
            let (y, _) = n.forward(x);
            y.iter().enumerate().map(|(i, v)| v * v * (i % 3) as f64).sum::<f64>()
        };

        let (y, cache) = norm.forward(&x);
        let dy = FeatureMap::from_shape_fn(y.raw_dim(), |(c, i, j)| {
            let idx = (c * 5 + i) * 5 + j;
            2.0 * y[[c, i, j]] * (idx % 3) as f64
        });
        let mut grad = norm.zeros_like();
        let dx = norm.backward(&dy, &cache, &mut grad);

        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let num = (loss(&norm, &xp) - loss(&norm, &xm)) / (2.0 * h);
            let g = dx.as_slice().unwrap()[i];
            assert!(rel_err(num, g) < 1e-5, "input {i}: fd {num} vs analytic {g}");
        }
        let gflat = grad.to_flat();
        let flat = norm.to_flat();
        for idx in 0..flat.len() {
            let mut np = norm.clone();
            let mut nm = norm.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            np.load_flat(&fp);
            fp[idx] -= 2.0 * h;
            nm.load_flat(&fp);
            let num = (loss(&np, &x) - loss(&nm, &x)) / (2.0 * h);
            assert!(rel_err(num, gflat[idx]) < 1e-6);
        }
    }

    #[test]
    fn style_norm_backward_matches_finite_difference() {
        let mut r = rng();
        let sn = StyleNorm::new("a", 4, 3, &mut r);
        let x = rand_map(&mut r, 3, 4, 4);
        let s = Array1::from_shape_fn(4, |_| r.gen_range(-1.0..1.0));

        let loss = |sn: &StyleNorm, x: &FeatureMap, s: &Array1<f64>| {
            let (y, _) = sn.forward(x, s);
            y.iter().map(|v| (v + 0.3) * (v + 0.3)).sum::<f64>()
        };

        let (y, cache) = sn.forward(&x, &s);
        let dy = y.mapv(|v| 2.0 * (v + 0.3));
        let mut grad = sn.zeros_like();
        let (dx, ds) = sn.backward(&dy, &cache, &s, &mut grad);

        let h = 1e-5;
        for i in 0..s.len() {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[i] += h;
            sm[i] -= h;
            let num = (loss(&sn, &x, &sp) - loss(&sn, &x, &sm)) / (2.0 * h);
            assert!(rel_err(num, ds[i]) < 1e-6, "ds[{i}]: fd {num} vs {}", ds[i]);
        }
        for i in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let num = (loss(&sn, &xp, &s) - loss(&sn, &xm, &s)) / (2.0 * h);
            let g = dx.as_slice().unwrap()[i];
            assert!(rel_err(num, g) < 1e-4, "dx[{i}]: fd {num} vs analytic {g}");
        }
        let gflat = grad.to_flat();
        let flat = sn.to_flat();
        for idx in (0..flat.len()).step_by(3) {
            let mut p = sn.clone();
            let mut m = sn.clone();
            let mut fp = flat.clone();
            fp[idx] += h;
            p.load_flat(&fp);
            fp[idx] -= 2.0 * h;
            m.load_flat(&fp);
            let num = (loss(&p, &x, &s) - loss(&m, &x, &s)) / (2.0 * h);
            assert!(rel_err(num, gflat[idx]) < 1e-6);
        }
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let mut r = rng();
        let x = rand_map(&mut r, 2, 3, 5);
        let y = upsample2x(&x);
        assert_eq!(y.dim(), (2, 6, 10));
        // adjoint test: <up(x), y> == <x, up^T(y)>
        let dy = rand_map(&mut r, 2, 6, 10);
        let lhs: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        let dx = upsample2x_backward(&dy);
        let rhs: f64 = x.iter().zip(dx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_normalizes() {
        let p = softmax(&Array1::from(vec![1.0, 2.0, 3.0]));
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn log_sigmoid_stable_at_extremes() {
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }
}
