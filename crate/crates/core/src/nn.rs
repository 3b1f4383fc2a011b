//! Minimal layers with explicit backward passes for the toy denoiser.
//!
//! Parameters live in a flat [`ParamStore`]; layers hold [`ParamId`]s into
//! it, so two branches that reference the same id share storage.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.entries.push(ParamEntry { name: name.into(), shape, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    /// Normal init with standard deviation `std`.
    pub fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> ParamId {
        let n = shape.iter().product();
        let v = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.add(name, shape, v)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { values: self.entries.iter().map(|e| vec![0.0; e.value.len()]).collect() }
    }

    /// `p -= lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64) {
        for (e, g) in self.entries.iter_mut().zip(&grads.values) {
            for (p, g) in e.value.iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` with `op(A)` of shape `m x k` and
/// `op(B)` of shape `k x n`, all row-major. `ta`/`tb` mean the buffer holds
/// the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// A batch of feature maps, `N x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return shape(format!("{} values cannot form {n}x{c}x{h}x{w}", data.len()));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn same_shape(&self, o: &Self) -> bool {
        (self.n, self.c, self.h, self.w) == (o.n, o.c, o.h, o.w)
    }

    pub fn add_assign(&mut self, o: &Self) {
        debug_assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Position-major token matrix `(N*H*W) x C`.
    pub fn to_tokens(&self) -> Vec<f64> {
        let hw = self.h * self.w;
        let mut out = vec![0.0; self.n * hw * self.c];
        for img in 0..self.n {
            for ch in 0..self.c {
                let src = &self.data[(img * self.c + ch) * hw..][..hw];
                for (p, v) in src.iter().enumerate() {
                    out[(img * hw + p) * self.c + ch] = *v;
                }
            }
        }
        out
    }

    /// Inverse of [`to_tokens`](Self::to_tokens) for this tensor's shape.
    pub fn from_tokens_like(&self, tokens: &[f64]) -> Self {
        let hw = self.h * self.w;
        let mut out = self.zeros_like();
        for img in 0..self.n {
            for ch in 0..self.c {
                let dst = &mut out.data[(img * self.c + ch) * hw..][..hw];
                for (p, v) in dst.iter_mut().enumerate() {
                    *v = tokens[(img * hw + p) * self.c + ch];
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, o: &Self) -> f64 {
        self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Boundary handling of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding on all sides.
    Zero,
    /// Wrap-around horizontally, zero vertically (panorama features).
    Circular,
}

/// Square convolution with `same` padding for stride 1 and halving for
/// stride 2.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<Vec<f64>>,
    index: Vec<Option<u32>>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let weight = store.normal(format!("{name}.weight"), vec![cout, cin, kernel, kernel], (1.0 / fan_in).sqrt(), rng);
        let bias = store.zeros(format!("{name}.bias"), vec![cout]);
        Self { weight, bias, cin, cout, kernel, stride }
    }

    /// Zero-initialised convolution.
    pub fn zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let weight = store.zeros(format!("{name}.weight"), vec![cout, cin, kernel, kernel]);
        let bias = store.zeros(format!("{name}.bias"), vec![cout]);
        Self { weight, bias, cin, cout, kernel, stride: 1 }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.kernel / 2;
        ((h + 2 * p - self.kernel) / self.stride + 1, (w + 2 * p - self.kernel) / self.stride + 1)
    }

    /// Source offset inside one input plane for every (tap, output pixel).
    fn gather_index(&self, h: usize, w: usize, pad: Padding) -> Vec<Option<u32>> {
        let k = self.kernel;
        let p = (k / 2) as i64;
        let (oh, ow) = self.out_hw(h, w);
        let mut idx = Vec::with_capacity(k * k * oh * ow);
        for ky in 0..k as i64 {
            for kx in 0..k as i64 {
                for oy in 0..oh as i64 {
                    let iy = oy * self.stride as i64 + ky - p;
                    for ox in 0..ow as i64 {
                        let ix = ox * self.stride as i64 + kx - p;
                        let ix = match pad {
                            Padding::Circular => Some(ix.rem_euclid(w as i64)),
                            Padding::Zero => (0..w as i64).contains(&ix).then_some(ix),
                        };
                        let v = match ix {
                            Some(ix) if (0..h as i64).contains(&iy) => Some((iy * w as i64 + ix) as u32),
                            _ => None,
                        };
                        idx.push(v);
                    }
                }
            }
        }
        idx
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor4, pad: Padding) -> Result<(Tensor4, ConvCache)> {
        if x.c != self.cin {
            return shape(format!("conv expects {} channels, got {}", self.cin, x.c));
        }
        let (oh, ow) = self.out_hw(x.h, x.w);
        let ohw = oh * ow;
        let kk = self.kernel * self.kernel;
        let rows = self.cin * kk;
        let index = self.gather_index(x.h, x.w, pad);
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        let mut out = Tensor4::zeros(x.n, self.cout, oh, ow);
        let mut cols = Vec::with_capacity(x.n);
        let hw = x.h * x.w;
        for img in 0..x.n {
            let mut col = vec![0.0; rows * ohw];
            for ci in 0..self.cin {
                let plane = &x.data[(img * self.cin + ci) * hw..][..hw];
                for t in 0..kk {
                    let dst = &mut col[(ci * kk + t) * ohw..][..ohw];
                    let src_idx = &index[t * ohw..][..ohw];
                    for (d, s) in dst.iter_mut().zip(src_idx) {
                        if let Some(s) = s {
                            *d = plane[*s as usize];
                        }
                    }
                }
            }
            let y = &mut out.data[img * self.cout * ohw..][..self.cout * ohw];
            for (co, chunk) in y.chunks_mut(ohw).enumerate() {
                chunk.fill(b[co]);
            }
            gemm(self.cout, rows, ohw, 1.0, w, false, &col, false, 1.0, y);
            cols.push(col);
        }
        Ok((out, ConvCache { cols, index, in_shape: (x.n, x.c, x.h, x.w), out_hw: (oh, ow) }))
    }

    pub fn backward(&self, store: &ParamStore, cache: &ConvCache, dy: &Tensor4, grads: &mut Grads) -> Tensor4 {
        let (n, c, h, w) = cache.in_shape;
        let ohw = cache.out_hw.0 * cache.out_hw.1;
        let kk = self.kernel * self.kernel;
        let rows = self.cin * kk;
        let weight = store.get(self.weight);
        let mut dx = Tensor4::zeros(n, c, h, w);
        let mut dcol = vec![0.0; rows * ohw];
        let hw = h * w;
        for img in 0..n {
            let g = &dy.data[img * self.cout * ohw..][..self.cout * ohw];
            {
                let db = grads.get_mut(self.bias);
                for (co, chunk) in g.chunks(ohw).enumerate() {
                    db[co] += chunk.iter().sum::<f64>();
                }
            }
            gemm(self.cout, ohw, rows, 1.0, g, false, &cache.cols[img], true, 1.0, grads.get_mut(self.weight));
            gemm(rows, self.cout, ohw, 1.0, weight, true, g, false, 0.0, &mut dcol);
            for ci in 0..self.cin {
                let plane = &mut dx.data[(img * self.cin + ci) * hw..][..hw];
                for t in 0..kk {
                    let src = &dcol[(ci * kk + t) * ohw..][..ohw];
                    let idx = &cache.index[t * ohw..][..ohw];
                    for (s, i) in src.iter().zip(idx) {
                        if let Some(i) = i {
                            plane[*i as usize] += s;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = *v / (1.0 + (-*v).exp());
    }
    y
}

pub fn silu_backward(x: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    for (g, &v) in dx.data.iter_mut().zip(&x.data) {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    }
    dx
}

pub fn silu_scalar(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn silu_scalar_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor4) -> Tensor4 {
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut out = Tensor4::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks(x.h * x.w).zip(out.data.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor4) -> Tensor4 {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor4::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks(dy.h * dy.w).zip(dx.data.chunks_mut(h * w)) {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}

/// Adds `bias[c]` to every pixel of channel `c`.
pub fn add_channel_bias(x: &mut Tensor4, bias: &[f64]) {
    let hw = x.h * x.w;
    for (i, chunk) in x.data.chunks_mut(hw).enumerate() {
        let b = bias[i % x.c];
        for v in chunk {
            *v += b;
        }
    }
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_sums(dy: &Tensor4) -> Vec<f64> {
    let hw = dy.h * dy.w;
    let mut out = vec![0.0; dy.c];
    for (i, chunk) in dy.data.chunks(hw).enumerate() {
        out[i % dy.c] += chunk.iter().sum::<f64>();
    }
    out
}

/// Dense layer on a single vector, `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let weight = store.normal(format!("{name}.weight"), vec![dout, din], (1.0 / din as f64).sqrt(), rng);
        let bias = store.zeros(format!("{name}.bias"), vec![dout]);
        Self { weight, bias, din, dout }
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight);
        let mut y = store.get(self.bias).to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += w[o * self.din..][..self.din].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        y
    }

    pub fn backward(&self, store: &ParamStore, x: &[f64], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let w = store.get(self.weight);
        let mut dx = vec![0.0; self.din];
        {
            let gw = grads.get_mut(self.weight);
            for (o, g) in dy.iter().enumerate() {
                for (i, xi) in x.iter().enumerate() {
                    gw[o * self.din + i] += g * xi;
                    dx[i] += g * w[o * self.din + i];
                }
            }
        }
        for (gb, g) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *gb += g;
        }
        dx
    }
}
