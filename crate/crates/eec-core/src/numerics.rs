//! Dense `f64` tensors and the small kernel set the rest of the crate
//! builds on: channel concat/slice, global average pooling, per-channel
//! and per-location broadcast products, a fully-connected layer and a
//! 3x3 same-padding convolution.
//!
//! Layout is row-major over locations with channels innermost:
//! `idx(i, j, k) = (i * w + j) * c + k`, so the channel vector at one
//! spatial location is contiguous. All loops run in a fixed order, so
//! every operation is bit-reproducible for identical inputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn ensure_finite(data: &[f64], context: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

/// A `h x w x c` feature map. Shape dimensions are positive and every
/// element is finite; both are checked at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::ZeroDim { what: "feature map height/width" });
        }
        if c == 0 {
            return Err(Error::ZeroDim { what: "feature map channels" });
        }
        let expected = h * w * c;
        if data.len() != expected {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        ensure_finite(&data, "feature map")?;
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Result<Self> {
        Self::new(h, w, c, vec![0.0; h * w * c])
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(h, w, c, data)
    }

    /// Uniform samples in `[lo, hi)`; draw order is fixed, so the result is
    /// fully determined by the RNG state.
    pub fn random(h: usize, w: usize, c: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.w + j) * self.c + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    /// Callers are responsible for keeping values finite.
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.idx(i, j, k);
        self.data[idx] = v;
    }

    /// The contiguous channel vector at one spatial location.
    #[inline]
    pub fn location(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.w + j) * self.c;
        &self.data[start..start + self.c]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub(crate) fn same_shape(&self, other: &Self) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::SpatialMismatch { a: (self.h, self.w), b: (other.h, other.w) });
        }
        if self.c != other.c {
            return Err(Error::ChannelMismatch { expected: self.c, got: other.c });
        }
        Ok(())
    }
}

/// A length-`c` channel vector (pooled features, routing weights, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    data: Vec<f64>,
}

impl ChannelVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::ZeroDim { what: "channel vector length" });
        }
        ensure_finite(&data, "channel vector")?;
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Result<Self> {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, k: usize) -> f64 {
        self.data[k]
    }

    #[inline]
    pub fn set(&mut self, k: usize, v: f64) {
        self.data[k] = v;
    }

    pub fn relu(&self) -> Self {
        Self { data: self.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() }
    }

    pub fn sigmoid(&self) -> Self {
        Self { data: self.data.iter().map(|&v| sigmoid(v)).collect() }
    }
}

/// A `h x w` single-channel map (spatial routing weights, attention mass).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::ZeroDim { what: "spatial map height/width" });
        }
        if data.len() != h * w {
            return Err(Error::DataLength { expected: h * w, got: data.len() });
        }
        ensure_finite(&data, "spatial map")?;
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, vec![0.0; h * w])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.w + j] = v;
    }
}

/// Concatenate along channels: output channel `k` is `a`'s channel `k` for
/// `k < a.c()` and `b`'s channel `k - a.c()` otherwise.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::SpatialMismatch { a: (a.h, a.w), b: (b.h, b.w) });
    }
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.h * a.w * c);
    for loc in 0..a.h * a.w {
        data.extend_from_slice(&a.data[loc * a.c..(loc + 1) * a.c]);
        data.extend_from_slice(&b.data[loc * b.c..(loc + 1) * b.c]);
    }
    Ok(FeatureMap { h: a.h, w: a.w, c, data })
}

/// The channel window `[start, start + len)` of `x`, as its own map.
pub fn slice_channels(x: &FeatureMap, start: usize, len: usize) -> Result<FeatureMap> {
    if len == 0 {
        return Err(Error::ZeroDim { what: "channel slice length" });
    }
    if start + len > x.c {
        return Err(Error::SliceOutOfRange { start, len, channels: x.c });
    }
    let mut data = Vec::with_capacity(x.h * x.w * len);
    for loc in 0..x.h * x.w {
        let base = loc * x.c + start;
        data.extend_from_slice(&x.data[base..base + len]);
    }
    Ok(FeatureMap { h: x.h, w: x.w, c: len, data })
}

/// Mean over all spatial locations, one value per channel.
pub fn global_avg_pool(x: &FeatureMap) -> ChannelVector {
    let n = (x.h * x.w) as f64;
    let mut sums = vec![0.0; x.c];
    for loc in 0..x.h * x.w {
        let px = &x.data[loc * x.c..(loc + 1) * x.c];
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v;
        }
    }
    for s in &mut sums {
        *s /= n;
    }
    ChannelVector { data: sums }
}

pub fn add(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    a.same_shape(b)?;
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect();
    Ok(FeatureMap { h: a.h, w: a.w, c: a.c, data })
}

/// `out[i, j, k] = x[i, j, k] * w[k]`.
pub fn broadcast_mul_channel(x: &FeatureMap, w: &ChannelVector) -> Result<FeatureMap> {
    if w.len() != x.c {
        return Err(Error::ChannelMismatch { expected: x.c, got: w.len() });
    }
    let mut data = Vec::with_capacity(x.data.len());
    for loc in 0..x.h * x.w {
        let px = &x.data[loc * x.c..(loc + 1) * x.c];
        for (v, g) in px.iter().zip(&w.data) {
            data.push(v * g);
        }
    }
    Ok(FeatureMap { h: x.h, w: x.w, c: x.c, data })
}

/// `out[i, j, k] = x[i, j, k] * w[i, j]`.
pub fn broadcast_mul_spatial(x: &FeatureMap, w: &SpatialMap) -> Result<FeatureMap> {
    if w.h != x.h || w.w != x.w {
        return Err(Error::SpatialMismatch { a: (x.h, x.w), b: (w.h, w.w) });
    }
    let mut data = Vec::with_capacity(x.data.len());
    for loc in 0..x.h * x.w {
        let g = w.data[loc];
        for &v in &x.data[loc * x.c..(loc + 1) * x.c] {
            data.push(v * g);
        }
    }
    Ok(FeatureMap { h: x.h, w: x.w, c: x.c, data })
}

/// A fully-connected layer `y = W x + b` with row-major `W`
/// (`weight[o * in_dim + q]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::ZeroDim { what: "linear layer dimensions" });
        }
        if weight.len() != out_dim * in_dim {
            return Err(Error::DataLength { expected: out_dim * in_dim, got: weight.len() });
        }
        if bias.len() != out_dim {
            return Err(Error::DataLength { expected: out_dim, got: bias.len() });
        }
        ensure_finite(&weight, "linear weight")?;
        ensure_finite(&bias, "linear bias")?;
        Ok(Self { out_dim, in_dim, weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Result<Self> {
        Self::new(out_dim, in_dim, vec![0.0; out_dim * in_dim], vec![0.0; out_dim])
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Weight and bias as one pair of disjoint mutable slices.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn forward(&self, x: &ChannelVector) -> Result<ChannelVector> {
        if x.len() != self.in_dim {
            return Err(Error::ChannelMismatch { expected: self.in_dim, got: x.len() });
        }
        let mut out = Vec::with_capacity(self.out_dim);
        for o in 0..self.out_dim {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.bias[o];
            for (wv, xv) in row.iter().zip(&x.data) {
                acc += wv * xv;
            }
            out.push(acc);
        }
        Ok(ChannelVector { data: out })
    }
}

/// A 3x3 convolution with stride 1 and zero padding 1, so spatial shape is
/// preserved. Weights are laid out `weight[((o * in_c + q) * 3 + di) * 3 + dj]`
/// where `(di, dj)` index the kernel tap and `(1, 1)` is the centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    out_c: usize,
    in_c: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn new(out_c: usize, in_c: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if out_c == 0 || in_c == 0 {
            return Err(Error::ZeroDim { what: "convolution channel counts" });
        }
        if weight.len() != out_c * in_c * 9 {
            return Err(Error::DataLength { expected: out_c * in_c * 9, got: weight.len() });
        }
        if bias.len() != out_c {
            return Err(Error::DataLength { expected: out_c, got: bias.len() });
        }
        ensure_finite(&weight, "conv weight")?;
        ensure_finite(&bias, "conv bias")?;
        Ok(Self { out_c, in_c, weight, bias })
    }

    pub fn zeros(out_c: usize, in_c: usize) -> Result<Self> {
        Self::new(out_c, in_c, vec![0.0; out_c * in_c * 9], vec![0.0; out_c])
    }

    pub fn out_c(&self) -> usize {
        self.out_c
    }

    pub fn in_c(&self) -> usize {
        self.in_c
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Weight and bias as one pair of disjoint mutable slices.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.c != self.in_c {
            return Err(Error::ChannelMismatch { expected: self.in_c, got: x.c });
        }
        let (h, w) = (x.h, x.w);
        let mut out = vec![0.0; h * w * self.out_c];
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * self.out_c;
                for o in 0..self.out_c {
                    let mut acc = self.bias[o];
                    for di in 0..3 {
                        // Padded coordinate i + di - 1; usize wrap-around lands
                        // out of range and is skipped, which is the zero pad.
                        let ii = (i + di).wrapping_sub(1);
                        if ii >= h {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = (j + dj).wrapping_sub(1);
                            if jj >= w {
                                continue;
                            }
                            let px = &x.data[(ii * w + jj) * self.in_c..][..self.in_c];
                            for (q, &v) in px.iter().enumerate() {
                                acc += self.weight[((o * self.in_c + q) * 3 + di) * 3 + dj] * v;
                            }
                        }
                    }
                    out[base + o] = acc;
                }
            }
        }
        Ok(FeatureMap { h, w, c: self.out_c, data: out })
    }
}
