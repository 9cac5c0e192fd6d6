//! Convolutional, locally-connected, pooling and local response normalization
//! kernels with exact backward passes.
//!
//! All image tensors are `[batch, channels, height, width]`. Windows are
//! valid-only (no padding): a window of size `f` with stride `s` over an
//! extent `h` yields `(h - f) / s + 1` outputs. "Convolution" is
//! cross-correlation; filters are not flipped.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::{gemm_acc, Tensor};

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(format!(
            "expected a [batch, channels, height, width] tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn out_extent(extent: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::arg("window and stride must be at least 1"));
    }
    if window > extent {
        return Err(Error::shape(format!(
            "window {window} larger than input extent {extent}"
        )));
    }
    Ok((extent - window) / stride + 1)
}

/// Bank of shared filters applied at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[banks, in_channels, fh, fw]`.
    pub filters: Tensor,
    /// `[banks]`.
    pub biases: Tensor,
    pub stride: usize,
    /// Optional channel table: bank `k` only sees the channels listed in
    /// `connectivity[k]`. Filter entries for other channels are ignored and
    /// receive zero gradient.
    pub connectivity: Option<Vec<Vec<usize>>>,
}

impl ConvLayer {
    pub fn new(filters: Tensor, biases: Tensor, stride: usize) -> Result<Self> {
        let layer = ConvLayer {
            filters,
            biases,
            stride,
            connectivity: None,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_connectivity(mut self, table: Vec<Vec<usize>>) -> Result<Self> {
        let (banks, channels, _, _) = self.dims();
        if table.len() != banks || table.iter().flatten().any(|&c| c >= channels) {
            return Err(Error::arg(format!(
                "connectivity table must list channels < {channels} for each of {banks} banks"
            )));
        }
        self.connectivity = Some(table);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        dims4(&self.filters)?;
        if self.stride == 0 {
            return Err(Error::arg("stride must be at least 1"));
        }
        if self.biases.shape() != [self.filters.shape()[0]] {
            return Err(Error::shape("conv biases must have one entry per bank"));
        }
        Ok(())
    }

    /// `(banks, in_channels, fh, fw)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.filters.shape();
        (s[0], s[1], s[2], s[3])
    }

    fn patch_len(&self) -> usize {
        let (_, c, fh, fw) = self.dims();
        c * fh * fw
    }

    /// Filters with unconnected channels zeroed, as a `[banks, C·fh·fw]` view.
    fn effective_filters(&self) -> Vec<f64> {
        let mut f = self.filters.data().to_vec();
        if let Some(mask) = self.connection_mask() {
            for (v, m) in f.iter_mut().zip(&mask) {
                *v *= m;
            }
        }
        f
    }

    fn connection_mask(&self) -> Option<Vec<f64>> {
        let table = self.connectivity.as_ref()?;
        let (banks, channels, fh, fw) = self.dims();
        let area = fh * fw;
        let mut mask = vec![0.0; banks * channels * area];
        for (k, chans) in table.iter().enumerate() {
            for &c in chans {
                let start = (k * channels + c) * area;
                mask[start..start + area].iter_mut().for_each(|m| *m = 1.0);
            }
        }
        Some(mask)
    }
}

/// Convolution-shaped layer whose filters differ at every output position.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLayer {
    /// `[banks, out_h, out_w, in_channels, fh, fw]`.
    pub filters: Tensor,
    /// `[banks]`.
    pub biases: Tensor,
    pub stride: usize,
}

impl LocalLayer {
    pub fn new(filters: Tensor, biases: Tensor, stride: usize) -> Result<Self> {
        if filters.ndim() != 6 {
            return Err(Error::shape(
                "local filters must be [banks, out_h, out_w, in_channels, fh, fw]",
            ));
        }
        if stride == 0 {
            return Err(Error::arg("stride must be at least 1"));
        }
        if biases.shape() != [filters.shape()[0]] {
            return Err(Error::shape("local biases must have one entry per bank"));
        }
        Ok(LocalLayer {
            filters,
            biases,
            stride,
        })
    }

    /// `(banks, out_h, out_w, in_channels, fh, fw)`.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize, usize) {
        let s = self.filters.shape();
        (s[0], s[1], s[2], s[3], s[4], s[5])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    /// Windows overlap when they are spaced closer than their width.
    pub fn is_overlapping(&self) -> bool {
        self.stride < self.window
    }
}

/// Local response normalization across `width` adjacent banks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnSpec {
    pub width: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnSpec {
    fn default() -> Self {
        LrnSpec {
            width: 9,
            alpha: 0.001,
            beta: 0.75,
        }
    }
}

impl LrnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !(self.alpha >= 0.0) || !self.beta.is_finite() {
            return Err(Error::arg(format!("invalid LRN parameters {self:?}")));
        }
        Ok(())
    }

    /// Inclusive bank range `[i - N/2, i + N/2]` clipped to `[0, banks)`.
    pub fn window(&self, i: usize, banks: usize) -> (usize, usize) {
        let half = self.width / 2;
        (i.saturating_sub(half), (i + half).min(banks - 1))
    }
}

fn im2col(
    image: &[f64],
    (c, h, w): (usize, usize, usize),
    (fh, fw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let p = oh * ow;
    for ch in 0..c {
        for dy in 0..fh {
            for dx in 0..fw {
                let r = (ch * fh + dy) * fw + dx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let src = &image[(ch * h + oy * stride + dy) * w..];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[ox * stride + dx];
                    }
                }
            }
        }
    }
}

fn col2im_add(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (fh, fw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
    image: &mut [f64],
) {
    let p = oh * ow;
    for ch in 0..c {
        for dy in 0..fh {
            for dx in 0..fw {
                let r = (ch * fh + dy) * fw + dx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let row = (ch * h + oy * stride + dy) * w;
                    for ox in 0..ow {
                        image[row + ox * stride + dx] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Shared-filter convolution via patch unrolling and a matrix product.
pub fn conv2d_forward(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (b, c, h, w) = dims4(input)?;
    let (banks, fc, fh, fw) = layer.dims();
    if fc != c {
        return Err(Error::shape(format!(
            "filters expect {fc} channels, input has {c}"
        )));
    }
    let oh = out_extent(h, fh, layer.stride)?;
    let ow = out_extent(w, fw, layer.stride)?;
    let p = oh * ow;
    let plen = layer.patch_len();
    let filters = layer.effective_filters();
    let mut out = vec![0.0; b * banks * p];
    let mut cols = vec![0.0; plen * p];
    let img_len = c * h * w;
    for n in 0..b {
        im2col(
            &input.data()[n * img_len..(n + 1) * img_len],
            (c, h, w),
            (fh, fw),
            layer.stride,
            (oh, ow),
            &mut cols,
        );
        let dst = &mut out[n * banks * p..(n + 1) * banks * p];
        gemm_acc(&filters, &cols, dst, banks, plen, p);
        for k in 0..banks {
            let bias = layer.biases.data()[k];
            dst[k * p..(k + 1) * p].iter_mut().for_each(|v| *v += bias);
        }
    }
    Tensor::from_vec(&[b, banks, oh, ow], out)
}

/// Gradients of a convolution: `(grad_input, grad_filters, grad_biases)`.
pub fn conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = dims4(input)?;
    let (banks, _, fh, fw) = layer.dims();
    let oh = out_extent(h, fh, layer.stride)?;
    let ow = out_extent(w, fw, layer.stride)?;
    if grad_out.shape() != [b, banks, oh, ow] {
        return Err(Error::Consistency(format!(
            "conv gradient shape {:?} does not match output [{b}, {banks}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let p = oh * ow;
    let plen = layer.patch_len();
    let filters_t = Tensor::from_vec(&[banks, plen], layer.effective_filters())?.transpose()?;
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_f = vec![0.0; banks * plen];
    let mut grad_b = vec![0.0; banks];
    let mut cols = vec![0.0; plen * p];
    let mut dcols = vec![0.0; plen * p];
    let img_len = c * h * w;
    for n in 0..b {
        let image = &input.data()[n * img_len..(n + 1) * img_len];
        im2col(image, (c, h, w), (fh, fw), layer.stride, (oh, ow), &mut cols);
        let g = &grad_out.data()[n * banks * p..(n + 1) * banks * p];
        // grad_f += g · colsᵀ
        let cols_t = Tensor::from_vec(&[plen, p], cols.clone())?.transpose()?;
        gemm_acc(g, cols_t.data(), &mut grad_f, banks, p, plen);
        for k in 0..banks {
            grad_b[k] += g[k * p..(k + 1) * p].iter().sum::<f64>();
        }
        dcols.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(filters_t.data(), g, &mut dcols, plen, banks, p);
        col2im_add(
            &dcols,
            (c, h, w),
            (fh, fw),
            layer.stride,
            (oh, ow),
            &mut grad_in[n * img_len..(n + 1) * img_len],
        );
    }
    if let Some(mask) = layer.connection_mask() {
        for (v, m) in grad_f.iter_mut().zip(&mask) {
            *v *= m;
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), grad_in)?,
        Tensor::from_vec(layer.filters.shape(), grad_f)?,
        Tensor::from_vec(&[banks], grad_b)?,
    ))
}

fn local_geometry(input: &Tensor, layer: &LocalLayer) -> Result<(usize, usize, usize, usize)> {
    let (b, c, h, w) = dims4(input)?;
    let (_, oh, ow, fc, fh, fw) = layer.dims();
    if fc != c {
        return Err(Error::shape(format!(
            "local filters expect {fc} channels, input has {c}"
        )));
    }
    let eh = out_extent(h, fh, layer.stride)?;
    let ew = out_extent(w, fw, layer.stride)?;
    if (eh, ew) != (oh, ow) {
        return Err(Error::shape(format!(
            "local layer built for a {oh}x{ow} output grid, input gives {eh}x{ew}"
        )));
    }
    Ok((b, c, h, w))
}

fn gather_patch(
    image: &[f64],
    (c, h, w): (usize, usize, usize),
    (fh, fw): (usize, usize),
    (y0, x0): (usize, usize),
    patch: &mut [f64],
) {
    let mut r = 0;
    for ch in 0..c {
        for dy in 0..fh {
            let row = &image[(ch * h + y0 + dy) * w + x0..];
            patch[r..r + fw].copy_from_slice(&row[..fw]);
            r += fw;
        }
    }
}

/// Locally-connected forward pass: unshared filters per output position.
pub fn local_forward(input: &Tensor, layer: &LocalLayer) -> Result<Tensor> {
    let (b, c, h, w) = local_geometry(input, layer)?;
    let (banks, oh, ow, _, fh, fw) = layer.dims();
    let plen = c * fh * fw;
    let img_len = c * h * w;
    let filters = layer.filters.data();
    let mut out = vec![0.0; b * banks * oh * ow];
    let mut patch = vec![0.0; plen];
    for n in 0..b {
        let image = &input.data()[n * img_len..(n + 1) * img_len];
        for oy in 0..oh {
            for ox in 0..ow {
                gather_patch(
                    image,
                    (c, h, w),
                    (fh, fw),
                    (oy * layer.stride, ox * layer.stride),
                    &mut patch,
                );
                for k in 0..banks {
                    let f = &filters[((k * oh + oy) * ow + ox) * plen..][..plen];
                    let dot: f64 = f.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    out[((n * banks + k) * oh + oy) * ow + ox] = dot + layer.biases.data()[k];
                }
            }
        }
    }
    Tensor::from_vec(&[b, banks, oh, ow], out)
}

/// Gradients of a locally-connected layer: `(grad_input, grad_filters, grad_biases)`.
pub fn local_backward(
    input: &Tensor,
    layer: &LocalLayer,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = local_geometry(input, layer)?;
    let (banks, oh, ow, _, fh, fw) = layer.dims();
    if grad_out.shape() != [b, banks, oh, ow] {
        return Err(Error::Consistency(format!(
            "local gradient shape {:?} does not match output [{b}, {banks}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let plen = c * fh * fw;
    let img_len = c * h * w;
    let filters = layer.filters.data();
    let mut grad_in = vec![0.0; input.len()];
    let mut grad_f = vec![0.0; layer.filters.len()];
    let mut grad_b = vec![0.0; banks];
    let mut patch = vec![0.0; plen];
    for n in 0..b {
        let image = &input.data()[n * img_len..(n + 1) * img_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * layer.stride, ox * layer.stride);
                gather_patch(image, (c, h, w), (fh, fw), (y0, x0), &mut patch);
                for k in 0..banks {
                    let g = grad_out.data()[((n * banks + k) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    grad_b[k] += g;
                    let off = ((k * oh + oy) * ow + ox) * plen;
                    for (gf, x) in grad_f[off..off + plen].iter_mut().zip(&patch) {
                        *gf += g * x;
                    }
                    let f = &filters[off..off + plen];
                    let mut r = 0;
                    for ch in 0..c {
                        for dy in 0..fh {
                            let row = n * img_len + (ch * h + y0 + dy) * w + x0;
                            for dx in 0..fw {
                                grad_in[row + dx] += g * f[r];
                                r += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), grad_in)?,
        Tensor::from_vec(layer.filters.shape(), grad_f)?,
        Tensor::from_vec(&[banks], grad_b)?,
    ))
}

/// Max or average pooling over each channel independently. For max pooling
/// the flat input index of every window's maximum is returned; ties go to
/// the first element in row-major scan order.
pub fn pool_forward(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Option<Vec<usize>>)> {
    let (b, c, h, w) = dims4(input)?;
    let oh = out_extent(h, spec.window, spec.stride)?;
    let ow = out_extent(w, spec.window, spec.stride)?;
    let mut out = vec![0.0; b * c * oh * ow];
    let mut argmax = match spec.kind {
        PoolKind::Max => Some(vec![0usize; out.len()]),
        PoolKind::Average => None,
    };
    let area = (spec.window * spec.window) as f64;
    let x = input.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (plane * oh + oy) * ow + ox;
                let (y0, x0) = (oy * spec.stride, ox * spec.stride);
                match spec.kind {
                    PoolKind::Max => {
                        let mut best = base + y0 * w + x0;
                        for dy in 0..spec.window {
                            for dx in 0..spec.window {
                                let idx = base + (y0 + dy) * w + x0 + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out[o] = x[best];
                        if let Some(am) = argmax.as_mut() {
                            am[o] = best;
                        }
                    }
                    PoolKind::Average => {
                        let mut acc = 0.0;
                        for dy in 0..spec.window {
                            for dx in 0..spec.window {
                                acc += x[base + (y0 + dy) * w + x0 + dx];
                            }
                        }
                        out[o] = acc / area;
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[b, c, oh, ow], out)?, argmax))
}

/// Backward pass of pooling. Max pooling routes each output gradient to its
/// recorded argmax; average pooling spreads `g / window²` over the window.
pub fn pool_backward(
    input_shape: &[usize],
    spec: &PoolSpec,
    argmax: Option<&[usize]>,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (b, c, h, w) = match input_shape[..] {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::shape("pool input must be 4-D")),
    };
    let oh = out_extent(h, spec.window, spec.stride)?;
    let ow = out_extent(w, spec.window, spec.stride)?;
    if grad_out.shape() != [b, c, oh, ow] {
        return Err(Error::Consistency(format!(
            "pool gradient shape {:?} does not match output [{b}, {c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut grad = vec![0.0; b * c * h * w];
    let g = grad_out.data();
    match spec.kind {
        PoolKind::Max => {
            let am = argmax
                .filter(|am| am.len() == g.len())
                .ok_or_else(|| Error::Consistency("max-pool backward needs argmax indices".into()))?;
            for (o, &idx) in am.iter().enumerate() {
                grad[idx] += g[o];
            }
        }
        PoolKind::Average => {
            let area = (spec.window * spec.window) as f64;
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = g[(plane * oh + oy) * ow + ox] / area;
                        let (y0, x0) = (oy * spec.stride, ox * spec.stride);
                        for dy in 0..spec.window {
                            for dx in 0..spec.window {
                                grad[base + (y0 + dy) * w + x0 + dx] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, grad)
}

/// Per-position window sums of squared activity, `S[i] = Σ_{j ∈ window(i)} a[j]²`.
/// Bank-major loops keep the innermost loop over contiguous pixels.
fn lrn_window_sums(a: &Tensor, spec: &LrnSpec) -> Result<Vec<f64>> {
    let (b, banks, h, w) = dims4(a)?;
    let hw = h * w;
    let x = a.data();
    let mut sums = vec![0.0; x.len()];
    for n in 0..b {
        let img = n * banks * hw;
        for i in 0..banks {
            let (lo, hi) = spec.window(i, banks);
            let dst = img + i * hw;
            for j in lo..=hi {
                let src = img + j * hw;
                for p in 0..hw {
                    let v = x[src + p];
                    sums[dst + p] += v * v;
                }
            }
        }
    }
    Ok(sums)
}

/// `out[i] = a[i] / (1 + α Σ_{j=i-N/2}^{i+N/2} a[j]²)^β` at every position.
pub fn lrn_forward(a: &Tensor, spec: &LrnSpec) -> Result<Tensor> {
    spec.validate()?;
    let sums = lrn_window_sums(a, spec)?;
    let data = a
        .data()
        .iter()
        .zip(&sums)
        .map(|(v, s)| v / (1.0 + spec.alpha * s).powf(spec.beta))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Gradient of LRN with respect to its input activity, including the
/// cross-bank term from the shared denominator.
pub fn lrn_backward(a: &Tensor, spec: &LrnSpec, grad_out: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    if grad_out.shape() != a.shape() {
        return Err(Error::Consistency("LRN gradient shape mismatch".into()));
    }
    let (b, banks, h, w) = dims4(a)?;
    let hw = h * w;
    let sums = lrn_window_sums(a, spec)?;
    let x = a.data();
    let g = grad_out.data();
    // t[i] = g[i] a[i] D[i]^(-β-1)
    let mut grad = vec![0.0; x.len()];
    let mut t = vec![0.0; x.len()];
    for idx in 0..x.len() {
        let d = 1.0 + spec.alpha * sums[idx];
        grad[idx] = g[idx] * d.powf(-spec.beta);
        t[idx] = g[idx] * x[idx] * d.powf(-spec.beta - 1.0);
    }
    let coef = 2.0 * spec.alpha * spec.beta;
    for n in 0..b {
        let img = n * banks * hw;
        for k in 0..banks {
            // Windows are symmetric, so k ∈ window(i) ⇔ i ∈ window(k).
            let (lo, hi) = spec.window(k, banks);
            for i in lo..=hi {
                for p in 0..hw {
                    grad[img + k * hw + p] -= coef * x[img + k * hw + p] * t[img + i * hw + p];
                }
            }
        }
    }
    Tensor::from_vec(a.shape(), grad)
}

/// Declarative description of one stage of a convolutional front-end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StageSpec {
    Conv {
        banks: usize,
        fh: usize,
        fw: usize,
        stride: usize,
    },
    Local {
        banks: usize,
        fh: usize,
        fw: usize,
        stride: usize,
    },
    Relu,
    Pool(PoolSpec),
    Lrn(LrnSpec),
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageSpec::Conv { banks, fh, fw, stride } => {
                write!(f, "conv:{banks}x{fh}x{fw}/{stride}")
            }
            StageSpec::Local { banks, fh, fw, stride } => {
                write!(f, "local:{banks}x{fh}x{fw}/{stride}")
            }
            StageSpec::Relu => f.write_str("relu"),
            StageSpec::Pool(p) => {
                let kind = match p.kind {
                    PoolKind::Max => "max",
                    PoolKind::Average => "avg",
                };
                write!(f, "pool:{kind}:{}/{}", p.window, p.stride)
            }
            StageSpec::Lrn(l) => write!(f, "lrn:{}/{:?}/{:?}", l.width, l.alpha, l.beta),
        }
    }
}

impl FromStr for StageSpec {
    type Err = Error;

    /// Parses `conv:16x5x5/1`, `local:16x3x3/1`, `relu`, `pool:max:3/2`,
    /// `pool:avg:3/2`, `lrn:9/0.001/0.75`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse stage '{s}'"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let s = s.trim();
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "relu" if rest.is_empty() => Ok(StageSpec::Relu),
            "conv" | "local" => {
                let (dims, stride) = rest.split_once('/').unwrap_or((rest, "1"));
                let parts: Vec<&str> = dims.split('x').collect();
                if parts.len() != 3 {
                    return Err(bad());
                }
                let (banks, fh, fw, stride) =
                    (num(parts[0])?, num(parts[1])?, num(parts[2])?, num(stride)?);
                if kind == "conv" {
                    Ok(StageSpec::Conv { banks, fh, fw, stride })
                } else {
                    Ok(StageSpec::Local { banks, fh, fw, stride })
                }
            }
            "pool" => {
                let (k, geom) = rest.split_once(':').ok_or_else(bad)?;
                let kind = match k {
                    "max" => PoolKind::Max,
                    "avg" | "average" => PoolKind::Average,
                    _ => return Err(bad()),
                };
                let (window, stride) = geom.split_once('/').ok_or_else(bad)?;
                Ok(StageSpec::Pool(PoolSpec {
                    kind,
                    window: num(window)?,
                    stride: num(stride)?,
                }))
            }
            "lrn" => {
                let parts: Vec<&str> = rest.split('/').collect();
                if parts.len() != 3 {
                    return Err(bad());
                }
                let spec = LrnSpec {
                    width: num(parts[0])?,
                    alpha: parts[1].trim().parse().map_err(|_| bad())?,
                    beta: parts[2].trim().parse().map_err(|_| bad())?,
                };
                spec.validate().map_err(|_| bad())?;
                Ok(StageSpec::Lrn(spec))
            }
            _ => Err(bad()),
        }
    }
}

/// One realized stage of a convolutional front-end.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Conv(ConvLayer),
    Local(LocalLayer),
    Relu,
    Pool(PoolSpec),
    Lrn(LrnSpec),
}

impl Stage {
    pub fn spec(&self) -> StageSpec {
        match self {
            Stage::Conv(l) => {
                let (banks, _, fh, fw) = l.dims();
                StageSpec::Conv { banks, fh, fw, stride: l.stride }
            }
            Stage::Local(l) => {
                let (banks, _, _, _, fh, fw) = l.dims();
                StageSpec::Local { banks, fh, fw, stride: l.stride }
            }
            Stage::Relu => StageSpec::Relu,
            Stage::Pool(p) => StageSpec::Pool(*p),
            Stage::Lrn(l) => StageSpec::Lrn(*l),
        }
    }
}

/// Parameter gradients of one stage (empty for parameter-free stages).
#[derive(Debug, Clone, PartialEq)]
pub struct StageGrads {
    pub filters: Option<Tensor>,
    pub biases: Option<Tensor>,
}

/// Intermediate values recorded by [`ConvStack::forward`].
#[derive(Debug, Clone)]
pub struct ConvTrace {
    /// Input of every stage, in order.
    pub inputs: Vec<Tensor>,
    pub argmax: Vec<Option<Vec<usize>>>,
    pub output: Tensor,
}

/// Sequence of convolutional-front-end stages applied to `[C, H, W]` images.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub input_shape: [usize; 3],
    pub stages: Vec<Stage>,
}

impl ConvStack {
    /// Realizes `specs` for images of `input_shape`. Conv and local filters
    /// are drawn from N(0, sd²) with `sd` doubled from `init_sd` until at
    /// least half of the layer's pre-activations on `probe` are positive;
    /// biases start at `bias_init`.
    pub fn build(
        input_shape: [usize; 3],
        specs: &[StageSpec],
        init_sd: f64,
        bias_init: f64,
        probe: Option<&Tensor>,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        let mut probe_act = probe.cloned();
        for spec in specs {
            let stage = match *spec {
                StageSpec::Conv { banks, fh, fw, stride } => {
                    let make = |rng: &mut RandomSource, sd: f64| -> Result<Stage> {
                        let filters = rng.gauss_sample(0.0, sd, &[banks, shape[0], fh, fw])?;
                        Ok(Stage::Conv(ConvLayer::new(
                            filters,
                            Tensor::filled(&[banks], bias_init),
                            stride,
                        )?))
                    };
                    init_until_active(make, init_sd, probe_act.as_ref(), rng)?
                }
                StageSpec::Local { banks, fh, fw, stride } => {
                    let oh = out_extent(shape[1], fh, stride)?;
                    let ow = out_extent(shape[2], fw, stride)?;
                    let make = |rng: &mut RandomSource, sd: f64| -> Result<Stage> {
                        let filters =
                            rng.gauss_sample(0.0, sd, &[banks, oh, ow, shape[0], fh, fw])?;
                        Ok(Stage::Local(LocalLayer::new(
                            filters,
                            Tensor::filled(&[banks], bias_init),
                            stride,
                        )?))
                    };
                    init_until_active(make, init_sd, probe_act.as_ref(), rng)?
                }
                StageSpec::Relu => Stage::Relu,
                StageSpec::Pool(p) => Stage::Pool(p),
                StageSpec::Lrn(l) => Stage::Lrn(l),
            };
            let probe_shape = [1, shape[0], shape[1], shape[2]];
            let dummy = Tensor::zeros(&probe_shape);
            let out = stage_forward(&stage, probe_act.as_ref().unwrap_or(&dummy))?.0;
            let s = out.shape();
            shape = [s[1], s[2], s[3]];
            if probe_act.is_some() {
                probe_act = Some(out);
            }
            stages.push(stage);
        }
        Ok(ConvStack { input_shape, stages })
    }

    /// `[C, H, W]` of the stack's output.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        let [c, h, w] = self.input_shape;
        let mut shape = [c, h, w];
        for stage in &self.stages {
            shape = match stage {
                Stage::Conv(l) => {
                    let (banks, fc, fh, fw) = l.dims();
                    if fc != shape[0] {
                        return Err(Error::shape("conv stage channel mismatch"));
                    }
                    [banks, out_extent(shape[1], fh, l.stride)?, out_extent(shape[2], fw, l.stride)?]
                }
                Stage::Local(l) => {
                    let (banks, oh, ow, fc, fh, fw) = l.dims();
                    if fc != shape[0]
                        || out_extent(shape[1], fh, l.stride)? != oh
                        || out_extent(shape[2], fw, l.stride)? != ow
                    {
                        return Err(Error::shape("local stage geometry mismatch"));
                    }
                    [banks, oh, ow]
                }
                Stage::Pool(p) => [
                    shape[0],
                    out_extent(shape[1], p.window, p.stride)?,
                    out_extent(shape[2], p.window, p.stride)?,
                ],
                Stage::Relu | Stage::Lrn(_) => shape,
            };
        }
        Ok(shape)
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }

    /// Runs every stage. `input` is `[batch, C·H·W]` or `[batch, C, H, W]`;
    /// the output is flattened to `[batch, features]`.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ConvTrace)> {
        let [c, h, w] = self.input_shape;
        let batch = input.rows();
        if input.len() != batch * c * h * w {
            return Err(Error::shape(format!(
                "input {:?} does not hold [{c}, {h}, {w}] images",
                input.shape()
            )));
        }
        let mut x = input.clone().reshape(&[batch, c, h, w])?;
        let mut inputs = Vec::with_capacity(self.stages.len());
        let mut argmax = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (out, am) = stage_forward(stage, &x)?;
            inputs.push(x);
            argmax.push(am);
            x = out;
        }
        let features = x.len() / batch.max(1);
        let flat = x.clone().reshape(&[batch, features])?;
        Ok((
            flat,
            ConvTrace {
                inputs,
                argmax,
                output: x,
            },
        ))
    }
}

fn init_until_active(
    make: impl Fn(&mut RandomSource, f64) -> Result<Stage>,
    init_sd: f64,
    probe: Option<&Tensor>,
    rng: &mut RandomSource,
) -> Result<Stage> {
    let mut sd = init_sd;
    for _ in 0..20 {
        let stage = make(rng, sd)?;
        let Some(x) = probe else {
            return Ok(stage);
        };
        let z = stage_forward(&stage, x)?.0;
        let positive = z.data().iter().filter(|&&v| v > 0.0).count();
        if 2 * positive >= z.len() {
            return Ok(stage);
        }
        sd *= 2.0;
    }
    Err(Error::Numeric(
        "could not find an init variance giving positive inputs to half the units".into(),
    ))
}

fn stage_forward(stage: &Stage, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
    match stage {
        Stage::Conv(l) => Ok((conv2d_forward(x, l)?, None)),
        Stage::Local(l) => Ok((local_forward(x, l)?, None)),
        Stage::Relu => Ok((x.map(|v| v.max(0.0)), None)),
        Stage::Pool(p) => pool_forward(x, p),
        Stage::Lrn(l) => Ok((lrn_forward(x, l)?, None)),
    }
}

/// Backpropagates `grad_output` (shaped like the stack output, flat or 4-D)
/// through every stage. Returns the input gradient (`[batch, C, H, W]`) and
/// per-stage parameter gradients.
pub fn convnet_backward(
    stack: &ConvStack,
    trace: &ConvTrace,
    grad_output: &Tensor,
) -> Result<(Tensor, Vec<StageGrads>)> {
    if trace.inputs.len() != stack.stages.len() || grad_output.len() != trace.output.len() {
        return Err(Error::Consistency(
            "trace does not match this stack or gradient".into(),
        ));
    }
    let mut g = grad_output.clone().reshape(trace.output.shape())?;
    let mut grads = vec![
        StageGrads {
            filters: None,
            biases: None
        };
        stack.stages.len()
    ];
    for (idx, stage) in stack.stages.iter().enumerate().rev() {
        let x = &trace.inputs[idx];
        g = match stage {
            Stage::Conv(l) => {
                let (gi, gf, gb) = conv2d_backward(x, l, &g)?;
                grads[idx] = StageGrads {
                    filters: Some(gf),
                    biases: Some(gb),
                };
                gi
            }
            Stage::Local(l) => {
                let (gi, gf, gb) = local_backward(x, l, &g)?;
                grads[idx] = StageGrads {
                    filters: Some(gf),
                    biases: Some(gb),
                };
                gi
            }
            Stage::Relu => {
                let mut gi = g;
                for (v, &xi) in gi.data_mut().iter_mut().zip(x.data()) {
                    if xi <= 0.0 {
                        *v = 0.0;
                    }
                }
                gi
            }
            Stage::Pool(p) => pool_backward(x.shape(), p, trace.argmax[idx].as_deref(), &g)?,
            Stage::Lrn(l) => lrn_backward(x, l, &g)?,
        };
    }
    Ok((g, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(rows: &[Vec<f64>]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::from_vec(&[1, 1, h, w], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn identity_filter() {
        let mut rng = RandomSource::new(1);
        let x = rng.gauss_sample(0.0, 1.0, &[2, 1, 4, 5]).unwrap();
        let layer =
            ConvLayer::new(Tensor::filled(&[1, 1, 1, 1], 1.0), Tensor::filled(&[1], 0.25), 1)
                .unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        assert_eq!(y, x.map(|v| v + 0.25));
    }

    #[test]
    fn window_sum_filter() {
        let x = Tensor::filled(&[1, 1, 5, 5], 1.0);
        let layer =
            ConvLayer::new(Tensor::filled(&[1, 1, 3, 3], 1.0), Tensor::filled(&[1], 0.5), 1)
                .unwrap();
        let y = conv2d_forward(&x, &layer).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.5));
    }

    #[test]
    fn large_stride_output_grid() {
        // 11×11 filters with stride 4 over 224×224 give a 54×54 grid.
        assert_eq!(out_extent(224, 11, 4).unwrap(), 54);
        let x = Tensor::zeros(&[1, 1, 224, 224]);
        let layer =
            ConvLayer::new(Tensor::zeros(&[2, 1, 11, 11]), Tensor::zeros(&[2]), 4).unwrap();
        assert_eq!(conv2d_forward(&x, &layer).unwrap().shape(), &[1, 2, 54, 54]);
    }

    #[test]
    fn filter_larger_than_input() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let layer = ConvLayer::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1).unwrap();
        assert!(matches!(conv2d_forward(&x, &layer), Err(Error::Shape(_))));
    }

    #[test]
    fn connectivity_ignores_unlisted_channels() {
        let mut rng = RandomSource::new(2);
        let x = rng.gauss_sample(0.0, 1.0, &[1, 2, 4, 4]).unwrap();
        let filters = rng.gauss_sample(0.0, 1.0, &[1, 2, 3, 3]).unwrap();
        let grouped = ConvLayer::new(filters.clone(), Tensor::zeros(&[1]), 1)
            .unwrap()
            .with_connectivity(vec![vec![1]])
            .unwrap();
        let mut only_second = filters.clone();
        only_second.data_mut()[..9].iter_mut().for_each(|v| *v = 0.0);
        let plain = ConvLayer::new(only_second, Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(
            conv2d_forward(&x, &grouped).unwrap(),
            conv2d_forward(&x, &plain).unwrap()
        );
        let g = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let (_, gf, _) = conv2d_backward(&x, &grouped, &g).unwrap();
        assert!(gf.data()[..9].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn local_with_shared_filters_equals_conv() {
        let mut rng = RandomSource::new(3);
        let x = rng.gauss_sample(0.0, 1.0, &[2, 3, 6, 6]).unwrap();
        let filters = rng.gauss_sample(0.0, 1.0, &[16, 3, 3, 3]).unwrap();
        let biases = rng.gauss_sample(0.0, 1.0, &[16]).unwrap();
        let conv = ConvLayer::new(filters.clone(), biases.clone(), 1).unwrap();
        let (oh, ow) = (4, 4);
        let plen = 27;
        let mut local = vec![0.0; 16 * oh * ow * plen];
        for k in 0..16 {
            for pos in 0..oh * ow {
                local[(k * oh * ow + pos) * plen..][..plen]
                    .copy_from_slice(&filters.data()[k * plen..(k + 1) * plen]);
            }
        }
        let local = LocalLayer::new(
            Tensor::from_vec(&[16, oh, ow, 3, 3, 3], local).unwrap(),
            biases,
            1,
        )
        .unwrap();
        let a = conv2d_forward(&x, &conv).unwrap();
        let b = local_forward(&x, &local).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn constant_average_pool() {
        let x = Tensor::filled(&[1, 2, 5, 5], 3.25);
        let spec = PoolSpec {
            kind: PoolKind::Average,
            window: 3,
            stride: 2,
        };
        let (y, am) = pool_forward(&x, &spec).unwrap();
        assert!(am.is_none());
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn overlapping_max_pool_by_hand() {
        // 5×5 grid holding 1..=25 row-major; 3×3 windows at stride 2 start at
        // (0,0), (0,2), (2,0), (2,2) and their maxima are their bottom-right cells.
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|r| (0..5).map(|c| (r * 5 + c + 1) as f64).collect())
            .collect();
        let x = image(&rows);
        let spec = PoolSpec {
            kind: PoolKind::Max,
            window: 3,
            stride: 2,
        };
        assert!(spec.is_overlapping());
        let (y, am) = pool_forward(&x, &spec).unwrap();
        assert_eq!(y.data(), &[13.0, 15.0, 23.0, 25.0]);
        assert_eq!(am.unwrap(), vec![12, 14, 22, 24]);
    }

    #[test]
    fn max_pool_ties_take_first_in_scan_order() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let spec = PoolSpec {
            kind: PoolKind::Max,
            window: 2,
            stride: 1,
        };
        let (_, am) = pool_forward(&x, &spec).unwrap();
        assert_eq!(am.unwrap(), vec![0, 1, 3, 4]);
    }

    #[test]
    fn average_pool_backward_spreads_uniformly() {
        let spec = PoolSpec {
            kind: PoolKind::Average,
            window: 2,
            stride: 2,
        };
        let g = Tensor::from_vec(&[1, 1, 1, 1], vec![8.0]).unwrap();
        let gi = pool_backward(&[1, 1, 2, 2], &spec, None, &g).unwrap();
        assert_eq!(gi.data(), &[2.0; 4]);
    }

    #[test]
    fn pool_window_too_large() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let spec = PoolSpec {
            kind: PoolKind::Max,
            window: 3,
            stride: 1,
        };
        assert!(matches!(pool_forward(&x, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn lrn_alpha_zero_is_identity() {
        let mut rng = RandomSource::new(4);
        let x = rng.gauss_sample(0.0, 2.0, &[2, 5, 3, 3]).unwrap();
        let spec = LrnSpec {
            width: 3,
            alpha: 0.0,
            beta: 0.75,
        };
        assert_eq!(lrn_forward(&x, &spec).unwrap(), x);
    }

    #[test]
    fn lrn_single_bank_by_hand() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let spec = LrnSpec {
            width: 1,
            alpha: 1.0,
            beta: 1.0,
        };
        let y = lrn_forward(&x, &spec).unwrap();
        assert!((y.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn lrn_defaults_and_window() {
        let d = LrnSpec::default();
        assert_eq!((d.width, d.alpha, d.beta), (9, 0.001, 0.75));
        assert_eq!(d.window(0, 16), (0, 4));
        assert_eq!(d.window(8, 16), (4, 12));
        assert_eq!(d.window(15, 16), (11, 15));
        let even = LrnSpec { width: 4, ..d };
        assert_eq!(even.window(5, 16), (3, 7));
    }

    #[test]
    fn lrn_equal_activity_gives_equal_outputs() {
        let x = Tensor::filled(&[1, 12, 2, 2], 1.7);
        let spec = LrnSpec::default();
        let y = lrn_forward(&x, &spec).unwrap();
        // Banks 4..=7 have full windows, so their outputs are bitwise equal.
        let at = |k: usize| y.data()[k * 4];
        for k in 5..=7 {
            assert_eq!(at(k).to_bits(), at(4).to_bits());
        }
        // A window covering every bank makes all outputs equal.
        let wide = LrnSpec { width: 23, ..spec };
        let y = lrn_forward(&x, &wide).unwrap();
        assert!(y.data().iter().all(|v| v.to_bits() == y.data()[0].to_bits()));
    }

    #[test]
    fn stage_spec_round_trip() {
        for s in ["conv:16x5x5/1", "local:16x3x3/2", "relu", "pool:max:3/2", "pool:avg:2/2", "lrn:9/0.001/0.75"] {
            let spec: StageSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("pool:sum:3/2".parse::<StageSpec>().is_err());
        assert!("conv:3x3/1".parse::<StageSpec>().is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_everywhere() {
        let mut rng = RandomSource::new(5);
        let probe = rng.gauss_sample(0.0, 1.0, &[2, 2, 8, 8]).unwrap();
        let specs: Vec<StageSpec> = ["conv:3x3x3/1", "relu", "pool:max:2/2", "lrn:3/0.1/0.75", "local:2x2x2/1"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let stack = ConvStack::build([2, 8, 8], &specs, 0.1, 0.0, None, &mut rng).unwrap();
        let (out, trace) = stack.forward(&probe).unwrap();
        let (gi, grads) = convnet_backward(&stack, &trace, &Tensor::zeros(out.shape())).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        for g in grads {
            for t in g.filters.iter().chain(g.biases.iter()) {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_rule_reaches_half_positive_and_sets_biases() {
        let mut rng = RandomSource::new(6);
        let probe = rng.gauss_sample(0.5, 1.0, &[4, 1, 8, 8]).unwrap();
        let specs = ["conv:8x3x3/1".parse().unwrap()];
        let stack = ConvStack::build([1, 8, 8], &specs, 0.01, 1.0, Some(&probe), &mut rng).unwrap();
        let Stage::Conv(layer) = &stack.stages[0] else {
            panic!("expected conv stage");
        };
        assert!(layer.biases.data().iter().all(|&b| b == 1.0));
        let z = conv2d_forward(&probe, layer).unwrap();
        let positive = z.data().iter().filter(|&&v| v > 0.0).count();
        assert!(2 * positive >= z.len());
    }

    #[test]
    fn trace_mismatch_is_rejected() {
        let mut rng = RandomSource::new(7);
        let stack = ConvStack::build([1, 4, 4], &["relu".parse().unwrap()], 0.1, 0.0, None, &mut rng)
            .unwrap();
        let (out, mut trace) = stack.forward(&Tensor::zeros(&[1, 16])).unwrap();
        trace.inputs.clear();
        assert!(matches!(
            convnet_backward(&stack, &trace, &out),
            Err(Error::Consistency(_))
        ));
    }
}
