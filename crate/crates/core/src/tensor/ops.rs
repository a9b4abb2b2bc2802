//! Differentiable primitives.
//!
//! The single-input forms (`matmul`, `conv2d_valid`, `maxpool2`, `relu`) return a
//! [`DualResult`] carrying a backward closure. The `*_batch` forms are the
//! kernels the network engine calls directly on `N×C×H×W` batches.

use std::fmt;

use super::kernels::{col2im_acc, im2col, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::Tensor;
use crate::error::{Error, Result};

type BackwardFn = dyn Fn(&Tensor) -> Result<Vec<Tensor>> + Send + Sync;

/// Output of a primitive plus the map from an upstream gradient to one
/// gradient per input (in argument order).
pub struct DualResult {
    pub output: Tensor,
    backward: Box<BackwardFn>,
}

impl DualResult {
    fn new(output: Tensor, backward: Box<BackwardFn>) -> Self {
        Self { output, backward }
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<Vec<Tensor>> {
        if upstream.shape() != self.output.shape() {
            return Err(Error::Dimension(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                upstream.shape(),
                self.output.shape()
            )));
        }
        (self.backward)(upstream)
    }
}

impl fmt::Debug for DualResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DualResult")
            .field("output", &self.output)
            .finish_non_exhaustive()
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<DualResult> {
    let [m, p] = a.dims2()?;
    let [p2, n] = b.dims2()?;
    if p != p2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, p, n);
    let output = Tensor::new(vec![m, n], out)?;

    let (a, b) = (a.clone(), b.clone());
    Ok(DualResult::new(
        output,
        Box::new(move |up| {
            // grad_a = up · bᵀ, grad_b = aᵀ · up
            let mut ga = vec![0.0; m * p];
            matmul_a_bt_acc(up.data(), b.data(), &mut ga, m, n, p);
            let mut gb = vec![0.0; p * n];
            matmul_at_b_acc(a.data(), up.data(), &mut gb, m, p, n);
            Ok(vec![Tensor::new(vec![m, p], ga)?, Tensor::new(vec![p, n], gb)?])
        }),
    ))
}

fn conv_dims(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<ConvDims> {
    let [n, c, h, w] = input.dims4()?;
    let [f, kc, kh, kw] = kernels.dims4()?;
    if kc != c {
        return Err(Error::Dimension(format!(
            "conv channel mismatch: input {:?}, kernels {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    if kh > h || kw > w {
        return Err(Error::Dimension(format!(
            "conv kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::Dimension(format!(
            "conv bias shape {:?} does not match {f} filters",
            bias.shape()
        )));
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
    })
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    fn oh(&self) -> usize {
        self.h - self.kh + 1
    }
    fn ow(&self) -> usize {
        self.w - self.kw + 1
    }
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Valid cross-correlation, stride 1: `N×C×H×W` with `F×C×Kh×Kw` kernels.
pub fn conv2d_forward_batch(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = conv_dims(input, kernels, bias)?;
    let (oh, ow, patch) = (d.oh(), d.ow(), d.patch());
    let plane = oh * ow;
    let in_stride = d.c * d.h * d.w;
    let out_stride = d.f * plane;
    let mut out = vec![0.0; d.n * out_stride];
    let mut cols = vec![0.0; patch * plane];
    for s in 0..d.n {
        im2col(
            &input.data()[s * in_stride..(s + 1) * in_stride],
            (d.c, d.h, d.w),
            (d.kh, d.kw),
            &mut cols,
        );
        let dst = &mut out[s * out_stride..(s + 1) * out_stride];
        for (fi, &b) in bias.data().iter().enumerate() {
            dst[fi * plane..(fi + 1) * plane].fill(b);
        }
        matmul_acc(kernels.data(), &cols, dst, d.f, patch, plane);
    }
    Tensor::new(vec![d.n, d.f, oh, ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward_batch(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    upstream: &Tensor,
    want_input_grad: bool,
) -> Result<ConvGrads> {
    let d = conv_dims(input, kernels, bias)?;
    let (oh, ow, patch) = (d.oh(), d.ow(), d.patch());
    let plane = oh * ow;
    if upstream.shape() != [d.n, d.f, oh, ow] {
        return Err(Error::Dimension(format!(
            "conv upstream shape {:?}, expected {:?}",
            upstream.shape(),
            [d.n, d.f, oh, ow]
        )));
    }
    let in_stride = d.c * d.h * d.w;
    let out_stride = d.f * plane;
    let mut gk = vec![0.0; d.f * patch];
    let mut gb = vec![0.0; d.f];
    let mut gi = want_input_grad.then(|| vec![0.0; d.n * in_stride]);
    let mut cols = vec![0.0; patch * plane];
    let mut gcols = vec![0.0; patch * plane];
    for s in 0..d.n {
        let up = &upstream.data()[s * out_stride..(s + 1) * out_stride];
        for (fi, g) in gb.iter_mut().enumerate() {
            *g += up[fi * plane..(fi + 1) * plane].iter().sum::<f64>();
        }
        im2col(
            &input.data()[s * in_stride..(s + 1) * in_stride],
            (d.c, d.h, d.w),
            (d.kh, d.kw),
            &mut cols,
        );
        matmul_a_bt_acc(up, &cols, &mut gk, d.f, plane, patch);
        if let Some(gi) = gi.as_mut() {
            gcols.fill(0.0);
            matmul_at_b_acc(kernels.data(), up, &mut gcols, d.f, patch, plane);
            col2im_acc(
                &gcols,
                (d.c, d.h, d.w),
                (d.kh, d.kw),
                &mut gi[s * in_stride..(s + 1) * in_stride],
            );
        }
    }
    Ok(ConvGrads {
        input: gi
            .map(|g| Tensor::new(input.shape().to_vec(), g))
            .transpose()?,
        kernels: Tensor::new(kernels.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![d.f], gb)?,
    })
}

/// Single-image convolution: `C×H×W` input, `F×C×Kh×Kw` kernels, `F` bias.
pub fn conv2d_valid(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<DualResult> {
    let [c, h, w] = input.dims3()?;
    let batched = input.clone().reshape(&[1, c, h, w])?;
    let out = conv2d_forward_batch(&batched, kernels, bias)?;
    let [_, f, oh, ow] = out.dims4()?;
    let output = out.reshape(&[f, oh, ow])?;

    let (kernels, bias) = (kernels.clone(), bias.clone());
    Ok(DualResult::new(
        output,
        Box::new(move |up| {
            let up = up.clone().reshape(&[1, f, oh, ow])?;
            let g = conv2d_backward_batch(&batched, &kernels, &bias, &up, true)?;
            let gi = g
                .input
                .expect("input gradient requested")
                .reshape(&[c, h, w])?;
            Ok(vec![gi, g.kernels, g.bias])
        }),
    ))
}

/// For each pooled output, the flat index of the input element it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices(pub Vec<usize>);

/// 2×2 non-overlapping max pool over the last two axes of any tensor of rank ≥ 3.
/// Ties go to the first element in row-major window order.
pub fn maxpool2_forward_batch(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let shape = input.shape();
    if shape.len() < 3 {
        return Err(Error::Dimension(format!(
            "maxpool2 needs rank >= 3, got {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let planes = input.len() / (h * w);
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ph * pw);
    let mut idx = Vec::with_capacity(planes * ph * pw);
    let data = input.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ph {
            for ox in 0..pw {
                let top = base + 2 * oy * w + 2 * ox;
                let window = [top, top + 1, top + w, top + w + 1];
                let mut best = window[0];
                for &pos in &window[1..] {
                    if data[pos] > data[best] {
                        best = pos;
                    }
                }
                out.push(data[best]);
                idx.push(best);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = ph;
    out_shape[r - 1] = pw;
    Ok((Tensor::new(out_shape, out)?, PoolIndices(idx)))
}

pub fn maxpool2_backward_batch(
    upstream: &Tensor,
    indices: &PoolIndices,
    input_shape: &[usize],
) -> Result<Tensor> {
    if upstream.len() != indices.0.len() {
        return Err(Error::Dimension(format!(
            "maxpool2 upstream has {} elements, expected {}",
            upstream.len(),
            indices.0.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&pos, &u) in indices.0.iter().zip(upstream.data()) {
        g[pos] += u;
    }
    Ok(grad)
}

/// 2×2 max pool of a single `C×H×W` tensor.
pub fn maxpool2(input: &Tensor) -> Result<DualResult> {
    input.dims3()?;
    let (output, indices) = maxpool2_forward_batch(input)?;
    let input_shape = input.shape().to_vec();
    Ok(DualResult::new(
        output,
        Box::new(move |up| Ok(vec![maxpool2_backward_batch(up, &indices, &input_shape)?])),
    ))
}

pub fn relu(input: &Tensor) -> Result<DualResult> {
    let mut out = input.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let input = input.clone();
    Ok(DualResult::new(
        out,
        Box::new(move |up| {
            let mut g = up.clone();
            for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            }
            Ok(vec![g])
        }),
    ))
}

/// Row-wise max-subtracted softmax of a `B×C` tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [b, c] = logits.dims2()?;
    let mut out = logits.clone();
    for r in 0..b {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
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
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient `(p − onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, c] = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(Error::Label {
            index,
            label,
            classes: c,
        });
    }
    let mut grad = softmax(logits)?;
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        g[label] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv_b);
    }
    Ok((loss * inv_b, grad))
}
