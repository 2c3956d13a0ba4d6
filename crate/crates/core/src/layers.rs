//! Layer kernels: forward, vector-Jacobian product, parameter gradients, and
//! Jacobian-vector product.
//!
//! Every kernel works on a single sample. Spatial tensors are `[C, H, W]`;
//! dense layers consume and produce rank-1 tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    Relu,
    Maxpool2d,
    GlobalAveragePool,
    Dense,
    Flatten,
    Softmax,
}

/// One node of a static layer graph, including its learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        /// `[out_ch, in_ch, kh, kw]`
        weight: Tensor,
        /// `[out_ch]`
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense {
        /// `[out, in]`
        weight: Tensor,
        /// `[out]`
        bias: Tensor,
    },
    Flatten,
    Softmax,
}

/// Gradient of a scalar with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerGrad {
    pub fn add_scaled(&mut self, other: &LayerGrad, factor: f64) -> Result<()> {
        self.weight.add_assign_scaled(&other.weight, factor)?;
        self.bias.add_assign_scaled(&other.bias, factor)
    }
}

struct ConvGeom {
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Output positions `lo..hi` along one axis whose input coordinate
    /// `out * stride + k - padding` falls inside `0..extent`, with the input
    /// coordinate of `lo`.
    #[inline]
    fn span(&self, k: usize, extent: usize, out_len: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if extent + p <= k {
            return (0, 0, 0);
        }
        let hi = ((extent - 1 + p - k) / s + 1).min(out_len);
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo, hi, lo * s + k - p)
    }
}

/// `dst[i] += a * src[i * step]` over `dst`.
#[inline]
fn axpy_strided(dst: &mut [f64], a: f64, src: &[f64], step: usize) {
    if step == 1 {
        for (d, &x) in dst.iter_mut().zip(src) {
            *d += a * x;
        }
    } else {
        for (d, &x) in dst.iter_mut().zip(src.iter().step_by(step)) {
            *d += a * x;
        }
    }
}

/// `dst[i * step] += a * src[i]` over `src`.
#[inline]
fn scatter_strided(dst: &mut [f64], a: f64, src: &[f64], step: usize) {
    if step == 1 {
        for (d, &x) in dst.iter_mut().zip(src) {
            *d += a * x;
        }
    } else {
        for (d, &x) in dst.iter_mut().step_by(step).zip(src) {
            *d += a * x;
        }
    }
}

#[inline]
fn dot_strided(a: &[f64], b: &[f64], step: usize) -> f64 {
    if step == 1 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    } else {
        a.iter()
            .zip(b.iter().step_by(step))
            .map(|(x, y)| x * y)
            .sum()
    }
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2d { .. } => LayerKind::Maxpool2d,
            Layer::GlobalAvgPool => LayerKind::GlobalAveragePool,
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn conv2d(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let layer = Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        };
        layer.check_params()?;
        Ok(layer)
    }

    pub fn dense(weight: Tensor, bias: Tensor) -> Result<Self> {
        let layer = Layer::Dense { weight, bias };
        layer.check_params()?;
        Ok(layer)
    }

    pub(crate) fn check_params(&self) -> Result<()> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                ..
            } => {
                if weight.ndim() != 4 || bias.shape() != [weight.shape()[0]] {
                    return Err(Error::invalid(format!(
                        "conv2d parameters must be [out, in, kh, kw] and [out], got {:?} and {:?}",
                        weight.shape(),
                        bias.shape()
                    )));
                }
                if *stride == 0 {
                    return Err(Error::invalid("conv2d stride must be positive"));
                }
            }
            Layer::Dense { weight, bias } => {
                if weight.ndim() != 2 || bias.shape() != [weight.shape()[0]] {
                    return Err(Error::invalid(format!(
                        "dense parameters must be [out, in] and [out], got {:?} and {:?}",
                        weight.shape(),
                        bias.shape()
                    )));
                }
            }
            Layer::MaxPool2d { size, stride } if *size == 0 || *stride == 0 => {
                return Err(Error::invalid("maxpool size and stride must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Dense { .. })
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub fn zero_grad(&self) -> Option<LayerGrad> {
        self.params().map(|(w, b)| LayerGrad {
            weight: Tensor::zeros(w.shape()),
            bias: Tensor::zeros(b.shape()),
        })
    }

    /// Output shape for a given input shape, or `None` if the input is
    /// incompatible with this layer.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let [c, h, w] = *input else { return None };
                let ws = weight.shape();
                if ws[1] != c || h + 2 * padding < ws[2] || w + 2 * padding < ws[3] {
                    return None;
                }
                let oh = (h + 2 * padding - ws[2]) / stride + 1;
                let ow = (w + 2 * padding - ws[3]) / stride + 1;
                Some(vec![ws[0], oh, ow])
            }
            Layer::Relu | Layer::Softmax => Some(input.to_vec()),
            Layer::MaxPool2d { size, stride } => {
                let [c, h, w] = *input else { return None };
                if h < *size || w < *size {
                    return None;
                }
                Some(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            Layer::GlobalAvgPool => {
                let [c, _, _] = *input else { return None };
                Some(vec![c])
            }
            Layer::Dense { weight, .. } => {
                let [n] = *input else { return None };
                (n == weight.shape()[1]).then(|| vec![weight.shape()[0]])
            }
            Layer::Flatten => Some(vec![input.iter().product()]),
        }
    }

    fn conv_geom(&self, input: &Tensor) -> ConvGeom {
        let Layer::Conv2d {
            weight,
            stride,
            padding,
            ..
        } = self
        else {
            unreachable!("conv geometry requested for a non-conv layer")
        };
        let s = input.shape();
        let ws = weight.shape();
        ConvGeom {
            in_ch: s[0],
            in_h: s[1],
            in_w: s[2],
            out_ch: ws[0],
            kh: ws[2],
            kw: ws[3],
            out_h: (s[1] + 2 * padding - ws[2]) / stride + 1,
            out_w: (s[2] + 2 * padding - ws[3]) / stride + 1,
            stride: *stride,
            padding: *padding,
        }
    }

    /// Applies the layer. Input shape must already be validated.
    pub(crate) fn forward(&self, input: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d { weight, bias, .. } => {
                let g = self.conv_geom(input);
                let mut out = conv_linear(&g, weight, input);
                let plane = g.out_h * g.out_w;
                for (o, chunk) in out.chunks_mut(plane).enumerate() {
                    let b = bias.data()[o];
                    chunk.iter_mut().for_each(|v| *v += b);
                }
                Tensor::from_raw(vec![g.out_ch, g.out_h, g.out_w], out)
            }
            Layer::Relu => input.map(|v| v.max(0.0)),
            Layer::MaxPool2d { .. } => {
                let (shape, idx) = self.pool_argmax(input);
                let data = idx.iter().map(|&i| input.data()[i]).collect();
                Tensor::from_raw(shape, data)
            }
            Layer::GlobalAvgPool => {
                let s = input.shape();
                let plane = s[1] * s[2];
                let data = input
                    .data()
                    .chunks(plane)
                    .map(|c| c.iter().sum::<f64>() / plane as f64)
                    .collect();
                Tensor::from_raw(vec![s[0]], data)
            }
            Layer::Dense { weight, bias } => {
                let mut out = dense_linear(weight, input.data());
                for (o, b) in out.iter_mut().zip(bias.data()) {
                    *o += b;
                }
                Tensor::from_raw(vec![out.len()], out)
            }
            Layer::Flatten => Tensor::from_raw(vec![input.len()], input.data().to_vec()),
            Layer::Softmax => Tensor::from_raw(input.shape().to_vec(), softmax(input.data())),
        }
    }

    /// For each pooled output element, the flat input index of its (first)
    /// maximum.
    fn pool_argmax(&self, input: &Tensor) -> (Vec<usize>, Vec<usize>) {
        let Layer::MaxPool2d { size, stride } = *self else {
            unreachable!("pool argmax requested for a non-pool layer")
        };
        let s = input.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let oh = (h - size) / stride + 1;
        let ow = (w - size) / stride + 1;
        let x = input.data();
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + oy * stride * w + ox * stride;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = ch * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    idx.push(best);
                }
            }
        }
        (vec![c, oh, ow], idx)
    }

    /// Vector-Jacobian product: maps the gradient w.r.t. this layer's output
    /// to the gradient w.r.t. its input. `output` is the forward output.
    pub(crate) fn backward(&self, input: &Tensor, output: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d { weight, .. } => {
                let g = self.conv_geom(input);
                let mut grad_in = vec![0.0; input.len()];
                let w = weight.data();
                let go = grad_out.data();
                for o in 0..g.out_ch {
                    for c in 0..g.in_ch {
                        for ky in 0..g.kh {
                            let (oy0, oy1, iy0) = g.span(ky, g.in_h, g.out_h);
                            for kx in 0..g.kw {
                                let wv = w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                                let (ox0, ox1, ix0) = g.span(kx, g.in_w, g.out_w);
                                for oy in oy0..oy1 {
                                    let iy = iy0 + (oy - oy0) * g.stride;
                                    let go_row = &go[(o * g.out_h + oy) * g.out_w..][ox0..ox1];
                                    let gi_row = &mut grad_in[(c * g.in_h + iy) * g.in_w + ix0
                                        ..(c * g.in_h + iy + 1) * g.in_w];
                                    scatter_strided(gi_row, wv, go_row, g.stride);
                                }
                            }
                        }
                    }
                }
                Tensor::from_raw(input.shape().to_vec(), grad_in)
            }
            Layer::Relu => Tensor::from_raw(
                input.shape().to_vec(),
                input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            Layer::MaxPool2d { .. } => {
                let (_, idx) = self.pool_argmax(input);
                let mut grad_in = vec![0.0; input.len()];
                for (&i, &g) in idx.iter().zip(grad_out.data()) {
                    grad_in[i] += g;
                }
                Tensor::from_raw(input.shape().to_vec(), grad_in)
            }
            Layer::GlobalAvgPool => {
                let s = input.shape();
                let plane = s[1] * s[2];
                let inv = 1.0 / plane as f64;
                Tensor::from_fn(s, |i| grad_out.data()[i / plane] * inv)
            }
            Layer::Dense { weight, .. } => {
                let (out_n, in_n) = (weight.shape()[0], weight.shape()[1]);
                let mut grad_in = vec![0.0; in_n];
                for o in 0..out_n {
                    let g = grad_out.data()[o];
                    let row = &weight.data()[o * in_n..][..in_n];
                    for (gi, &wv) in grad_in.iter_mut().zip(row) {
                        *gi += g * wv;
                    }
                }
                Tensor::from_raw(vec![in_n], grad_in)
            }
            Layer::Flatten => Tensor::from_raw(input.shape().to_vec(), grad_out.data().to_vec()),
            Layer::Softmax => {
                let y = output.data();
                let dot: f64 = y.iter().zip(grad_out.data()).map(|(a, b)| a * b).sum();
                Tensor::from_raw(
                    input.shape().to_vec(),
                    y.iter()
                        .zip(grad_out.data())
                        .map(|(&yv, &g)| yv * (g - dot))
                        .collect(),
                )
            }
        }
    }

    /// Accumulates the parameter gradient given the layer input and the
    /// gradient w.r.t. the layer output. No-op for parameterless layers.
    ///
    /// The bias gradient is only accumulated when `with_bias` is set; the
    /// tangent pass used for second-order terms has no bias dependence.
    pub(crate) fn accumulate_param_grad(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        acc: &mut LayerGrad,
        with_bias: bool,
    ) {
        match self {
            Layer::Conv2d { .. } => {
                let g = self.conv_geom(input);
                let x = input.data();
                let go = grad_out.data();
                let gw = acc.weight.data_mut();
                for o in 0..g.out_ch {
                    for c in 0..g.in_ch {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let mut s = 0.0;
                                let (oy0, oy1, iy0) = g.span(ky, g.in_h, g.out_h);
                                let (ox0, ox1, ix0) = g.span(kx, g.in_w, g.out_w);
                                for oy in oy0..oy1 {
                                    let iy = iy0 + (oy - oy0) * g.stride;
                                    let go_row = &go[(o * g.out_h + oy) * g.out_w..][ox0..ox1];
                                    let x_row = &x[(c * g.in_h + iy) * g.in_w + ix0
                                        ..(c * g.in_h + iy + 1) * g.in_w];
                                    s += dot_strided(go_row, x_row, g.stride);
                                }
                                gw[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx] += s;
                            }
                        }
                    }
                }
                if with_bias {
                    let plane = g.out_h * g.out_w;
                    for (o, chunk) in go.chunks(plane).enumerate() {
                        acc.bias.data_mut()[o] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Layer::Dense { .. } => {
                let in_n = input.len();
                let gw = acc.weight.data_mut();
                for (o, &g) in grad_out.data().iter().enumerate() {
                    let row = &mut gw[o * in_n..][..in_n];
                    for (w, &x) in row.iter_mut().zip(input.data()) {
                        *w += g * x;
                    }
                }
                if with_bias {
                    acc.bias
                        .add_assign_scaled(grad_out, 1.0)
                        .expect("bias shape");
                }
            }
            _ => {}
        }
    }

    /// Jacobian-vector product at `input`: the directional derivative of the
    /// layer output along `tangent`.
    pub(crate) fn jvp(&self, input: &Tensor, output: &Tensor, tangent: &Tensor) -> Tensor {
        match self {
            Layer::Conv2d { weight, .. } => {
                let g = self.conv_geom(input);
                Tensor::from_raw(
                    vec![g.out_ch, g.out_h, g.out_w],
                    conv_linear(&g, weight, tangent),
                )
            }
            Layer::Relu => input
                .zip_map(tangent, |x, t| if x > 0.0 { t } else { 0.0 })
                .expect("relu tangent shape"),
            Layer::MaxPool2d { .. } => {
                let (shape, idx) = self.pool_argmax(input);
                Tensor::from_raw(shape, idx.iter().map(|&i| tangent.data()[i]).collect())
            }
            Layer::GlobalAvgPool | Layer::Flatten => self.forward(tangent),
            Layer::Dense { weight, .. } => Tensor::from_raw(
                vec![weight.shape()[0]],
                dense_linear(weight, tangent.data()),
            ),
            Layer::Softmax => {
                let y = output.data();
                let dot: f64 = y.iter().zip(tangent.data()).map(|(a, b)| a * b).sum();
                Tensor::from_raw(
                    input.shape().to_vec(),
                    y.iter()
                        .zip(tangent.data())
                        .map(|(&yv, &t)| yv * (t - dot))
                        .collect(),
                )
            }
        }
    }

    /// True when the layer's Jacobian is locally constant in its input, so
    /// its second derivative vanishes almost everywhere.
    pub fn is_piecewise_linear(&self) -> bool {
        !matches!(self, Layer::Softmax)
    }
}

fn conv_linear(g: &ConvGeom, weight: &Tensor, input: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; g.out_ch * g.out_h * g.out_w];
    let w = weight.data();
    let x = input.data();
    for o in 0..g.out_ch {
        for c in 0..g.in_ch {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = w[((o * g.in_ch + c) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (oy0, oy1, iy0) = g.span(ky, g.in_h, g.out_h);
                    let (ox0, ox1, ix0) = g.span(kx, g.in_w, g.out_w);
                    for oy in oy0..oy1 {
                        let iy = iy0 + (oy - oy0) * g.stride;
                        let x_row =
                            &x[(c * g.in_h + iy) * g.in_w + ix0..(c * g.in_h + iy + 1) * g.in_w];
                        let out_row = &mut out[(o * g.out_h + oy) * g.out_w..][ox0..ox1];
                        axpy_strided(out_row, wv, x_row, g.stride);
                    }
                }
            }
        }
    }
    out
}

fn dense_linear(weight: &Tensor, x: &[f64]) -> Vec<f64> {
    let in_n = weight.shape()[1];
    weight
        .data()
        .chunks(in_n)
        .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `log(softmax(logits))`, computed without forming the probabilities.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct nested-loop convolution, no shared code with the kernel.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.chw().unwrap();
        let ws = w.shape();
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xx * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                s += w.data()[((oc * c + ic) * kh + ky) * kw + kx]
                                    * x.data()[(ic * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + y) * ow + xx] = s;
                }
            }
        }
        Tensor::new(vec![o, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_2x2_diagonal_kernel() {
        let layer =
            Layer::conv2d(t(&[1, 1, 2, 2], &[1., 0., 0., 1.]), t(&[1], &[0.]), 1, 0).unwrap();
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(
            y,
            naive_conv(&x, &t(&[1, 1, 2, 2], &[1., 0., 0., 1.]), &[0.], 1, 0)
        );
    }

    #[test]
    fn conv_identity_1x1() {
        let layer = Layer::conv2d(t(&[1, 1, 1, 1], &[1.]), t(&[1], &[0.]), 1, 0).unwrap();
        let x = Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.7 - 2.0);
        assert_eq!(layer.forward(&x), x);
    }

    #[test]
    fn conv_matches_naive_with_stride_and_padding() {
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0);
        let b = [0.5, -0.25, 1.0];
        let x = Tensor::from_fn(&[2, 7, 6], |i| ((i * 13 % 17) as f64 - 8.0) / 3.0);
        for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)] {
            let layer = Layer::conv2d(w.clone(), t(&[3], &b), stride, pad).unwrap();
            let expected = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(layer.output_shape(x.shape()).unwrap(), expected.shape());
            let got = layer.forward(&x);
            for (a, e) in got.data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_backward_zero_at_negative_preactivation() {
        let x = t(&[2], &[-1.0, 2.0]);
        let y = Layer::Relu.forward(&x);
        let g = Layer::Relu.backward(&x, &y, &t(&[2], &[3.0, 4.0]));
        assert_eq!(g.data(), &[0.0, 4.0]);
    }

    #[test]
    fn dense_backward_is_weight_row() {
        let w = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let layer = Layer::dense(w, t(&[2], &[0., 0.])).unwrap();
        let x = t(&[3], &[0.1, 0.2, 0.3]);
        let y = layer.forward(&x);
        let g = layer.backward(&x, &y, &t(&[2], &[0., 1.]));
        assert_eq!(g.data(), &[4., 5., 6.]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let layer = Layer::MaxPool2d { size: 2, stride: 2 };
        let x = t(&[1, 2, 2], &[1., 4., 3., 2.]);
        let y = layer.forward(&x);
        assert_eq!(y.data(), &[4.]);
        let g = layer.backward(&x, &y, &t(&[1, 1, 1], &[2.]));
        assert_eq!(g.data(), &[0., 2., 0., 0.]);
    }

    #[test]
    fn bad_param_shapes_rejected() {
        assert!(Layer::dense(t(&[2, 3], &[0.; 6]), t(&[3], &[0.; 3])).is_err());
        assert!(Layer::conv2d(t(&[2, 3], &[0.; 6]), t(&[2], &[0.; 2]), 1, 0).is_err());
        assert!(Layer::conv2d(t(&[1, 1, 1, 1], &[0.]), t(&[1], &[0.]), 0, 0).is_err());
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let ls = log_softmax(&[1.0, 2.0, 3.0]);
        let p = softmax(&[1.0, 2.0, 3.0]);
        for (a, b) in ls.iter().zip(p) {
            assert!((a.exp() - b).abs() < 1e-15);
        }
    }
}
