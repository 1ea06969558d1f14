//! Layer recipes and their forward/backward kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::ops::{col2im, gemm, im2col, ConvGeom, Mat};
use crate::tensor::Tensor;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

fn one() -> usize {
    1
}

/// Declarative description of one layer. Networks are built from a list of
/// these, so architectures live in configuration rather than code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    /// Transposed convolution; weights are laid out `(in_ch, out_ch, k, k)`.
    ConvTranspose2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f32,
    },
    Tanh,
    Sigmoid,
    /// Row-wise `max(ln p, floor) + offset`, then shifted so the row minimum
    /// is non-negative. Expects rank-1 items.
    LogConfidence {
        floor: f32,
        offset: f32,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Reshape each item (the batch dimension is kept).
    Reshape {
        shape: Vec<usize>,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        #[serde(default)]
        shortcut: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    /// Per-item output shape for a per-item input shape.
    pub fn infer(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(NnError::Recipe(msg));
        match self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return bad(format!("conv2d expects (C,H,W), got {input:?}"));
                };
                if c != *in_ch {
                    return bad(format!("conv2d expects {in_ch} channels, got {c}"));
                }
                let g = ConvGeom::new(c, h, w, *kernel, *stride, *padding)
                    .ok_or_else(|| NnError::Recipe(format!("conv2d kernel {kernel} too large for {h}x{w}")))?;
                Ok(vec![*out_ch, g.out_h, g.out_w])
            }
            LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let &[c, h, w] = input else {
                    return bad(format!("conv_transpose2d expects (C,H,W), got {input:?}"));
                };
                if c != *in_ch {
                    return bad(format!("conv_transpose2d expects {in_ch} channels, got {c}"));
                }
                let oh = ((h - 1) * stride + kernel).checked_sub(2 * padding);
                let ow = ((w - 1) * stride + kernel).checked_sub(2 * padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![*out_ch, oh, ow]),
                    _ => bad("conv_transpose2d padding too large".into()),
                }
            }
            LayerSpec::Linear { inputs, outputs } => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != *inputs {
                    return bad(format!("linear expects ({inputs},), got {input:?}"));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::BatchNorm2d { channels } => match input {
                [c, _, _] if c == channels => Ok(input.to_vec()),
                _ => bad(format!("batch_norm2d({channels}) cannot take {input:?}")),
            },
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => {
                Ok(input.to_vec())
            }
            LayerSpec::LogConfidence { .. } => match input {
                [_] => Ok(input.to_vec()),
                _ => bad(format!("log_confidence expects (C,), got {input:?}")),
            },
            LayerSpec::MaxPool2d { kernel, stride } => {
                let &[c, h, w] = input else {
                    return bad(format!("max_pool2d expects (C,H,W), got {input:?}"));
                };
                if h < *kernel || w < *kernel || *stride == 0 {
                    return bad(format!("max_pool2d kernel {kernel} too large for {h}x{w}"));
                }
                Ok(vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerSpec::GlobalAvgPool => match input {
                [c, _, _] => Ok(vec![*c]),
                _ => bad(format!("global_avg_pool expects (C,H,W), got {input:?}")),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return bad(format!("cannot reshape {input:?} to {shape:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::Residual { body, shortcut } => {
                let a = infer_chain(body, input)?;
                let b = infer_chain(shortcut, input)?;
                if a != b {
                    return bad(format!("residual branches disagree: {a:?} vs {b:?}"));
                }
                Ok(a)
            }
        }
    }
}

pub(crate) fn infer_chain(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    specs
        .iter()
        .try_fold(input.to_vec(), |shape, spec| spec.infer(&shape))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization layers.
    Train,
    /// Running statistics for normalization layers.
    Eval,
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm2d {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
    LogConfidence(f32, f32),
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    Reshape(Vec<usize>),
    Residual {
        body: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Cache {
    Input(Tensor),
    Output(Tensor),
    Norm {
        xhat: Tensor,
        inv_std: Vec<f32>,
        batch_mean: Vec<f32>,
        batch_var: Vec<f32>,
        train: bool,
    },
    Pool {
        argmax: Vec<u32>,
        input_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
    Residual {
        body: Vec<Cache>,
        shortcut: Vec<Cache>,
    },
}

fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

impl Layer {
    pub fn build(spec: &LayerSpec, rng: &mut impl Rng) -> Layer {
        match spec {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let bound = 1.0 / ((in_ch * kernel * kernel) as f32).sqrt();
                Layer::Conv2d {
                    weight: uniform(&[*out_ch, *in_ch, *kernel, *kernel], bound, rng),
                    bias: uniform(&[*out_ch], bound, rng),
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::ConvTranspose2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                let bound = 1.0 / ((out_ch * kernel * kernel) as f32).sqrt();
                Layer::ConvTranspose2d {
                    weight: uniform(&[*in_ch, *out_ch, *kernel, *kernel], bound, rng),
                    bias: uniform(&[*out_ch], bound, rng),
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::Linear { inputs, outputs } => {
                let bound = 1.0 / (*inputs as f32).sqrt();
                Layer::Linear {
                    weight: uniform(&[*outputs, *inputs], bound, rng),
                    bias: uniform(&[*outputs], bound, rng),
                }
            }
            LayerSpec::BatchNorm2d { channels } => Layer::BatchNorm2d {
                gamma: Tensor::full(&[*channels], 1.0),
                beta: Tensor::zeros(&[*channels]),
                running_mean: Tensor::zeros(&[*channels]),
                running_var: Tensor::full(&[*channels], 1.0),
            },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(*slope),
            LayerSpec::Tanh => Layer::Tanh,
            LayerSpec::Sigmoid => Layer::Sigmoid,
            LayerSpec::LogConfidence { floor, offset } => Layer::LogConfidence(*floor, *offset),
            LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool2d {
                kernel: *kernel,
                stride: *stride,
            },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Reshape { shape } => Layer::Reshape(shape.clone()),
            LayerSpec::Residual { body, shortcut } => Layer::Residual {
                body: body.iter().map(|s| Layer::build(s, rng)).collect(),
                shortcut: shortcut.iter().map(|s| Layer::build(s, rng)).collect(),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv2d { .. }
            | Layer::ConvTranspose2d { .. }
            | Layer::Linear { .. }
            | Layer::BatchNorm2d { .. } => 2,
            Layer::Residual { body, shortcut } => body
                .iter()
                .chain(shortcut.iter())
                .map(Layer::param_count)
                .sum(),
            _ => 0,
        }
    }

    pub fn collect_params<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        match self {
            Layer::Conv2d { weight, bias, .. }
            | Layer::ConvTranspose2d { weight, bias, .. }
            | Layer::Linear { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Layer::BatchNorm2d { gamma, beta, .. } => {
                out.push(gamma);
                out.push(beta);
            }
            Layer::Residual { body, shortcut } => {
                for l in body.iter().chain(shortcut.iter()) {
                    l.collect_params(out);
                }
            }
            _ => {}
        }
    }

    pub fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Layer::Conv2d { weight, bias, .. }
            | Layer::ConvTranspose2d { weight, bias, .. }
            | Layer::Linear { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Layer::BatchNorm2d { gamma, beta, .. } => {
                out.push(gamma);
                out.push(beta);
            }
            Layer::Residual { body, shortcut } => {
                for l in body.iter_mut().chain(shortcut.iter_mut()) {
                    l.collect_params_mut(out);
                }
            }
            _ => {}
        }
    }

    pub fn collect_buffers<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        match self {
            Layer::BatchNorm2d {
                running_mean,
                running_var,
                ..
            } => {
                out.push(running_mean);
                out.push(running_var);
            }
            Layer::Residual { body, shortcut } => {
                for l in body.iter().chain(shortcut.iter()) {
                    l.collect_buffers(out);
                }
            }
            _ => {}
        }
    }

    pub fn collect_buffers_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        match self {
            Layer::BatchNorm2d {
                running_mean,
                running_var,
                ..
            } => {
                out.push(running_mean);
                out.push(running_var);
            }
            Layer::Residual { body, shortcut } => {
                for l in body.iter_mut().chain(shortcut.iter_mut()) {
                    l.collect_buffers_mut(out);
                }
            }
            _ => {}
        }
    }

    /// Fold batch statistics recorded in `cache` into the running estimates.
    pub fn update_running_stats(&mut self, cache: &Cache) {
        match (self, cache) {
            (
                Layer::BatchNorm2d {
                    running_mean,
                    running_var,
                    ..
                },
                Cache::Norm {
                    batch_mean,
                    batch_var,
                    train: true,
                    ..
                },
            ) => {
                for (r, &m) in running_mean.data_mut().iter_mut().zip(batch_mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                for (r, &v) in running_var.data_mut().iter_mut().zip(batch_var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: cb, shortcut: cs }) => {
                for (l, c) in body.iter_mut().zip(cb) {
                    l.update_running_stats(c);
                }
                for (l, c) in shortcut.iter_mut().zip(cs) {
                    l.update_running_stats(c);
                }
            }
            _ => {}
        }
    }

    pub fn forward(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let y = conv2d_forward(&x, weight, bias, *stride, *padding)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::ConvTranspose2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let y = conv_t_forward(&x, weight, bias, *stride, *padding)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::Linear { weight, bias } => {
                let (n, din) = x.dims2()?;
                let dout = weight.shape()[0];
                if weight.shape()[1] != din {
                    return Err(NnError::Shape(format!(
                        "linear expects {} inputs, got {din}",
                        weight.shape()[1]
                    )));
                }
                let mut y = Tensor::zeros(&[n, dout]);
                for row in y.data_mut().chunks_mut(dout) {
                    row.copy_from_slice(bias.data());
                }
                gemm(
                    x.data(),
                    Mat::row_major(n, din),
                    weight.data(),
                    Mat::transposed(dout, din),
                    1.0,
                    y.data_mut(),
                    Mat::row_major(n, dout),
                );
                Ok((y, Cache::Input(x)))
            }
            Layer::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
            } => batch_norm_forward(x, gamma, beta, running_mean, running_var, mode),
            Layer::Relu => {
                let y = x.map(|v| v.max(0.0));
                Ok((y.clone(), Cache::Output(y)))
            }
            Layer::LeakyRelu(slope) => {
                let s = *slope;
                let y = x.map(|v| if v > 0.0 { v } else { s * v });
                Ok((y, Cache::Input(x)))
            }
            Layer::Tanh => {
                let y = x.map(f32::tanh);
                Ok((y.clone(), Cache::Output(y)))
            }
            Layer::Sigmoid => {
                let y = x.map(|v| 1.0 / (1.0 + (-v).exp()));
                Ok((y.clone(), Cache::Output(y)))
            }
            Layer::LogConfidence(floor, offset) => {
                let c = x.item_len();
                let mut y = x.map(|p| p.max(f32::MIN_POSITIVE).ln().max(*floor) + offset);
                for row in y.data_mut().chunks_mut(c.max(1)) {
                    let m = row.iter().cloned().fold(f32::INFINITY, f32::min);
                    if m < 0.0 {
                        row.iter_mut().for_each(|v| *v -= m);
                    }
                }
                Ok((y, Cache::Input(x)))
            }
            Layer::MaxPool2d { kernel, stride } => max_pool_forward(&x, *kernel, *stride),
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dims4()?;
                let hw = h * w;
                let mut y = Tensor::zeros(&[n, c]);
                for (o, plane) in y.data_mut().iter_mut().zip(x.data().chunks(hw)) {
                    *o = plane.iter().sum::<f32>() / hw as f32;
                }
                Ok((y, Cache::Shape(x.shape().to_vec())))
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let n = x.batch();
                let d = x.item_len();
                Ok((x.reshape(&[n, d])?, Cache::Shape(shape)))
            }
            Layer::Reshape(target) => {
                let shape = x.shape().to_vec();
                let mut s = vec![x.batch()];
                s.extend_from_slice(target);
                Ok((x.reshape(&s)?, Cache::Shape(shape)))
            }
            Layer::Residual { body, shortcut } => {
                let mut cb = Vec::with_capacity(body.len());
                let mut cs = Vec::with_capacity(shortcut.len());
                let mut a = x.clone();
                for l in body {
                    let (y, c) = l.forward(a, mode)?;
                    cb.push(c);
                    a = y;
                }
                let mut b = x;
                for l in shortcut {
                    let (y, c) = l.forward(b, mode)?;
                    cs.push(c);
                    b = y;
                }
                if a.shape() != b.shape() {
                    return Err(NnError::Shape(format!(
                        "residual branches disagree: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                a.add_assign(&b);
                Ok((a, Cache::Residual { body: cb, shortcut: cs }))
            }
        }
    }

    /// Backpropagate `grad` (gradient w.r.t. this layer's output).
    ///
    /// Parameter gradients are accumulated into `pgrads` when given; it must
    /// hold exactly `param_count()` tensors in parameter order. The input
    /// gradient is only computed when `need_input` is set.
    pub fn backward(
        &self,
        cache: &Cache,
        grad: Tensor,
        pgrads: Option<&mut [Tensor]>,
        need_input: bool,
    ) -> Result<Option<Tensor>> {
        match (self, cache) {
            (
                Layer::Conv2d {
                    weight,
                    stride,
                    padding,
                    ..
                },
                Cache::Input(x),
            ) => conv2d_backward(x, weight, *stride, *padding, &grad, pgrads, need_input),
            (
                Layer::ConvTranspose2d {
                    weight,
                    stride,
                    padding,
                    ..
                },
                Cache::Input(x),
            ) => conv_t_backward(x, weight, *stride, *padding, &grad, pgrads, need_input),
            (Layer::Linear { weight, .. }, Cache::Input(x)) => {
                let (n, din) = x.dims2()?;
                let dout = weight.shape()[0];
                if let Some(pg) = pgrads {
                    let (gw, rest) = pg.split_at_mut(1);
                    gemm(
                        grad.data(),
                        Mat::transposed(n, dout),
                        x.data(),
                        Mat::row_major(n, din),
                        1.0,
                        gw[0].data_mut(),
                        Mat::row_major(dout, din),
                    );
                    let gb = rest[0].data_mut();
                    for row in grad.data().chunks(dout) {
                        for (b, g) in gb.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                }
                if !need_input {
                    return Ok(None);
                }
                let mut dx = Tensor::zeros(&[n, din]);
                gemm(
                    grad.data(),
                    Mat::row_major(n, dout),
                    weight.data(),
                    Mat::row_major(dout, din),
                    0.0,
                    dx.data_mut(),
                    Mat::row_major(n, din),
                );
                Ok(Some(dx))
            }
            (
                Layer::BatchNorm2d { gamma, .. },
                Cache::Norm {
                    xhat,
                    inv_std,
                    train,
                    ..
                },
            ) => batch_norm_backward(gamma, xhat, inv_std, *train, grad, pgrads, need_input),
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = grad;
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(Some(g))
            }
            (Layer::LeakyRelu(slope), Cache::Input(x)) => {
                let mut g = grad;
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv *= slope;
                    }
                }
                Ok(Some(g))
            }
            (Layer::Tanh, Cache::Output(y)) => {
                let mut g = grad;
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= 1.0 - yv * yv;
                }
                Ok(Some(g))
            }
            (Layer::Sigmoid, Cache::Output(y)) => {
                let mut g = grad;
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= yv * (1.0 - yv);
                }
                Ok(Some(g))
            }
            (Layer::LogConfidence(floor, offset), Cache::Input(x)) => {
                let c = x.item_len().max(1);
                let mut g = grad;
                for (gr, xr) in g.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
                    let l: Vec<f32> = xr.iter().map(|p| p.max(f32::MIN_POSITIVE).ln().max(*floor)).collect();
                    let (am, m) = l
                        .iter()
                        .enumerate()
                        .fold((0, f32::INFINITY), |(ai, av), (i, &v)| if v < av { (i, v) } else { (ai, av) });
                    if m + offset < 0.0 {
                        let total: f32 = gr.iter().sum();
                        gr[am] -= total;
                    }
                    for ((gv, &p), &lv) in gr.iter_mut().zip(xr).zip(&l) {
                        *gv = if lv > *floor && p > 0.0 { *gv / p } else { 0.0 };
                    }
                }
                Ok(Some(g))
            }
            (Layer::MaxPool2d { .. }, Cache::Pool { argmax, input_shape }) => {
                let mut dx = Tensor::zeros(input_shape);
                let n = input_shape[0];
                let in_len = dx.item_len();
                let out_len = grad.len() / n.max(1);
                for i in 0..n {
                    let gi = &grad.data()[i * out_len..(i + 1) * out_len];
                    let ai = &argmax[i * out_len..(i + 1) * out_len];
                    let di = &mut dx.data_mut()[i * in_len..(i + 1) * in_len];
                    for (&g, &a) in gi.iter().zip(ai) {
                        di[a as usize] += g;
                    }
                }
                Ok(Some(dx))
            }
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => {
                let hw = shape[2] * shape[3];
                let mut dx = Tensor::zeros(shape);
                for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
                    plane.fill(g / hw as f32);
                }
                Ok(Some(dx))
            }
            (Layer::Flatten, Cache::Shape(shape)) | (Layer::Reshape(_), Cache::Shape(shape)) => {
                Ok(Some(grad.reshape(shape)?))
            }
            (Layer::Residual { body, shortcut }, Cache::Residual { body: cb, shortcut: cs }) => {
                let nb: usize = body.iter().map(Layer::param_count).sum();
                let (mut pg_body, mut pg_short) = match pgrads {
                    Some(pg) => {
                        let (a, b) = pg.split_at_mut(nb);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let short_grad = if shortcut.is_empty() {
                    grad.clone()
                } else {
                    backward_chain(shortcut, cs, grad.clone(), pg_short.as_deref_mut(), true)?
                        .expect("input gradient requested")
                };
                let body_grad = backward_chain(body, cb, grad, pg_body.as_deref_mut(), true)?
                    .expect("input gradient requested");
                let mut g = body_grad;
                g.add_assign(&short_grad);
                Ok(Some(g))
            }
            _ => Err(NnError::Shape("cache does not match layer".into())),
        }
    }
}

/// Backward through a chain of layers, splitting `pgrads` per layer.
pub(crate) fn backward_chain(
    layers: &[Layer],
    caches: &[Cache],
    grad: Tensor,
    mut pgrads: Option<&mut [Tensor]>,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for l in layers {
        offsets.push(acc);
        acc += l.param_count();
    }
    let mut g = grad;
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let n = layer.param_count();
        let slot = pgrads
            .as_deref_mut()
            .map(|pg| &mut pg[offsets[i]..offsets[i] + n]);
        let want = need_input || i > 0;
        match layer.backward(&caches[i], g, slot, want)? {
            Some(next) => g = next,
            None => return Ok(None),
        }
    }
    Ok(Some(g))
}

fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let ws = weight.shape();
    let (oc, k) = (ws[0], ws[2]);
    if ws[1] != c {
        return Err(NnError::Shape(format!("conv2d expects {} channels, got {c}", ws[1])));
    }
    let g = ConvGeom::new(c, h, w, k, stride, padding)
        .ok_or_else(|| NnError::Shape(format!("conv2d kernel {k} too large for {h}x{w}")))?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut y = Tensor::zeros(&[n, oc, g.out_h, g.out_w]);
    for i in 0..n {
        im2col(x.item(i), &g, &mut col);
        let yi = y.item_mut(i);
        for (plane, &b) in yi.chunks_mut(cols).zip(bias.data()) {
            plane.fill(b);
        }
        gemm(
            weight.data(),
            Mat::row_major(oc, rows),
            &col,
            Mat::row_major(rows, cols),
            1.0,
            yi,
            Mat::row_major(oc, cols),
        );
    }
    Ok(y)
}

fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad: &Tensor,
    pgrads: Option<&mut [Tensor]>,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let (n, c, h, w) = x.dims4()?;
    let oc = weight.shape()[0];
    let k = weight.shape()[2];
    let g = ConvGeom::new(c, h, w, k, stride, padding).expect("validated in forward");
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut col = vec![0.0; rows * cols];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut pgrads = pgrads;
    for i in 0..n {
        let gi = grad.item(i);
        if let Some(pg) = pgrads.as_deref_mut() {
            im2col(x.item(i), &g, &mut col);
            let (gw, rest) = pg.split_at_mut(1);
            gemm(
                gi,
                Mat::row_major(oc, cols),
                &col,
                Mat::transposed(rows, cols),
                1.0,
                gw[0].data_mut(),
                Mat::row_major(oc, rows),
            );
            for (b, plane) in rest[0].data_mut().iter_mut().zip(gi.chunks(cols)) {
                *b += plane.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                weight.data(),
                Mat::transposed(oc, rows),
                gi,
                Mat::row_major(oc, cols),
                0.0,
                &mut col,
                Mat::row_major(rows, cols),
            );
            col2im(&col, &g, dx.item_mut(i));
        }
    }
    Ok(dx)
}

fn conv_t_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, ic, h, w) = x.dims4()?;
    let ws = weight.shape();
    let (oc, k) = (ws[1], ws[2]);
    if ws[0] != ic {
        return Err(NnError::Shape(format!(
            "conv_transpose2d expects {} channels, got {ic}",
            ws[0]
        )));
    }
    let oh = (h - 1) * stride + k - 2 * padding;
    let ow = (w - 1) * stride + k - 2 * padding;
    let g = ConvGeom::new(oc, oh, ow, k, stride, padding).expect("consistent geometry");
    debug_assert_eq!((g.out_h, g.out_w), (h, w));
    let rows = g.col_rows();
    let hw = h * w;
    let mut col = vec![0.0; rows * hw];
    let mut y = Tensor::zeros(&[n, oc, oh, ow]);
    for i in 0..n {
        gemm(
            weight.data(),
            Mat::transposed(ic, rows),
            x.item(i),
            Mat::row_major(ic, hw),
            0.0,
            &mut col,
            Mat::row_major(rows, hw),
        );
        let yi = y.item_mut(i);
        for (plane, &b) in yi.chunks_mut(oh * ow).zip(bias.data()) {
            plane.fill(b);
        }
        col2im(&col, &g, yi);
    }
    Ok(y)
}

fn conv_t_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad: &Tensor,
    pgrads: Option<&mut [Tensor]>,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let (n, ic, h, w) = x.dims4()?;
    let (_, oc, oh, ow) = grad.dims4()?;
    let k = weight.shape()[2];
    let g = ConvGeom::new(oc, oh, ow, k, stride, padding).expect("consistent geometry");
    let rows = g.col_rows();
    let hw = h * w;
    let mut col = vec![0.0; rows * hw];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut pgrads = pgrads;
    for i in 0..n {
        let gi = grad.item(i);
        im2col(gi, &g, &mut col);
        if let Some(pg) = pgrads.as_deref_mut() {
            let (gw, rest) = pg.split_at_mut(1);
            gemm(
                x.item(i),
                Mat::row_major(ic, hw),
                &col,
                Mat::transposed(rows, hw),
                1.0,
                gw[0].data_mut(),
                Mat::row_major(ic, rows),
            );
            for (b, plane) in rest[0].data_mut().iter_mut().zip(gi.chunks(oh * ow)) {
                *b += plane.iter().sum::<f32>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                weight.data(),
                Mat::row_major(ic, rows),
                &col,
                Mat::row_major(rows, hw),
                0.0,
                dx.item_mut(i),
                Mat::row_major(ic, hw),
            );
        }
    }
    Ok(dx)
}

fn batch_norm_forward(
    x: Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Cache)> {
    let (n, c, h, w) = x.dims4()?;
    if c != gamma.len() {
        return Err(NnError::Shape(format!("batch_norm expects {} channels, got {c}", gamma.len())));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let train = mode == Mode::Train;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    if train {
        for ch in 0..c {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for &v in &x.data()[off..off + hw] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let mu = s / m;
            mean[ch] = mu as f32;
            var[ch] = (s2 / m - mu * mu).max(0.0) as f32;
        }
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = x;
    let mut y = Tensor::zeros(xhat.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            let xs = &mut xhat.data_mut()[off..off + hw];
            let ys = &mut y.data_mut()[off..off + hw];
            for (xv, yv) in xs.iter_mut().zip(ys.iter_mut()) {
                *xv = (*xv - mu) * is;
                *yv = ga * *xv + be;
            }
        }
    }
    // running variance tracks the unbiased estimate
    let unbiased = if m > 1.0 { (m / (m - 1.0)) as f32 } else { 1.0 };
    let batch_var = var.iter().map(|v| v * unbiased).collect();
    Ok((
        y,
        Cache::Norm {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var,
            train,
        },
    ))
}

fn batch_norm_backward(
    gamma: &Tensor,
    xhat: &Tensor,
    inv_std: &[f32],
    train: bool,
    grad: Tensor,
    pgrads: Option<&mut [Tensor]>,
    need_input: bool,
) -> Result<Option<Tensor>> {
    let (n, c, h, w) = xhat.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f32;
    let mut sum_g = vec![0.0f32; c];
    let mut sum_gx = vec![0.0f32; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let gs = &grad.data()[off..off + hw];
            let xs = &xhat.data()[off..off + hw];
            let mut a = 0.0;
            let mut b = 0.0;
            for (&g, &x) in gs.iter().zip(xs) {
                a += g;
                b += g * x;
            }
            sum_g[ch] += a;
            sum_gx[ch] += b;
        }
    }
    if let Some(pg) = pgrads {
        for ch in 0..c {
            pg[0].data_mut()[ch] += sum_gx[ch];
            pg[1].data_mut()[ch] += sum_g[ch];
        }
    }
    if !need_input {
        return Ok(None);
    }
    let mut dx = grad;
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let scale = gamma.data()[ch] * inv_std[ch];
            let xs = &xhat.data()[off..off + hw];
            let ds = &mut dx.data_mut()[off..off + hw];
            if train {
                let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                for (d, &x) in ds.iter_mut().zip(xs) {
                    *d = scale * (*d - mg - x * mgx);
                }
            } else {
                for d in ds.iter_mut() {
                    *d *= scale;
                }
            }
        }
    }
    Ok(Some(dx))
}

fn max_pool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Cache)> {
    let (n, c, h, w) = x.dims4()?;
    if h < kernel || w < kernel {
        return Err(NnError::Shape(format!("max_pool kernel {kernel} too large for {h}x{w}")));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let plane_off = (i * c + ch) * h * w;
            let item_plane_off = ch * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = (r * stride + di) * w + q * stride + dj;
                            let v = xd[plane_off + idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((i * c + ch) * oh + r) * ow + q;
                    yd[o] = best;
                    argmax[o] = (item_plane_off + best_idx) as u32;
                }
            }
        }
    }
    Ok((
        y,
        Cache::Pool {
            argmax,
            input_shape: x.shape().to_vec(),
        },
    ))
}
