//! Inversion-model training under `L = L_r + lambda * L_s`.
//!
//! `L_r` compares the decoded image with the original (MSE, or negated
//! PSNR/SSIM). `L_s` is the soft-target cross-entropy between the
//! supervision vector and the frozen shadow model's prediction on the
//! decoded image; its gradient flows through the shadow into the decoder.

use advinv_nn::loss::soft_cross_entropy;
use advinv_nn::{Adam, AdamConfig, Mode, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::TrainingSet;
use crate::error::{invalid, CoreError, Result};
use crate::modelzoo::{ModelHandle, TrainConfig};
use crate::util;

/// Floor applied to probabilities inside the logarithm of `L_s`.
pub const PROB_FLOOR: f32 = 1e-12;
/// Floor applied to the MSE inside the PSNR logarithm.
const MSE_FLOOR: f64 = 1e-10;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconMetric {
    Mse,
    Psnr,
    Ssim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionLossConfig {
    pub lambda: f64,
    pub recon_metric: ReconMetric,
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.shape() != y.shape() {
        return invalid(format!("shape mismatch {:?} vs {:?}", x.shape(), y.shape()));
    }
    Ok(x.dims4()?)
}

/// Reconstruction loss (lower is better) and its gradient w.r.t. `xhat`.
///
/// * `mse`: mean squared difference over every pixel of the batch.
/// * `psnr`: mean over images of `10 log10(mse_i)`, i.e. negated PSNR at peak 1.
/// * `ssim`: negated mean SSIM (11-tap Gaussian window, sigma 1.5, valid region).
pub fn reconstruction_loss(x: &Tensor, xhat: &Tensor, metric: ReconMetric) -> Result<(f64, Tensor)> {
    let (n, _, _, _) = check_pair(x, xhat)?;
    match metric {
        ReconMetric::Mse => Ok(advinv_nn::loss::mse(xhat, x)?),
        ReconMetric::Psnr => {
            let d = x.item_len();
            let mut grad = Tensor::zeros(x.shape());
            let mut total = 0.0;
            for i in 0..n {
                let (a, b) = (x.item(i), xhat.item(i));
                let mse: f64 = a.iter().zip(b).map(|(p, q)| ((q - p) as f64).powi(2)).sum::<f64>() / d as f64;
                total += 10.0 * mse.max(MSE_FLOOR).log10();
                if mse > MSE_FLOOR {
                    let s = 10.0 / (std::f64::consts::LN_10 * mse) * 2.0 / d as f64 / n as f64;
                    for ((g, p), q) in grad.item_mut(i).iter_mut().zip(a).zip(b) {
                        *g = (s * (q - p) as f64) as f32;
                    }
                }
            }
            Ok((total / n as f64, grad))
        }
        ReconMetric::Ssim => {
            let (s, g) = ssim_with_grad(x, xhat, true)?;
            let mut g = g.expect("gradient requested");
            g.scale(-1.0);
            Ok((-s, g))
        }
    }
}

/// Mean SSIM between two batches.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(ssim_with_grad(x, y, false)?.0)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| g[t] * p[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(m: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = m[y * ow + x];
            for t in 0..k {
                rows[(y + t) * ow + x] += g[t] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for t in 0..k {
                out[y * w + x + t] += g[t] * v;
            }
        }
    }
    out
}

fn ssim_with_grad(x: &Tensor, y: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let (n, c, h, w) = check_pair(x, y)?;
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, 1.5);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let planes = n * c;
    let norm = (planes * oh * ow) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(x.shape()));
    let plane = h * w;
    for p in 0..planes {
        let xs: Vec<f64> = x.data()[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).collect();
        let ys: Vec<f64> = y.data()[p * plane..(p + 1) * plane].iter().map(|&v| v as f64).collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter_valid(&xs, h, w, &g);
        let my = filter_valid(&ys, h, w, &g);
        let mxx = filter_valid(&sq(&xs, &xs), h, w, &g);
        let myy = filter_valid(&sq(&ys, &ys), h, w, &g);
        let mxy = filter_valid(&sq(&xs, &ys), h, w, &g);
        let m = oh * ow;
        let (mut da, mut db, mut dc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for i in 0..m {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * (mxy[i] - ux * uy) + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = (mxx[i] - ux * ux) + (myy[i] - uy * uy) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            da[i] = s * (2.0 * ux / a1 - 2.0 * ux / a2 - 2.0 * uy / b1 + 2.0 * uy / b2);
            db[i] = s * 2.0 / a2;
            dc[i] = -s / b2;
        }
        if let Some(gt) = grad.as_mut() {
            let ga = filter_valid_adjoint(&da, h, w, &g);
            let gb = filter_valid_adjoint(&db, h, w, &g);
            let gc = filter_valid_adjoint(&dc, h, w, &g);
            let out = &mut gt.data_mut()[p * plane..(p + 1) * plane];
            for i in 0..plane {
                out[i] = ((ga[i] + xs[i] * gb[i] + 2.0 * ys[i] * gc[i]) / norm) as f32;
            }
        }
    }
    Ok((total / norm, grad))
}

/// Soft-target cross-entropy of the shadow's prediction on `xhat` against
/// `supervision`, averaged over the batch, and its gradient w.r.t. `xhat`.
/// The shadow's weights are never touched.
pub fn semantic_loss(xhat: &Tensor, supervision: &Tensor, shadow: &ModelHandle) -> Result<(f64, Tensor)> {
    if supervision.shape() != [xhat.batch(), shadow.num_classes()] {
        return invalid("supervision does not match the batch or the shadow's classes");
    }
    shadow.input_gradient(xhat, |logits| soft_cross_entropy(logits, supervision, PROB_FLOOR))
}

/// Semantic loss value per item (no gradient).
pub fn semantic_loss_rows(xhat: &Tensor, supervision: &Tensor, shadow: &ModelHandle) -> Result<Vec<f64>> {
    let logits = shadow.forward(xhat)?;
    Ok(advinv_nn::loss::soft_cross_entropy_rows(&logits, supervision, PROB_FLOOR)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionEpoch {
    pub epoch: usize,
    pub l_r: f64,
    /// Present whenever a shadow is supplied (also at lambda = 0).
    pub l_s: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionLog {
    pub epochs: Vec<InversionEpoch>,
}

/// Train the decoder on `(supervision -> image)` pairs.
///
/// With `lambda = 0` the shadow never enters the gradient, so the parameter
/// trajectory equals reconstruction-only training under the same seed.
pub fn train_inversion(
    inv: &mut ModelHandle,
    samples: &TrainingSet,
    shadow: Option<&ModelHandle>,
    loss: &InversionLossConfig,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&InversionEpoch, &ModelHandle) -> Result<()>,
) -> Result<InversionLog> {
    cfg.validate()?;
    if loss.lambda < 0.0 || !loss.lambda.is_finite() {
        return invalid("lambda must be a finite non-negative number");
    }
    if loss.lambda > 0.0 && shadow.is_none() {
        return invalid("a positive lambda needs a shadow model");
    }
    if samples.supervision.shape().get(1) != Some(&inv.num_classes()) {
        return invalid("supervision length differs from the decoder input");
    }
    let n = samples.len();
    let mut log = InversionLog::default();
    if cfg.epochs == 0 || n == 0 {
        return Ok(log);
    }
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &inv.net);
    let total_steps = n.div_ceil(cfg.batch_size) * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = util::rng(seed);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sr, mut ss, mut st) = (0.0, 0.0, 0.0);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = samples.images.select(idx);
            let sup = samples.supervision.select(idx);
            let (xhat, tape) = inv.net.forward_tape(&sup, Mode::Train)?;
            let (lr_val, mut grad) = reconstruction_loss(&x, &xhat, loss.recon_metric)?;
            let mut ls_val = None;
            if let Some(sh) = shadow {
                if loss.lambda > 0.0 {
                    let (v, mut gs) = semantic_loss(&xhat, &sup, sh)?;
                    gs.scale(loss.lambda as f32);
                    grad.add_assign(&gs);
                    ls_val = Some(v);
                } else {
                    let rows = semantic_loss_rows(&xhat, &sup, sh)?;
                    ls_val = Some(util::mean(&rows));
                }
            }
            let total = lr_val + loss.lambda * ls_val.unwrap_or(0.0);
            if !total.is_finite() || !grad.all_finite() {
                return Err(CoreError::Diverged(format!("non-finite inversion loss at epoch {epoch}, batch {bi}")));
            }
            let mut grads = inv.net.zero_grads();
            inv.net.backward(&tape, grad, Some(&mut grads), false)?;
            opt.set_lr(cfg.lr_at(step, total_steps));
            opt.step(&mut inv.net, &grads);
            inv.net.update_running_stats(&tape);
            step += 1;
            let m = idx.len() as f64;
            sr += lr_val * m;
            ss += ls_val.unwrap_or(0.0) * m;
            st += total * m;
        }
        let entry = InversionEpoch {
            epoch,
            l_r: sr / n as f64,
            l_s: shadow.map(|_| ss / n as f64),
            total: st / n as f64,
        };
        log::info!("inversion epoch {epoch}: L_r {:.5} L_s {:?} total {:.5}", entry.l_r, entry.l_s, entry.total);
        on_epoch(&entry, inv)?;
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Decode confidence vectors into images.
pub fn reconstruct(inv: &ModelHandle, supervision: &Tensor) -> Result<Tensor> {
    if supervision.rank() != 2 || supervision.shape()[1] != inv.num_classes() {
        return invalid(format!(
            "supervision {:?} does not match decoder input {}",
            supervision.shape(),
            inv.num_classes()
        ));
    }
    inv.forward(supervision)
}
