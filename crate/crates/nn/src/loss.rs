//! Losses with gradients. Every function returns the batch-mean loss plus
//! the gradient of that mean with respect to its first argument.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of a `(N, C)` logit tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (_, c) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c) {
        softmax_inplace(row);
    }
    Ok(out)
}

pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        *v = e as f32;
        sum += e;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

/// Per-row soft-target cross-entropy `-sum_i t_i log max(p_i, floor)` with
/// `p = softmax(logits)`.
pub fn soft_cross_entropy_rows(logits: &Tensor, targets: &Tensor, floor: f32) -> Result<Vec<f64>> {
    Ok(soft_ce_impl(logits, targets, floor, false)?.0)
}

/// Batch-mean soft-target cross-entropy and its gradient w.r.t. the logits.
///
/// Terms whose probability sits below `floor` contribute a constant, so
/// they carry no gradient.
pub fn soft_cross_entropy(logits: &Tensor, targets: &Tensor, floor: f32) -> Result<(f64, Tensor)> {
    let (rows, grad) = soft_ce_impl(logits, targets, floor, true)?;
    let n = rows.len().max(1) as f64;
    Ok((rows.iter().sum::<f64>() / n, grad.expect("gradient requested")))
}

fn soft_ce_impl(
    logits: &Tensor,
    targets: &Tensor,
    floor: f32,
    want_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    let (n, c) = logits.dims2()?;
    if targets.shape() != logits.shape() {
        return Err(NnError::Shape(format!(
            "targets {:?} do not match logits {:?}",
            targets.shape(),
            logits.shape()
        )));
    }
    let probs = softmax(logits)?;
    let mut rows = Vec::with_capacity(n);
    let mut grad = want_grad.then(|| Tensor::zeros(&[n, c]));
    let inv_n = 1.0 / n.max(1) as f32;
    for i in 0..n {
        let p = &probs.data()[i * c..(i + 1) * c];
        let t = &targets.data()[i * c..(i + 1) * c];
        let mut loss = 0.0f64;
        let mut active_mass = 0.0f32;
        for (&pj, &tj) in p.iter().zip(t) {
            if pj >= floor {
                active_mass += tj;
            }
            if tj != 0.0 {
                loss -= tj as f64 * (pj.max(floor) as f64).ln();
            }
        }
        rows.push(loss);
        if let Some(g) = grad.as_mut() {
            let gi = &mut g.data_mut()[i * c..(i + 1) * c];
            for j in 0..c {
                let own = if p[j] >= floor { t[j] } else { 0.0 };
                gi[j] = (p[j] * active_mass - own) * inv_n;
            }
        }
    }
    Ok((rows, grad))
}

/// Batch-mean hard-label cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(NnError::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let mut targets = Tensor::zeros(&[n, c]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(NnError::Shape(format!("label {l} out of range for {c} classes")));
        }
        targets.data_mut()[i * c + l] = 1.0;
    }
    soft_cross_entropy(logits, &targets, 0.0)
}

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut acc = 0.0f64;
    let scale = (2.0 / n) as f32;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        acc += (d as f64) * (d as f64);
        *g = scale * d;
    }
    Ok((acc / n, grad))
}

/// Per-item mean squared error (mean over the non-batch dimensions).
pub fn mse_rows(pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() {
        return Err(NnError::Shape(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let d = pred.item_len().max(1);
    Ok(pred
        .data()
        .chunks(d)
        .zip(target.data().chunks(d))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / d as f64
        })
        .collect())
}
