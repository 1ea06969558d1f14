//! FGSM adversarial training of target classifiers.

use std::path::Path;

use advinv_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::datahub::LabeledImages;
use crate::error::{invalid, Result};
use crate::modelzoo::{accuracy, fit, BatchTarget, ModelHandle, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    /// FGSM bound used during training.
    pub gamma: f32,
    /// Fraction of each batch replaced by its FGSM counterpart.
    #[serde(default = "half")]
    pub mix_ratio: f64,
}

fn half() -> f64 {
    0.5
}

impl DefenseConfig {
    pub fn new(gamma: f32) -> Self {
        Self { gamma, mix_ratio: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return invalid(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return invalid(format!("mix_ratio must lie in [0, 1], got {}", self.mix_ratio));
        }
        Ok(())
    }
}

/// `clip(x + gamma * sign(grad_x CE(model(x), labels)), 0, 1)`.
pub fn fgsm_step(model: &ModelHandle, x: &Tensor, labels: &[usize], gamma: f32) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return invalid("gamma must be positive");
    }
    if labels.len() != x.batch() {
        return invalid(format!("{} labels for {} images", labels.len(), x.batch()));
    }
    if labels.iter().any(|&l| l >= model.num_classes()) {
        return invalid("label outside the model's class range");
    }
    let (_, g) = model.input_gradient(x, |logits| advinv_nn::loss::cross_entropy(logits, labels))?;
    let mut out = x.clone();
    for (v, &d) in out.data_mut().iter_mut().zip(g.data()) {
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *v = (*v + gamma * s).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Accuracy on FGSM examples crafted against the model itself.
pub fn robust_accuracy(model: &ModelHandle, data: &LabeledImages, gamma: f32) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(256) {
        let labels: Vec<usize> = part.iter().map(|&i| data.labels[i]).collect();
        let adv = fgsm_step(model, &data.images.select(part), &labels, gamma)?;
        let pred = model.forward(&adv)?.argmax_rows();
        hits += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Train with a `mix_ratio` share of every batch replaced by FGSM examples
/// against the current weights. Each epoch logs `std_acc` and `rob_acc` on
/// `test` when given.
pub fn adversarial_train(
    model: &mut ModelHandle,
    data: &LabeledImages,
    test: Option<&LabeledImages>,
    def: &DefenseConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    def.validate()?;
    if data.labels.iter().any(|&l| l >= model.num_classes()) {
        return invalid("label outside the model's class range");
    }
    fit(
        model,
        data.len(),
        cfg,
        seed,
        |m, idx| {
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut x = data.images.select(idx);
            let n_adv = (idx.len() as f64 * def.mix_ratio).round() as usize;
            if n_adv > 0 {
                let head: Vec<usize> = (0..n_adv).collect();
                let adv = fgsm_step(m, &x.select(&head), &labels[..n_adv], def.gamma)?;
                let d = x.item_len();
                x.data_mut()[..n_adv * d].copy_from_slice(adv.data());
            }
            Ok((x, BatchTarget::Hard(labels)))
        },
        |m, e| {
            if let Some(t) = test {
                e.extra.insert("std_acc".into(), accuracy(m, t)?);
                e.extra.insert("rob_acc".into(), robust_accuracy(m, t, def.gamma)?);
            }
            Ok(())
        },
    )
}

/// One gamma of the defense sweep. Attack accuracies are keyed by the
/// evaluator kind: `nr` normally trained, `rob` adversarially trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefensePoint {
    pub gamma: f64,
    pub std_acc: f64,
    pub rob_acc: f64,
    pub nr_base: f64,
    pub rob_base: f64,
    pub nr_ours: f64,
    pub rob_ours: f64,
}

pub fn write_defense_curve(path: &Path, points: &[DefensePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_defense_curve(path: &Path) -> Result<Vec<DefensePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::{synthetic, SyntheticSpec};
    use crate::modelzoo::{build_model, ArchId, ModelShape};
    use advinv_nn::LayerSpec;

    fn two_pixel(w: [f32; 4], b: [f32; 2]) -> ModelHandle {
        let recipe = vec![LayerSpec::Flatten, LayerSpec::Linear { inputs: 2, outputs: 2 }];
        let shape = ModelShape::Classifier { image: vec![1, 1, 2], classes: 2 };
        let mut m = build_model(ArchId::SmallCnn3, shape, 1, Some(recipe), 0).unwrap();
        let mut p = m.net.params_mut();
        p[0].data_mut().copy_from_slice(&w);
        p[1].data_mut().copy_from_slice(&b);
        m
    }

    #[test]
    fn linear_model_matches_hand_computed_step() {
        // logits z = W x + b; d CE / d x = W^T (softmax(z) - e_y)
        let w = [1.0, -2.0, 3.0, 0.5];
        let m = two_pixel(w, [0.0, 0.1]);
        let x = Tensor::new(vec![2, 1, 1, 2], vec![0.5, 0.5, 0.98, 0.3]).unwrap();
        let labels = [0, 1];
        let gamma = 0.05;
        let out = fgsm_step(&m, &x, &labels, gamma).unwrap();
        for i in 0..2 {
            let xi = x.item(i);
            let z = [w[0] * xi[0] + w[1] * xi[1], w[2] * xi[0] + w[3] * xi[1] + 0.1];
            let mx = z[0].max(z[1]);
            let e = [(z[0] - mx).exp(), (z[1] - mx).exp()];
            let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            let r = [p[0] - (labels[i] == 0) as u8 as f32, p[1] - (labels[i] == 1) as u8 as f32];
            let g = [w[0] * r[0] + w[2] * r[1], w[1] * r[0] + w[3] * r[1]];
            for j in 0..2 {
                let want = (xi[j] + gamma * g[j].signum()).clamp(0.0, 1.0);
                assert_eq!(out.item(i)[j], want, "item {i} pixel {j}");
            }
        }
    }

    #[test]
    fn step_stays_in_the_box_and_ball() {
        let m = two_pixel([1.0, -1.0, -1.0, 1.0], [0.0, 0.0]);
        let x = Tensor::new(vec![3, 1, 1, 2], vec![0.0, 1.0, 0.99, 0.02, 0.4, 0.6]).unwrap();
        let out = fgsm_step(&m, &x, &[0, 1, 0], 0.3).unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - b).abs() <= 0.3 + 1e-6);
        }
        assert!(fgsm_step(&m, &x, &[0, 1, 0], 0.0).is_err());
        assert!(fgsm_step(&m, &x, &[0, 1], 0.1).is_err());
    }

    #[test]
    fn adversarial_training_raises_robust_accuracy() {
        let spec = SyntheticSpec { classes: 3, train_per_class: 60, test_per_class: 30, seed: 4 };
        let (_, train, test) = synthetic(&spec, 16);
        let shape = ModelShape::Classifier { image: vec![1, 16, 16], classes: 3 };
        let cfg = TrainConfig { epochs: 4, batch_size: 16, ..Default::default() };
        let mut plain = build_model(ArchId::SmallCnn3, shape.clone(), 4, None, 1).unwrap();
        crate::modelzoo::train_classifier(&mut plain, &train, None, &cfg, 1).unwrap();
        let mut robust = build_model(ArchId::SmallCnn3, shape, 4, None, 1).unwrap();
        let def = DefenseConfig::new(0.1);
        let log = adversarial_train(&mut robust, &train, Some(&test), &def, &cfg, 1).unwrap();
        assert!(log.epochs.last().unwrap().extra.contains_key("rob_acc"));
        assert!(robust_accuracy(&robust, &test, 0.1).unwrap() >= robust_accuracy(&plain, &test, 0.1).unwrap());
    }

    #[test]
    fn config_and_curve_roundtrip() {
        assert!(DefenseConfig::new(0.0).validate().is_err());
        assert!(DefenseConfig { gamma: 0.1, mix_ratio: 1.5 }.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("defense_curve.csv");
        let pts = vec![DefensePoint {
            gamma: 0.02,
            std_acc: 0.99,
            rob_acc: 0.9,
            nr_base: 0.8,
            rob_base: 0.81,
            nr_ours: 0.95,
            rob_ours: 0.93,
        }];
        write_defense_curve(&p, &pts).unwrap();
        assert_eq!(read_defense_curve(&p).unwrap(), pts);
    }
}
