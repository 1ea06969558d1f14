//! Metrics: attack accuracy, reconstruction error, Diversity, pseudo-label
//! noise consistency and a Monte-Carlo check of the expected MSE of two
//! independent Gaussian images.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use advinv_nn::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{Provenance, TrainingSet};
use crate::blackbox::{is_wrong_pseudo_label, pseudo_label};
use crate::error::{invalid, CoreError, Result};
use crate::invert::{reconstruct, reconstruction_loss, semantic_loss_rows, ssim, ReconMetric};
use crate::modelzoo::{ModelHandle, QueryOracle};
use crate::util;

/// Fraction of reconstructions the evaluator assigns to their true class.
pub fn attack_accuracy(reconstructions: &Tensor, true_labels: &[usize], evaluator: &ModelHandle) -> Result<f64> {
    if reconstructions.batch() != true_labels.len() {
        return invalid(format!(
            "{} reconstructions but {} labels",
            reconstructions.batch(),
            true_labels.len()
        ));
    }
    if true_labels.is_empty() {
        return invalid("no reconstructions to score");
    }
    let pred = evaluator.forward(reconstructions)?.argmax_rows();
    let hits = pred.iter().zip(true_labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / true_labels.len() as f64)
}

/// Reconstruction error in the reporting convention of each metric:
/// per-pixel MSE, PSNR in dB (higher is better) or mean SSIM.
pub fn recon_error(originals: &Tensor, reconstructions: &Tensor, metric: ReconMetric) -> Result<f64> {
    match metric {
        ReconMetric::Mse => Ok(reconstruction_loss(originals, reconstructions, metric)?.0),
        ReconMetric::Psnr => Ok(-reconstruction_loss(originals, reconstructions, metric)?.0),
        ReconMetric::Ssim => ssim(originals, reconstructions),
    }
}

/// `mean(augmented) - mean(clean)`.
pub fn diversity(clean_losses: &[f64], augmented_losses: &[f64]) -> Result<f64> {
    if clean_losses.is_empty() || augmented_losses.is_empty() {
        return invalid("diversity needs two non-empty loss lists");
    }
    Ok(util::mean(augmented_losses) - util::mean(clean_losses))
}

/// Per-sample loss components of a trained decoder on a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLosses {
    pub l_r: Vec<f64>,
    pub l_s: Vec<f64>,
}

pub fn sample_losses(
    inv: &ModelHandle,
    set: &TrainingSet,
    shadow: &ModelHandle,
    metric: ReconMetric,
) -> Result<SampleLosses> {
    let mut out = SampleLosses { l_r: Vec::with_capacity(set.len()), l_s: Vec::with_capacity(set.len()) };
    let idx: Vec<usize> = (0..set.len()).collect();
    for part in idx.chunks(256) {
        let sup = set.supervision.select(part);
        let x = set.images.select(part);
        let xhat = reconstruct(inv, &sup)?;
        for j in 0..part.len() {
            let one = [j];
            out.l_r.push(reconstruction_loss(&x.select(&one), &xhat.select(&one), metric)?.0);
        }
        out.l_s.extend(semantic_loss_rows(&xhat, &sup, shadow)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub l_r: f64,
    pub l_s: f64,
}

/// Diversity of the adversarial part of `set` against its clean part,
/// separately for both loss components, on one model state.
pub fn diversity_report(
    inv: &ModelHandle,
    set: &TrainingSet,
    shadow: &ModelHandle,
    metric: ReconMetric,
) -> Result<DiversityReport> {
    let losses = sample_losses(inv, set, shadow, metric)?;
    let pick = |v: &[f64], p: Provenance| -> Vec<f64> { set.indices(p).into_iter().map(|i| v[i]).collect() };
    Ok(DiversityReport {
        l_r: diversity(&pick(&losses.l_r, Provenance::Clean), &pick(&losses.l_r, Provenance::Adversarial))?,
        l_s: diversity(&pick(&losses.l_s, Provenance::Clean), &pick(&losses.l_s, Provenance::Adversarial))?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub noise: f64,
    pub k: usize,
    /// Noisy pseudo-label still shares a class with the clean one, i.e. the
    /// noise did not produce what SimBA would count as a label change.
    pub consistency: f64,
    /// Noisy pseudo-label equals the clean one as a set.
    pub exact: f64,
}

/// For each k, the fraction of (sample, trial) pairs whose k-pseudo-label
/// under additive uniform noise in `[-noise, noise]` (clipped to [0,1]) is
/// unchanged. k = 1 is the plain predicted label, where both notions agree.
pub fn pseudo_label_consistency_probe(
    model: &dyn QueryOracle,
    data: &Tensor,
    noise: f64,
    k_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<ConsistencyRow>> {
    if !(noise >= 0.0) {
        return invalid("noise level must be non-negative");
    }
    if data.shape().get(1..) != Some(model.input_shape().as_slice()) {
        return invalid(format!("data {:?} does not fit the model input", data.shape()));
    }
    let c = model.num_classes();
    let mut ks: Vec<usize> = k_values.to_vec();
    if !ks.contains(&1) {
        ks.push(1);
    }
    ks.sort_unstable();
    ks.dedup();
    if ks.iter().any(|&k| k == 0 || k > c) {
        return invalid(format!("k values must lie in 1..={c}"));
    }
    let clean = model.query(data)?;
    let n = data.batch();
    let mut hits = vec![0usize; ks.len()];
    let mut exact = vec![0usize; ks.len()];
    let mut rng = util::rng(seed);
    for _ in 0..trials {
        let mut noisy = data.clone();
        if noise > 0.0 {
            for v in noisy.data_mut() {
                let u: f64 = rng.random_range(-noise..=noise);
                *v = (*v as f64 + u).clamp(0.0, 1.0) as f32;
            }
        }
        let probs = model.query(&noisy)?;
        for i in 0..n {
            for (j, &k) in ks.iter().enumerate() {
                let (a, b) = (pseudo_label(clean.item(i), k)?, pseudo_label(probs.item(i), k)?);
                if !is_wrong_pseudo_label(&a, &b)? {
                    hits[j] += 1;
                }
                if a == b {
                    exact[j] += 1;
                }
            }
        }
    }
    let total = (n * trials).max(1) as f64;
    Ok(ks
        .iter()
        .zip(hits.iter().zip(&exact))
        .map(|(&k, (&h, &e))| ConsistencyRow { noise, k, consistency: h as f64 / total, exact: e as f64 / total })
        .collect())
}

/// Both sweeps of the probe: every noise level crossed with every k.
pub fn consistency_sweep(
    model: &dyn QueryOracle,
    data: &Tensor,
    noises: &[f64],
    k_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<ConsistencyRow>> {
    let mut rows = Vec::new();
    for (i, &eta) in noises.iter().enumerate() {
        rows.extend(pseudo_label_consistency_probe(model, data, eta, k_values, trials, seed.wrapping_add(i as u64))?);
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceProbe {
    pub trials: usize,
    pub pixels: usize,
    pub mse_r: f64,
    pub mse_c: f64,
    /// Empirical mean of `2 (x_r - x̂_r)(x_c - x̂_c)`.
    pub cross: f64,
    pub expected_r: f64,
    pub expected_c: f64,
    /// `3 / sqrt(trials)`.
    pub tolerance: f64,
}

impl VarianceProbe {
    pub fn within_tolerance(&self) -> bool {
        (self.mse_r - self.expected_r).abs() <= self.tolerance
            && (self.mse_c - self.expected_c).abs() <= self.tolerance
            && self.cross.abs() <= self.tolerance
    }
}

/// Draw an image and an independent reconstruction, each split into a
/// component with pixel std `sigma_r` and one with `sigma_c`, and average the
/// per-component MSE over `trials` draws. Each expectation is `2 sigma^2`.
pub fn variance_probe(sigma_r: f64, sigma_c: f64, pixels: usize, trials: usize, seed: u64) -> Result<VarianceProbe> {
    if !(sigma_r > 0.0) || !(sigma_c >= 0.0) {
        return invalid("sigma_r must be positive and sigma_c non-negative");
    }
    if sigma_c > sigma_r {
        return invalid("sigma_r must not be smaller than sigma_c");
    }
    if pixels == 0 || trials == 0 {
        return invalid("pixels and trials must be positive");
    }
    let nr = Normal::new(0.0, sigma_r).map_err(|e| CoreError::Invalid(e.to_string()))?;
    let nc = Normal::new(0.0, sigma_c).map_err(|e| CoreError::Invalid(e.to_string()))?;
    let mut rng = util::rng(seed);
    let (mut sr, mut sc, mut sx) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        let (mut r, mut c, mut x) = (0.0, 0.0, 0.0);
        for _ in 0..pixels {
            let dr = nr.sample(&mut rng) - nr.sample(&mut rng);
            let dc = nc.sample(&mut rng) - nc.sample(&mut rng);
            r += dr * dr;
            c += dc * dc;
            x += 2.0 * dr * dc;
        }
        sr += r / pixels as f64;
        sc += c / pixels as f64;
        sx += x / pixels as f64;
    }
    let t = trials as f64;
    Ok(VarianceProbe {
        trials,
        pixels,
        mse_r: sr / t,
        mse_c: sc / t,
        cross: sx / t,
        expected_r: 2.0 * sigma_r * sigma_r,
        expected_c: 2.0 * sigma_c * sigma_c,
        tolerance: 3.0 / t.sqrt(),
    })
}

/// One line of a run's `metrics.jsonl`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    /// Experiment cell, e.g. `lr`, `lr+ls`, `lr+ls+aa`.
    pub variant: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub recon_error: f64,
    pub attack_accuracy: BTreeMap<String, f64>,
    #[serde(default)]
    pub diversity: Option<DiversityReport>,
    #[serde(default)]
    pub asr: Option<f64>,
    #[serde(default)]
    pub mean_l2: Option<f64>,
    #[serde(default)]
    pub wall_times: BTreeMap<String, f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.recon_error >= 0.0) {
            return invalid(format!("recon_error {} is negative", self.recon_error));
        }
        if let Some((k, v)) = self.attack_accuracy.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("attack accuracy {v} for {k} is outside [0, 1]"));
        }
        Ok(())
    }
}

pub fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    record.validate()?;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(util::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::{synthetic, SyntheticSpec};
    use crate::modelzoo::{build_model, train_classifier, ArchId, ModelShape, QueryOnly, TrainConfig};

    #[test]
    fn accuracy_reference_cases() {
        let spec = SyntheticSpec { classes: 5, train_per_class: 40, test_per_class: 40, seed: 1 };
        let (_, train, test) = synthetic(&spec, 16);
        let mut ev = build_model(ArchId::SmallCnn3, ModelShape::Classifier { image: vec![1, 16, 16], classes: 5 }, 4, None, 0)
            .unwrap();
        train_classifier(&mut ev, &train, None, &TrainConfig { epochs: 3, batch_size: 16, ..Default::default() }, 0)
            .unwrap();
        let clean = crate::modelzoo::accuracy(&ev, &test).unwrap();
        assert_eq!(attack_accuracy(&test.images, &test.labels, &ev).unwrap(), clean);
        let perm: Vec<usize> = (0..test.len()).rev().collect();
        let shuffled = test.subset(&perm);
        assert_eq!(attack_accuracy(&shuffled.images, &shuffled.labels, &ev).unwrap(), clean);
        assert!(attack_accuracy(&test.images, &test.labels[1..], &ev).is_err());
    }

    #[test]
    fn recon_error_conventions() {
        let x = Tensor::from_fn(&[2, 1, 12, 12], |i| (i % 11) as f32 / 11.0);
        assert_eq!(recon_error(&x, &x, ReconMetric::Mse).unwrap(), 0.0);
        assert!((recon_error(&x, &x, ReconMetric::Ssim).unwrap() - 1.0).abs() < 1e-6);
        let y = x.map(|v| (v + 0.1).min(1.0));
        let mse = recon_error(&x, &y, ReconMetric::Mse).unwrap();
        let psnr = recon_error(&x, &y, ReconMetric::Psnr).unwrap();
        assert!(psnr > 10.0 && psnr < 40.0);
        assert!((psnr - (-10.0 * mse.log10())).abs() < 0.5);
    }

    #[test]
    fn diversity_basics() {
        let a = [0.3, 0.1, 0.7];
        assert_eq!(diversity(&a, &a).unwrap(), 0.0);
        assert_eq!(diversity(&[0.25], &[1.0]).unwrap(), 0.75);
        assert!(diversity(&[], &a).is_err());
    }

    #[test]
    fn variance_probe_matches_two_sigma_squared() {
        let p = variance_probe(0.5, 0.0, 1000, 1000, 3).unwrap();
        assert_eq!(p.mse_c, 0.0);
        assert!((p.mse_r - 0.5).abs() / 0.5 < 0.02, "{}", p.mse_r);
        assert!(p.within_tolerance());
        assert!(variance_probe(-0.1, 0.0, 4, 4, 0).is_err());
        assert!(variance_probe(0.1, 0.2, 4, 4, 0).is_err());
    }

    #[test]
    fn overlap_consistency_bounds_exact_and_grows_with_k() {
        let m = build_model(ArchId::SmallCnn3, ModelShape::Classifier { image: vec![1, 16, 16], classes: 6 }, 4, None, 5)
            .unwrap();
        let x = Tensor::from_fn(&[20, 1, 16, 16], |i| ((i * 11) % 17) as f32 / 17.0);
        let rows = pseudo_label_consistency_probe(&QueryOnly(&m), &x, 0.4, &[1, 2, 3], 4, 9).unwrap();
        assert_eq!(rows[0].consistency, rows[0].exact);
        assert!(rows.iter().all(|r| r.consistency >= r.exact));
        assert!(rows.windows(2).all(|w| w[1].consistency >= w[0].consistency));
    }

    #[test]
    fn consistency_is_one_without_noise() {
        let m = build_model(ArchId::SmallCnn3, ModelShape::Classifier { image: vec![1, 16, 16], classes: 6 }, 4, None, 2)
            .unwrap();
        let x = Tensor::from_fn(&[5, 1, 16, 16], |i| ((i * 7) % 13) as f32 / 13.0);
        let rows = pseudo_label_consistency_probe(&QueryOnly(&m), &x, 0.0, &[2, 3], 3, 0).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.consistency == 1.0));
        assert!(pseudo_label_consistency_probe(&QueryOnly(&m), &x, -1.0, &[2], 1, 0).is_err());
    }

    #[test]
    fn metrics_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.jsonl");
        let mut r = MetricsRecord { run_id: "a".into(), variant: "lr".into(), recon_error: 0.05, ..Default::default() };
        r.attack_accuracy.insert("vgg-11-like".into(), 0.7);
        append_metrics(&p, &r).unwrap();
        append_metrics(&p, &r).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), vec![r.clone(), r.clone()]);
        r.attack_accuracy.insert("x".into(), 1.5);
        assert!(append_metrics(&p, &r).is_err());
    }
}
