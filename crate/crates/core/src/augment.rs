//! Inversion training sets: clean public samples plus successful
//! adversarial examples carrying their adversarial soft labels.

use std::collections::HashMap;

use advinv_nn::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blackbox::{is_wrong_pseudo_label, pseudo_label, AdversarialSet};
use crate::distill::DistillSet;
use crate::error::{invalid, CoreError, Result};
use crate::util;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Clean,
    Adversarial,
}

/// One inversion-training record.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSample {
    pub image: Vec<f32>,
    pub supervision: Vec<f32>,
    pub provenance: Provenance,
    pub source_hash: String,
}

/// Column-wise storage of attack samples.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub images: Tensor,
    pub supervision: Tensor,
    pub provenance: Vec<Provenance>,
    pub source_hash: Vec<String>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn sample(&self, i: usize) -> AttackSample {
        AttackSample {
            image: self.images.item(i).to_vec(),
            supervision: self.supervision.item(i).to_vec(),
            provenance: self.provenance[i],
            source_hash: self.source_hash[i].clone(),
        }
    }

    pub fn indices(&self, p: Provenance) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.provenance[i] == p).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> TrainingSet {
        TrainingSet {
            images: self.images.select(idx),
            supervision: self.supervision.select(idx),
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
            source_hash: idx.iter().map(|&i| self.source_hash[i].clone()).collect(),
        }
    }

    pub fn manifest(&self) -> TrainingManifest {
        TrainingManifest {
            clean: self.indices(Provenance::Clean).len(),
            adversarial: self.indices(Provenance::Adversarial).len(),
            ancestors: self
                .indices(Provenance::Adversarial)
                .into_iter()
                .map(|i| (i, self.source_hash[i].clone()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub clean: usize,
    pub adversarial: usize,
    /// Sample index of each adversarial record and its clean ancestor hash.
    pub ancestors: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Fraction of successful adversarial examples admitted (1 keeps all,
    /// i.e. one per clean sample whose attack succeeded).
    #[serde(default = "one")]
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { ratio: 1.0, seed: 0 }
    }
}

/// Clean samples first, in their original order, then the admitted
/// adversarial samples. Failed attacks contribute nothing.
pub fn build_training_set(
    clean: &DistillSet,
    adversarial: Option<&AdversarialSet>,
    policy: &AugmentPolicy,
) -> Result<TrainingSet> {
    if !(0.0..=1.0).contains(&policy.ratio) {
        return invalid("augmentation ratio must lie in [0, 1]");
    }
    let mut images = vec![clean.images.clone()];
    let mut supervision = vec![clean.targets.clone()];
    let mut provenance = vec![Provenance::Clean; clean.len()];
    let mut source_hash = clean.image_hashes.clone();
    if let Some(adv) = adversarial {
        let known: HashMap<&str, usize> =
            clean.image_hashes.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
        for h in &adv.source_hashes {
            if !known.contains_key(h.as_str()) {
                return Err(CoreError::Invalid(format!("adversarial example of unknown image {h}")));
            }
        }
        let mut ok: Vec<usize> = (0..adv.len()).filter(|&i| adv.success[i]).collect();
        let keep = (ok.len() as f64 * policy.ratio).round() as usize;
        if keep < ok.len() {
            ok.shuffle(&mut util::rng(policy.seed));
            ok.truncate(keep);
            ok.sort_unstable();
        }
        if !ok.is_empty() {
            images.push(adv.images.select(&ok));
            supervision.push(adv.confidences.select(&ok));
            provenance.extend(std::iter::repeat_n(Provenance::Adversarial, ok.len()));
            source_hash.extend(ok.iter().map(|&i| adv.source_hashes[i].clone()));
        }
    }
    Ok(TrainingSet {
        images: Tensor::cat(&images)?,
        supervision: Tensor::cat(&supervision)?,
        provenance,
        source_hash,
    })
}

/// Fraction of adversarial samples whose supervision pseudo-label is
/// disjoint from their clean ancestor's (1.0 when there are none).
pub fn disjointness_audit(set: &TrainingSet, k: usize) -> Result<f64> {
    let clean: HashMap<&str, usize> = set
        .indices(Provenance::Clean)
        .into_iter()
        .map(|i| (set.source_hash[i].as_str(), i))
        .collect();
    let adv = set.indices(Provenance::Adversarial);
    if adv.is_empty() {
        return Ok(1.0);
    }
    let mut ok = 0usize;
    for &i in &adv {
        let j = *clean
            .get(set.source_hash[i].as_str())
            .ok_or_else(|| CoreError::Invalid("adversarial sample without clean ancestor".into()))?;
        let a = pseudo_label(set.supervision.item(j), k)?;
        let b = pseudo_label(set.supervision.item(i), k)?;
        if is_wrong_pseudo_label(&a, &b)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / adv.len() as f64)
}
