//! Soft-label harvesting and shadow-model distillation.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use advinv_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::modelzoo::{fit, BatchTarget, ModelHandle, QueryOracle, TrainConfig, TrainLog};
use crate::util::{self, image_hash, Fingerprint};

/// Public images with one cached target confidence vector each.
#[derive(Clone, Debug)]
pub struct DistillSet {
    pub images: Tensor,
    pub targets: Tensor,
    pub image_hashes: Vec<String>,
    pub target_fingerprint: String,
}

impl DistillSet {
    pub fn len(&self) -> usize {
        self.image_hashes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_hashes.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.targets.shape().get(1).copied().unwrap_or(0)
    }
}

/// Fingerprint binding a soft-label cache to a target and a split.
pub fn target_fingerprint(target_checkpoint_hash: &str, manifest_checksum: &str) -> String {
    Fingerprint::new().str(target_checkpoint_hash).str(manifest_checksum).finish()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestStats {
    /// Oracle queries issued by this call.
    pub new_queries: u64,
    /// Items served from an existing cache.
    pub cache_hits: u64,
    /// Whether an existing cache was discarded because its fingerprint differed.
    pub invalidated: bool,
}

/// Query the oracle once per image and cache the responses.
///
/// With a `cache_path` the cache is a CSV file whose first line is
/// `# fingerprint=<hex>` followed by `image_hash,p0,...,p{C-1}` records.
/// Records are appended in chunks, so an interrupted harvest resumes where
/// it stopped; a fingerprint change discards the file.
pub fn harvest_soft_labels(
    oracle: &dyn QueryOracle,
    images: &Tensor,
    fingerprint: &str,
    cache_path: Option<&Path>,
    chunk: usize,
) -> Result<(DistillSet, HarvestStats)> {
    let n = images.batch();
    if images.shape().get(1..) != Some(oracle.input_shape().as_slice()) {
        return invalid(format!("images {:?} do not fit the oracle input", images.shape()));
    }
    let c = oracle.num_classes();
    let hashes: Vec<String> = (0..n).map(|i| image_hash(images.item(i))).collect();
    let mut stats = HarvestStats::default();
    let mut known: HashMap<String, Vec<f32>> = HashMap::new();
    if let Some(p) = cache_path {
        match read_cache(p, c)? {
            Some((fp, rows)) if fp == fingerprint => known = rows,
            Some(_) => {
                stats.invalidated = true;
                fs::remove_file(p)?;
            }
            None => {}
        }
        if !p.exists() {
            fs::write(p, format!("# fingerprint={fingerprint}\n"))?;
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&i| !known.contains_key(&hashes[i])).collect();
    stats.cache_hits = (n - missing.len()) as u64;
    for part in missing.chunks(chunk.max(1)) {
        let probs = oracle.query(&images.select(part))?;
        stats.new_queries += part.len() as u64;
        let mut lines = String::new();
        for (j, &i) in part.iter().enumerate() {
            let row = probs.item(j).to_vec();
            if cache_path.is_some() {
                lines.push_str(&hashes[i]);
                for v in &row {
                    lines.push(',');
                    lines.push_str(&format!("{v:e}"));
                }
                lines.push('\n');
            }
            known.insert(hashes[i].clone(), row);
        }
        if let Some(p) = cache_path {
            let mut f = OpenOptions::new().append(true).open(p)?;
            f.write_all(lines.as_bytes())?;
        }
    }
    let mut data = Vec::with_capacity(n * c);
    for h in &hashes {
        data.extend_from_slice(&known[h]);
    }
    let set = DistillSet {
        images: images.clone(),
        targets: Tensor::new(vec![n, c], data)?,
        image_hashes: hashes,
        target_fingerprint: fingerprint.to_string(),
    };
    Ok((set, stats))
}

type CacheRows = HashMap<String, Vec<f32>>;

fn read_cache(path: &Path, classes: usize) -> Result<Option<(String, CacheRows)>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut lines = BufReader::new(util::open(path)?).lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Ok(None),
    };
    let fp = header
        .strip_prefix("# fingerprint=")
        .ok_or_else(|| CoreError::Format(format!("{} lacks a fingerprint header", path.display())))?
        .trim()
        .to_string();
    let mut rows = HashMap::new();
    for line in lines {
        let line = line?;
        let mut parts = line.split(',');
        let Some(key) = parts.next() else { continue };
        let vals: std::result::Result<Vec<f32>, _> = parts.map(str::parse::<f32>).collect();
        // a torn final line from an interrupted run is simply re-queried
        match vals {
            Ok(v) if v.len() == classes => {
                rows.insert(key.to_string(), v);
            }
            _ => continue,
        }
    }
    Ok(Some((fp, rows)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowReport {
    pub log: TrainLog,
    /// Top-1 agreement with the cached target labels on held-out items.
    pub agreement: f64,
}

/// Distil the cached soft labels into `shadow` with soft-target cross-entropy
/// at the given temperature. Uses no oracle at all.
pub fn train_shadow(
    shadow: &mut ModelHandle,
    train: &DistillSet,
    held_out: Option<&DistillSet>,
    cfg: &TrainConfig,
    temperature: f32,
    seed: u64,
) -> Result<ShadowReport> {
    if shadow.num_classes() != train.num_classes() {
        return Err(CoreError::Invalid(format!(
            "shadow has {} classes but the target has {}",
            shadow.num_classes(),
            train.num_classes()
        )));
    }
    if temperature <= 0.0 {
        return invalid("temperature must be positive");
    }
    let log = fit(
        shadow,
        train.len(),
        cfg,
        seed,
        |_, idx| Ok((train.images.select(idx), BatchTarget::Soft(train.targets.select(idx), temperature))),
        |m, e| {
            if let Some(h) = held_out {
                e.extra.insert("agreement".into(), agreement(m, h)?);
            }
            Ok(())
        },
    )?;
    for w in log.epochs.windows(2) {
        if w[1].loss > w[0].loss {
            log::warn!("distillation loss rose from {:.4} to {:.4} at epoch {}", w[0].loss, w[1].loss, w[1].epoch);
        }
    }
    let agreement = match held_out {
        Some(h) => agreement(shadow, h)?,
        None => agreement(shadow, train)?,
    };
    Ok(ShadowReport { log, agreement })
}

/// Top-1 agreement between a model and cached confidence vectors.
pub fn agreement(model: &ModelHandle, set: &DistillSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let pred = model.forward(&set.images)?.argmax_rows();
    let want = set.targets.argmax_rows();
    Ok(pred.iter().zip(&want).filter(|(a, b)| a == b).count() as f64 / set.len() as f64)
}
