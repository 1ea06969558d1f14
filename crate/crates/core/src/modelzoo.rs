//! Architecture families, model handles, query oracles and training loops.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use advinv_nn::checkpoint::{read_checkpoint, write_checkpoint};
use advinv_nn::loss::{soft_cross_entropy, softmax};
use advinv_nn::{Adam, AdamConfig, Grads, LayerSpec, Mode, Network, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datahub::LabeledImages;
use crate::error::{invalid, CoreError, Result};
use crate::util;

/// Inference chunk size; keeps activation memory bounded.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchId {
    #[serde(rename = "small-cnn-3")]
    SmallCnn3,
    #[serde(rename = "small-cnn-4")]
    SmallCnn4,
    #[serde(rename = "residual-18")]
    Residual18,
    #[serde(rename = "vgg-11-like")]
    Vgg11Like,
    InversionDecoder,
}

impl ArchId {
    pub const ALL: [ArchId; 5] = [
        ArchId::SmallCnn3,
        ArchId::SmallCnn4,
        ArchId::Residual18,
        ArchId::Vgg11Like,
        ArchId::InversionDecoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::SmallCnn3 => "small-cnn-3",
            ArchId::SmallCnn4 => "small-cnn-4",
            ArchId::Residual18 => "residual-18",
            ArchId::Vgg11Like => "vgg-11-like",
            ArchId::InversionDecoder => "inversion-decoder",
        }
    }

    pub fn is_classifier(self) -> bool {
        self != ArchId::InversionDecoder
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| CoreError::Invalid(format!("unknown arch_id `{s}`")))
    }
}

/// What a model maps from and to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelShape {
    /// Image `(C, H, W)` to `classes` logits.
    Classifier { image: Vec<usize>, classes: usize },
    /// Length-`classes` confidence vector to image `(C, H, W)`.
    Decoder { classes: usize, image: Vec<usize> },
}

impl ModelShape {
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelShape::Classifier { image, .. } => image.clone(),
            ModelShape::Decoder { classes, .. } => vec![*classes],
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelShape::Classifier { classes, .. } | ModelShape::Decoder { classes, .. } => *classes,
        }
    }
}

fn conv(i: usize, o: usize, k: usize, s: usize, p: usize) -> LayerSpec {
    LayerSpec::Conv2d { in_ch: i, out_ch: o, kernel: k, stride: s, padding: p }
}

fn bn(c: usize) -> LayerSpec {
    LayerSpec::BatchNorm2d { channels: c }
}

fn image_dims(image: &[usize]) -> Result<(usize, usize)> {
    match image {
        [c, h, w] if *c > 0 && h == w && *h > 0 => Ok((*c, *h)),
        _ => invalid(format!("expected a square (C, H, W) image shape, got {image:?}")),
    }
}

/// Default layer recipe for an architecture family at channel width `width`.
pub fn default_recipe(arch: ArchId, shape: &ModelShape, width: usize) -> Result<Vec<LayerSpec>> {
    if width == 0 {
        return invalid("width must be positive");
    }
    let w = width;
    match (arch, shape) {
        (ArchId::InversionDecoder, ModelShape::Decoder { classes, image }) => {
            let (c, s) = image_dims(image)?;
            if s < 8 || !s.is_power_of_two() {
                return invalid(format!("decoder output side {s} must be a power of two >= 8"));
            }
            let ups = (s / 4).trailing_zeros() as usize;
            let mut ch = w << (ups - 1);
            let mut r = vec![
                LayerSpec::LogConfidence { floor: -1000.0, offset: 50.0 },
                LayerSpec::Reshape { shape: vec![*classes, 1, 1] },
                LayerSpec::ConvTranspose2d { in_ch: *classes, out_ch: ch, kernel: 4, stride: 1, padding: 0 },
                bn(ch),
                LayerSpec::Tanh,
            ];
            for _ in 0..ups - 1 {
                r.push(LayerSpec::ConvTranspose2d { in_ch: ch, out_ch: ch / 2, kernel: 4, stride: 2, padding: 1 });
                ch /= 2;
                r.push(bn(ch));
                r.push(LayerSpec::Tanh);
            }
            r.push(LayerSpec::ConvTranspose2d { in_ch: ch, out_ch: c, kernel: 4, stride: 2, padding: 1 });
            r.push(LayerSpec::Sigmoid);
            Ok(r)
        }
        (ArchId::InversionDecoder, _) | (_, ModelShape::Decoder { .. }) => {
            invalid(format!("{arch} does not match shape {shape:?}"))
        }
        (ArchId::SmallCnn3 | ArchId::SmallCnn4, ModelShape::Classifier { image, classes }) => {
            let (c, s) = image_dims(image)?;
            let blocks = if arch == ArchId::SmallCnn3 { 3 } else { 4 };
            if s % (1 << blocks) != 0 {
                return invalid(format!("{arch} needs an image side divisible by {}", 1 << blocks));
            }
            let mut r = Vec::new();
            let mut cin = c;
            for b in 0..blocks {
                let cout = w << b.min(2);
                r.extend([conv(cin, cout, 3, 1, 1), bn(cout), LayerSpec::MaxPool2d { kernel: 2, stride: 2 }, LayerSpec::Relu]);
                cin = cout;
            }
            let side = s >> blocks;
            r.extend([
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: cin * side * side, outputs: 50 },
                LayerSpec::Relu,
                LayerSpec::Linear { inputs: 50, outputs: *classes },
            ]);
            Ok(r)
        }
        (ArchId::Residual18, ModelShape::Classifier { image, classes }) => {
            let (c, s) = image_dims(image)?;
            if s % 16 != 0 {
                return invalid("residual-18 needs an image side divisible by 16");
            }
            let mut r = vec![conv(c, w, 3, 2, 1), bn(w), LayerSpec::Relu];
            let mut cin = w;
            for (stage, stride) in [1usize, 2, 2, 2].into_iter().enumerate() {
                let cout = w << stage;
                for block in 0..2 {
                    let st = if block == 0 { stride } else { 1 };
                    let shortcut = if st != 1 || cin != cout { vec![conv(cin, cout, 1, st, 0), bn(cout)] } else { vec![] };
                    r.push(LayerSpec::Residual {
                        body: vec![conv(cin, cout, 3, st, 1), bn(cout), LayerSpec::Relu, conv(cout, cout, 3, 1, 1), bn(cout)],
                        shortcut,
                    });
                    r.push(LayerSpec::Relu);
                    cin = cout;
                }
            }
            r.extend([LayerSpec::GlobalAvgPool, LayerSpec::Linear { inputs: cin, outputs: *classes }]);
            Ok(r)
        }
        (ArchId::Vgg11Like, ModelShape::Classifier { image, classes }) => {
            let (c, s) = image_dims(image)?;
            if s % 32 != 0 {
                return invalid("vgg-11-like needs an image side divisible by 32");
            }
            let plan: [&[usize]; 5] = [&[1], &[2], &[4, 4], &[8, 8], &[8, 8]];
            let mut r = Vec::new();
            let mut cin = c;
            for stage in plan {
                for &m in stage {
                    r.extend([conv(cin, w * m, 3, 1, 1), bn(w * m), LayerSpec::Relu]);
                    cin = w * m;
                }
                r.push(LayerSpec::MaxPool2d { kernel: 2, stride: 2 });
            }
            let side = s / 32;
            r.extend([
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: cin * side * side, outputs: cin },
                LayerSpec::Relu,
                LayerSpec::Linear { inputs: cin, outputs: *classes },
            ]);
            Ok(r)
        }
    }
}

/// Capability flags of a handle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    QueryOnly,
    Differentiable,
}

/// A trained or trainable model plus its architecture identity.
#[derive(Clone, Debug)]
pub struct ModelHandle {
    pub arch_id: ArchId,
    pub shape: ModelShape,
    pub net: Network,
}

/// Build a model from its family default (or an explicit recipe override).
pub fn build_model(
    arch: ArchId,
    shape: ModelShape,
    width: usize,
    recipe: Option<Vec<LayerSpec>>,
    seed: u64,
) -> Result<ModelHandle> {
    let recipe = match recipe {
        Some(r) => r,
        None => default_recipe(arch, &shape, width)?,
    };
    let net = Network::new(recipe, &shape.input_shape(), seed)?;
    let expected = match &shape {
        ModelShape::Classifier { classes, .. } => vec![*classes],
        ModelShape::Decoder { image, .. } => image.clone(),
    };
    if net.output_shape() != expected.as_slice() {
        return invalid(format!(
            "recipe produces {:?}, expected {:?}",
            net.output_shape(),
            expected
        ));
    }
    Ok(ModelHandle { arch_id: arch, shape, net })
}

impl ModelHandle {
    pub fn num_classes(&self) -> usize {
        self.shape.classes()
    }

    pub fn capability(&self) -> Capability {
        Capability::Differentiable
    }

    /// Raw network outputs in inference mode, computed in chunks.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.batch();
        if n <= CHUNK {
            return Ok(self.net.forward(x)?);
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            parts.push(self.net.forward(&x.select(&idx))?);
        }
        Ok(Tensor::cat(&parts)?)
    }

    /// Softmax confidence vectors (classifiers only).
    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        if !self.arch_id.is_classifier() {
            return invalid("probs() on a decoder");
        }
        Ok(softmax(&self.forward(x)?)?)
    }

    /// Loss and its gradient with respect to the input; weights stay frozen
    /// and normalisation uses running statistics.
    pub fn input_gradient(
        &self,
        x: &Tensor,
        loss: impl FnOnce(&Tensor) -> advinv_nn::Result<(f64, Tensor)>,
    ) -> Result<(f64, Tensor)> {
        let (out, tape) = self.net.forward_tape(x, Mode::Eval)?;
        let (value, g) = loss(&out)?;
        let gx = self.net.backward(&tape, g, None, true)?.expect("input gradient requested");
        Ok((value, gx))
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        Ok(advinv_nn::checkpoint::checkpoint_bytes(&self.net, &self.meta())?)
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "arch_id": self.arch_id, "shape": self.shape })
    }

    /// Content hash of the checkpoint encoding.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(util::sha256_hex(&self.checkpoint_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        write_checkpoint(&mut w, &self.net, &self.meta())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelHandle> {
        let f = std::io::BufReader::new(util::open(path)?);
        let (net, meta) = read_checkpoint(f)?;
        let arch_id: ArchId = serde_json::from_value(meta["arch_id"].clone())?;
        let shape: ModelShape = serde_json::from_value(meta["shape"].clone())?;
        Ok(ModelHandle { arch_id, shape, net })
    }
}

/// A black-box classifier: images in, confidence vectors out.
pub trait QueryOracle: Send + Sync {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> Vec<usize>;
    fn query(&self, x: &Tensor) -> Result<Tensor>;
    /// Whether concurrent `query` calls are allowed.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

impl QueryOracle for ModelHandle {
    fn num_classes(&self) -> usize {
        ModelHandle::num_classes(self)
    }

    fn input_shape(&self) -> Vec<usize> {
        self.shape.input_shape()
    }

    fn query(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().get(1..) != Some(self.shape.input_shape().as_slice()) {
            return invalid(format!("query shape {:?} does not match model input", x.shape()));
        }
        self.probs(x)
    }
}

/// Query-only view of a handle: no weights, no gradients.
pub struct QueryOnly<'a>(pub &'a ModelHandle);

impl QueryOracle for QueryOnly<'_> {
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn input_shape(&self) -> Vec<usize> {
        self.0.shape.input_shape()
    }

    fn query(&self, x: &Tensor) -> Result<Tensor> {
        QueryOracle::query(self.0, x)
    }
}

/// Counts every image submitted to the wrapped oracle.
pub struct CountingOracle<O> {
    inner: O,
    count: AtomicU64,
}

impl<O: QueryOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, count: AtomicU64::new(0) }
    }

    pub fn queries(&self) -> u64 {
        self.count.load(Ordering::SeqCst)
    }
}

impl<O: QueryOracle> QueryOracle for CountingOracle<O> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape()
    }

    fn query(&self, x: &Tensor) -> Result<Tensor> {
        self.count.fetch_add(x.batch() as u64, Ordering::SeqCst);
        self.inner.query(x)
    }

    fn concurrent_safe(&self) -> bool {
        self.inner.concurrent_safe()
    }
}

/// Serialises access to an oracle that does not tolerate concurrent calls.
pub struct Gateway<'a> {
    inner: &'a dyn QueryOracle,
    lock: Mutex<()>,
}

impl<'a> Gateway<'a> {
    pub fn new(inner: &'a dyn QueryOracle) -> Self {
        Self { inner, lock: Mutex::new(()) }
    }
}

impl QueryOracle for Gateway<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape()
    }

    fn query(&self, x: &Tensor) -> Result<Tensor> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        self.inner.query(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine decay to 5% of the base rate over all steps.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
}

fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f32 {
    1e-3
}
fn default_schedule() -> Schedule {
    Schedule::Cosine
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: 0.0,
            schedule: default_schedule(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid("learning rate must be positive");
        }
        Ok(())
    }

    pub(crate) fn lr_at(&self, step: usize, total: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let t = step as f32 / total.max(1) as f32;
                self.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f32::consts::PI * t).cos()))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of training items whose argmax matches the (arg-max) target.
    pub train_acc: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Supervision for one mini-batch.
pub enum BatchTarget {
    Hard(Vec<usize>),
    /// Soft targets with a softmax temperature applied to the logits.
    Soft(Tensor, f32),
}

/// Generic mini-batch loop over `n` items. `make_batch` receives the
/// current model and the item indices and returns inputs plus targets.
pub fn fit(
    model: &mut ModelHandle,
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut make_batch: impl FnMut(&ModelHandle, &[usize]) -> Result<(Tensor, BatchTarget)>,
    mut after_epoch: impl FnMut(&ModelHandle, &mut EpochLog) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 || n == 0 {
        return Ok(log);
    }
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &model.net);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut rng = util::rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, target) = make_batch(model, idx)?;
            let (logits, tape) = model.net.forward_tape(&x, Mode::Train)?;
            let (loss, grad, hits) = match &target {
                BatchTarget::Hard(labels) => {
                    let (l, g) = advinv_nn::loss::cross_entropy(&logits, labels)?;
                    let hits = logits.argmax_rows().iter().zip(labels).filter(|(a, b)| a == b).count();
                    (l, g, hits)
                }
                BatchTarget::Soft(t, temp) => {
                    let mut scaled = logits.clone();
                    scaled.scale(1.0 / temp);
                    let (l, mut g) = soft_cross_entropy(&scaled, t, 1e-12)?;
                    g.scale(1.0 / temp);
                    let hits = logits.argmax_rows().iter().zip(t.argmax_rows()).filter(|(a, b)| **a == *b).count();
                    (l, g, hits)
                }
            };
            if !loss.is_finite() {
                return Err(CoreError::Diverged(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            let mut grads: Grads = model.net.zero_grads();
            model.net.backward(&tape, grad, Some(&mut grads), false)?;
            if !grads.all_finite() {
                return Err(CoreError::Diverged(format!("non-finite gradient at epoch {epoch}, batch {bi}")));
            }
            opt.set_lr(cfg.lr_at(step, total));
            opt.step(&mut model.net, &grads);
            model.net.update_running_stats(&tape);
            step += 1;
            loss_sum += loss * idx.len() as f64;
            correct += hits;
            seen += idx.len();
        }
        let mut entry = EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            extra: BTreeMap::new(),
        };
        after_epoch(model, &mut entry)?;
        log::info!("{} epoch {epoch}: loss {:.4} acc {:.4}", model.arch_id, entry.loss, entry.train_acc);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Supervised training on hard labels; test accuracy logged when given.
pub fn train_classifier(
    model: &mut ModelHandle,
    data: &LabeledImages,
    test: Option<&LabeledImages>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if data.labels.iter().any(|&l| l >= model.num_classes()) {
        return invalid("label outside the model's class range");
    }
    fit(
        model,
        data.len(),
        cfg,
        seed,
        |_, idx| {
            Ok((data.images.select(idx), BatchTarget::Hard(idx.iter().map(|&i| data.labels[i]).collect())))
        },
        |m, e| {
            if let Some(t) = test {
                e.extra.insert("test_acc".into(), accuracy(m, t)?);
            }
            Ok(())
        },
    )
}

/// Fraction of items whose argmax prediction equals the label.
pub fn accuracy(model: &ModelHandle, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let pred = model.forward(&data.images)?.argmax_rows();
    Ok(pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cls(classes: usize) -> ModelShape {
        ModelShape::Classifier { image: vec![1, 32, 32], classes }
    }

    #[test]
    fn every_family_builds_with_expected_output() {
        for arch in [ArchId::SmallCnn3, ArchId::SmallCnn4, ArchId::Residual18, ArchId::Vgg11Like] {
            let m = build_model(arch, cls(5), 4, None, 0).unwrap();
            let p = m.probs(&Tensor::full(&[2, 1, 32, 32], 0.5)).unwrap();
            assert_eq!(p.shape(), &[2, 5]);
            for row in p.data().chunks(5) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = build_model(ArchId::SmallCnn3, cls(10), 8, None, 0).unwrap();
        let b = build_model(ArchId::SmallCnn3, cls(10), 8, None, 0).unwrap();
        assert!(a.net.same_weights(&b.net));
        assert!("unknown-arch".parse::<ArchId>().is_err());
    }

    #[test]
    fn decoder_output_is_an_image_in_the_unit_box() {
        let shape = ModelShape::Decoder { classes: 10, image: vec![1, 32, 32] };
        let d = build_model(ArchId::InversionDecoder, shape, 8, None, 0).unwrap();
        let v = Tensor::from_fn(&[3, 10], |i| ((i * 7) % 10) as f32 / 45.0);
        let out = d.forward(&v).unwrap();
        assert_eq!(out.shape(), &[3, 1, 32, 32]);
        let (lo, hi) = out.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn batched_query_matches_single_queries() {
        let m = build_model(ArchId::SmallCnn3, cls(5), 4, None, 1).unwrap();
        let x = Tensor::from_fn(&[4, 1, 32, 32], |i| ((i * 13) % 17) as f32 / 17.0);
        let all = QueryOracle::query(&m, &x).unwrap();
        for i in 0..4 {
            let one = QueryOracle::query(&m, &x.select(&[i])).unwrap();
            for (a, b) in one.data().iter().zip(all.item(i)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn counting_oracle_counts_images() {
        let m = build_model(ArchId::SmallCnn3, cls(5), 4, None, 1).unwrap();
        let c = CountingOracle::new(QueryOnly(&m));
        c.query(&Tensor::zeros(&[3, 1, 32, 32])).unwrap();
        c.query(&Tensor::zeros(&[2, 1, 32, 32])).unwrap();
        assert_eq!(c.queries(), 5);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = build_model(ArchId::SmallCnn3, cls(2), 4, None, 1).unwrap();
        let before = m.clone();
        let data = LabeledImages { images: Tensor::zeros(&[4, 1, 32, 32]), labels: vec![0, 1, 0, 1] };
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        train_classifier(&mut m, &data, None, &cfg, 0).unwrap();
        assert!(m.net.same_weights(&before.net));
    }

    #[test]
    fn checkpoint_roundtrip_keeps_identity() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(ArchId::Residual18, cls(3), 4, None, 2).unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = ModelHandle::load(&p).unwrap();
        assert_eq!(back.arch_id, ArchId::Residual18);
        assert_eq!(back.shape, m.shape);
        assert!(back.net.same_weights(&m.net));
        assert_eq!(back.fingerprint().unwrap(), m.fingerprint().unwrap());
    }
}
