//! Dataset loading, private/public splits and batch streams.
//!
//! Every image is held as `f32` in `[0, 1]` with layout `(N, C, H, W)`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use advinv_nn::Tensor;
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::util::{self, Fingerprint};

pub const MANIFEST_VERSION: u32 = 1;

/// Images with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _, _, _) = pixels.dims4()?;
        if n == 0 {
            return invalid("an image batch needs at least one image");
        }
        if !labels.is_empty() && labels.len() != n {
            return invalid(format!("{} labels for {n} images", labels.len()));
        }
        let (lo, hi) = pixels.min_max();
        if lo < 0.0 || hi > 1.0 {
            return Err(CoreError::Data(format!("pixels outside [0,1]: [{lo}, {hi}]")));
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A labelled image collection (possibly empty).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledImages {
        LabeledImages {
            images: self.images.select(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Deterministic subsample of at most `limit` items (all when `limit` is 0).
    pub fn limit(&self, limit: usize, seed: u64) -> LabeledImages {
        if limit == 0 || limit >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut util::rng(seed));
        idx.truncate(limit);
        idx.sort_unstable();
        self.subset(&idx)
    }
}

/// A source dataset with its own train/test partition.
#[derive(Clone, Debug)]
pub struct SourceData {
    pub dataset_id: String,
    pub class_names: Vec<String>,
    pub train: LabeledImages,
    pub test: LabeledImages,
    /// Content hash over all pixels and labels.
    pub digest: String,
}

impl SourceData {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.train.item_shape()
    }
}

/// Parameters of the procedurally generated dataset used for fast tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_syn_classes")]
    pub classes: usize,
    #[serde(default = "default_syn_train")]
    pub train_per_class: usize,
    #[serde(default = "default_syn_test")]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_syn_classes() -> usize {
    10
}
fn default_syn_train() -> usize {
    200
}
fn default_syn_test() -> usize {
    50
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: default_syn_classes(),
            train_per_class: default_syn_train(),
            test_per_class: default_syn_test(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub root: PathBuf,
    /// Output side length; images are square.
    pub image_size: usize,
    /// Held-out fraction per identity for folder datasets.
    pub test_fraction: f64,
    pub synthetic: SyntheticSpec,
}

/// Load `mnist`, `facescrub` (identity folders) or `synthetic`.
pub fn load_source(dataset_id: &str, opts: &LoadOptions) -> Result<SourceData> {
    if opts.image_size == 0 {
        return invalid("image_size must be positive");
    }
    let (class_names, train, test) = match dataset_id {
        "mnist" => load_mnist(&opts.root, opts.image_size)?,
        "facescrub" => load_identity_folders(&opts.root, opts.image_size, opts.test_fraction)?,
        "synthetic" => synthetic(&opts.synthetic, opts.image_size),
        other => return Err(CoreError::Data(format!("unknown dataset_id `{other}`"))),
    };
    let digest = Fingerprint::new()
        .str(dataset_id)
        .f32s(train.images.data())
        .bytes(&labels_bytes(&train.labels))
        .f32s(test.images.data())
        .bytes(&labels_bytes(&test.labels))
        .finish();
    Ok(SourceData { dataset_id: dataset_id.to_string(), class_names, train, test, digest })
}

fn labels_bytes(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect()
}

fn read_maybe_gz(root: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = root.join(name);
    let gz = root.join(format!("{name}.gz"));
    let mut bytes = Vec::new();
    if plain.exists() {
        util::open(&plain)?.read_to_end(&mut bytes)?;
    } else if gz.exists() {
        GzDecoder::new(util::open(&gz)?).read_to_end(&mut bytes)?;
    } else {
        return Err(CoreError::Missing {
            path: plain,
            reason: "MNIST file not found (run scripts/fetch_mnist.sh)".into(),
        });
    }
    Ok(bytes)
}

fn be_u32(b: &[u8], off: usize) -> Result<usize> {
    b.get(off..off + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()) as usize)
        .ok_or_else(|| CoreError::Data("truncated IDX header".into()))
}

/// Parse an IDX3 image file into `(N, 1, 28, 28)` style raw bytes.
pub fn parse_idx_images(b: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    if be_u32(b, 0)? != 0x0803 {
        return Err(CoreError::Data("not an IDX3 image file".into()));
    }
    let (n, h, w) = (be_u32(b, 4)?, be_u32(b, 8)?, be_u32(b, 12)?);
    let body = b
        .get(16..16 + n * h * w)
        .ok_or_else(|| CoreError::Data("truncated IDX image payload".into()))?;
    Ok((n, h, w, body))
}

pub fn parse_idx_labels(b: &[u8]) -> Result<Vec<usize>> {
    if be_u32(b, 0)? != 0x0801 {
        return Err(CoreError::Data("not an IDX1 label file".into()));
    }
    let n = be_u32(b, 4)?;
    let body = b
        .get(8..8 + n)
        .ok_or_else(|| CoreError::Data("truncated IDX label payload".into()))?;
    Ok(body.iter().map(|&v| v as usize).collect())
}

fn load_mnist(root: &Path, size: usize) -> Result<(Vec<String>, LabeledImages, LabeledImages)> {
    let part = |img: &str, lab: &str| -> Result<LabeledImages> {
        let ib = read_maybe_gz(root, img)?;
        let lb = read_maybe_gz(root, lab)?;
        let (n, h, w, body) = parse_idx_images(&ib)?;
        let labels = parse_idx_labels(&lb)?;
        if labels.len() != n {
            return Err(CoreError::Data(format!("{img}: {n} images but {} labels", labels.len())));
        }
        let mut data = Vec::with_capacity(n * size * size);
        for i in 0..n {
            let src: Vec<f32> = body[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f32 / 255.0).collect();
            data.extend(fit_square(&src, 1, h, w, size));
        }
        Ok(LabeledImages { images: Tensor::new(vec![n, 1, size, size], data)?, labels })
    };
    let train = part("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = part("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok(((0..10).map(|d| d.to_string()).collect(), train, test))
}

/// Centre-pad (when larger) or resample (when smaller) a `(c, h, w)` image to `size`.
fn fit_square(src: &[f32], c: usize, h: usize, w: usize, size: usize) -> Vec<f32> {
    if size >= h && size >= w {
        let (oy, ox) = ((size - h) / 2, (size - w) / 2);
        let mut out = vec![0.0; c * size * size];
        for ch in 0..c {
            for y in 0..h {
                let dst = ch * size * size + (y + oy) * size + ox;
                out[dst..dst + w].copy_from_slice(&src[ch * h * w + y * w..ch * h * w + y * w + w]);
            }
        }
        out
    } else {
        resize_bilinear(src, c, h, w, size, size)
    }
}

fn resize_bilinear(src: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * oh * ow];
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for ch in 0..c {
        for y in 0..oh {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let (y0, ty) = (fy.floor() as usize, fy.fract());
            let y1 = (y0 + 1).min(h - 1);
            for x in 0..ow {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let (x0, tx) = (fx.floor() as usize, fx.fract());
                let x1 = (x0 + 1).min(w - 1);
                let at = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out[ch * oh * ow + y * ow + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// One sub-directory per identity; images inside are decoded as RGB and
/// resized to `size`. A `test_fraction` of each identity's images (by
/// sorted file name, taken from the end) is held out.
fn load_identity_folders(
    root: &Path,
    size: usize,
    test_fraction: f64,
) -> Result<(Vec<String>, LabeledImages, LabeledImages)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return invalid("test_fraction must lie in [0, 1)");
    }
    let mut names: Vec<String> = fs::read_dir(root)
        .map_err(|e| CoreError::Missing { path: root.to_path_buf(), reason: e.to_string() })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CoreError::Data(format!("no identity folders under {}", root.display())));
    }
    let (mut tr, mut trl, mut te, mut tel) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, name) in names.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(root.join(name))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()).map(|s| s.to_ascii_lowercase()).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
            })
            .collect();
        files.sort();
        let held = ((files.len() as f64) * test_fraction).round() as usize;
        let cut = files.len() - held.min(files.len());
        for (i, f) in files.iter().enumerate() {
            let img = image::open(f)?.to_rgb8();
            let resized = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
            let mut px = vec![0.0f32; 3 * size * size];
            for (j, p) in resized.pixels().enumerate() {
                for ch in 0..3 {
                    px[ch * size * size + j] = p[ch] as f32 / 255.0;
                }
            }
            if i < cut {
                tr.extend(px);
                trl.push(label);
            } else {
                te.extend(px);
                tel.push(label);
            }
        }
    }
    let train = LabeledImages { images: Tensor::new(vec![trl.len(), 3, size, size], tr)?, labels: trl };
    let test = LabeledImages { images: Tensor::new(vec![tel.len(), 3, size, size], te)?, labels: tel };
    Ok((names, train, test))
}

/// Oriented bars plus a class-placed blob, with jitter and noise.
pub fn synthetic(spec: &SyntheticSpec, size: usize) -> (Vec<String>, LabeledImages, LabeledImages) {
    let make = |per_class: usize, salt: &str| {
        let mut rng = util::rng(util::derive_seed(spec.seed, salt));
        let mut data = Vec::with_capacity(per_class * spec.classes * size * size);
        let mut labels = Vec::new();
        let s = size as f32;
        for i in 0..per_class * spec.classes {
            let c = i % spec.classes;
            let theta = std::f32::consts::PI * c as f32 / spec.classes as f32 + rng.random_range(-0.12..0.12);
            let phi = 2.0 * std::f32::consts::PI * c as f32 / spec.classes as f32;
            let (cx, cy) = (s / 2.0 + rng.random_range(-1.5..1.5), s / 2.0 + rng.random_range(-1.5..1.5));
            let (bx, by) = (cx + 0.3 * s * phi.cos(), cy + 0.3 * s * phi.sin());
            let amp: f32 = rng.random_range(0.7..1.0);
            let (dx, dy) = (theta.cos(), theta.sin());
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f32 - cx, y as f32 - cy);
                    let along = px * dx + py * dy;
                    let across = -px * dy + py * dx;
                    let bar = if along.abs() < 0.35 * s { (-(across * across) / 2.0).exp() } else { 0.0 };
                    let r2 = (x as f32 - bx).powi(2) + (y as f32 - by).powi(2);
                    let blob = (-r2 / 4.0).exp();
                    let v = amp * bar.max(blob) + rng.random_range(0.0..0.08);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(c);
        }
        let n = labels.len();
        LabeledImages { images: Tensor::new(vec![n, 1, size, size], data).expect("consistent"), labels }
    };
    let names = (0..spec.classes).map(|c| format!("shape{c}")).collect();
    (names, make(spec.train_per_class, "train"), make(spec.test_per_class, "test"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SplitScheme {
    /// Inclusive class-id ranges.
    ByClassRange { private: [usize; 2], public: Option<[usize; 2]> },
    /// Identity counts drawn from the seeded shuffle of sorted identity names.
    ByIdentityCount { private: usize, public: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub dataset_id: String,
    pub private_class_ids: Vec<usize>,
    pub public_class_ids: Vec<usize>,
    pub seed: u64,
    pub source_digest: String,
    pub checksum: String,
}

impl SplitManifest {
    fn compute_checksum(&self) -> String {
        let mut f = Fingerprint::new()
            .u64(self.version as u64)
            .str(&self.dataset_id)
            .u64(self.seed)
            .str(&self.source_digest);
        for ids in [&self.private_class_ids, &self.public_class_ids] {
            f = f.u64(ids.len() as u64);
            for &c in ids {
                f = f.u64(c as u64);
            }
        }
        f.finish()
    }

    pub fn verify(&self) -> Result<()> {
        let private: BTreeSet<_> = self.private_class_ids.iter().collect();
        if self.public_class_ids.iter().any(|c| private.contains(c)) {
            return Err(CoreError::Data("private and public classes overlap".into()));
        }
        if self.checksum != self.compute_checksum() {
            return Err(CoreError::Format("manifest checksum mismatch".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: SplitManifest = util::read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(CoreError::Format(format!("unsupported manifest version {}", m.version)));
        }
        m.verify()?;
        Ok(m)
    }
}

/// Build a disjoint private/public class split.
pub fn build_split(source: &SourceData, scheme: &SplitScheme, seed: u64) -> Result<SplitManifest> {
    split_classes(&source.dataset_id, source.num_classes(), &source.digest, scheme, seed)
}

pub fn split_classes(
    dataset_id: &str,
    num_classes: usize,
    source_digest: &str,
    scheme: &SplitScheme,
    seed: u64,
) -> Result<SplitManifest> {
    let range = |r: [usize; 2]| -> Result<Vec<usize>> {
        if r[0] > r[1] || r[1] >= num_classes {
            return Err(CoreError::Data(format!(
                "class range {:?} invalid for {num_classes} classes",
                r
            )));
        }
        Ok((r[0]..=r[1]).collect())
    };
    let (private, public) = match (dataset_id, scheme) {
        ("facescrub", SplitScheme::ByClassRange { .. }) => {
            return Err(CoreError::Data("facescrub requires the by-identity-count scheme".into()))
        }
        ("facescrub", SplitScheme::ByIdentityCount { private, public }) => {
            if *private == 0 || *public == 0 || private + public > num_classes {
                return Err(CoreError::Data(format!(
                    "cannot draw {private}+{public} identities from {num_classes}"
                )));
            }
            let mut ids: Vec<usize> = (0..num_classes).collect();
            ids.shuffle(&mut util::rng(seed));
            let mut p = ids[..*private].to_vec();
            let mut q = ids[*private..private + public].to_vec();
            p.sort_unstable();
            q.sort_unstable();
            (p, q)
        }
        (_, SplitScheme::ByIdentityCount { .. }) => {
            return Err(CoreError::Data(format!(
                "the by-identity-count scheme does not apply to {dataset_id}"
            )))
        }
        (_, SplitScheme::ByClassRange { private, public }) => {
            let p = range(*private)?;
            let q = match public {
                Some(r) => range(*r)?,
                None => Vec::new(),
            };
            (p, q)
        }
    };
    if public.is_empty() {
        return Err(CoreError::Data("public split is empty".into()));
    }
    if private.is_empty() {
        return Err(CoreError::Data("private split is empty".into()));
    }
    if public.iter().any(|c| private.contains(c)) {
        return Err(CoreError::Data("private and public classes overlap".into()));
    }
    let mut m = SplitManifest {
        version: MANIFEST_VERSION,
        dataset_id: dataset_id.to_string(),
        private_class_ids: private,
        public_class_ids: public,
        seed,
        source_digest: source_digest.to_string(),
        checksum: String::new(),
    };
    m.checksum = m.compute_checksum();
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Private,
    Public,
}

/// One side of a split; labels are remapped to positions in `classes`.
#[derive(Clone, Debug)]
pub struct SideData {
    pub classes: Vec<usize>,
    pub train: LabeledImages,
    pub test: LabeledImages,
}

pub fn select_side(source: &SourceData, manifest: &SplitManifest, side: Side) -> Result<SideData> {
    if manifest.dataset_id != source.dataset_id || manifest.source_digest != source.digest {
        return Err(CoreError::Data("manifest was built for different source data".into()));
    }
    let classes = match side {
        Side::Private => manifest.private_class_ids.clone(),
        Side::Public => manifest.public_class_ids.clone(),
    };
    let pick = |part: &LabeledImages| {
        let idx: Vec<usize> = (0..part.len()).filter(|&i| classes.contains(&part.labels[i])).collect();
        let mut sub = part.subset(&idx);
        for l in &mut sub.labels {
            *l = classes.iter().position(|c| c == l).expect("filtered");
        }
        sub
    };
    Ok(SideData { train: pick(&source.train), test: pick(&source.test), classes: classes.clone() })
}

/// Shuffled mini-batch stream over a labelled collection; one epoch.
pub struct BatchStream<'a> {
    data: &'a LabeledImages,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let sub = self.data.subset(idx);
        Some(ImageBatch { pixels: sub.images, labels: sub.labels })
    }
}

pub fn batches(data: &LabeledImages, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchStream<'_>> {
    if batch_size < 1 {
        return invalid("batch_size must be at least 1");
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut util::rng(seed));
    }
    Ok(BatchStream { data, order, pos: 0, batch_size })
}

/// Batches of one side's training partition.
pub fn load_batches<'a>(side: &'a SideData, batch_size: usize, shuffle_seed: u64) -> Result<BatchStream<'a>> {
    batches(&side.train, batch_size, Some(shuffle_seed))
}
