//! Hashing, seed derivation, raw tensor files and PNG output.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use advinv_nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental hasher for composite content fingerprints.
#[derive(Default, Clone)]
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn str(mut self, s: &str) -> Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn bytes(mut self, b: &[u8]) -> Self {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    pub fn f32s(mut self, v: &[f32]) -> Self {
        self.0.update((v.len() as u64).to_le_bytes());
        for x in v {
            self.0.update(x.to_le_bytes());
        }
        self
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Content key of one image: first 16 bytes of the SHA-256 of its f32 pixels.
pub fn image_hash(pixels: &[f32]) -> String {
    let mut h = Sha256::new();
    for x in pixels {
        h.update(x.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut f = BufReader::new(open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| CoreError::Missing {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Derive an independent child seed from a root seed and a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let d = Sha256::new()
        .chain_update(root.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const TENSOR_MAGIC: &[u8; 8] = b"ADVINVTS";

/// Raw tensor file: magic, u32 version, u32 rank, u64 dims, f32 payload (LE).
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(open(path)?).read_to_end(&mut bytes)?;
    let bad = || CoreError::Format(format!("{} is not a tensor file", path.display()));
    if bytes.len() < 16 || &bytes[..8] != TENSOR_MAGIC {
        return Err(bad());
    }
    let rank = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let mut off = 16;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = bytes.get(off..off + 8).ok_or_else(bad)?;
        shape.push(u64::from_le_bytes(d.try_into().unwrap()) as usize);
        off += 8;
    }
    let n: usize = shape.iter().product();
    let payload = bytes.get(off..off + 4 * n).ok_or_else(bad)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

/// Write one `(C, H, W)` image with C in {1, 3} as an 8-bit PNG.
pub fn save_png(path: &Path, pixels: &[f32], c: usize, h: usize, w: usize) -> Result<()> {
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let buf: Vec<u8> = pixels.iter().map(|&v| q(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf)
                .ok_or_else(|| CoreError::Format("bad image buffer".into()))?
                .save(path)?;
        }
        3 => {
            let mut buf = Vec::with_capacity(h * w * 3);
            for i in 0..h * w {
                for ch in 0..3 {
                    buf.push(q(pixels[ch * h * w + i]));
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf)
                .ok_or_else(|| CoreError::Format("bad image buffer".into()))?
                .save(path)?;
        }
        _ => return Err(CoreError::Format(format!("cannot write {c}-channel PNG"))),
    }
    Ok(())
}

/// Tile a batch `(N, C, H, W)` into a grid PNG with `cols` columns.
pub fn save_grid(path: &Path, batch: &Tensor, cols: usize) -> Result<()> {
    let (n, c, h, w) = batch.dims4()?;
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let (gh, gw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut grid = vec![1.0f32; c * gh * gw];
    for i in 0..n {
        let (r, col) = (i / cols, i % cols);
        let img = batch.item(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let gy = 1 + r * (h + 1) + y;
                    let gx = 1 + col * (w + 1) + x;
                    grid[ch * gh * gw + gy * gw + gx] = img[ch * h * w + y * w + x];
                }
            }
        }
    }
    save_png(path, &grid, c, gh, gw)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(open(path)?))?)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn stddev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
