//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ADVINVNN"
//! 8       4     format version (u32, currently 1)
//! 12      4     header length H in bytes (u32)
//! 16      H     UTF-8 JSON header: {"recipe", "input_shape", "params",
//!               "buffers", "extra"}; params/buffers list tensor shapes
//! 16+H    ...   f32 payload: every parameter tensor, then every buffer
//!               tensor, in header order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::layers::LayerSpec;
use crate::network::Network;

pub const MAGIC: &[u8; 8] = b"ADVINVNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    recipe: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    params: Vec<Vec<usize>>,
    buffers: Vec<Vec<usize>>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Serialise a network plus caller-provided metadata.
pub fn write_checkpoint<W: Write>(mut w: W, net: &Network, extra: &serde_json::Value) -> Result<()> {
    let header = Header {
        recipe: net.recipe().to_vec(),
        input_shape: net.input_shape().to_vec(),
        params: net.params().iter().map(|t| t.shape().to_vec()).collect(),
        buffers: net.buffers().iter().map(|t| t.shape().to_vec()).collect(),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for t in net.params().into_iter().chain(net.buffers()) {
        buf.clear();
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Encode to an in-memory buffer.
pub fn checkpoint_bytes(net: &Network, extra: &serde_json::Value) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, net, extra)?;
    Ok(out)
}

/// Read a checkpoint back; returns the network and its metadata.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Network, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    r.read_exact(&mut word)?;
    let len = u32::from_le_bytes(word) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut net = Network::new(header.recipe, &header.input_shape, 0)?;
    let declared: Vec<&Vec<usize>> = header.params.iter().chain(header.buffers.iter()).collect();
    let mut slots: Vec<&mut crate::Tensor> = Vec::new();
    let n_params = header.params.len();
    {
        let (params, buffers) = (net.params().len(), net.buffers().len());
        if params != n_params || buffers != header.buffers.len() {
            return Err(NnError::Format("tensor count does not match recipe".into()));
        }
    }
    // split borrows: parameters first, then buffers
    let mut params_buf: Vec<Vec<f32>> = Vec::with_capacity(declared.len());
    for shape in &declared {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        params_buf.push(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    slots.extend(net.params_mut());
    for (i, slot) in slots.iter_mut().enumerate() {
        if slot.shape() != declared[i].as_slice() {
            return Err(NnError::Format(format!("parameter {i} has unexpected shape")));
        }
        slot.data_mut().copy_from_slice(&params_buf[i]);
    }
    drop(slots);
    for (j, slot) in net.buffers_mut().into_iter().enumerate() {
        let i = n_params + j;
        if slot.shape() != declared[i].as_slice() {
            return Err(NnError::Format(format!("buffer {j} has unexpected shape")));
        }
        slot.data_mut().copy_from_slice(&params_buf[i]);
    }
    Ok((net, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_weights_and_metadata() {
        let net = Network::new(
            vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm2d { channels: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { inputs: 32, outputs: 3 },
            ],
            &[1, 4, 4],
            9,
        )
        .unwrap();
        let extra = serde_json::json!({"arch_id": "toy"});
        let bytes = checkpoint_bytes(&net, &extra).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let (back, meta) = read_checkpoint(bytes.as_slice()).unwrap();
        assert!(net.same_weights(&back));
        assert_eq!(meta, extra);
    }

    #[test]
    fn rejects_truncated_payload() {
        let net = Network::new(vec![LayerSpec::Linear { inputs: 2, outputs: 2 }], &[2], 0).unwrap();
        let bytes = checkpoint_bytes(&net, &serde_json::Value::Null).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
