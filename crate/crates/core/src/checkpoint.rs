//! Model checkpoints: an 8-byte little-endian header length, a JSON header
//! (model spec, running-statistic step counts, free-form metadata and a
//! tensor table), then the tensors as raw little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_mlp, Mlp, MlpSpec};

pub const FORMAT: &str = "normalnorm-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: MlpSpec,
    pub norm_steps: Vec<u64>,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Mlp, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, values) in model.named_tensors() {
        tensors.push(TensorEntry { name, shape, offset: blob.len() });
        for v in values {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        spec: model.spec.clone(),
        norm_steps: model.norm_steps(),
        metadata,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Mlp, CheckpointHeader)> {
    let bad = |m: &str| Error::Parse(format!("malformed checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(bad("missing header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    if header.format != FORMAT {
        return Err(bad(&format!("unknown format {:?}", header.format)));
    }
    let blob = &bytes[8 + hlen..];
    let mut model = build_mlp(&header.spec, 0)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let count: usize = t.shape.iter().product();
        let raw = t
            .offset
            .checked_add(4 * count)
            .and_then(|end| blob.get(t.offset..end))
            .ok_or_else(|| bad(&format!("tensor {} runs past the end", t.name)))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push((t.name.clone(), values));
    }
    model.load_named(&tensors)?;
    model.set_norm_steps(&header.norm_steps)?;
    Ok((model, header))
}

pub fn save(path: &Path, model: &Mlp, metadata: serde_json::Value) -> Result<()> {
    std::fs::write(path, to_bytes(model, metadata)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Mlp, CheckpointHeader)> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{NormConfig, NormKind};

    #[test]
    fn round_trip_is_f32_exact() {
        let spec = MlpSpec::new(3, vec![4, 5], 2, NormConfig::of_kind(NormKind::Normality));
        let m = build_mlp(&spec, 9).unwrap();
        let bytes = to_bytes(&m, serde_json::json!({"note": 1})).unwrap();
        let (back, header) = from_bytes(&bytes).unwrap();
        assert_eq!(header.metadata["note"], 1);
        for ((n1, _, a), (n2, _, b)) in m.named_tensors().iter().zip(back.named_tensors()) {
            assert_eq!(*n1, n2);
            for (x, y) in a.iter().zip(&b) {
                assert_eq!((*x as f32) as f64, *y);
            }
        }
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(&bytes[..5]).is_err());
    }
}
