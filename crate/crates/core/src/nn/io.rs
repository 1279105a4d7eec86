//! The LCZNN model format.
//!
//! "LCZNN" | u32 version=1 | u32 descriptor length | JSON descriptor |
//! f32le state tensors in declaration order (batch-norm running statistics
//! follow each block's gamma and beta).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{f32s_to_le, le_to_f32s, read_file, write_atomic, Reader};
use crate::nn::model::{Architecture, ChannelNorm, MscnnModel};
use crate::scalar::Scalar;

const MAGIC: &[u8; 5] = b"LCZNN";
const VERSION: u32 = 1;

/// What the stored network is; transfer models carry a replaced head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mscnn,
    Transfer,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    kind: ModelKind,
    architecture: Architecture,
    input_norm: ChannelNorm,
    frozen: Vec<bool>,
    tensor_lengths: Vec<usize>,
}

pub fn encode_model<T: Scalar>(model: &MscnnModel<T>, kind: ModelKind) -> Result<Vec<u8>> {
    model.check()?;
    let tensors = model.state_tensors();
    let desc = Descriptor {
        kind,
        architecture: model.arch.clone(),
        input_norm: model.norm.clone(),
        frozen: model.frozen.clone(),
        tensor_lengths: tensors.iter().map(|(_, t)| t.len()).collect(),
    };
    let json = serde_json::to_vec(&desc)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        let v: Vec<f32> = t.iter().map(|x| x.as_f64() as f32).collect();
        f32s_to_le(&v, &mut out);
    }
    Ok(out)
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<(MscnnModel<T>, ModelKind)> {
    let bad = |m: &str| Error::MalformedModel(m.to_string());
    let mut r = Reader::new(bytes);
    if r.take(5) != Some(MAGIC.as_slice()) {
        return Err(bad("missing LCZNN magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(Error::MalformedModel(format!("unsupported LCZNN version {version}")));
    }
    let len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let json = r.take(len).ok_or_else(|| bad("truncated descriptor"))?;
    let desc: Descriptor = serde_json::from_slice(json).map_err(|e| Error::MalformedModel(format!("descriptor: {e}")))?;
    desc.architecture.validate()?;
    let mut model = MscnnModel::<T>::new(desc.architecture, 0)?;
    model.norm = desc.input_norm;
    model.frozen = desc.frozen;
    let lengths: Vec<usize> = model.state_tensors().iter().map(|(_, t)| t.len()).collect();
    if lengths != desc.tensor_lengths {
        return Err(bad("tensor lengths disagree with the architecture"));
    }
    for t in model.state_tensors_mut() {
        let raw = r.take(t.len() * 4).ok_or_else(|| bad("truncated parameters"))?;
        for (d, v) in t.iter_mut().zip(le_to_f32s(raw)) {
            if !v.is_finite() {
                return Err(bad("non-finite parameter"));
            }
            *d = T::from_f64_lossy(v as f64);
        }
    }
    if r.remaining() != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    model.check()?;
    Ok((model, desc.kind))
}

pub fn save_model<T: Scalar>(model: &MscnnModel<T>, kind: ModelKind, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(model, kind)?)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<(MscnnModel<T>, ModelKind)> {
    decode_model(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::tiny_architecture;

    #[test]
    fn round_trip_is_exact_for_f32() {
        let mut m = MscnnModel::<f32>::new(tiny_architecture(), 9).unwrap();
        m.frozen[0] = true;
        m.blocks[1].bn.running_var[2] = 0.25;
        m.norm.mean[1] = 3.5;
        let bytes = encode_model(&m, ModelKind::Transfer).unwrap();
        let (back, kind) = decode_model::<f32>(&bytes).unwrap();
        assert_eq!(kind, ModelKind::Transfer);
        assert_eq!(back, m);
        assert_eq!(encode_model(&back, ModelKind::Transfer).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let m = MscnnModel::<f32>::new(tiny_architecture(), 9).unwrap();
        let bytes = encode_model(&m, ModelKind::Mscnn).unwrap();
        assert!(decode_model::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model::<f32>(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode_model::<f32>(&magic).is_err());
    }
}
