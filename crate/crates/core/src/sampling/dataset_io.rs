//! The LCZ1 binary dataset format.
//!
//! ```text
//! "LCZ1" | u32 version=1 | u32 n_samples | u32 patch_size | u32 n_channels
//! per sample: u8 label code | u8 split tag (0 train, 1 val, 2 test, 255 unset)
//!             | patch_size^2 * n_channels f32, channel-major, row-major
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use crate::class::LczClass;
use crate::error::{Error, Result};
use crate::io_util::{f32s_to_le, le_to_f32s, read_file, write_atomic, Reader};
use crate::raster::Patch;
use crate::sampling::{SampleSet, Split};

const MAGIC: &[u8; 4] = b"LCZ1";
const VERSION: u32 = 1;
const UNSET: u8 = 255;

pub fn encode_dataset(set: &SampleSet) -> Result<Vec<u8>> {
    set.validate()?;
    let per_sample = set.patch_size * set.patch_size * set.n_channels;
    let mut out = Vec::with_capacity(20 + set.len() * (2 + 4 * per_sample));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, set.len() as u32, set.patch_size as u32, set.n_channels as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..set.len() {
        out.push(set.labels[i].code());
        out.push(set.split_tags.as_ref().map_or(UNSET, |t| t[i] as u8));
        f32s_to_le(&set.patches[i].data, &mut out);
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SampleSet> {
    let bad = |msg: &str| Error::MalformedDataset(msg.to_string());
    let mut r = Reader::new(bytes);
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing LCZ1 magic"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(Error::MalformedDataset(format!("unsupported version {version}")));
    }
    let n = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let size = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let channels = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let per_sample = size * size * channels;
    let needed = n
        .checked_mul(2 + 4 * per_sample)
        .ok_or_else(|| bad("header dimensions overflow"))?;
    if r.remaining() < needed {
        return Err(Error::MalformedDataset(format!(
            "truncated payload: {} bytes for {n} samples needing {needed}",
            r.remaining()
        )));
    }
    if r.remaining() > needed {
        return Err(Error::MalformedDataset(format!("{} trailing bytes", r.remaining() - needed)));
    }
    let mut set = SampleSet::new(size, channels);
    let mut tags = Vec::with_capacity(n);
    for _ in 0..n {
        let code = r.u8().ok_or_else(|| bad("truncated sample"))?;
        let label = LczClass::from_code(code).map_err(|_| Error::MalformedDataset(format!("label code {code}")))?;
        let tag = r.u8().ok_or_else(|| bad("truncated sample"))?;
        tags.push(match tag {
            UNSET => None,
            t => Some(Split::from_code(t).ok_or_else(|| Error::MalformedDataset(format!("split tag {t}")))?),
        });
        let data = le_to_f32s(r.take(4 * per_sample).ok_or_else(|| bad("truncated sample"))?);
        let mut patch = Patch::new(size, channels, data)?;
        patch.label = Some(label);
        set.patches.push(patch);
        set.labels.push(label);
    }
    set.split_tags = if tags.iter().all(Option::is_none) {
        None
    } else if tags.iter().all(Option::is_some) {
        Some(tags.into_iter().flatten().collect())
    } else {
        return Err(bad("split tags must be set for all samples or none"));
    };
    Ok(set)
}

pub fn save_dataset(set: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(set)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SampleSet> {
    decode_dataset(&read_file(path.as_ref())?)
}
