//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `HYSPKCKP` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | manifest length `L` in bytes (`u64`) |
//! | L | UTF-8 JSON manifest |
//! | rest | tensor blob |
//!
//! Each manifest entry gives a tensor's `name`, `group` (`param`, `adam.m` or
//! `adam.v`), `shape`, byte `offset` into the blob, and element count `len`.
//! Elements are stored in the manifest's `dtype` (`f32le` or `f64le`).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::{param_shapes, HeadKind, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYSPKCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dtype: String,
    pub step: u64,
    pub head: HeadKind,
    /// Number of optimizer updates behind the `adam.*` tensors, if present.
    pub adam_step: Option<u64>,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub head: HeadKind,
    pub config: RunConfig,
    pub params: ModelParams<T>,
    pub optimizer: Option<AdamState<T>>,
}

const GROUP_PARAM: &str = "param";
const GROUP_M: &str = "adam.m";
const GROUP_V: &str = "adam.v";

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut groups: Vec<(&str, &ModelParams<T>)> = vec![(GROUP_PARAM, &ckpt.params)];
    if let Some(opt) = &ckpt.optimizer {
        groups.push((GROUP_M, &opt.m));
        groups.push((GROUP_V, &opt.v));
    }
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    for (group, params) in groups {
        for (name, t) in params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                group: group.into(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                len: t.numel() as u64,
            });
            for &v in t.data() {
                v.write_le(&mut blob);
            }
        }
    }
    let manifest = Manifest {
        dtype: T::DTYPE.into(),
        step: ckpt.step,
        head: ckpt.head,
        adam_step: ckpt.optimizer.as_ref().map(|o| o.step),
        config: ckpt.config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

/// Reads the manifest without decoding tensors.
pub fn decode_manifest(bytes: &[u8], context: &str) -> Result<(Manifest, usize)> {
    let fail = |d: String| Error::format(context, d);
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("bad magic; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let end = (HEADER_LEN as u64)
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| fail(format!("manifest length {len} runs past end of file")))? as usize;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..end]).map_err(|e| fail(format!("manifest: {e}")))?;
    manifest.config.validate().map_err(|e| fail(format!("manifest config: {e}")))?;
    Ok((manifest, end))
}

fn read_values<T: Scalar>(blob: &[u8], dtype: &str, entry: &TensorEntry, context: &str) -> Result<Vec<T>> {
    let width = match dtype {
        "f32le" => 4,
        "f64le" => 8,
        other => return Err(Error::format(context, format!("unsupported dtype {other:?}"))),
    };
    let numel = entry.shape.iter().try_fold(1u64, |n, &d| n.checked_mul(d as u64));
    if numel != Some(entry.len) {
        return Err(Error::format(
            context,
            format!("entry {} ({}) has len {} but shape {:?}", entry.name, entry.group, entry.len, entry.shape),
        ));
    }
    let span = entry
        .len
        .checked_mul(width)
        .and_then(|b| b.checked_add(entry.offset))
        .filter(|&e| e <= blob.len() as u64)
        .ok_or_else(|| {
            Error::format(
                context,
                format!(
                    "entry {} ({}) spans bytes {}..+{} beyond the {}-byte blob",
                    entry.name,
                    entry.group,
                    entry.offset,
                    entry.len.saturating_mul(width),
                    blob.len()
                ),
            )
        })?;
    let bytes = &blob[entry.offset as usize..span as usize];
    Ok(if width == 4 {
        bytes.chunks_exact(4).map(|c| T::from_f64(f32::read_le(c).to_f64())).collect()
    } else {
        bytes.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect()
    })
}

/// Decodes a checkpoint. Stored values are converted to `T` when the file's
/// dtype differs; same-dtype loads are bit-exact.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], context: &str) -> Result<Checkpoint<T>> {
    let (m, start) = decode_manifest(bytes, context)?;
    let blob = &bytes[start..];
    let mut groups = [ModelParams::<T>::default(), ModelParams::default(), ModelParams::default()];
    let mut seen = BTreeSet::new();
    for e in &m.tensors {
        let slot = match e.group.as_str() {
            GROUP_PARAM => 0,
            GROUP_M => 1,
            GROUP_V => 2,
            other => return Err(Error::format(context, format!("entry {} has unknown group {other:?}", e.name))),
        };
        if !seen.insert((slot, e.name.clone())) {
            return Err(Error::format(context, format!("entry {} ({}) appears twice", e.name, e.group)));
        }
        let values = read_values(blob, &m.dtype, e, context)?;
        groups[slot].insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
    }
    let [params, am, av] = groups;
    let expected = param_shapes(&m.config.model, m.head);
    for (name, t) in params.iter() {
        match expected.get(name) {
            None => return Err(Error::format(context, format!("entry {name} is not a parameter of the recorded config"))),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::format(context, format!("entry {name} has shape {:?}, config expects {s:?}", t.shape())))
            }
            _ => {}
        }
    }
    if let Some(missing) = expected.keys().find(|k| params.get(k).is_none()) {
        return Err(Error::format(context, format!("parameter {missing} is missing from the manifest")));
    }
    let optimizer = match m.adam_step {
        Some(step) => {
            for (label, g) in [(GROUP_M, &am), (GROUP_V, &av)] {
                if g.len() != params.len() || params.iter().any(|(k, t)| g.get(k).map(Tensor::shape) != Some(t.shape())) {
                    return Err(Error::format(context, format!("optimizer group {label} does not match the parameters")));
                }
            }
            Some(AdamState { step, m: am, v: av })
        }
        None if am.is_empty() && av.is_empty() => None,
        None => return Err(Error::format(context, "optimizer tensors present without adam_step")),
    };
    Ok(Checkpoint { step: m.step, head: m.head, config: m.config, params, optimizer })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model = ModelConfig::tiny();
        cfg
    }

    fn sample() -> Checkpoint<f32> {
        let cfg = tiny();
        let params = ModelParams::init(&cfg.model, HeadKind::Reconstruct, 4).unwrap();
        let mut optimizer = AdamState::new(&params);
        optimizer.step = 3;
        Checkpoint { step: 3, head: HeadKind::Reconstruct, config: cfg, params, optimizer: Some(optimizer) }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = encode_checkpoint(&c);
        assert_eq!(decode_checkpoint::<f32>(&bytes, "t").unwrap(), c);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = encode_checkpoint(&sample());
        for cut in [0, 10, 30, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint::<f32>(&bytes[..cut], "t"), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_checkpoint::<f32>(&bad, "t"), Err(Error::Format { .. })));
    }
}
