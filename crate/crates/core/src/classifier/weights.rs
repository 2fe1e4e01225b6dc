//! Packed-weights container.
//!
//! ```text
//! offset 0   8 bytes   magic "DFWT0001"
//! offset 8   8 bytes   manifest length N, u64 little-endian
//! offset 16  N bytes   UTF-8 JSON manifest (PackedManifest)
//! offset 16+N          tensor data, f64 little-endian, in manifest order
//! ```
//!
//! Tensor offsets in the manifest are byte offsets into the data section.
//! The data section must be exactly as long as the tensor table says.

use serde::{Deserialize, Serialize};

use super::ClassifierModel;
use crate::error::{Error, Result};
use crate::fcnn::{FcnnArchitecture, FcnnParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DFWT0001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedManifest {
    pub format_version: u32,
    pub architecture: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fcnn: Option<FcnnArchitecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

fn table<'a>(named: impl IntoIterator<Item = (String, &'a Tensor)>) -> Vec<TensorEntry> {
    let mut offset = 0u64;
    named
        .into_iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            entry
        })
        .collect()
}

impl PackedManifest {
    pub(crate) fn classifier(model: &ClassifierModel, named: &[(String, &Tensor)]) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture: model.arch().to_string(),
            num_classes: Some(model.num_classes()),
            input_height: Some(model.input_size().0),
            input_width: Some(model.input_size().1),
            mean: Some(model.mean()),
            std: Some(model.std()),
            fcnn: None,
            seed: None,
            tensors: table(named.iter().map(|(n, t)| (n.clone(), *t))),
        }
    }

    pub fn fcnn(params: &FcnnParams) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            architecture: "fcnn".into(),
            num_classes: None,
            input_height: None,
            input_width: None,
            mean: None,
            std: None,
            fcnn: Some(params.arch.clone()),
            seed: Some(params.seed),
            tensors: table(params.tensor_names().into_iter().zip(params.tensors())),
        }
    }
}

pub fn write_packed(manifest: &PackedManifest, tensors: &[&Tensor]) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_packed(bytes: &[u8]) -> Result<(PackedManifest, Vec<Tensor>)> {
    if bytes.len() < 16 {
        return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..4] == b"DFWT" {
            return Err(Error::Format(format!(
                "unsupported version {:?}",
                String::from_utf8_lossy(&bytes[4..8])
            )));
        }
        return Err(Error::Format("bad magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let json_end = 16u64
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Format(format!("manifest length {len} exceeds file size")))? as usize;
    let manifest: PackedManifest = serde_json::from_slice(&bytes[16..json_end])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format_version {}", manifest.format_version)));
    }

    let data = &bytes[json_end..];
    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(Error::Format(format!(
                "tensor {} at offset {}, expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {} shape overflows", entry.name)))?;
        let start = entry.offset as usize;
        let end = start
            .checked_add(count * 8)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| Error::Format(format!("truncated data for tensor {}", entry.name)))?;
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), values)?);
        expected_offset = end as u64;
    }
    if expected_offset != data.len() as u64 {
        return Err(Error::Format(format!(
            "data section is {} bytes, tensor table covers {expected_offset}",
            data.len()
        )));
    }
    Ok((manifest, tensors))
}

/// Serializes a structure-network snapshot in the packed format.
pub fn fcnn_to_bytes(params: &FcnnParams) -> Vec<u8> {
    write_packed(&PackedManifest::fcnn(params), &params.tensors())
}
