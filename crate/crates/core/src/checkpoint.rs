//! Single-file checkpoint archive.
//!
//! Layout: the 8-byte magic `MBLIPCK1`, a little-endian `u64` header length,
//! a JSON header (config, stage tag, adapter set, tensor index), then every
//! tensor as little-endian `f64` in index order. Tensors are stored sorted by
//! name, so saving the same model twice yields identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterSet;
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, VisionLanguageModel};

const MAGIC: &[u8; 8] = b"MBLIPCK1";
const ADAPTER_PREFIX: &str = "lora.";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload, in `f64` elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: ArchiveKind,
    stage: String,
    config: ModelConfig,
    adapters: Option<AdapterSet>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArchiveKind {
    Full,
    AdaptersOnly,
}

fn encode<'a>(
    kind: ArchiveKind,
    stage: &str,
    config: &ModelConfig,
    adapters: Option<&AdapterSet>,
    tensors: impl Iterator<Item = (&'a String, &'a Mat)>,
) -> Result<Vec<u8>> {
    let tensors: Vec<(&String, &Mat)> = tensors.collect();
    let mut index = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, m) in &tensors {
        index.push(TensorEntry {
            name: (*name).clone(),
            rows: m.nrows(),
            cols: m.ncols(),
            offset,
        });
        offset += m.len();
    }
    let header = Header {
        kind,
        stage: stage.to_string(),
        config: config.clone(),
        adapters: adapters.cloned(),
        tensors: index,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, m) in tensors {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Header, ParamStore)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint archive (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + hlen..];
    let mut params = ParamStore::default();
    for t in &header.tensors {
        let start = t.offset * 8;
        let end = start + t.rows * t.cols * 8;
        let raw = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("payload too short for `{}`", t.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let m = Mat::from_shape_vec((t.rows, t.cols), values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.insert(t.name.clone(), m);
    }
    Ok((header, params))
}

/// Serializes the whole model (base weights and any attached adapters).
pub fn to_bytes(model: &VisionLanguageModel, stage: &str) -> Result<Vec<u8>> {
    encode(
        ArchiveKind::Full,
        stage,
        model.config(),
        model.adapters(),
        model.params().iter(),
    )
}

/// Returns the model and its stage tag.
pub fn from_bytes(bytes: &[u8]) -> Result<(VisionLanguageModel, String)> {
    let (header, params) = decode(bytes)?;
    if header.kind != ArchiveKind::Full {
        return Err(Error::Checkpoint(
            "archive holds adapters only; load a base model and apply it".into(),
        ));
    }
    if let Some(set) = &header.adapters {
        for name in set.param_names() {
            if !params.contains(&name) {
                return Err(Error::Checkpoint(format!("missing adapter tensor `{name}`")));
            }
        }
    }
    let model = VisionLanguageModel::from_parts(header.config, params, header.adapters)?;
    Ok((model, header.stage))
}

pub fn save(path: &Path, model: &VisionLanguageModel, stage: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model, stage)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(VisionLanguageModel, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Only the `lora.` tensors and the adapter set.
pub fn adapters_to_bytes(model: &VisionLanguageModel, stage: &str) -> Result<Vec<u8>> {
    let Some(set) = model.adapters() else {
        return Err(Error::Adapter("model has no adapters to export".into()));
    };
    encode(
        ArchiveKind::AdaptersOnly,
        stage,
        model.config(),
        Some(set),
        model.params().iter().filter(|(n, _)| n.starts_with(ADAPTER_PREFIX)),
    )
}

/// Installs adapters from an adapters-only archive onto an adapter-free base
/// model with the same config.
pub fn apply_adapters(model: &mut VisionLanguageModel, bytes: &[u8]) -> Result<()> {
    let (header, params) = decode(bytes)?;
    if header.kind != ArchiveKind::AdaptersOnly {
        return Err(Error::Checkpoint("expected an adapters-only archive".into()));
    }
    if &header.config != model.config() {
        return Err(Error::Checkpoint(
            "adapter archive was built for a different model config".into(),
        ));
    }
    if model.adapters().is_some() {
        return Err(Error::Adapter("model already has adapters attached".into()));
    }
    let set = header
        .adapters
        .ok_or_else(|| Error::Checkpoint("adapter archive without adapter set".into()))?;
    for base in &set.targets {
        let (d_out, d_in) = model.params().get(base)?.dim();
        let a = params
            .get(&AdapterSet::a_name(base))
            .map_err(|_| Error::Checkpoint(format!("missing A for `{base}`")))?;
        let b = params
            .get(&AdapterSet::b_name(base))
            .map_err(|_| Error::Checkpoint(format!("missing B for `{base}`")))?;
        if a.dim() != (set.config.r, d_in) || b.dim() != (d_out, set.config.r) {
            return Err(Error::Checkpoint(format!("adapter shapes do not fit `{base}`")));
        }
    }
    for (name, m) in params.iter() {
        model.params_mut().insert(name.clone(), m.clone());
    }
    *model.adapters_mut() = Some(set);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach_lora, LoraConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            h_img: 8,
            num_query_tokens: 4,
            h_q: 8,
            h_v: 8,
            h_l: 8,
            n_heads: 2,
            n_layers_vit: 1,
            n_layers_qformer: 1,
            n_layers_lm: 1,
            vocab_size: 16,
            max_positions: 32,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut model = VisionLanguageModel::new(small()).unwrap();
        attach_lora(&mut model, LoraConfig::default(), 3).unwrap();
        model
            .params_mut()
            .get_mut(&AdapterSet::b_name("lm.layers.0.attn.q.weight"))
            .unwrap()
            .fill(0.125);
        let bytes = to_bytes(&model, "realign").unwrap();
        let (back, stage) = from_bytes(&bytes).unwrap();
        assert_eq!(stage, "realign");
        assert_eq!(back, model);
        assert_eq!(to_bytes(&back, "realign").unwrap(), bytes);
    }

    #[test]
    fn adapter_file_reproduces_adapted_model() {
        let base = VisionLanguageModel::new(small()).unwrap();
        let mut adapted = base.clone();
        attach_lora(&mut adapted, LoraConfig::default(), 3).unwrap();
        adapted
            .params_mut()
            .get_mut(&AdapterSet::b_name("lm.layers.0.mlp.up.weight"))
            .unwrap()
            .fill(-0.5);
        let bytes = adapters_to_bytes(&adapted, "realign").unwrap();
        let mut rebuilt = base.clone();
        apply_adapters(&mut rebuilt, &bytes).unwrap();
        assert_eq!(rebuilt, adapted);
        assert!(apply_adapters(&mut rebuilt, &bytes).is_err());
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(from_bytes(b"garbage").is_err());
        let model = VisionLanguageModel::new(small()).unwrap();
        let bytes = to_bytes(&model, "init").unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/init.ckpt");
        let model = VisionLanguageModel::new(small()).unwrap();
        save(&path, &model, "init").unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back, model);
        assert!(matches!(load(&dir.path().join("none")), Err(Error::Io { .. })));
    }
}
