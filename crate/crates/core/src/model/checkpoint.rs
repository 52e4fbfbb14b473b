//! Single-file checkpoint: magic, a JSON header (architecture, training config
//! hash, tensor table) and the raw little-endian `f64` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelParameters, ParamBlock};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EDGESEG1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    config_hash: String,
    has_rotation_head: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub config_hash: String,
}

fn named_layers(params: &ModelParameters) -> Vec<(String, &super::Affine)> {
    fn push<'a>(out: &mut Vec<(String, &'a super::Affine)>, prefix: &str, block: &'a dyn ParamBlock) {
        for (i, layer) in block.layers().into_iter().enumerate() {
            out.push((format!("{prefix}.{i}"), layer));
        }
    }
    let mut out = Vec::new();
    push(&mut out, "encoder", &params.encoder);
    push(&mut out, "seg_decoder", &params.seg_decoder);
    push(&mut out, "edge_decoder", &params.edge_decoder);
    if let Some(h) = &params.rotation_head {
        push(&mut out, "rotation_head", h);
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ModelParameters, config_hash: &str) -> Result<()> {
    let layers = named_layers(params);
    let header = Header {
        arch: params.arch.clone(),
        config_hash: config_hash.to_string(),
        has_rotation_head: params.rotation_head.is_some(),
        tensors: layers
            .iter()
            .map(|(name, l)| TensorEntry {
                name: name.clone(),
                rows: l.weight.nrows(),
                cols: l.weight.ncols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut bytes = Vec::with_capacity(16 + header_bytes.len() + 8 * params.param_count());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, l) in &layers {
        for v in l.values() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::util::write_atomic(path, &bytes)
}

/// Load a checkpoint, rejecting any tensor whose shape disagrees with the
/// stored architecture.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16 + header_len;
    if bytes.len() < body_start {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..body_start]).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let mut params = ModelParameters::init(&header.arch, 0, header.has_rotation_head)?;
    let expected: Vec<(String, usize, usize)> = named_layers(&params)
        .into_iter()
        .map(|(n, l)| (n, l.weight.nrows(), l.weight.ncols()))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((name, rows, cols), entry) in expected.iter().zip(&header.tensors) {
        if name != &entry.name || *rows != entry.rows || *cols != entry.cols {
            return Err(bad(format!(
                "tensor {} has shape {}x{}, architecture expects {name} {rows}x{cols}",
                entry.name, entry.rows, entry.cols
            )));
        }
    }
    let payload = &bytes[body_start..];
    if payload.len() != 8 * params.param_count() {
        return Err(bad(format!(
            "payload holds {} values, architecture needs {}",
            payload.len() / 8,
            params.param_count()
        )));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let head = params.rotation_head.iter_mut().flat_map(|h| h.layers_mut());
    let layers = params
        .encoder
        .layers_mut()
        .into_iter()
        .chain(params.seg_decoder.layers_mut())
        .chain(params.edge_decoder.layers_mut())
        .chain(head);
    for layer in layers {
        for v in layer.values_mut() {
            *v = values.next().expect("length checked");
        }
    }
    Ok(Checkpoint {
        params,
        config_hash: header.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let m = ModelParameters::init(&ArchConfig::new(vec![2, 3], 5), 9, true).unwrap();
        save_checkpoint(&p, &m, "abc").unwrap();
        let c = load_checkpoint(&p).unwrap();
        assert_eq!(c.params, m);
        assert_eq!(c.config_hash, "abc");
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let m = ModelParameters::init(&ArchConfig::new(vec![2, 3], 5), 9, false).unwrap();
        save_checkpoint(&p, &m, "h").unwrap();
        // rewrite the header with a different bottleneck width but the same payload
        let bytes = fs::read(&p).unwrap();
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[16..16 + len].to_vec()).unwrap();
        let patched = header.replacen("\"bottleneck_channels\":5", "\"bottleneck_channels\":6", 1);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(patched.len() as u64).to_le_bytes());
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[16 + len..]);
        fs::write(&p, out).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
