//! Model file: magic `CGVM`, u32 version, configuration as little-endian
//! u32s, then every parameter tensor in declaration order as f64.

use std::path::Path;

use super::{ModelConfig, Params, ViTModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CGVM";
const VERSION: u32 = 1;

pub fn model_to_bytes(model: &ViTModel) -> Vec<u8> {
    let c = &model.config;
    let mut buf = Vec::with_capacity(48 + model.params.count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.image_side,
        c.channels,
        c.patch_side,
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_head,
        c.d_mlp,
        c.n_classes,
        c.linear as usize,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for t in model.params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn model_from_bytes(bytes: &[u8], id: impl Into<String>) -> Result<ViTModel> {
    let fmt = |m: &str| Error::Format(format!("model file: {m}"));
    if bytes.len() < 48 || &bytes[..4] != MAGIC {
        return Err(fmt("bad magic or truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != VERSION as usize {
        return Err(fmt("unsupported version"));
    }
    let config = ModelConfig {
        image_side: word(1),
        channels: word(2),
        patch_side: word(3),
        n_layers: word(4),
        n_heads: word(5),
        d_model: word(6),
        d_head: word(7),
        d_mlp: word(8),
        n_classes: word(9),
        linear: word(10) != 0,
    };
    config.validate()?;
    let mut params = Params::zeros(&config);
    let mut rest = &bytes[48..];
    if rest.len() != params.count() * 8 {
        return Err(fmt("parameter payload has the wrong length"));
    }
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            let (head, tail) = rest.split_at(8);
            *v = f64::from_le_bytes(head.try_into().expect("8 bytes"));
            rest = tail;
        }
    }
    let model = ViTModel {
        id: id.into(),
        config,
        params,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &ViTModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

/// Loads a model; its id is the file stem.
pub fn load_model(path: &Path) -> Result<ViTModel> {
    let bytes = std::fs::read(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    model_from_bytes(&bytes, id)
}
