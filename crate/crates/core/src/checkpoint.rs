//! Versioned weight checkpoints: a JSON header (config, entry names,
//! shapes, dtype) followed by raw little-endian value buffers in header
//! order. Autoencoder and transition weights live in distinct sections of
//! one container.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"LNCA";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    section: String,
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EntryKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    schema_version: u32,
    dtype: String,
    config: serde_json::Value,
    entries: Vec<EntryMeta>,
}

/// Writes the given named sections into one checkpoint file.
pub fn save<E: Element>(
    path: &Path,
    config: serde_json::Value,
    sections: &[(&str, &dyn Module<E>)],
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (section, module) in sections {
        module.visit_params(&mut |p| {
            entries.push(EntryMeta {
                section: section.to_string(),
                name: p.name().to_string(),
                kind: EntryKind::Param,
                shape: p.value().shape().to_vec(),
            });
            for v in p.value().data() {
                payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        });
        module.visit_buffers(&mut |name, values| {
            entries.push(EntryMeta {
                section: section.to_string(),
                name,
                kind: EntryKind::Buffer,
                shape: vec![values.len()],
            });
            for v in values {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        });
    }
    let header = Header {
        format: "lnca-checkpoint".into(),
        version: CHECKPOINT_VERSION,
        schema_version: crate::train::CONFIG_SCHEMA_VERSION,
        dtype: "f32".into(),
        config,
        entries,
    };
    let header_bytes = serde_json::to_vec(&header).expect("serializable header");
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    Ok(())
}

struct Loaded {
    header: Header,
    values: Vec<(usize, Vec<f32>)>, // entry index -> data
}

fn read_file(path: &Path) -> Result<Loaded> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let mut f = std::fs::File::open(path).map_err(|_| Error::MissingCheckpoint(path.to_path_buf()))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut values = Vec::new();
    for (i, e) in header.entries.iter().enumerate() {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        f.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("{}: truncated at {}", path.display(), e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        values.push((i, data));
    }
    Ok(Loaded { header, values })
}

/// The config document stored in the checkpoint.
pub fn read_config(path: &Path) -> Result<serde_json::Value> {
    Ok(read_file(path)?.header.config)
}

pub fn has_section(path: &Path, section: &str) -> Result<bool> {
    Ok(read_file(path)?.header.entries.iter().any(|e| e.section == section))
}

/// Loads one section's params/buffers into a module; every stored entry
/// must find its counterpart (by name) with a matching shape.
pub fn load_section<E: Element>(path: &Path, section: &str, module: &mut dyn Module<E>) -> Result<()> {
    let loaded = read_file(path)?;
    let mut found_any = false;
    for (i, data) in &loaded.values {
        let meta = &loaded.header.entries[*i];
        if meta.section != section {
            continue;
        }
        found_any = true;
        match meta.kind {
            EntryKind::Param => {
                let mut applied = false;
                module.visit_params_mut(&mut |p| {
                    if p.name() == meta.name {
                        if p.value().shape() != meta.shape.as_slice() {
                            // surfaced below via `applied`
                            return;
                        }
                        let t = Tensor::from_vec(
                            &meta.shape,
                            data.iter().map(|&v| E::from_f64(v as f64)).collect(),
                        )
                        .expect("shape-checked");
                        p.set_value(t);
                        applied = true;
                    }
                });
                if !applied {
                    return Err(Error::Checkpoint(format!(
                        "section {}: parameter {} {:?} has no matching slot",
                        section, meta.name, meta.shape
                    )));
                }
            }
            EntryKind::Buffer => {
                let values: Vec<f64> = data.iter().map(|&v| v as f64).collect();
                if !module.load_buffer(&meta.name, &values) {
                    return Err(Error::Checkpoint(format!(
                        "section {}: buffer {} has no matching slot",
                        section, meta.name
                    )));
                }
            }
        }
    }
    if !found_any {
        return Err(Error::Checkpoint(format!(
            "{}: no section named {}",
            path.display(),
            section
        )));
    }
    Ok(())
}
