//! Model checkpoints: a flat little-endian `f64` binary plus a JSON sidecar.
//!
//! `<stem>.bin` holds every parameter tensor back to back in store order.
//! `<stem>.json` lists names, shapes and groups together with the model
//! configuration needed to rebuild the network.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sopssl_core::model::{Architecture, Model, ModelConfig};
use sopssl_core::param::ParamGroup;

use crate::dataset_io::sha256_hex;
use crate::error::{CliError, CliResult};

const FORMAT: &str = "sopssl-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    /// Offset into the binary, in `f64` values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub binary: String,
    pub sha256: String,
    pub num_classes: usize,
    pub arch: Architecture,
    pub model: ModelConfig,
    /// Training iteration the parameters were taken at.
    pub iteration: usize,
    pub params: Vec<ParamEntry>,
}

/// Paths of the binary and sidecar for `stem` (for example `out/best`).
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save(model: &Model, iteration: usize, stem: &Path) -> CliResult<()> {
    let (bin_path, json_path) = paths(stem);
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for p in model.params.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.numel();
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = Sidecar {
        format: FORMAT.into(),
        version: VERSION,
        binary: bin_path
            .file_name()
            .expect("stem has a file name")
            .to_string_lossy()
            .into_owned(),
        sha256: sha256_hex(&bytes),
        num_classes: model.num_classes,
        arch: model.arch,
        model: model.config.clone(),
        iteration,
        params,
    };
    fs::write(&bin_path, &bytes).map_err(|e| CliError::io(&bin_path, e))?;
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    fs::write(&json_path, text).map_err(|e| CliError::io(&json_path, e))
}

/// Loads a checkpoint from its sidecar path (or the stem with either extension).
pub fn load(path: &Path) -> CliResult<(Model, Sidecar)> {
    let json_path = path.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| CliError::io(&json_path, e))?;
    let sc: Sidecar = serde_json::from_str(&text).map_err(|e| CliError::json(&json_path, &e))?;
    let corrupt = |detail: String| CliError::Corrupt {
        path: json_path.clone(),
        detail,
    };
    if sc.format != FORMAT || sc.version != VERSION {
        return Err(corrupt(format!("unsupported format {} v{}", sc.format, sc.version)));
    }
    let bin_path = json_path.with_file_name(&sc.binary);
    let bytes = fs::read(&bin_path).map_err(|e| CliError::io(&bin_path, e))?;
    let found = sha256_hex(&bytes);
    if found != sc.sha256 {
        return Err(CliError::Checksum {
            path: bin_path,
            expected: sc.sha256.clone(),
            found,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut model = Model::new(sc.model.clone(), sc.arch, sc.num_classes, 0)?;
    if model.params.len() != sc.params.len() {
        return Err(corrupt(format!(
            "{} parameters listed, model has {}",
            sc.params.len(),
            model.params.len()
        )));
    }
    let mut expected_offset = 0;
    for (id, entry) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&sc.params) {
        let p = model.params.get_mut(id);
        if p.name != entry.name || p.group != entry.group || p.value.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "parameter `{}` does not match the model layout",
                entry.name
            )));
        }
        let n = p.value.numel();
        if entry.offset != expected_offset || entry.offset + n > values.len() {
            return Err(corrupt(format!("parameter `{}` lies outside the binary", entry.name)));
        }
        p.value
            .data_mut()
            .copy_from_slice(&values[entry.offset..entry.offset + n]);
        expected_offset += n;
    }
    if expected_offset * 8 != bytes.len() {
        return Err(corrupt(format!(
            "binary holds {} values, layout needs {expected_offset}",
            values.len()
        )));
    }
    Ok((model, sc))
}
