//! On-disk datasets: one little-endian binary file per split plus `manifest.json`.
//!
//! Each split file is a sequence of fixed-size records: the sample id as
//! `u64`, the label as `u64` (`u64::MAX` when absent), then the image as
//! `c·H·W` `f64` values in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sopssl_core::data::{Dataset, Sample, Split, SyntheticSpec};
use sopssl_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "sopssl-dataset";
const VERSION: u32 = 1;
const NO_LABEL: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub n_l: usize,
    pub n_u: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: Split,
    pub file: String,
    pub count: usize,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub image_shape: [usize; 3],
    pub counts: Counts,
    pub splits: Vec<SplitEntry>,
    /// Generator settings, when the dataset is synthetic.
    pub spec: Option<SyntheticSpec>,
}

impl Manifest {
    pub fn read(dir: &Path) -> CliResult<Manifest> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::json(&path, &e))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(CliError::Corrupt {
                path,
                detail: format!("unsupported format {} v{}", m.format, m.version),
            });
        }
        Ok(m)
    }
}

fn record_len(shape: [usize; 3]) -> usize {
    8 * (2 + shape.iter().product::<usize>())
}

fn encode(samples: &[Sample], shape: [usize; 3]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(samples.len() * record_len(shape));
    for s in samples {
        buf.extend_from_slice(&s.id.to_le_bytes());
        buf.extend_from_slice(&s.label.map_or(NO_LABEL, |l| l as u64).to_le_bytes());
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn word(bytes: &[u8]) -> [u8; 8] {
    bytes.try_into().expect("8-byte chunk")
}

fn decode(bytes: &[u8], shape: [usize; 3]) -> CliResult<Vec<Sample>> {
    let len = record_len(shape);
    let mut out = Vec::with_capacity(bytes.len() / len);
    for rec in bytes.chunks_exact(len) {
        let id = u64::from_le_bytes(word(&rec[0..8]));
        let raw = u64::from_le_bytes(word(&rec[8..16]));
        let label = (raw != NO_LABEL).then_some(raw as usize);
        let data = rec[16..].chunks_exact(8).map(|c| f64::from_le_bytes(word(c))).collect();
        out.push(Sample {
            id,
            label,
            image: Tensor::new(shape.to_vec(), data)?,
        });
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every split and the manifest into `dir`, creating it if needed.
pub fn save(dataset: &Dataset, spec: Option<&SyntheticSpec>, dir: &Path) -> CliResult<Manifest> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let shape = dataset.image_shape;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let samples = dataset.split(split);
        let bytes = encode(samples, shape);
        let file = format!("{}.bin", split.name());
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        splits.push(SplitEntry {
            split,
            file,
            count: samples.len(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        image_shape: shape,
        counts: Counts {
            n_l: dataset.labeled.len(),
            n_u: dataset.unlabeled.len(),
            n_val: dataset.validation.len(),
            n_test: dataset.test.len(),
            num_classes: dataset.num_classes,
        },
        splits,
        spec: spec.cloned(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// Loads a dataset written by [`save`], verifying every checksum first.
pub fn load(dir: &Path) -> CliResult<Dataset> {
    let manifest = Manifest::read(dir)?;
    let shape = manifest.image_shape;
    let mut ds = Dataset {
        num_classes: manifest.counts.num_classes,
        image_shape: shape,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.splits {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let found = sha256_hex(&bytes);
        if found != entry.sha256 {
            return Err(CliError::Checksum {
                path,
                expected: entry.sha256.clone(),
                found,
            });
        }
        if bytes.len() != entry.count * record_len(shape) {
            return Err(CliError::Corrupt {
                path,
                detail: format!("{} bytes for {} records", bytes.len(), entry.count),
            });
        }
        *ds.split_mut(entry.split) = decode(&bytes, shape)?;
    }
    let c = &manifest.counts;
    if (ds.labeled.len(), ds.unlabeled.len(), ds.validation.len(), ds.test.len()) != (c.n_l, c.n_u, c.n_val, c.n_test) {
        return Err(CliError::Corrupt {
            path: dir.join(MANIFEST),
            detail: "split counts disagree with the split files".into(),
        });
    }
    ds.validate()?;
    Ok(ds)
}
