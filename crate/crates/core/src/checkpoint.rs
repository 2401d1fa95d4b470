//! Checkpoint persistence: a JSON manifest next to a little-endian f64 blob.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Config;
use crate::tensor::{OptimizerState, ParamSet, Tensor};

pub const FORMAT: &str = "mtts-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt checkpoint {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, decimal (exceeds the JSON integer range).
    pub word_pos: String,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: Config,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub encoder: ParamSet,
    pub g_opt: OptimizerState,
    pub d_opt: OptimizerState,
    pub alpha_rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    byte_order: String,
    blob: String,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
    optimizer_steps: [u64; 2],
    rng: RngState,
    config: Config,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    frozen: bool,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for set in [&self.generator, &self.discriminator, &self.encoder] {
            for p in set.iter() {
                out.push((format!("{}/{}", set.namespace(), p.name), &p.value, p.frozen));
            }
        }
        for (prefix, st) in [("opt.gen", &self.g_opt), ("opt.disc", &self.d_opt)] {
            for (name, t) in &st.slots {
                out.push((format!("{prefix}/{name}"), t, false));
            }
        }
        out
    }

    /// Writes `<path>` (manifest) and `<path>.bin`; returns the manifest path.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        let blob_path = path.with_extension("bin");
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (name, t, frozen) in self.entries() {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: blob.len(),
                frozen,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            byte_order: "little".into(),
            blob: blob_path.file_name().unwrap().to_string_lossy().into_owned(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            tensors,
            optimizer_steps: [self.g_opt.step, self.d_opt.step],
            rng: self.alpha_rng.clone(),
            config: self.config.clone(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        write_atomic(&blob_path, &blob).map_err(io(&blob_path))?;
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        write_atomic(path, &json).map_err(io(path))?;
        Ok(path.to_path_buf())
    }

    /// Reads a manifest and its blob. Parameter sets are rebuilt into the
    /// layouts of `templates` (generator, discriminator, encoder).
    pub fn load(path: &Path, templates: [&ParamSet; 3]) -> Result<Self> {
        let corrupt = |detail: String| CheckpointError::Corrupt {
            path: path.to_path_buf(),
            detail,
        };
        let text = fs::read(path).map_err(io(path))?;
        let m: Manifest = serde_json::from_slice(&text).map_err(|e| corrupt(e.to_string()))?;
        if m.format != FORMAT {
            return Err(corrupt(format!("format `{}` is not {FORMAT}", m.format)));
        }
        if m.version != VERSION {
            return Err(corrupt(format!("version {} is not {VERSION}", m.version)));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&m.blob);
        let blob = fs::read(&blob_path).map_err(io(&blob_path))?;
        if hex::encode(Sha256::digest(&blob)) != m.blob_sha256 {
            return Err(corrupt("blob hash mismatch".into()));
        }
        let mut tensors = std::collections::HashMap::new();
        for e in &m.tensors {
            let n: usize = e.shape.iter().product();
            let bytes = blob
                .get(e.offset..e.offset + 8 * n)
                .ok_or_else(|| corrupt(format!("tensor {} outside blob", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?;
            tensors.insert(e.name.clone(), t);
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")));
        let mut sets = templates.map(|t| t.clone());
        for set in &mut sets {
            let names: Vec<String> = set.iter().map(|p| p.name.clone()).collect();
            for name in names {
                let t = take(&format!("{}/{name}", set.namespace()))?;
                set.set_value(&name, t).map_err(|err| corrupt(err.to_string()))?;
            }
        }
        let opt = |prefix: &str, step: u64, tensors: &mut std::collections::HashMap<String, Tensor>| {
            let mut slots: Vec<(String, Tensor)> = tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&format!("{prefix}/")).map(|s| (s.to_string(), v.clone())))
                .collect();
            slots.sort_by_key(|(k, _)| slot_order(k));
            tensors.retain(|k, _| !k.starts_with(&format!("{prefix}/")));
            OptimizerState { step, slots }
        };
        let g_opt = opt("opt.gen", m.optimizer_steps[0], &mut tensors);
        let d_opt = opt("opt.disc", m.optimizer_steps[1], &mut tensors);
        if let Some(extra) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {extra}")));
        }
        let [generator, discriminator, encoder] = sets;
        Ok(Self {
            step: m.step,
            config: m.config,
            generator,
            discriminator,
            encoder,
            g_opt,
            d_opt,
            alpha_rng: m.rng,
        })
    }
}

/// `m.3` sorts before `v.3`, both after `m.2`.
fn slot_order(name: &str) -> (usize, String) {
    let (kind, idx) = name.split_once('.').unwrap_or((name, "0"));
    (idx.parse().unwrap_or(usize::MAX), kind.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut g = ParamSet::new("gen");
        g.add("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        let mut d = ParamSet::new("disc");
        d.add("b", Tensor::scalar(0.1));
        let mut e = ParamSet::new("encoder");
        e.add("p", Tensor::full(&[3], 7.0));
        e.freeze_all();
        Checkpoint {
            step: 42,
            config: Config::default(),
            generator: g,
            discriminator: d,
            encoder: e,
            g_opt: OptimizerState {
                step: 42,
                slots: (0..12)
                    .flat_map(|i| [format!("m.{i}"), format!("v.{i}")])
                    .map(|n| (n, Tensor::scalar(0.5)))
                    .collect(),
            },
            d_opt: OptimizerState {
                step: 2,
                slots: vec![],
            },
            alpha_rng: RngState {
                seed: 9,
                word_pos: "123".into(),
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let path = ck.save(&dir.path().join("ck.json")).unwrap();
        let back = Checkpoint::load(&path, [&ck.generator, &ck.discriminator, &ck.encoder]).unwrap();
        assert_eq!(back, ck);
        assert!(back.encoder.iter().all(|p| p.frozen));
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        let path = ck.save(&dir.path().join("ck.json")).unwrap();
        let t = [&ck.generator, &ck.discriminator, &ck.encoder];

        let bin = path.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 0x10;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path, t), Err(CheckpointError::Corrupt { .. })));
        bytes[3] ^= 0x10;
        fs::write(&bin, &bytes).unwrap();

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"version\": 1", "\"version\": 99")).unwrap();
        let err = Checkpoint::load(&path, t).unwrap_err();
        assert!(err.to_string().contains("version 99"));
    }
}
