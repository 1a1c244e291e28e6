//! On-disk checkpoints: a directory holding `manifest.json` and `params.bin`
//! (little-endian f32, parameters then Adam moments, offsets in the manifest).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

pub const FORMAT: &str = "rtd-checkpoint";
pub const VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    decay: bool,
    /// Offset and length in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamConfig,
    step: u64,
    /// Start of the first moments; second moments follow them.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
}

/// Everything needed to rebuild models and resume training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    /// Caller-defined metadata (model configs, tokenizer, objective ...).
    pub meta: serde_json::Value,
    pub params: ParamStore<f32>,
    pub optimizer: Option<Adam<f32>>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Checkpoint {
    /// Writes to a sibling temp directory first and renames it into place, so
    /// an interrupted save never leaves a half-written checkpoint at `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blob: Vec<f32> = Vec::with_capacity(self.params.num_scalars());
        let mut tensors = Vec::with_capacity(self.params.len());
        for (id, name, value) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                decay: self.params.decays(id),
                offset: blob.len(),
                len: value.numel(),
            });
            blob.extend_from_slice(value.data());
        }
        let optimizer = self.optimizer.as_ref().map(|adam| {
            let offset = blob.len();
            for id in self.params.ids() {
                blob.extend_from_slice(adam.first_moment(id));
            }
            for id in self.params.ids() {
                blob.extend_from_slice(adam.second_moment(id));
            }
            OptimizerEntry {
                config: adam.config,
                step: adam.step_count(),
                offset,
            }
        });
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            meta: self.meta.clone(),
            tensors,
            optimizer,
        };

        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dir
            .file_name()
            .ok_or_else(|| ckpt_err(dir, "checkpoint path has no final component"))?
            .to_string_lossy();
        let tmp: PathBuf = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        fs::write(tmp.join(MANIFEST), json).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;
        let mut bytes = Vec::with_capacity(blob.len() * 4);
        for x in &blob {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let mut f = fs::File::create(tmp.join(BLOB)).map_err(|e| Error::io(tmp.join(BLOB), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(tmp.join(BLOB), e))?;
        f.sync_all().map_err(|e| Error::io(tmp.join(BLOB), e))?;
        drop(f);
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ckpt_err(&mpath, format!("malformed manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(ckpt_err(&mpath, format!("unknown format `{}`", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(ckpt_err(
                &mpath,
                format!("version {} is not supported (expected {VERSION})", manifest.version),
            ));
        }
        let bpath = dir.join(BLOB);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(ckpt_err(&bpath, format!("size {} is not a multiple of 4 bytes", bytes.len())));
        }
        let blob: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let slice = |offset: usize, len: usize, what: &str| -> Result<&[f32]> {
            blob.get(offset..offset + len).ok_or_else(|| {
                ckpt_err(
                    &bpath,
                    format!(
                        "truncated: {what} needs elements {offset}..{} but the file holds {}",
                        offset + len,
                        blob.len()
                    ),
                )
            })
        };

        let mut params = ParamStore::new();
        for t in &manifest.tensors {
            if t.shape.iter().product::<usize>() != t.len {
                return Err(ckpt_err(&mpath, format!("`{}`: shape {:?} does not hold {} values", t.name, t.shape, t.len)));
            }
            let data = slice(t.offset, t.len, &t.name)?.to_vec();
            params.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.decay)?;
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
                let mut m = Vec::with_capacity(manifest.tensors.len());
                let mut v = Vec::with_capacity(manifest.tensors.len());
                let mut off = o.offset;
                for t in &manifest.tensors {
                    m.push(slice(off, t.len, "adam first moment")?.to_vec());
                    v.push(slice(off + total, t.len, "adam second moment")?.to_vec());
                    off += t.len;
                }
                Some(Adam::from_state(o.config, o.step, m, v)?)
            }
        };
        Ok(Checkpoint {
            step: manifest.step,
            meta: manifest.meta,
            params,
            optimizer,
        })
    }
}
