//! Checkpoint directories: a text manifest plus one little-endian f32 blob
//! per tensor.
//!
//! ```text
//! format_version = 1
//! stage = stage1-image
//! config_hash = <hex>
//! seed = 7
//! version = v0.1.0
//! tensor = <name>|f32|<d0,d1,..>|<file>|<sha256 of blob>
//! manifest_hash = <sha256 of all preceding lines>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Result, SamoraError};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

/// Version string recorded in artifacts; `SAMORA_GIT_DESCRIBE` at build time
/// overrides the crate version.
pub fn version_string() -> String {
    option_env!("SAMORA_GIT_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl CheckpointMeta {
    pub fn new(stage: impl Into<String>, config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            stage: stage.into(),
            config_hash: config_hash.into(),
            seed,
            version: version_string(),
        }
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> SamoraError {
    SamoraError::Manifest {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Write every tensor of `store` whose name passes `keep`. The directory is
/// assembled under a temporary name and renamed into place.
pub fn save_checkpoint<F: Fn(&str) -> bool>(dir: &Path, store: &ParamStore, meta: &CheckpointMeta, keep: F) -> Result<()> {
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| SamoraError::io(parent, e))?;
    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| SamoraError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| SamoraError::io(&tmp, e))?;
    let mut body = format!(
        "format_version = {FORMAT_VERSION}\nstage = {}\nconfig_hash = {}\nseed = {}\nversion = {}\n",
        meta.stage, meta.config_hash, meta.seed, meta.version
    );
    let names: Vec<String> = store.names().filter(|n| keep(n)).map(str::to_string).collect();
    for (i, name) in names.iter().enumerate() {
        if name.contains('|') || name.contains('\n') {
            return Err(SamoraError::Checkpoint {
                tensor: name.clone(),
                reason: "name contains a reserved character".into(),
            });
        }
        let t = store.get(name)?;
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in &values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = format!("t{i:05}.bin");
        let path = tmp.join(&file);
        fs::write(&path, &bytes).map_err(|e| SamoraError::io(&path, e))?;
        let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
        body.push_str(&format!("tensor = {name}|f32|{}|{file}|{}\n", dims.join(","), sha_hex(&bytes)));
    }
    let hash = sha_hex(body.as_bytes());
    body.push_str(&format!("manifest_hash = {hash}\n"));
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, body).map_err(|e| SamoraError::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| SamoraError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| SamoraError::io(dir, e))
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    dir.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha: String,
}

fn parse_manifest(dir: &Path) -> Result<(CheckpointMeta, Vec<Entry>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| SamoraError::io(&path, e))?;
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut entries = Vec::new();
    let mut hashed = String::new();
    let mut declared_hash = None;
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| manifest_err(&path, format!("malformed line `{line}`")))?;
        if k == "manifest_hash" {
            declared_hash = Some(v.to_string());
            continue;
        }
        hashed.push_str(line);
        hashed.push('\n');
        if k == "tensor" {
            let parts: Vec<&str> = v.split('|').collect();
            if parts.len() != 5 || parts[1] != "f32" {
                return Err(manifest_err(&path, format!("bad tensor line `{v}`")));
            }
            let shape = if parts[2].is_empty() {
                Vec::new()
            } else {
                parts[2]
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| SamoraError::Checkpoint {
                        tensor: parts[0].to_string(),
                        reason: format!("bad shape `{}`", parts[2]),
                    })?
            };
            entries.push(Entry {
                name: parts[0].to_string(),
                shape,
                file: parts[3].to_string(),
                sha: parts[4].to_string(),
            });
        } else {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    match declared_hash {
        Some(h) if h == sha_hex(hashed.as_bytes()) => {}
        Some(_) => return Err(manifest_err(&path, "manifest hash mismatch")),
        None => return Err(manifest_err(&path, "missing manifest_hash")),
    }
    let version: u32 = fields
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| manifest_err(&path, "missing format_version"))?;
    if version != FORMAT_VERSION {
        return Err(manifest_err(&path, format!("unsupported format_version {version}")));
    }
    let get = |k: &str| fields.get(k).cloned().ok_or_else(|| manifest_err(&path, format!("missing {k}")));
    let meta = CheckpointMeta {
        stage: get("stage")?,
        config_hash: get("config_hash")?,
        seed: get("seed")?.parse().map_err(|_| manifest_err(&path, "bad seed"))?,
        version: get("version")?,
    };
    Ok((meta, entries))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    Ok(parse_manifest(dir)?.0)
}

/// Load every tensor, verifying size and hash, into a frozen store.
pub fn load_checkpoint(dir: &Path, dtype: DType, device: &Device) -> Result<(ParamStore, CheckpointMeta)> {
    let (meta, entries) = parse_manifest(dir)?;
    let mut store = ParamStore::new(dtype, device);
    for e in entries {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| SamoraError::Checkpoint {
            tensor: e.name.clone(),
            reason: format!("cannot read {}: {err}", path.display()),
        })?;
        let numel: usize = e.shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(SamoraError::Checkpoint {
                tensor: e.name,
                reason: format!("blob has {} bytes, shape needs {}", bytes.len(), numel * 4),
            });
        }
        if sha_hex(&bytes) != e.sha {
            return Err(SamoraError::Checkpoint {
                tensor: e.name,
                reason: "blob hash mismatch".into(),
            });
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(values, e.shape.as_slice(), device)?;
        store.insert(e.name, t)?;
    }
    Ok((store, meta))
}

/// Load a checkpoint and merge its tensors into `store`, after checking that
/// existing entries agree in shape.
pub fn load_into(store: &mut ParamStore, dir: &Path) -> Result<CheckpointMeta> {
    let (loaded, meta) = load_checkpoint(dir, store.dtype(), &store.device().clone())?;
    for name in loaded.names() {
        if let Some(existing) = store.get_opt(name) {
            let new = loaded.get(name)?;
            if existing.dims() != new.dims() {
                return Err(SamoraError::Checkpoint {
                    tensor: name.to_string(),
                    reason: format!("shape {:?} does not match {:?}", new.dims(), existing.dims()),
                });
            }
        }
    }
    store.merge(&loaded)?;
    Ok(meta)
}
