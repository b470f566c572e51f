//! Checkpoints: a JSON manifest plus one little-endian `f32` payload holding
//! every parameter back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vcnet_autodiff::{ParamSet, Parameter, Tensor};

use crate::error::{CoreError, Result};
use crate::model::{layer_plan, VcNet, VcNetConfig, Variant};

pub const CHECKPOINT_FORMAT: &str = "vcnet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub seed: u64,
    pub config: VcNetConfig,
    pub params: Vec<ParamEntry>,
    pub payload: String,
    pub payload_bytes: usize,
}

/// `(manifest, payload)` paths; `run/best` and `run/best.ckpt.json` both
/// map to `run/best.ckpt.json` + `run/best.ckpt.bin`.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = s
        .strip_suffix(".ckpt.json")
        .or_else(|| s.strip_suffix(".ckpt.bin"))
        .or_else(|| s.strip_suffix(".json"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{base}.ckpt.json")), PathBuf::from(format!("{base}.ckpt.bin")))
}

/// Serialized `(manifest, payload)` bytes. Pure function of the weights.
pub fn checkpoint_bytes(model: &VcNet, payload_name: &str) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut payload = Vec::with_capacity(model.param_count() * 4);
    let mut entries = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for p in model.params().iter() {
        entries.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        offset += p.value.len();
        payload.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        variant: model.variant(),
        seed: model.config().seed,
        config: model.config().clone(),
        params: entries,
        payload: payload_name.into(),
        payload_bytes: payload.len(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    Ok((text.into_bytes(), payload))
}

pub fn save_checkpoint(model: &VcNet, path: impl AsRef<Path>) -> Result<PathBuf> {
    let (json_path, bin_path) = checkpoint_paths(path.as_ref());
    let name = bin_path.file_name().expect("payload file name").to_string_lossy().to_string();
    let (manifest, payload) = checkpoint_bytes(model, &name)?;
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(&bin_path, payload).map_err(|e| CoreError::io(&bin_path, e))?;
    fs::write(&json_path, manifest).map_err(|e| CoreError::io(&json_path, e))?;
    Ok(json_path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VcNet> {
    let (json_path, _) = checkpoint_paths(path.as_ref());
    let text = fs::read(&json_path).map_err(|e| CoreError::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", json_path.display())))?;
    let bin_path = json_path.parent().unwrap_or(Path::new("")).join(&manifest.payload);
    let payload = fs::read(&bin_path).map_err(|e| CoreError::io(&bin_path, e))?;
    from_parts(&manifest, &payload)
}

/// Rebuilds a model, rejecting any name or shape that disagrees with the
/// architecture the manifest's config describes.
pub fn from_parts(manifest: &Manifest, payload: &[u8]) -> Result<VcNet> {
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(CoreError::Checkpoint(format!("format tag {:?}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    if payload.len() != manifest.payload_bytes || payload.len() % 4 != 0 {
        return Err(CoreError::Checkpoint(format!(
            "payload has {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    manifest.config.validate()?;
    let expected: Vec<(String, Vec<usize>)> = layer_plan(&manifest.config, manifest.variant)
        .into_iter()
        .flat_map(|l| {
            let mut w = l.taps.clone();
            w.extend([l.cin, l.cout]);
            [(format!("{}.w", l.name), w), (format!("{}.b", l.name), vec![l.cout])]
        })
        .collect();
    if expected.len() != manifest.params.len() {
        return Err(CoreError::Checkpoint(format!(
            "{} parameters stored, architecture has {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    let values: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut params = ParamSet::new();
    for (entry, (name, shape)) in manifest.params.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(CoreError::Checkpoint(format!(
                "parameter {} {:?} does not match expected {name} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| CoreError::Checkpoint(format!("parameter {name} runs past the payload")))?
            .to_vec();
        params.insert(Parameter::new(name.clone(), Tensor::from_vec(shape, data)?))?;
    }
    Ok(VcNet::from_parts(manifest.config.clone(), manifest.variant, params))
}

/// Rejects a checkpoint whose architecture differs from `config`.
pub fn ensure_compatible(model: &VcNet, config: &VcNetConfig, variant: Variant) -> Result<()> {
    let want = layer_plan(config, variant);
    let have = layer_plan(model.config(), model.variant());
    if want != have {
        return Err(CoreError::Checkpoint(
            "checkpoint architecture does not match the requested configuration".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = VcNet::new(VcNetConfig::micro(), Variant::Full).unwrap();
        let p = save_checkpoint(&net, dir.path().join("a")).unwrap();
        let (m1, b1) = (fs::read(&p).unwrap(), fs::read(checkpoint_paths(&p).1).unwrap());
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.params(), net.params());
        let q = save_checkpoint(&back, &p).unwrap();
        assert_eq!(m1, fs::read(&q).unwrap());
        assert_eq!(b1, fs::read(checkpoint_paths(&q).1).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = VcNet::new(VcNetConfig::micro(), Variant::Full).unwrap();
        let (m, b) = checkpoint_bytes(&net, "x.ckpt.bin").unwrap();
        let mut manifest: Manifest = serde_json::from_slice(&m).unwrap();
        manifest.config.base_width = 3;
        assert!(matches!(from_parts(&manifest, &b), Err(CoreError::Checkpoint(_))));
        let manifest: Manifest = serde_json::from_slice(&m).unwrap();
        assert!(from_parts(&manifest, &b[..b.len() - 4]).is_err());
        let other = VcNetConfig { base_width: 4, ..VcNetConfig::micro() };
        assert!(ensure_compatible(&net, &other, Variant::Full).is_err());
        assert!(ensure_compatible(&net, &VcNetConfig::micro(), Variant::Full).is_ok());
    }
}
