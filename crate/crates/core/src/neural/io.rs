//! Weight-file format: a small self-describing binary.
//!
//!   magic "CNW1" | u32 LE manifest length | manifest JSON | f32 LE blob
//!
//! The manifest embeds the architecture, a hash of its canonical JSON, the
//! parameter count and a digest of the blob. Loading rebuilds the topology
//! from the manifest and refuses anything inconsistent: wrong magic, corrupt
//! blob, parameter-count mismatch, or (for `load_weights_matching`) an
//! architecture other than the one the caller expects.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, Model, NeuralError};

const MAGIC: &[u8; 4] = b"CNW1";

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifest {
    version: u32,
    arch: ArchConfig,
    arch_hash: String,
    param_count: usize,
    blob_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write as _;
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn arch_hash(arch: &ArchConfig) -> String {
    sha256_hex(serde_json::to_string(arch).unwrap().as_bytes())
}

pub fn save_weights(model: &Model, path: &Path) -> Result<(), NeuralError> {
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    model.visit_params(&mut |v| blob.extend_from_slice(&v.to_le_bytes()));
    let manifest = WeightManifest {
        version: model.version,
        arch: model.arch.clone(),
        arch_hash: arch_hash(&model.arch),
        param_count: model.param_count(),
        blob_sha256: sha256_hex(&blob),
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(mjson.len() as u32).to_le_bytes())?;
    f.write_all(&mjson)?;
    f.write_all(&blob)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Model, NeuralError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| NeuralError::Corrupt("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(NeuralError::Corrupt("bad magic".into()));
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)
        .map_err(|_| NeuralError::Corrupt("file too short for header".into()))?;
    let mlen = u32::from_le_bytes(len) as usize;
    let mut mjson = vec![0u8; mlen];
    f.read_exact(&mut mjson)
        .map_err(|_| NeuralError::Corrupt("file too short for manifest".into()))?;
    let manifest: WeightManifest = serde_json::from_slice(&mjson)?;
    if manifest.arch_hash != arch_hash(&manifest.arch) {
        return Err(NeuralError::Corrupt("architecture hash does not match manifest".into()));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    if blob.len() != manifest.param_count * 4 {
        return Err(NeuralError::Corrupt(format!(
            "blob is {} bytes, manifest promises {}",
            blob.len(),
            manifest.param_count * 4
        )));
    }
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(NeuralError::Corrupt("blob digest mismatch".into()));
    }
    let flat: Vec<f32> =
        blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut model = Model::new(manifest.arch, 0)?;
    model.version = manifest.version;
    model.load_flat(&flat)?;
    Ok(model)
}

/// Load and additionally require the stored architecture to equal `expected`.
pub fn load_weights_matching(path: &Path, expected: &ArchConfig) -> Result<Model, NeuralError> {
    let model = load_weights(path)?;
    if &model.arch != expected {
        return Err(NeuralError::ArchMismatch(format!(
            "file holds {} / expected {}",
            arch_hash(&model.arch),
            arch_hash(expected)
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            n_v: 12,
            n_h: 16,
            conv_channels: vec![4, 8],
            n_z: 8,
            d_embed: 8,
            hidden: vec![16, 16, 16],
            pool_k: 2,
            pool_s: 1,
        }
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let model = Model::new(small_arch(), 5).unwrap();
        save_weights(&model, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn tampered_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let model = Model::new(small_arch(), 5).unwrap();
        save_weights(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_weights(&path), Err(NeuralError::Corrupt(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let model = Model::new(small_arch(), 5).unwrap();
        save_weights(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_weights(&path), Err(NeuralError::Corrupt(_))));
        std::fs::write(&path, &bytes[..3]).unwrap();
        assert!(matches!(load_weights(&path), Err(NeuralError::Corrupt(_))));
    }

    #[test]
    fn wrong_architecture_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let model = Model::new(small_arch(), 5).unwrap();
        save_weights(&model, &path).unwrap();
        assert!(load_weights_matching(&path, &small_arch()).is_ok());
        let other = ArchConfig::default_desk();
        assert!(matches!(
            load_weights_matching(&path, &other),
            Err(NeuralError::ArchMismatch(_))
        ));
    }

    #[test]
    fn edited_manifest_arch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let model = Model::new(small_arch(), 5).unwrap();
        save_weights(&model, &path).unwrap();
        // Rewrite the manifest with a different arch but the stale hash.
        let bytes = std::fs::read(&path).unwrap();
        let mlen = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
        let mut manifest: WeightManifest = serde_json::from_slice(&bytes[8..8 + mlen]).unwrap();
        manifest.arch.n_z = 16;
        let mjson = serde_json::to_vec(&manifest).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&mjson);
        out.extend_from_slice(&bytes[8 + mlen..]);
        std::fs::write(&path, &out).unwrap();
        assert!(matches!(load_weights(&path), Err(NeuralError::Corrupt(_))));
    }
}
