//! Binary checkpoints: `NBMFCKPT`, a little-endian `u32` header length, a
//! JSON header, then every parameter as little-endian `f64` (per layer:
//! weights row-major, then biases).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FieldSpec, Mlp, NeuralField, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NBMFCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: FieldSpec,
    pub fov_radius: f64,
    pub n_materials: usize,
    pub n_params: usize,
    pub arch_hash: String,
}

impl FieldSpec {
    /// SHA-256 over the canonical JSON form of the specification.
    pub fn arch_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn save_checkpoint<T: Real>(field: &NeuralField<T>, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        spec: field.spec().clone(),
        fov_radius: field.fov_radius(),
        n_materials: field.n_materials(),
        n_params: field.spec().architecture().n_params(),
        arch_hash: field.spec().arch_hash(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + header_bytes.len() + header.n_params * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for v in field.mlp().flatten() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, refusing it when its architecture hash is inconsistent
/// or differs from `expected`.
pub fn load_checkpoint<T: Real>(path: &Path, expected: Option<&FieldSpec>) -> Result<NeuralField<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Mismatch(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    if header.spec.arch_hash() != header.arch_hash {
        return Err(bad("architecture hash does not match the stored description"));
    }
    if let Some(spec) = expected {
        if spec.arch_hash() != header.arch_hash {
            return Err(bad("architecture hash differs from the requested architecture"));
        }
    }
    let arch = header.spec.architecture();
    let params = &bytes[12 + header_len..];
    if header.n_params != arch.n_params() || params.len() != arch.n_params() * 8 {
        return Err(bad("parameter block size does not match the architecture"));
    }
    let mut values = params.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut mlp = Mlp::<T>::zeros(arch)?;
    for slice in mlp.param_slices_mut() {
        for (dst, v) in slice.iter_mut().zip(&mut values) {
            *dst = T::from_f64(v);
        }
    }
    if !mlp.is_finite() {
        return Err(Error::Numerical(format!("{}: non-finite parameters", path.display())));
    }
    NeuralField::from_parts(header.spec, mlp, header.fov_radius)
}
