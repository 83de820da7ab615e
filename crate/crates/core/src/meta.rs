//! `<name>.meta.json` sidecar carrying what plain PLY cannot: per-particle
//! trained flags and the index range added by interior filling.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ply::{self, PlyError};
use crate::splat::SplatModel;

pub const META_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MetaError {
    #[error("meta json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trained_flags: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("meta describes {expected} particles but the model has {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("unsupported meta version {0}")]
    Version(u32),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: u32,
    pub particle_count: usize,
    /// Half-open `[start, end)` range of filled particles.
    pub filled_particle_range: Option<[usize; 2]>,
    /// Bit-packed flags, least significant bit first, base64 encoded.
    pub trained_flags: String,
}

impl ModelMeta {
    pub fn from_model(model: &SplatModel) -> Self {
        Self {
            version: META_VERSION,
            particle_count: model.len(),
            filled_particle_range: model.filled_range.as_ref().map(|r| [r.start, r.end]),
            trained_flags: STANDARD.encode(pack_bits(&model.trained_flags())),
        }
    }

    /// Writes the flags and fill range onto a model loaded from PLY.
    pub fn apply(&self, model: &mut SplatModel) -> Result<(), MetaError> {
        if self.version != META_VERSION {
            return Err(MetaError::Version(self.version));
        }
        if self.particle_count != model.len() {
            return Err(MetaError::CountMismatch {
                expected: self.particle_count,
                actual: model.len(),
            });
        }
        let bits = unpack_bits(&STANDARD.decode(&self.trained_flags)?, model.len());
        for (g, t) in model.gaussians.iter_mut().zip(bits) {
            g.trained = t;
        }
        model.filled_range = self.filled_particle_range.map(|[a, b]| a..b);
        Ok(())
    }
}

pub fn pack_bits(flags: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; flags.len().div_ceil(8)];
    for (i, &f) in flags.iter().enumerate() {
        if f {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n)
        .map(|i| bytes.get(i / 8).is_some_and(|b| b >> (i % 8) & 1 == 1))
        .collect()
}

/// `scene.ply` -> `scene.meta.json`.
pub fn meta_path(ply_path: &Path) -> PathBuf {
    let stem = ply_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ply_path.with_file_name(format!("{stem}.meta.json"))
}

/// Writes the PLY and its metadata sidecar.
pub fn save_model(path: &Path, model: &SplatModel) -> Result<(), MetaError> {
    ply::write_ply(path, model)?;
    let json = serde_json::to_string_pretty(&ModelMeta::from_model(model))?;
    std::fs::write(meta_path(path), json)?;
    Ok(())
}

/// Reads a PLY and, when present, its sidecar. Without a sidecar every
/// particle keeps the import default (`trained = true`).
pub fn load_model(path: &Path) -> Result<SplatModel, MetaError> {
    let mut model = ply::read_ply(path)?;
    let mp = meta_path(path);
    if mp.exists() {
        let meta: ModelMeta = serde_json::from_slice(&std::fs::read(mp)?)?;
        meta.apply(&mut model)?;
    }
    Ok(model)
}
