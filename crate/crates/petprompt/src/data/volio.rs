//! On-disk volume format.
//!
//! A `.pvol` file is a 16-byte header (magic `PVOL`, version u32 = 1, dtype
//! code u32 = 0 for little-endian float32, reserved u32 = 0), three u32 dims
//! `(H, W, D)`, then exactly `H*W*D` float32 values in x-fastest order
//! (w fastest, then h, then d). A JSON sidecar `<name>.json` carries
//! `{study_id, realization, role, delta, seed}` plus optional denoise
//! provenance. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{CountLevel, DenoiseProvenance, Volume3D, VolumeRole};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PVOL";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    study_id: String,
    realization: u32,
    role: VolumeRole,
    delta: Option<f64>,
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<DenoiseProvenance>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Write a volume and its metadata sidecar.
pub fn save_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let (h, w, d) = v.dims();
    let mut bytes = Vec::with_capacity(16 + 12 + h * w * d * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&DTYPE_F32.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    // x-fastest payload: w fastest, then h, then d
    for iz in 0..d {
        for iy in 0..h {
            for ix in 0..w {
                bytes.extend_from_slice(&v.voxels[[iy, ix, iz]].to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;

    let sidecar = Sidecar {
        study_id: v.study_id.clone(),
        realization: v.realization,
        role: v.role,
        delta: v.delta.map(CountLevel::value),
        seed: v.seed,
        provenance: v.provenance.clone(),
    };
    let json = serde_json::to_vec_pretty(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    let sp = sidecar_path(path);
    fs::write(&sp, json).map_err(|e| Error::io(sp, e))?;
    Ok(())
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated {what} at offset {offset}")))
}

/// Read a volume and its metadata sidecar.
pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic at offset 0 in {}",
            path.display()
        )));
    }
    let version = read_u32(&bytes, 4, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} at offset 4"
        )));
    }
    let dtype = read_u32(&bytes, 8, "dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype code {dtype} at offset 8"
        )));
    }
    let h = read_u32(&bytes, 16, "dims")? as usize;
    let w = read_u32(&bytes, 20, "dims")? as usize;
    let d = read_u32(&bytes, 24, "dims")? as usize;
    let payload = &bytes[28..];
    let expected = h * w * d * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes at offset 28, expected exactly {} for dims {}x{}x{}",
            payload.len(),
            expected,
            h,
            w,
            d
        )));
    }
    let mut voxels = Array3::<f32>::zeros((h, w, d));
    let mut cursor = 0usize;
    for iz in 0..d {
        for iy in 0..h {
            for ix in 0..w {
                voxels[[iy, ix, iz]] =
                    f32::from_le_bytes(payload[cursor..cursor + 4].try_into().unwrap());
                cursor += 4;
            }
        }
    }

    let sp = sidecar_path(path);
    let sidecar_bytes = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&sidecar_bytes)
        .map_err(|e| Error::Format(format!("sidecar {}: {e}", sp.display())))?;
    let delta = sidecar.delta.map(CountLevel::new).transpose()?;
    let mut vol = Volume3D::new(
        voxels,
        sidecar.study_id,
        sidecar.realization,
        sidecar.role,
        delta,
    )?;
    vol.seed = sidecar.seed;
    vol.provenance = sidecar.provenance;
    Ok(vol)
}
