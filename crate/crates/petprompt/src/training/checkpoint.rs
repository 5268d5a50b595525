//! Checkpoint serialization.
//!
//! Layout: magic `PCKP`, format version u32, header-length u32, JSON header
//! (architecture + train config echo, epoch, validation MAE, dtype), array
//! count u32, then per array: name (u16 length + utf8), dtype code u8,
//! ndim u8, dims u32 each, payload length u64, little-endian payload.
//! Save -> load -> save is byte-identical.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Mode, Model, ModelConfig, ModelParams};
use crate::tensor::Elem;
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u32 = 1;

/// Checkpoint header: everything needed to rebuild the model structure plus
/// training provenance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub mode: Mode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub val_mae: f64,
    pub dtype: String,
}

/// A deserialized checkpoint: header, rebuilt model, and the file digest.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint<E: Elem> {
    pub header: CheckpointHeader,
    pub model: Model<E>,
    /// SHA-256 of the checkpoint file (hex), for output provenance.
    pub sha256: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialize a model and header to `path`. Arrays are written in canonical
/// parameter order.
pub fn save_checkpoint<E: Elem>(
    model: &Model<E>,
    header: &CheckpointHeader,
    path: &Path,
) -> Result<String> {
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {e}")))?;

    let mut arrays: Vec<(String, &ArrayD<E>)> = Vec::new();
    model.params.for_each(&mut |name, a| arrays.push((name, a)));

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in &arrays {
        let nb = name.as_bytes();
        bytes.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        bytes.extend_from_slice(nb);
        bytes.push(E::DTYPE_CODE);
        bytes.push(a.ndim() as u8);
        for &d in a.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let elem_size = std::mem::size_of::<E>();
        bytes.extend_from_slice(&((a.len() * elem_size) as u64).to_le_bytes());
        for &v in a.iter() {
            match E::DTYPE_CODE {
                0 => bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
                _ => bytes.extend_from_slice(&v.to_f64().to_le_bytes()),
            }
        }
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha_hex(&bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format(format!("truncated {what} at offset {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Load a checkpoint, rebuild the model, and verify the stored arrays match
/// the architecture implied by the header exactly (names and shapes).
pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<ModelCheckpoint<E>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sha256 = sha_hex(&bytes);
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad checkpoint magic at offset 0".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hlen = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header decode: {e}")))?;
    if header.dtype != E::DTYPE_NAME {
        return Err(Error::Format(format!(
            "checkpoint stores {} arrays, expected {}",
            header.dtype,
            E::DTYPE_NAME
        )));
    }

    let n_arrays = r.u32("array count")? as usize;
    let mut stored: std::collections::BTreeMap<String, ArrayD<E>> = Default::default();
    for _ in 0..n_arrays {
        let nlen = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(nlen, "name")?.to_vec())
            .map_err(|e| Error::Format(format!("array name not utf8: {e}")))?;
        let dtype = r.u8("dtype")?;
        if dtype != E::DTYPE_CODE {
            return Err(Error::Format(format!(
                "array {name} has dtype code {dtype}, expected {}",
                E::DTYPE_CODE
            )));
        }
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let byte_len = r.u64("payload length")? as usize;
        let elem_size = std::mem::size_of::<E>();
        let count: usize = shape.iter().product();
        if byte_len != count * elem_size {
            return Err(Error::Format(format!(
                "array {name}: payload {byte_len} bytes does not match shape {shape:?}"
            )));
        }
        let payload = r.take(byte_len, "payload")?;
        let mut values = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(elem_size) {
            let v = match E::DTYPE_CODE {
                0 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(chunk.try_into().unwrap()),
            };
            values.push(E::f(v));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::Format(format!("array {name}: {e}")))?;
        if stored.insert(name.clone(), arr).is_some() {
            return Err(Error::Format(format!("duplicate array {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }

    // rebuild the parameter tree from the header config and fill it in
    let mut params: ModelParams<ArrayD<E>> = ModelParams::init(&header.model, 0)?;
    let mut missing = Vec::new();
    params.for_each_mut(&mut |name, slot| match stored.remove(&name) {
        Some(arr) => {
            if arr.shape() == slot.shape() {
                *slot = arr;
            } else {
                missing.push(format!(
                    "{name} (shape {:?} stored vs {:?} expected)",
                    arr.shape(),
                    slot.shape()
                ));
            }
        }
        None => missing.push(format!("{name} (missing)")),
    });
    let unexpected: Vec<String> = stored.keys().cloned().collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint does not match architecture: missing/mismatched [{}], unexpected [{}]",
            missing.join(", "),
            unexpected.join(", ")
        )));
    }

    Ok(ModelCheckpoint {
        model: Model {
            config: header.model.clone(),
            params,
        },
        header,
        sha256,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::InjectionConfig;
    use crate::model::Mode;
    use crate::prompts::{ClpConfig, GpdConfig};

    fn tiny_model<E: Elem>(mode: Mode, seed: u64) -> Model<E> {
        let cfg = ModelConfig {
            levels: 1,
            base_channels: 2,
            mode,
            groups: 2,
            clp: ClpConfig { hidden: 4, m: 4 },
            gpd: GpdConfig {
                n: 2,
                base_dims: (4, 4, 4),
            },
            injection: InjectionConfig {
                heads: 2,
                expansion: 2,
            },
            film_hidden: 4,
            clamp_nonneg_inference: false,
        };
        Model::init(cfg, seed).unwrap()
    }

    fn header_for<E: Elem>(m: &Model<E>) -> CheckpointHeader {
        CheckpointHeader {
            format_version: VERSION,
            mode: m.config.mode,
            model: m.config.clone(),
            train: TrainConfig::default(),
            epoch: 3,
            val_mae: 0.125,
            dtype: E::DTYPE_NAME.to_string(),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = tiny_model(Mode::Dual, 5);
        let p1 = dir.path().join("a.pckp");
        let p2 = dir.path().join("b.pckp");
        save_checkpoint(&m, &header_for(&m), &p1).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        save_checkpoint(&loaded.model, &loaded.header, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_params_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = tiny_model(Mode::Gpd, 6);
        let p = dir.path().join("g.pckp");
        save_checkpoint(&m, &header_for(&m), &p).unwrap();
        let loaded = load_checkpoint::<f32>(&p).unwrap();
        let mut orig = Vec::new();
        m.params.for_each(&mut |n, a| orig.push((n, a.clone())));
        let mut back = Vec::new();
        loaded.model.params.for_each(&mut |n, a| back.push((n, a.clone())));
        assert_eq!(orig.len(), back.len());
        for ((n1, a1), (n2, a2)) in orig.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a1, a2, "array {n1} changed in round trip");
        }
    }

    #[test]
    fn mode_mismatch_lists_groups() {
        // store a dual checkpoint, claim mode none in the header
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = tiny_model(Mode::Dual, 7);
        let mut h = header_for(&m);
        h.mode = Mode::None;
        h.model.mode = Mode::None;
        let p = dir.path().join("m.pckp");
        save_checkpoint(&m, &h, &p).unwrap();
        match load_checkpoint::<f32>(&p) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("unexpected"), "{msg}");
                assert!(msg.contains("skip0"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn header_architecture_mismatch_rejected() {
        // header claims 2 levels, arrays are for 1
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = tiny_model(Mode::None, 8);
        let mut h = header_for(&m);
        h.model.levels = 2;
        let p = dir.path().join("lvl.pckp");
        save_checkpoint(&m, &h, &p).unwrap();
        match load_checkpoint::<f32>(&p) {
            Err(Error::Format(msg)) => assert!(msg.contains("missing"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_and_dtype_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m: Model<f32> = tiny_model(Mode::None, 9);
        let p = dir.path().join("t.pckp");
        save_checkpoint(&m, &header_for(&m), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Format(_))));
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::Format(_))));
    }
}
