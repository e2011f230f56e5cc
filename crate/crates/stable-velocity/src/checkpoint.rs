//! Model checkpoints: a JSON header describing the architecture and
//! run position, followed by the raw parameter vector.
//!
//! Layout, little-endian:
//!
//! ```text
//! bytes 0..4      u32 header length H
//! bytes 4..4+H    UTF-8 JSON: {"arch": ..., "seed": ..., "iteration": ...}
//! then            param_count × f64  parameters, model storage order
//! ```
//!
//! The parameter block length must equal the architecture's parameter
//! count exactly; loaders reject anything else.

use crate::error::{Error, Result};
use crate::nn::{ModelArch, VelocityModel};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Checkpoint header, stored as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ModelArch,
    /// Master seed of the run that produced this checkpoint.
    pub seed: u64,
    /// Number of optimizer iterations completed.
    pub iteration: u64,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: VelocityModel,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::format(path.display().to_string(), reason)
}

/// Serializes a model and its run position into checkpoint bytes.
pub fn encode_checkpoint(model: &VelocityModel, seed: u64, iteration: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        arch: model.arch.clone(),
        seed,
        iteration,
    };
    let header_json = serde_json::to_vec(&header)?;
    if header_json.len() > u32::MAX as usize {
        return Err(Error::Spec("checkpoint header too large".into()));
    }
    let params = &model.params;
    let mut out = Vec::with_capacity(4 + header_json.len() + 8 * params.len());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for &p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

/// Parses checkpoint bytes; `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(format_err(path, "file shorter than the 4-byte length prefix"));
    }
    let header_len = u32::from_le_bytes(bytes[0..4].try_into().expect("width")) as usize;
    if bytes.len() < 4 + header_len {
        return Err(format_err(
            path,
            format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ),
        ));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[4..4 + header_len]).map_err(|e| {
            format_err(path, format!("invalid header JSON: {e}"))
        })?;
    header
        .arch
        .validate()
        .map_err(|e| format_err(path, format!("invalid architecture: {e}")))?;
    let body = &bytes[4 + header_len..];
    let expect = header.arch.param_count();
    if body.len() != 8 * expect {
        return Err(format_err(
            path,
            format!(
                "parameter block holds {} bytes, architecture needs {} ({} f64 values)",
                body.len(),
                8 * expect,
                expect
            ),
        ));
    }
    let mut params = Vec::with_capacity(expect);
    for i in 0..expect {
        let off = 8 * i;
        params.push(f64::from_le_bytes(body[off..off + 8].try_into().expect("width")));
    }
    let model = VelocityModel::from_params(header.arch.clone(), params)?;
    Ok(Checkpoint { header, model })
}

/// Writes a checkpoint file.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &VelocityModel,
    seed: u64,
    iteration: u64,
) -> Result<()> {
    let bytes = encode_checkpoint(model, seed, iteration)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use std::path::PathBuf;

    fn scratch(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("ckpt-test-{}-{name}", std::process::id()));
        p
    }

    fn small_model() -> VelocityModel {
        let arch = ModelArch::with_hidden(2, vec![8, 8], None);
        VelocityModel::init(arch, Stream::new(42).child("init")).unwrap()
    }

    #[test]
    fn round_trip_preserves_everything() {
        let path = scratch("roundtrip.ckpt");
        let model = small_model();
        save_checkpoint(&path, &model, 7, 1500).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.header.seed, 7);
        assert_eq!(loaded.header.iteration, 1500);
        assert_eq!(loaded.header.arch, model.arch);
        assert_eq!(loaded.model.params, model.params);
        fs::remove_file(&path).ok();
    }

    #[test]
    fn rejects_wrong_parameter_count() {
        let model = small_model();
        let mut bytes = encode_checkpoint(&model, 0, 0).unwrap();
        bytes.truncate(bytes.len() - 8);
        let err = decode_checkpoint(&bytes, Path::new("short.ckpt")).unwrap_err();
        assert!(err.to_string().contains("parameter block"), "{err}");
        bytes.extend_from_slice(&[0u8; 16]);
        assert!(decode_checkpoint(&bytes, Path::new("long.ckpt")).is_err());
    }

    #[test]
    fn rejects_corrupt_headers() {
        let path = Path::new("bad.ckpt");
        assert!(decode_checkpoint(&[1, 0], path).is_err());
        // Length prefix overruns the file.
        let mut bytes = 100u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(decode_checkpoint(&bytes, path).is_err());
        // Valid length, invalid JSON.
        let mut bytes = 3u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{{{");
        let err = decode_checkpoint(&bytes, path).unwrap_err();
        assert!(err.to_string().contains("invalid header JSON"), "{err}");
    }

    #[test]
    fn bytes_are_deterministic() {
        let model = small_model();
        let a = encode_checkpoint(&model, 3, 10).unwrap();
        let b = encode_checkpoint(&model, 3, 10).unwrap();
        assert_eq!(a, b);
    }
}
