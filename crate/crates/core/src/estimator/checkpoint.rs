//! Binary checkpoint: `FHCK`, u32 version, u32 config length, config JSON,
//! u64 parameter count, f64 parameters, then a CRC32 of everything before it.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{ModelConfig, MotionEstimator};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"FHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &MotionEstimator) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let params = model.params();
    let mut out = Vec::with_capacity(24 + config.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(model: &MotionEstimator, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, checkpoint_bytes(model)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<MotionEstimator> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse(&bytes, path)
}

fn parse(bytes: &[u8], path: &Path) -> Result<MotionEstimator> {
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(malformed("not a model checkpoint"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let found = u32_at(4);
    if found != CHECKPOINT_VERSION {
        return Err(Error::FormatVersionMismatch {
            path: path.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::ChecksumMismatch(path.to_path_buf()));
    }
    let config_len = u32_at(8) as usize;
    let config_end = 12 + config_len;
    if body.len() < config_end + 8 {
        return Err(malformed("truncated header"));
    }
    let config: ModelConfig = serde_json::from_slice(&body[12..config_end]).map_err(|e| malformed(&e.to_string()))?;
    let count = u64::from_le_bytes(body[config_end..config_end + 8].try_into().unwrap()) as usize;
    let data = &body[config_end + 8..];
    if data.len() != count * 8 {
        return Err(malformed("parameter block length disagrees with its count"));
    }
    let params = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    MotionEstimator::from_params(config, params).map_err(|e| malformed(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let model = MotionEstimator::new(ModelConfig::tiny()).unwrap();
        let bytes = checkpoint_bytes(&model);
        let back = parse(&bytes, Path::new("m.ckpt")).unwrap();
        assert_eq!(back.config(), model.config());
        assert!(back.params().iter().zip(model.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(checkpoint_bytes(&back), bytes);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let model = MotionEstimator::new(ModelConfig::tiny()).unwrap();
        let mut bytes = checkpoint_bytes(&model);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(parse(&bytes, Path::new("x")), Err(Error::ChecksumMismatch(_))));
        let mut bytes = checkpoint_bytes(&model);
        bytes[4] = 9;
        assert!(matches!(
            parse(&bytes, Path::new("x")),
            Err(Error::FormatVersionMismatch { found: 9, expected: 1, .. })
        ));
        assert!(matches!(parse(b"nope", Path::new("x")), Err(Error::Malformed { .. })));
    }
}
