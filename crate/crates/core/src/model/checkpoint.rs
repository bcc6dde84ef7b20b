//! Checkpoint persistence.
//!
//! A checkpoint is a directory holding `member.json` (the member config,
//! the parameter count, and a SHA-256 digest of the weight bytes) and
//! `weights.bin` (the flat parameter vector as little-endian `f32` in
//! declaration order). Loading verifies length and digest, so truncated or
//! tampered files surface as `CorruptCheckpoint`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_model, MemberConfig, ModelError, ModelParameters};

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    member: MemberConfig,
    param_count: usize,
    digest: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn weights_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Write `member.json` and `weights.bin` into `dir` (created if needed).
pub fn save_checkpoint(
    params: &ModelParameters<f32>,
    member: &MemberConfig,
    dir: &Path,
) -> Result<(), ModelError> {
    if params.backbone != member.backbone {
        return Err(ModelError::ConfigMismatch(
            "parameters were built for a different backbone".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let flat = params.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 4);
    for v in &flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let meta = CheckpointMeta {
        member: member.clone(),
        param_count: flat.len(),
        digest: weights_digest(&bytes),
    };
    let weights_path = dir.join("weights.bin");
    fs::write(&weights_path, &bytes).map_err(io_err(&weights_path))?;
    let meta_path = dir.join("member.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(io_err(&meta_path))
}

/// Load a checkpoint directory back into parameters and its member config.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParameters<f32>, MemberConfig), ModelError> {
    let meta_path = dir.join("member.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| ModelError::CorruptCheckpoint(format!("member.json: {e}")))?;
    meta.member.backbone.validate()?;
    if meta.param_count != meta.member.backbone.parameter_count() {
        return Err(ModelError::CorruptCheckpoint(format!(
            "param_count {} does not match the declared backbone ({})",
            meta.param_count,
            meta.member.backbone.parameter_count()
        )));
    }

    let weights_path = dir.join("weights.bin");
    let bytes = fs::read(&weights_path).map_err(io_err(&weights_path))?;
    if bytes.len() != meta.param_count * 4 {
        return Err(ModelError::CorruptCheckpoint(format!(
            "weights.bin holds {} bytes, expected {}",
            bytes.len(),
            meta.param_count * 4
        )));
    }
    if weights_digest(&bytes) != meta.digest {
        return Err(ModelError::CorruptCheckpoint("digest mismatch".into()));
    }

    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|chunk| f32::from_le_bytes(chunk.try_into().expect("chunk of 4")))
        .collect();
    // Shape container built from the config, then overwritten in place.
    let mut params = build_model(&meta.member, 0)?;
    params.assign_flat(&flat);
    Ok((params, meta.member))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::RegionKind;
    use crate::model::{BackboneConfig, ConvBlockSpec};

    fn member() -> MemberConfig {
        MemberConfig {
            member_id: "probe".into(),
            region: RegionKind::Face,
            backbone: BackboneConfig {
                input_resolution: (10, 10),
                conv_blocks: vec![ConvBlockSpec { out_channels: 3, kernel_size: 3, stride: 2 }],
                dense_units: 5,
                dropout_rate: 0.1,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = member();
        let params = build_model(&config, 42).unwrap();
        save_checkpoint(&params, &config, dir.path()).unwrap();
        let (loaded, loaded_config) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded_config, config);
        let a = params.flatten();
        let b = loaded.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // Saving the loaded copy reproduces identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(&loaded, &loaded_config, dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("weights.bin")).unwrap(),
            std::fs::read(dir2.path().join("weights.bin")).unwrap()
        );
    }

    #[test]
    fn truncated_weights_detected() {
        let dir = tempfile::tempdir().unwrap();
        let config = member();
        let params = build_model(&config, 1).unwrap();
        save_checkpoint(&params, &config, dir.path()).unwrap();
        let weights = dir.path().join("weights.bin");
        let bytes = std::fs::read(&weights).unwrap();
        std::fs::write(&weights, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            ModelError::CorruptCheckpoint(_)
        ));
    }

    #[test]
    fn flipped_bit_detected_by_digest() {
        let dir = tempfile::tempdir().unwrap();
        let config = member();
        let params = build_model(&config, 2).unwrap();
        save_checkpoint(&params, &config, dir.path()).unwrap();
        let weights = dir.path().join("weights.bin");
        let mut bytes = std::fs::read(&weights).unwrap();
        bytes[7] ^= 0x01;
        std::fs::write(&weights, &bytes).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, ModelError::CorruptCheckpoint(msg) if msg.contains("digest")));
    }

    #[test]
    fn predictions_survive_round_trip() {
        use crate::model::net::{forward, hwc_to_chw};
        let dir = tempfile::tempdir().unwrap();
        let config = member();
        let params = build_model(&config, 3).unwrap();
        save_checkpoint(&params, &config, dir.path()).unwrap();
        let (loaded, _) = load_checkpoint(dir.path()).unwrap();
        let probe = ndarray::Array3::from_shape_fn((10, 10, 3), |(r, c, ch)| {
            ((r * 13 + c * 5 + ch) % 11) as f32 / 11.0
        });
        let x = hwc_to_chw(&probe);
        let a = forward(&params, &x, None).unwrap().logit;
        let b = forward(&loaded, &x, None).unwrap().logit;
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
