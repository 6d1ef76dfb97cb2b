use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, EmaState, FieldModel, Mode};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters, EMA shadow and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub architecture: Architecture,
    pub mode: Mode,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
    pub config: TrainConfig,
    pub step: u64,
    /// Validation score at the time the checkpoint was taken, if finite.
    pub validation: Option<f64>,
}

/// On-disk layout: parameter vectors are little-endian f64 in base64.
#[derive(Serialize, Deserialize)]
struct Stored {
    version: u32,
    architecture: Architecture,
    mode: Mode,
    step: u64,
    validation: Option<f64>,
    config: TrainConfig,
    params: String,
    ema: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

fn decode(text: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = BASE64.decode(text).map_err(|e| e.to_string())?;
    if bytes.len() % 8 != 0 {
        return Err(format!("parameter blob of {} bytes", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn new(
        model: &FieldModel,
        ema: &EmaState,
        config: TrainConfig,
        step: u64,
        validation: Option<f64>,
    ) -> Self {
        Self {
            architecture: model.architecture().clone(),
            mode: model.mode(),
            params: model.params().to_vec(),
            ema: ema.shadow.clone(),
            config,
            step,
            validation,
        }
    }

    /// Model with the raw training parameters.
    pub fn model(&self) -> Result<FieldModel> {
        FieldModel::from_params(self.architecture.clone(), self.mode, self.params.clone())
    }

    /// Model with the EMA parameters, used for evaluation.
    pub fn ema_model(&self) -> Result<FieldModel> {
        FieldModel::from_params(self.architecture.clone(), self.mode, self.ema.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let stored = Stored {
            version: CHECKPOINT_VERSION,
            architecture: self.architecture.clone(),
            mode: self.mode,
            step: self.step,
            validation: self.validation,
            config: self.config.clone(),
            params: encode(&self.params),
            ema: encode(&self.ema),
        };
        let mut out = serde_json::to_vec_pretty(&stored).expect("checkpoint serializes");
        out.push(b'\n');
        out
    }

    /// `origin` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: origin.to_path_buf(),
            reason,
        };
        let probe: VersionProbe =
            serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
        if probe.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: probe.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let stored: Stored = serde_json::from_slice(bytes).map_err(|e| corrupt(e.to_string()))?;
        let ckpt = Self {
            architecture: stored.architecture,
            mode: stored.mode,
            params: decode(&stored.params).map_err(corrupt)?,
            ema: decode(&stored.ema).map_err(corrupt)?,
            config: stored.config,
            step: stored.step,
            validation: stored.validation,
        };
        let expected = ckpt.architecture.num_params();
        if ckpt.params.len() != expected || ckpt.ema.len() != expected {
            return Err(corrupt(format!(
                "expected {expected} parameters, found {} and {} (EMA)",
                ckpt.params.len(),
                ckpt.ema.len()
            )));
        }
        Ok(ckpt)
    }

    /// Writes to a temporary file next to `path` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let name = path
            .file_name()
            .ok_or_else(|| Error::config(format!("not a file path: {}", path.display())))?;
        let tmp = dir.join(format!(
            ".{}.{}.tmp",
            name.to_string_lossy(),
            std::process::id()
        ));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&self.to_bytes())?;
        file.sync_all()?;
        drop(file);
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::Activation;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            frame_len: 2,
            hidden: vec![4],
            activation: Activation::Tanh,
            time_embed: 2,
            context: 0,
        };
        let model =
            FieldModel::new(arch, Mode::VectorField, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut ema = EmaState::new(model.params(), 0.5).unwrap();
        ema.update(&vec![0.1; model.num_params()]).unwrap();
        Checkpoint::new(&model, &ema, TrainConfig::default(), 17, Some(-1.25))
    }

    #[test]
    fn bytes_round_trip() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() / 2], Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint { .. }), "{err}");
    }

    #[test]
    fn other_version_is_rejected() {
        let text = String::from_utf8(sample().to_bytes()).unwrap();
        let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
        let err = Checkpoint::from_bytes(bumped.as_bytes(), Path::new("mem")).unwrap_err();
        assert!(
            matches!(
                err,
                Error::VersionMismatch {
                    found: 99,
                    expected: 1
                }
            ),
            "{err}"
        );
    }
}
