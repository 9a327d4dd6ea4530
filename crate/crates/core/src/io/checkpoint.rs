use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::PredictorKind;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrackModel};

pub const CHECKPOINT_FORMAT: &str = "rantrack-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub iterations: usize,
    /// Association threshold picked by a threshold search, if one ran.
    #[serde(default)]
    pub score_threshold: Option<f64>,
}

/// Self-describing JSON container. Floats are written in shortest
/// round-trip form and parsed exactly, so tensors survive bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: PredictorKind,
    pub config: ModelConfig,
    pub metadata: TrainingMetadata,
    pub model: TrackModel,
}

impl Checkpoint {
    pub fn new(model: TrackModel, metadata: TrainingMetadata) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: model.kind(),
            config: model.config(),
            metadata,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(CHECKPOINT_FORMAT) => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unrecognized header {other:?}, expected {CHECKPOINT_FORMAT:?}"
                )))
            }
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "unsupported version {other:?}, this build reads version {CHECKPOINT_VERSION}"
                )))
            }
        }
        let checkpoint: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        checkpoint.check()?;
        Ok(checkpoint)
    }

    fn check(&self) -> Result<()> {
        self.config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| Error::Checkpoint(format!("tensor sizes: {e}")))?;
        if self.model.kind() != self.kind {
            return Err(Error::Checkpoint(format!(
                "declared kind {} but tensors are {}",
                self.kind,
                self.model.kind()
            )));
        }
        if self.model.config() != self.config {
            return Err(Error::Checkpoint(
                "tensor sizes do not match the declared dimensions".into(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_json()?).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample(kind: PredictorKind) -> Checkpoint {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let config = ModelConfig::desk(kind).with_appearance_dim(3).with_span(4);
        Checkpoint::new(
            TrackModel::random(&config, &mut rng),
            TrainingMetadata {
                seed: 5,
                iterations: 12,
                score_threshold: Some(-12.5),
            },
        )
    }

    #[test]
    fn round_trip_is_bitwise_for_every_kind() {
        for kind in PredictorKind::ALL {
            let c = sample(kind);
            let back = Checkpoint::from_json(&c.to_json().unwrap()).unwrap();
            assert_eq!(back.kind, kind);
            let (a, b) = (c.model.flatten(), back.model.flatten());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(back, c);
        }
    }

    #[test]
    fn bad_headers_rejected() {
        let text = sample(PredictorKind::Ran).to_json().unwrap();
        let wrong_format = text.replacen(CHECKPOINT_FORMAT, "something-else", 1);
        assert!(Checkpoint::from_json(&wrong_format).is_err());
        let wrong_version = text.replacen("\"version\": 1", "\"version\": 99", 1);
        assert!(Checkpoint::from_json(&wrong_version)
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(Checkpoint::from_json("garbage").is_err());
        assert!(Checkpoint::from_json(&text[..text.len() / 2]).is_err());
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut c = sample(PredictorKind::Ave);
        c.config.appearance.input_dim = 7;
        let text = serde_json::to_string(&c).unwrap();
        assert!(Checkpoint::from_json(&text).is_err());
    }
}
