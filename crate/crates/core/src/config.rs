//! Run configuration: every module config plus the root seed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::BoxConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::objects::RoiConfig;
use crate::rng::SeedTree;
use crate::train::TrainConfig;

/// Frames sampled from a video input.
pub const VIDEO_FRAMES: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub boxes: BoxConfig,
    pub roi: RoiConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub video_frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            boxes: BoxConfig::default(),
            roi: RoiConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            video_frames: VIDEO_FRAMES,
        }
    }
}

impl RunConfig {
    /// Small encoder resolutions (112/256, an 8×8 token grid) for training
    /// runs that have to finish in minutes.
    pub fn desk() -> Self {
        let encoder = EncoderConfig::default()
            .with_adjusted_resolutions(112, 256)
            .expect("112 is a multiple of the low stride");
        Self {
            encoder,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.boxes.validate()?;
        self.roi.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.video_frames == 0 {
            return Err(Error::Config("video_frames must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.seed)
    }

    /// Freshly initialised parameters for this configuration.
    pub fn init_params(&self) -> Result<ModelParams> {
        ModelParams::new(
            &self.encoder,
            &self.fusion,
            &self.model,
            &self.seeds().child("model"),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder.tokens(), 576);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn desk_preset() {
        let cfg = RunConfig::desk();
        cfg.validate().unwrap();
        assert_eq!((cfg.encoder.low_res, cfg.encoder.high_res), (112, 256));
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_fields_and_unequal_grids_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        let partial: RunConfig =
            serde_json::from_str(r#"{"encoder": {"high_res": 448, "low_res": 224}}"#).unwrap();
        let err = partial.validate().unwrap_err().to_string();
        assert!(err.contains("token-count equality"), "{err}");
    }
}
