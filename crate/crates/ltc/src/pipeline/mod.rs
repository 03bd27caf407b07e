//! Run configuration, data ingestion, training loops, checkpointing and the
//! end-to-end prediction path. Everything here is deterministic given
//! (config, seed, data): rng streams are derived statelessly from the run
//! seed, a purpose tag and the step counter, so resumed runs replay
//! bit-exactly.

pub mod checkpoint;
pub mod data;
pub mod manifest;
pub mod predict;
pub mod train;

use std::path::PathBuf;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::CodecConfig;
use crate::prior::{BottomPriorConfig, TopPriorConfig};
use crate::tensor::TensorError;

pub use data::{ingest_raw, read_clip_file, synth_clip, synth_dataset, write_clip_file, ClipMotion};
pub use predict::predict;
pub use train::{BottomTrainer, CodecTrainer, MetricsLog, TopTrainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Stream tags for derived rngs; one per independent random purpose.
pub mod streams {
    pub const INIT_CODEC: u64 = 1;
    pub const INIT_TOP: u64 = 2;
    pub const INIT_BOTTOM: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const STEP: u64 = 5;
    pub const SAMPLE: u64 = 6;
}

/// Deterministic rng for (seed, purpose, step); resumable without saved
/// state because nothing carries over between steps.
pub fn stream_rng(seed: u64, tag: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) ^ step);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Full,
    Desk,
}

impl Scale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Result<Scale> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(PipelineError::Config(format!("unknown scale '{other}'"))),
        }
    }
}

/// Everything a run needs: scale preset, model configs, optimizer and loop
/// settings. Prior geometry is derived from the codec config plus the
/// conditioning frame count, never written by hand.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scale: Scale,
    pub seed: u64,
    pub fps: f32,
    pub cond_frames: usize,
    pub codec: CodecConfig,
    pub top: TopPriorConfig,
    pub bottom: BottomPriorConfig,
    pub codec_batch: usize,
    pub codec_steps: u64,
    pub codec_lr: f64,
    pub top_batch: usize,
    pub top_steps: u64,
    pub top_lr: f64,
    pub bottom_batch: usize,
    pub bottom_steps: u64,
    pub bottom_lr: f64,
    pub data_count: usize,
    pub checkpoint_every: u64,
    pub temperature: f64,
}

impl RunConfig {
    pub fn full() -> Self {
        let mut cfg = RunConfig {
            scale: Scale::Full,
            seed: 0,
            fps: 25.0,
            cond_frames: 4,
            codec: CodecConfig::full(),
            top: TopPriorConfig::full(),
            bottom: BottomPriorConfig::full(),
            codec_batch: 16,
            codec_steps: 1_000_000,
            codec_lr: 3e-4,
            top_batch: 512,
            top_steps: 1_016_000,
            top_lr: 3e-4,
            bottom_batch: 32,
            bottom_steps: 950_000,
            bottom_lr: 3e-4,
            data_count: 512,
            checkpoint_every: 10_000,
            temperature: 1.0,
        };
        cfg.derive_prior_geometry().expect("full-scale geometry");
        cfg
    }

    pub fn desk() -> Self {
        let mut cfg = RunConfig {
            scale: Scale::Desk,
            seed: 0,
            fps: 25.0,
            cond_frames: 2,
            codec: CodecConfig::desk(),
            top: TopPriorConfig::desk(),
            bottom: BottomPriorConfig::desk(),
            codec_batch: 4,
            codec_steps: 400,
            codec_lr: 2e-3,
            top_batch: 16,
            top_steps: 400,
            top_lr: 1e-3,
            bottom_batch: 4,
            bottom_steps: 200,
            bottom_lr: 1e-3,
            data_count: 512,
            checkpoint_every: 200,
            temperature: 1.0,
        };
        cfg.derive_prior_geometry().expect("desk-scale geometry");
        cfg
    }

    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Full => RunConfig::full(),
            Scale::Desk => RunConfig::desk(),
        }
    }

    /// Recomputes all latent-grid geometry shared between the codec and the
    /// priors. Called after any override that touches extents.
    pub fn derive_prior_geometry(&mut self) -> Result<()> {
        self.codec.validate()?;
        let bottom = self.codec.bottom_extents()?;
        let top = self.codec.top_extents()?;
        let (cond_bottom, cond_top) = self.codec.extents_for(self.cond_frames)?;
        if cond_top[0] != 1 {
            return Err(PipelineError::Config(format!(
                "{} conditioning frames compress to {} top slices; expected exactly 1",
                self.cond_frames, cond_top[0]
            )));
        }
        if top[0] <= cond_top[0] {
            return Err(PipelineError::Config(format!(
                "top grid has {} slices, conditioning covers {}",
                top[0], cond_top[0]
            )));
        }
        self.top.grid = [top[0] - cond_top[0], top[1], top[2]];
        self.top.classes = self.codec.codebook_size;
        self.top.cond_top_extents = cond_top;
        self.top.cond_bottom_extents = cond_bottom;
        self.bottom.slice = [bottom[1], bottom[2]];
        self.bottom.classes = self.codec.codebook_size;
        self.bottom.top_extents = top;
        self.bottom.bottom_slices = bottom[0];
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.top.validate()?;
        self.bottom.validate()?;
        let (cond_bottom, cond_top) = self.codec.extents_for(self.cond_frames)?;
        if self.top.cond_top_extents != cond_top || self.top.cond_bottom_extents != cond_bottom {
            return Err(PipelineError::Config(
                "top prior conditioning extents out of sync with the codec".into(),
            ));
        }
        if self.bottom.top_extents != self.codec.top_extents()?
            || self.bottom.bottom_slices != self.codec.bottom_extents()?[0]
        {
            return Err(PipelineError::Config(
                "bottom prior grid out of sync with the codec".into(),
            ));
        }
        if self.codec_batch == 0 || self.top_batch == 0 || self.bottom_batch == 0 {
            return Err(PipelineError::Config("batch sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Conditioning bottom slices produced by the conditioning prefix.
    pub fn cond_bottom_slices(&self) -> usize {
        self.top.cond_bottom_extents[0]
    }

    /// Frames predicted beyond the conditioning prefix.
    pub fn predicted_frames(&self) -> usize {
        self.codec.input[0] - self.cond_frames
    }
}

/// Canonical checkpoint subdirectory names.
pub fn default_checkpoint_dir(out: &std::path::Path, kind: &str) -> PathBuf {
    out.join(kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_derive_consistent_geometry() {
        let full = RunConfig::full();
        full.validate().unwrap();
        assert_eq!(full.top.grid, [3, 32, 32]);
        assert_eq!(full.top.cond_top_extents, [1, 32, 32]);
        assert_eq!(full.top.cond_bottom_extents, [2, 64, 64]);
        assert_eq!(full.bottom.slice, [64, 64]);
        assert_eq!(full.bottom.bottom_slices, 8);
        assert_eq!(full.predicted_frames(), 12);

        let desk = RunConfig::desk();
        desk.validate().unwrap();
        assert_eq!(desk.top.grid, [1, 4, 4]);
        assert_eq!(desk.top.cond_bottom_extents, [1, 8, 8]);
        assert_eq!(desk.bottom.slice, [8, 8]);
        assert_eq!(desk.cond_bottom_slices(), 1);
    }

    #[test]
    fn stream_rngs_are_independent_and_reproducible() {
        use rand::Rng;
        let a: Vec<u64> = {
            let mut r = stream_rng(7, streams::BATCH, 3);
            (0..4).map(|_| r.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut r = stream_rng(7, streams::BATCH, 3);
            (0..4).map(|_| r.gen()).collect()
        };
        let c: Vec<u64> = {
            let mut r = stream_rng(7, streams::BATCH, 4);
            (0..4).map(|_| r.gen()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn conditioning_frame_count_is_checked() {
        let mut cfg = RunConfig::desk();
        cfg.cond_frames = 7; // compresses to 2 top slices
        assert!(cfg.derive_prior_geometry().is_err());
    }
}
