//! The `TasTas(I, x1, ..., xn)` separation family.
//!
//! Stage 1 is a dual-path masking separator on learned-filterbank latents.
//! Every later stage refines the previous stage's masks from the mixture
//! latents, the previous per-source masked latents and, for identity-aware
//! specs, the previous estimates' speaker embeddings. Stage 1 owns the
//! encoder and decoder; later stages reuse them.

mod checkpoint;
mod layers;
pub(crate) mod network;
mod params;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Tensor;

pub use checkpoint::{Checkpoint, CheckpointError, Component, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{
    chunk_merge, chunk_segment, decode, dual_path_block, encode, frame_count, ChunkLayout,
    LatentFrames,
};
pub use network::{
    forward, id_embed, id_embed_var, separate, Model, ModelVars, SpeakerEmbedding, StageOutput,
    StageVars,
};
pub use params::{bind, init_component, Bound, ParamSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("malformed model spec {text:?}: {detail}")]
    MalformedSpec { text: String, detail: String },
    #[error("input of {len} samples is shorter than one kernel of {kernel}")]
    InputTooShort { len: usize, kernel: usize },
    #[error("invalid chunk length {0}: must be even and >= 2")]
    InvalidChunk(usize),
    #[error("inconsistent chunk metadata: {0}")]
    InconsistentChunks(String),
    #[error("non-finite activations in {0}")]
    NonFinite(String),
    #[error("parameters do not match spec: {0}")]
    ParamMismatch(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
}

/// Layer sizes shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Encoder basis size N.
    pub basis: usize,
    /// Encoder kernel L; the stride is L/2.
    pub kernel: usize,
    /// Bottleneck feature size F inside the dual-path blocks.
    pub feature: usize,
    /// Chunk length K.
    pub chunk: usize,
    /// Hidden size H of each recurrent direction.
    pub hidden: usize,
    /// Speaker embedding dimension D.
    pub embed: usize,
    /// Width of the ID-Net feed-forward layer.
    pub id_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            basis: 64,
            kernel: 16,
            feature: 64,
            chunk: 100,
            hidden: 64,
            embed: 64,
            id_hidden: 128,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidDims(m.to_string()));
        if self.kernel < 2 || !self.kernel.is_multiple_of(2) {
            return bad("kernel must be even and >= 2");
        }
        if self.chunk < 2 || !self.chunk.is_multiple_of(2) {
            return bad("chunk must be even and >= 2");
        }
        if [self.basis, self.feature, self.hidden, self.embed, self.id_hidden].contains(&0) {
            return bad("layer sizes must be positive");
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.kernel / 2
    }
}

/// A parsed `TasTas(...)` specification plus the sizes it is built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub identity_aware: bool,
    pub stage_blocks: Vec<usize>,
    pub num_sources: usize,
    pub dims: ModelDims,
    pub sample_rate: u32,
}

pub const DEFAULT_NUM_SOURCES: usize = 5;

/// Parses `TasTas(` [`I,`] int {`,` int} `)`, whitespace-tolerant.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec, ModelError> {
    let bad = |detail: &str| ModelError::MalformedSpec {
        text: text.to_string(),
        detail: detail.to_string(),
    };
    let body = text
        .trim()
        .strip_prefix("TasTas")
        .ok_or_else(|| bad("expected TasTas(...)"))?
        .trim_start()
        .strip_prefix('(')
        .and_then(|r| r.trim_end().strip_suffix(')'))
        .ok_or_else(|| bad("expected parenthesised argument list"))?;
    let mut parts: Vec<&str> = body.split(',').map(str::trim).collect();
    let identity_aware = parts.first() == Some(&"I");
    if identity_aware {
        parts.remove(0);
    }
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(bad("at least one block count is required"));
    }
    let stage_blocks = parts
        .iter()
        .map(|p| match p.parse::<i64>() {
            Ok(n) if n >= 1 => Ok(n as usize),
            Ok(_) => Err(bad("block counts must be positive")),
            Err(_) => Err(bad(&format!("{p:?} is not a block count"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelSpec {
        identity_aware,
        stage_blocks,
        num_sources: DEFAULT_NUM_SOURCES,
        dims: ModelDims::default(),
        sample_rate: crate::audio::DEFAULT_SAMPLE_RATE,
    })
}

impl ModelSpec {
    pub fn with_sources(mut self, num_sources: usize) -> Self {
        self.num_sources = num_sources;
        self
    }

    pub fn with_dims(mut self, dims: ModelDims) -> Self {
        self.dims = dims;
        self
    }

    pub fn with_sample_rate(mut self, sample_rate: u32) -> Self {
        self.sample_rate = sample_rate;
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.dims.validate()?;
        if self.stage_blocks.is_empty() || self.stage_blocks.contains(&0) {
            return Err(ModelError::InvalidDims("stage block counts must be >= 1".into()));
        }
        if self.num_sources < 1 {
            return Err(ModelError::InvalidDims("need at least one source".into()));
        }
        Ok(())
    }

    /// Canonical notation, e.g. `TasTas(I, 6, 6)`.
    pub fn text(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if self.identity_aware {
            parts.push("I".into());
        }
        parts.extend(self.stage_blocks.iter().map(|b| b.to_string()));
        format!("TasTas({})", parts.join(", "))
    }

    /// Width of the refinement stages' fused input.
    pub(crate) fn fusion_width(&self) -> usize {
        let n = self.dims.basis;
        let s = self.num_sources;
        let id = if self.identity_aware { s * self.dims.embed } else { 0 };
        n + s * n + id
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Name of the parameter component for separation stage `k` (1-based).
pub fn stage_name(k: usize) -> String {
    format!("stage{k}")
}

pub const IDNET: &str = "idnet";

pub(crate) fn finite_or(t: &Tensor, what: &str) -> Result<(), ModelError> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite(what.to_string()))
    }
}
