//! Toy decoder-only transformer with per-head activation taps.
//!
//! The forward pass exposes, for the current query position of every
//! (layer, head): the attention row, the head activation `o`, and the
//! visual activation `mu`. An optional [`Intervenor`] may replace head
//! activations at generation positions before they are concatenated.

mod checkpoint;
mod forward;
mod model;

pub use checkpoint::{config_hash, load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    combine_values, decode_greedy, embed_prompt, full_forward, generate, head_forward,
    layer_attention, layer_forward, prompt_records, Intervenor, KvCache,
};
pub use model::{LayerWeights, Model, LN_EPS};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitiError};

/// Dimensions of the toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer layers (L).
    pub layers: usize,
    /// Attention heads per layer (H).
    pub heads: usize,
    /// Per-head dimension (D).
    pub head_dim: usize,
    /// FFN width multiplier (m); inner width is `m * H * D`.
    pub ffn_mult: usize,
    /// Vocabulary size.
    pub vocab_size: usize,
    /// Maximum context length.
    pub max_seq: usize,
}

impl ModelConfig {
    /// Hidden width `H * D`.
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }

    /// FFN inner width `m * H * D`.
    pub fn ffn_inner(&self) -> usize {
        self.ffn_mult * self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ffn_mult", self.ffn_mult),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(VitiError::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Half-open span [start, end) of visual token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualSpan {
    pub start: usize,
    pub end: usize,
}

impl VisualSpan {
    pub fn new(start: usize, end: usize) -> Self {
        VisualSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check `0 <= start < end <= n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.start >= self.end || self.end > n {
            return Err(VitiError::config(
                "span",
                format!("[{}, {}) invalid for context length {}", self.start, self.end, n),
            ));
        }
        Ok(())
    }
}

/// Per-(layer, head) tap at one query position.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    pub layer: usize,
    pub head: usize,
    /// Attention weights of the current query position (length = context).
    pub attn_row: Vec<f32>,
    /// Head activation o (length D).
    pub o: Vec<f32>,
    /// Visual activation mu (length D).
    pub mu: Vec<f32>,
}

/// One gate decision made by the intervenor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateDecision {
    pub layer: usize,
    pub head: usize,
    /// Probe score p.
    pub p: f32,
    /// Whether the gate fired (p above threshold).
    pub fired: bool,
    /// Mixing weight used (0 when the gate did not fire).
    pub alpha: f32,
}

/// Diagnostics for one generation step.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepTrace {
    /// Gate decisions, recorded only for selected heads.
    pub gates: Vec<GateDecision>,
    /// Mean attention mass on the visual span over all (layer, head).
    pub visual_mass: f32,
    /// Wall clock for this step, microseconds.
    pub wall_us: u64,
    /// Logit of the emitted token.
    pub top_logit: f32,
}

/// Full account of one decoded answer.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenerationTrace {
    /// Generated tokens, in order.
    pub tokens: Vec<u32>,
    /// Per-step diagnostics, same length as `tokens`.
    pub steps: Vec<StepTrace>,
}

impl GenerationTrace {
    /// Mean visual-attention mass over all steps.
    pub fn mean_visual_mass(&self) -> f32 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.visual_mass).sum::<f32>() / self.steps.len() as f32
    }

    /// Number of gate firings across all steps.
    pub fn gate_fire_count(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| s.gates.iter())
            .filter(|g| g.fired)
            .count()
    }
}

/// A prompt to decode from: token ids, visual span, and optionally a
/// pre-built (possibly perturbed) embedding matrix for the prompt rows.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub span: VisualSpan,
    /// When present, rows override `embed_prompt(model, tokens)`.
    pub embeddings: Option<crate::linalg::Matrix>,
}

impl Prompt {
    pub fn new(tokens: Vec<u32>, span: VisualSpan) -> Self {
        Prompt {
            tokens,
            span,
            embeddings: None,
        }
    }

    pub fn with_embeddings(mut self, x0: crate::linalg::Matrix) -> Self {
        self.embeddings = Some(x0);
        self
    }
}
