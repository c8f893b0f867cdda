//! Model weights and initialization.

use crate::error::Result;
use crate::linalg::{Matrix, Rng};

use super::ModelConfig;

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f32 = 1e-5;

/// Weights of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// Per-head query projections, H matrices of shape hidden x D.
    pub w_q: Vec<Matrix>,
    /// Per-head key projections.
    pub w_k: Vec<Matrix>,
    /// Per-head value projections.
    pub w_v: Vec<Matrix>,
    /// Output projection, hidden x hidden.
    pub w_o: Matrix,
    /// FFN input weights, hidden x inner.
    pub w1: Matrix,
    /// FFN output weights, hidden x inner; applied as `h * w2^T`.
    pub w2: Matrix,
    /// Pre-attention layer norm.
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    /// Pre-FFN layer norm.
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

/// The toy transformer: embeddings, layers, final norm, output head.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Token embedding table, vocab x hidden.
    pub tok_emb: Matrix,
    /// Learned absolute position embeddings, max_seq x hidden.
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f32>,
    pub final_bias: Vec<f32>,
    /// Output head, hidden x vocab.
    pub w_out: Matrix,
}

impl Model {
    /// Random initialization: unit-scale token embeddings, Xavier-style
    /// projection weights, identity layer norms.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let hd = config.hidden();
        let inner = config.ffn_inner();
        let proj_std = 1.0 / (hd as f32).sqrt();
        let ffn_out_std = 1.0 / (inner as f32).sqrt();

        let tok_emb = Matrix::randn(config.vocab_size, hd, 1.0, rng);
        let pos_emb = Matrix::randn(config.max_seq, hd, 0.1, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let per_head =
                |rng: &mut Rng| -> Vec<Matrix> {
                    (0..config.heads)
                        .map(|_| Matrix::randn(hd, config.head_dim, proj_std, rng))
                        .collect()
                };
            layers.push(LayerWeights {
                w_q: per_head(rng),
                w_k: per_head(rng),
                w_v: per_head(rng),
                w_o: Matrix::randn(hd, hd, proj_std, rng),
                w1: Matrix::randn(hd, inner, proj_std, rng),
                w2: Matrix::randn(hd, inner, ffn_out_std, rng),
                ln1_gain: vec![1.0; hd],
                ln1_bias: vec![0.0; hd],
                ln2_gain: vec![1.0; hd],
                ln2_bias: vec![0.0; hd],
            });
        }
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_gain: vec![1.0; hd],
            final_bias: vec![0.0; hd],
            w_out: Matrix::randn(hd, config.vocab_size, proj_std, rng),
        })
    }

    /// Every weight is finite.
    pub fn is_finite(&self) -> bool {
        let lw_ok = self.layers.iter().all(|lw| {
            lw.w_q.iter().all(Matrix::is_finite)
                && lw.w_k.iter().all(Matrix::is_finite)
                && lw.w_v.iter().all(Matrix::is_finite)
                && lw.w_o.is_finite()
                && lw.w1.is_finite()
                && lw.w2.is_finite()
                && lw.ln1_gain.iter().all(|v| v.is_finite())
                && lw.ln1_bias.iter().all(|v| v.is_finite())
                && lw.ln2_gain.iter().all(|v| v.is_finite())
                && lw.ln2_bias.iter().all(|v| v.is_finite())
        });
        lw_ok
            && self.tok_emb.is_finite()
            && self.pos_emb.is_finite()
            && self.w_out.is_finite()
            && self.final_gain.iter().all(|v| v.is_finite())
            && self.final_bias.iter().all(|v| v.is_finite())
    }
}
