//! Visual Recall Intervenor: visual activation (mu), gated activation
//! mixing, and the per-layer hook that orchestrates both during decoding.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitiError};
use crate::linalg::norm;
use crate::runtime::{
    config_hash, generate, ActivationRecord, GateDecision, GenerationTrace, Intervenor, Model,
    Prompt, StepTrace, VisualSpan,
};
use crate::vnd::{probe_score, select_top_beta, ProbeBank};

/// Default epsilon guarding the visual-mass renormalization.
pub const DEFAULT_EPSILON: f32 = 1e-8;

/// Intervention strength, head-selection fraction, gate threshold, epsilon.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InterventionConfig {
    /// Intervention strength alpha_0; zero disables all mixing.
    pub alpha0: f32,
    /// Fraction of heads selected by probe accuracy.
    pub beta: f64,
    /// Gate fires strictly above this probe score.
    pub gate_threshold: f32,
    /// Renormalization epsilon for mu.
    pub epsilon: f32,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            alpha0: 0.20,
            beta: 0.10,
            gate_threshold: 0.5,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(VitiError::config("alpha0", "must lie in [0, 1]"));
        }
        if self.beta <= 0.0 || self.beta > 1.0 {
            return Err(VitiError::config("beta", "must lie in (0, 1]"));
        }
        if self.epsilon < 0.0 {
            return Err(VitiError::config("epsilon", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Visual activation mu: attention restricted to the span, renormalized,
/// applied to the span's value rows.
///
/// `span_values[i]` must be the value row of position `span.start + i`.
pub fn visual_activation(
    attn_row: &[f32],
    span_values: &[&[f32]],
    span: VisualSpan,
    epsilon: f32,
) -> Result<Vec<f32>> {
    if span.is_empty() {
        return Err(VitiError::config("span", "empty visual span"));
    }
    if span.end > attn_row.len() {
        return Err(VitiError::config(
            "span",
            format!(
                "span [{}, {}) outside attention row of length {}",
                span.start,
                span.end,
                attn_row.len()
            ),
        ));
    }
    if span_values.len() != span.len() {
        return Err(VitiError::Shape(format!(
            "{} value rows for span of length {}",
            span_values.len(),
            span.len()
        )));
    }
    let d = span_values[0].len();
    let mass: f64 = attn_row[span.start..span.end]
        .iter()
        .map(|&w| w as f64)
        .sum();
    let denom = mass + epsilon as f64;
    let mut acc = vec![0.0f64; d];
    for (i, values) in span_values.iter().enumerate() {
        let w = attn_row[span.start + i] as f64 / denom;
        for (a, &v) in acc.iter_mut().zip(values.iter()) {
            *a += w * v as f64;
        }
    }
    Ok(acc.iter().map(|&v| v as f32).collect())
}

/// Gated mixing: `o` moves toward `mu` by `alpha = alpha0 * p` when the
/// probe score exceeds the threshold; otherwise `o` is returned unchanged
/// (bitwise).
pub fn gated_intervention(o: &[f32], mu: &[f32], p: f32, cfg: &InterventionConfig) -> Vec<f32> {
    if p > cfg.gate_threshold && cfg.alpha0 > 0.0 {
        let alpha = cfg.alpha0 * p;
        o.iter()
            .zip(mu.iter())
            .map(|(&ov, &mv)| (1.0 - alpha) * ov + alpha * mv)
            .collect()
    } else {
        o.to_vec()
    }
}

/// What to mix toward when a gate fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixTarget {
    /// The visual activation mu (the full method).
    VisualRecall,
    /// The probe direction theta rescaled to the activation norm; the
    /// content-free substitute used by the w/o-VRI ablation.
    ProbeDirection,
}

/// How gate decisions are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePolicy {
    /// Fire when probe score > threshold; alpha = alpha0 * p.
    Probe,
    /// Detector removed: always fire with alpha = alpha0 (w/o-VND ablation).
    AlwaysOn,
}

/// The V-ITI layer hook: probes + gated mixing on the selected heads.
pub struct VitiIntervenor<'a> {
    bank: &'a ProbeBank,
    selected: HashSet<(usize, usize)>,
    cfg: InterventionConfig,
    mix_target: MixTarget,
    gate_policy: GatePolicy,
}

impl<'a> VitiIntervenor<'a> {
    /// Standard construction: verify bank/model compatibility and select the
    /// top-beta heads.
    pub fn new(model: &Model, bank: &'a ProbeBank, cfg: InterventionConfig) -> Result<Self> {
        cfg.validate()?;
        if bank.config_hash != config_hash(&model.config) {
            return Err(VitiError::Compatibility(
                "probe bank was trained for a different model config".into(),
            ));
        }
        if bank.head_dim != model.config.head_dim {
            return Err(VitiError::Compatibility(format!(
                "probe dim {} vs model head dim {}",
                bank.head_dim, model.config.head_dim
            )));
        }
        let selected = select_top_beta(bank, cfg.beta)?.into_iter().collect();
        Ok(VitiIntervenor {
            bank,
            selected,
            cfg,
            mix_target: MixTarget::VisualRecall,
            gate_policy: GatePolicy::Probe,
        })
    }

    /// Override the selected head set (used by ablations and tests).
    pub fn with_selected(mut self, selected: HashSet<(usize, usize)>) -> Self {
        self.selected = selected;
        self
    }

    pub fn with_mix_target(mut self, target: MixTarget) -> Self {
        self.mix_target = target;
        self
    }

    pub fn with_gate_policy(mut self, policy: GatePolicy) -> Self {
        self.gate_policy = policy;
        self
    }

    pub fn selected(&self) -> &HashSet<(usize, usize)> {
        &self.selected
    }

    /// All heads in every layer that contains a selected head.
    pub fn selected_layerwide(&self) -> HashSet<(usize, usize)> {
        let layers: HashSet<usize> = self.selected.iter().map(|&(l, _)| l).collect();
        layers
            .into_iter()
            .flat_map(|l| (0..self.bank.heads).map(move |h| (l, h)))
            .collect()
    }
}

impl Intervenor for VitiIntervenor<'_> {
    fn intervene(
        &self,
        layer: usize,
        records: &[ActivationRecord],
        step: &mut StepTrace,
    ) -> Result<Vec<Option<Vec<f32>>>> {
        let mut out = Vec::with_capacity(records.len());
        for rec in records {
            if !self.selected.contains(&(layer, rec.head)) {
                out.push(None);
                continue;
            }
            let probe = self.bank.probe(layer, rec.head);
            let p = probe_score(probe, &rec.o)?;
            let (fired, alpha) = match self.gate_policy {
                GatePolicy::Probe => (
                    p > self.cfg.gate_threshold && self.cfg.alpha0 > 0.0,
                    self.cfg.alpha0 * p,
                ),
                GatePolicy::AlwaysOn => (self.cfg.alpha0 > 0.0, self.cfg.alpha0),
            };
            step.gates.push(GateDecision {
                layer,
                head: rec.head,
                p,
                fired,
                alpha: if fired { alpha } else { 0.0 },
            });
            if !fired {
                out.push(None);
                continue;
            }
            let replacement = match self.mix_target {
                MixTarget::VisualRecall => rec
                    .o
                    .iter()
                    .zip(rec.mu.iter())
                    .map(|(&ov, &mv)| (1.0 - alpha) * ov + alpha * mv)
                    .collect::<Vec<f32>>(),
                MixTarget::ProbeDirection => {
                    let tn = norm(&probe.theta);
                    if tn == 0.0 {
                        out.push(None);
                        continue;
                    }
                    let scale = (norm(&rec.o) / tn) as f32;
                    rec.o
                        .iter()
                        .zip(probe.theta.iter())
                        .map(|(&ov, &tv)| (1.0 - alpha) * ov + alpha * (tv * scale))
                        .collect::<Vec<f32>>()
                }
            };
            out.push(Some(replacement));
        }
        Ok(out)
    }

    fn epsilon(&self) -> f32 {
        self.cfg.epsilon
    }
}

/// Greedy decoding with the V-ITI intervention.
///
/// With `cfg.alpha0 == 0` the output token sequence is bit-identical to
/// [`crate::runtime::decode_greedy`].
pub fn viti_generate(
    model: &Model,
    prompt: &Prompt,
    bank: &ProbeBank,
    cfg: InterventionConfig,
    max_new: usize,
) -> Result<GenerationTrace> {
    let intervenor = VitiIntervenor::new(model, bank, cfg)?;
    generate(model, prompt, max_new, Some(&intervenor))
}
