//! Forward passes: full-matrix layer evaluation, KV-cached greedy decoding,
//! and the per-head taps consumed by the intervention layer.
//!
//! Generation step `t` is the pass over the token that produces `y^t`; the
//! first such pass is the one over the last prompt token. Intervenors run
//! only at generation passes, never at earlier prefill positions.

use std::time::Instant;

use crate::error::{Result, VitiError};
use crate::linalg::{dot, layer_norm, softmax_into, softmax_rows, vecmat, Matrix};
use crate::vri::{visual_activation, DEFAULT_EPSILON};

use super::{
    ActivationRecord, GenerationTrace, LayerWeights, Model, ModelConfig, Prompt, StepTrace,
    VisualSpan, LN_EPS,
};

/// Activation-editing callback invoked once per layer at generation passes.
pub trait Intervenor {
    /// Inspect the per-head records of the current position and return one
    /// replacement activation per head (`None` keeps the original, bitwise).
    fn intervene(
        &self,
        layer: usize,
        records: &[ActivationRecord],
        step: &mut StepTrace,
    ) -> Result<Vec<Option<Vec<f32>>>>;

    /// Epsilon used when the runtime computes `mu` for the records.
    fn epsilon(&self) -> f32 {
        DEFAULT_EPSILON
    }
}

/// Token + position embedding rows for a prompt.
pub fn embed_prompt(model: &Model, tokens: &[u32]) -> Result<Matrix> {
    let hd = model.config.hidden();
    if tokens.len() > model.config.max_seq {
        return Err(VitiError::Input(format!(
            "prompt length {} exceeds max_seq {}",
            tokens.len(),
            model.config.max_seq
        )));
    }
    let mut x0 = Matrix::zeros(tokens.len(), hd);
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= model.config.vocab_size {
            return Err(VitiError::Input(format!(
                "token {t} outside vocabulary of size {}",
                model.config.vocab_size
            )));
        }
        let row = x0.row_mut(i);
        let emb = model.tok_emb.row(t as usize);
        let pos = model.pos_emb.row(i);
        for j in 0..hd {
            row[j] = emb[j] + pos[j];
        }
    }
    Ok(x0)
}

/// Attention-weighted sum of value rows for one query position (Eq. 3 for a
/// single row).
pub fn combine_values(attn_row: &[f32], values: &Matrix) -> Result<Vec<f32>> {
    if attn_row.len() != values.rows() {
        return Err(VitiError::Shape(format!(
            "attention row length {} vs {} value rows",
            attn_row.len(),
            values.rows()
        )));
    }
    let d = values.cols();
    let mut acc = vec![0.0f64; d];
    for (j, &w) in attn_row.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let v = values.row(j);
        let w = w as f64;
        for (a, &vj) in acc.iter_mut().zip(v.iter()) {
            *a += w * vj as f64;
        }
    }
    Ok(acc.iter().map(|&v| v as f32).collect())
}

/// Per-head causal attention over a full hidden-state matrix.
///
/// Returns (A, V) per head: A is n x n with zeros above the diagonal, V is
/// n x D.
pub fn layer_attention(
    config: &ModelConfig,
    lw: &LayerWeights,
    x_normed: &Matrix,
) -> Result<Vec<(Matrix, Matrix)>> {
    let n = x_normed.rows();
    let scale = 1.0 / (config.head_dim as f32).sqrt();
    let mut out = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q = crate::linalg::matmul(x_normed, &lw.w_q[h])?;
        let k = crate::linalg::matmul(x_normed, &lw.w_k[h])?;
        let v = crate::linalg::matmul(x_normed, &lw.w_v[h])?;
        let mut scores = crate::linalg::matmul(&q, &k.transpose())?;
        for i in 0..n {
            let row = scores.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s = if j <= i { *s * scale } else { f32::NEG_INFINITY };
            }
        }
        let attn = softmax_rows(&scores)?;
        out.push((attn, v));
    }
    Ok(out)
}

/// Taps for one head across every query position (Eq. 1-3 plus Eq. 7).
pub fn head_forward(
    config: &ModelConfig,
    lw: &LayerWeights,
    x: &Matrix,
    layer: usize,
    head: usize,
    span: VisualSpan,
) -> Result<Vec<ActivationRecord>> {
    span.validate(x.rows())?;
    if head >= config.heads {
        return Err(VitiError::config("head", format!("head {head} out of range")));
    }
    let xn = normed_rows(x, &lw.ln1_gain, &lw.ln1_bias)?;
    let pairs = layer_attention(config, lw, &xn)?;
    let (attn, values) = &pairs[head];
    let mut records = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let attn_row = attn.row(i).to_vec();
        let o = combine_values(&attn_row, values)?;
        let span_rows: Vec<&[f32]> = (span.start..span.end).map(|j| values.row(j)).collect();
        let mu = visual_activation(&attn_row, &span_rows, span, DEFAULT_EPSILON)?;
        records.push(ActivationRecord {
            layer,
            head,
            attn_row,
            o,
            mu,
        });
    }
    Ok(records)
}

fn normed_rows(x: &Matrix, gain: &[f32], bias: &[f32]) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let n = layer_norm(x.row(i), gain, bias, LN_EPS)?;
        out.row_mut(i).copy_from_slice(&n);
    }
    Ok(out)
}

/// One full pre-norm transformer layer over all positions.
///
/// When an intervenor is supplied it is applied to the last row only;
/// earlier positions always pass through untouched.
pub fn layer_forward(
    config: &ModelConfig,
    lw: &LayerWeights,
    x: &Matrix,
    layer: usize,
    span: VisualSpan,
    intervenor: Option<&dyn Intervenor>,
    step: Option<&mut StepTrace>,
) -> Result<Matrix> {
    span.validate(x.rows())?;
    let n = x.rows();
    let hd = config.hidden();
    let d = config.head_dim;
    let xn = normed_rows(x, &lw.ln1_gain, &lw.ln1_bias)?;
    let pairs = layer_attention(config, lw, &xn)?;

    // head outputs for every position
    let mut concat = Matrix::zeros(n, hd);
    for (h, (attn, values)) in pairs.iter().enumerate() {
        for i in 0..n {
            let o = combine_values(attn.row(i), values)?;
            concat.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(&o);
        }
    }

    // last-row intervention
    if let Some(iv) = intervenor {
        let eps = iv.epsilon();
        let last = n - 1;
        let mut records = Vec::with_capacity(config.heads);
        for (h, (attn, values)) in pairs.iter().enumerate() {
            let attn_row = attn.row(last).to_vec();
            let o = concat.row(last)[h * d..(h + 1) * d].to_vec();
            let span_rows: Vec<&[f32]> = (span.start..span.end).map(|j| values.row(j)).collect();
            let mu = visual_activation(&attn_row, &span_rows, span, eps)?;
            records.push(ActivationRecord {
                layer,
                head: h,
                attn_row,
                o,
                mu,
            });
        }
        let mut scratch = StepTrace::default();
        let step = match step {
            Some(s) => s,
            None => &mut scratch,
        };
        let replacements = iv.intervene(layer, &records, step)?;
        if replacements.len() != config.heads {
            return Err(VitiError::Shape(format!(
                "intervenor returned {} replacements for {} heads",
                replacements.len(),
                config.heads
            )));
        }
        for (h, rep) in replacements.into_iter().enumerate() {
            if let Some(v) = rep {
                if v.len() != d {
                    return Err(VitiError::Shape(format!(
                        "replacement for head {h} has length {}, want {d}",
                        v.len()
                    )));
                }
                concat.row_mut(last)[h * d..(h + 1) * d].copy_from_slice(&v);
            }
        }
    }

    let att_out = crate::linalg::matmul(&concat, &lw.w_o)?;
    let mut xmid = x.clone();
    for i in 0..n {
        let row = xmid.row_mut(i);
        let a = att_out.row(i);
        for j in 0..hd {
            row[j] += a[j];
        }
    }
    let xn2 = normed_rows(&xmid, &lw.ln2_gain, &lw.ln2_bias)?;
    let mut h1 = crate::linalg::matmul(&xn2, &lw.w1)?;
    for v in h1.data_mut() {
        *v *= crate::linalg::sigmoid(*v);
    }
    // ffn output: h1 * w2^T, row i of w2 is contiguous
    let mut out = xmid.clone();
    for i in 0..n {
        let hrow = h1.row(i);
        let orow = out.row_mut(i);
        for j in 0..hd {
            orow[j] += dot(hrow, lw.w2.row(j)) as f32;
        }
    }
    Ok(out)
}

/// Full forward pass over every position; returns logits, n x vocab.
pub fn full_forward(model: &Model, x0: &Matrix, span: VisualSpan) -> Result<Matrix> {
    let mut x = x0.clone();
    for (l, lw) in model.layers.iter().enumerate() {
        x = layer_forward(&model.config, lw, &x, l, span, None, None)?;
    }
    let xf = normed_rows(&x, &model.final_gain, &model.final_bias)?;
    crate::linalg::matmul(&xf, &model.w_out)
}

/// Per-layer key/value cache, position-major rows of width hidden.
pub struct KvCache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    hidden: usize,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize, hidden: usize, max_ctx: usize) -> Self {
        KvCache {
            k: (0..layers).map(|_| vec![0.0; hidden * max_ctx]).collect(),
            v: (0..layers).map(|_| vec![0.0; hidden * max_ctx]).collect(),
            hidden,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn k_row(&self, layer: usize, pos: usize) -> &[f32] {
        &self.k[layer][pos * self.hidden..(pos + 1) * self.hidden]
    }

    fn v_row(&self, layer: usize, pos: usize) -> &[f32] {
        &self.v[layer][pos * self.hidden..(pos + 1) * self.hidden]
    }
}

/// Process one token row through all layers with the KV cache.
///
/// `record_eps`: when `Some`, per-head records (with mu at that epsilon) are
/// built and either passed to the intervenor or pushed to `sink`.
#[allow(clippy::too_many_arguments)]
fn forward_pos(
    model: &Model,
    cache: &mut KvCache,
    x_row: &[f32],
    pos: usize,
    span: VisualSpan,
    intervenor: Option<&dyn Intervenor>,
    sink: Option<&mut Vec<ActivationRecord>>,
    step: Option<&mut StepTrace>,
) -> Result<Vec<f32>> {
    let cfg = &model.config;
    let hd = cfg.hidden();
    let d = cfg.head_dim;
    let scale = 1.0 / (d as f32).sqrt();
    let ctx = pos + 1;
    let want_records = intervenor.is_some() || sink.is_some();
    let eps = intervenor.map_or(DEFAULT_EPSILON, |iv| iv.epsilon());
    let mut x = x_row.to_vec();
    let mut mass_sum = 0.0f64;
    let mut mass_n = 0usize;
    let track_mass = step.is_some() && span.end <= ctx;
    let mut all_records: Vec<ActivationRecord> = Vec::new();
    let mut step_opt = step;

    let mut scores = vec![0.0f32; ctx];
    let mut attn = vec![0.0f32; ctx];
    for (l, lw) in model.layers.iter().enumerate() {
        let xn = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias, LN_EPS)?;
        // project this position's k/v for every head and append to the cache
        {
            let krow = &mut cache.k[l][pos * hd..(pos + 1) * hd];
            let vrow = &mut cache.v[l][pos * hd..(pos + 1) * hd];
            for h in 0..cfg.heads {
                let kh = vecmat(&xn, &lw.w_k[h])?;
                let vh = vecmat(&xn, &lw.w_v[h])?;
                krow[h * d..(h + 1) * d].copy_from_slice(&kh);
                vrow[h * d..(h + 1) * d].copy_from_slice(&vh);
            }
        }
        let mut concat = vec![0.0f32; hd];
        let mut records: Vec<ActivationRecord> = Vec::new();
        for h in 0..cfg.heads {
            let q = vecmat(&xn, &lw.w_q[h])?;
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = cache.k_row(l, j);
                *s = (dot(&q, &krow[h * d..(h + 1) * d]) * scale as f64) as f32;
            }
            softmax_into(&scores, &mut attn)?;
            let mut acc = [0.0f64; 64];
            debug_assert!(d <= 64);
            for (j, &w) in attn.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let vrow = cache.v_row(l, j);
                let w = w as f64;
                for (a, &vj) in acc[..d].iter_mut().zip(vrow[h * d..(h + 1) * d].iter()) {
                    *a += w * vj as f64;
                }
            }
            let o: Vec<f32> = acc[..d].iter().map(|&v| v as f32).collect();
            if track_mass {
                mass_sum += attn[span.start..span.end]
                    .iter()
                    .map(|&w| w as f64)
                    .sum::<f64>();
                mass_n += 1;
            }
            if want_records && span.end <= ctx {
                let span_rows: Vec<&[f32]> = (span.start..span.end)
                    .map(|j| &cache.v_row(l, j)[h * d..(h + 1) * d])
                    .collect();
                let mu = visual_activation(&attn, &span_rows, span, eps)?;
                records.push(ActivationRecord {
                    layer: l,
                    head: h,
                    attn_row: attn.clone(),
                    o: o.clone(),
                    mu,
                });
            }
            concat[h * d..(h + 1) * d].copy_from_slice(&o);
        }
        if let (Some(iv), false) = (intervenor, records.is_empty()) {
            let mut scratch = StepTrace::default();
            let st: &mut StepTrace = match step_opt.as_deref_mut() {
                Some(s) => s,
                None => &mut scratch,
            };
            let replacements = iv.intervene(l, &records, st)?;
            if replacements.len() != cfg.heads {
                return Err(VitiError::Shape(format!(
                    "intervenor returned {} replacements for {} heads",
                    replacements.len(),
                    cfg.heads
                )));
            }
            for (h, rep) in replacements.into_iter().enumerate() {
                if let Some(v) = rep {
                    if v.len() != d {
                        return Err(VitiError::Shape(format!(
                            "replacement for head {h} has length {}, want {d}",
                            v.len()
                        )));
                    }
                    concat[h * d..(h + 1) * d].copy_from_slice(&v);
                }
            }
        }
        if sink.is_some() {
            all_records.extend(records);
        }
        let att_out = vecmat(&concat, &lw.w_o)?;
        for (xi, a) in x.iter_mut().zip(att_out.iter()) {
            *xi += a;
        }
        let xn2 = layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias, LN_EPS)?;
        let mut h1 = vecmat(&xn2, &lw.w1)?;
        for v in h1.iter_mut() {
            *v *= crate::linalg::sigmoid(*v);
        }
        for (j, xi) in x.iter_mut().enumerate() {
            *xi += dot(&h1, lw.w2.row(j)) as f32;
        }
    }
    cache.len = ctx.max(cache.len);
    if let Some(st) = step_opt {
        if mass_n > 0 {
            st.visual_mass = (mass_sum / mass_n as f64) as f32;
        }
    }
    if let Some(sink) = sink {
        *sink = all_records;
    }
    Ok(x)
}

fn logits_of(model: &Model, hidden: &[f32]) -> Result<Vec<f32>> {
    let xf = layer_norm(hidden, &model.final_gain, &model.final_bias, LN_EPS)?;
    vecmat(&xf, &model.w_out)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn validate_prompt(model: &Model, prompt: &Prompt, max_new: usize) -> Result<usize> {
    let n = prompt.tokens.len();
    if n == 0 {
        return Err(VitiError::Input("empty prompt".into()));
    }
    if n + max_new > model.config.max_seq {
        return Err(VitiError::Input(format!(
            "prompt {} + max_new {} exceeds max_seq {}",
            n, max_new, model.config.max_seq
        )));
    }
    prompt.span.validate(n)?;
    if let Some(x0) = &prompt.embeddings {
        if x0.rows() != n || x0.cols() != model.config.hidden() {
            return Err(VitiError::Shape(format!(
                "prompt embeddings {}x{}, want {}x{}",
                x0.rows(),
                x0.cols(),
                n,
                model.config.hidden()
            )));
        }
    }
    Ok(n)
}

/// Greedy decoding with an optional intervenor at generation passes.
pub fn generate(
    model: &Model,
    prompt: &Prompt,
    max_new: usize,
    intervenor: Option<&dyn Intervenor>,
) -> Result<GenerationTrace> {
    let n = validate_prompt(model, prompt, max_new)?;
    let x0 = match &prompt.embeddings {
        Some(m) => m.clone(),
        None => embed_prompt(model, &prompt.tokens)?,
    };
    let mut cache = KvCache::new(model.config.layers, model.config.hidden(), n + max_new);
    for pos in 0..n - 1 {
        forward_pos(model, &mut cache, x0.row(pos), pos, prompt.span, None, None, None)?;
    }
    let mut trace = GenerationTrace::default();
    let hd = model.config.hidden();
    let mut input: Vec<f32> = x0.row(n - 1).to_vec();
    for t in 0..max_new {
        let pos = n - 1 + t;
        let started = Instant::now();
        let mut step = StepTrace::default();
        let hidden = forward_pos(
            model,
            &mut cache,
            &input,
            pos,
            prompt.span,
            intervenor,
            None,
            Some(&mut step),
        )?;
        let logits = logits_of(model, &hidden)?;
        let tok = argmax(&logits);
        step.top_logit = logits[tok];
        step.wall_us = started.elapsed().as_micros() as u64;
        trace.tokens.push(tok as u32);
        trace.steps.push(step);
        if t + 1 < max_new {
            let emb = model.tok_emb.row(tok);
            let pemb = model.pos_emb.row(pos + 1);
            input = (0..hd).map(|j| emb[j] + pemb[j]).collect();
        }
    }
    Ok(trace)
}

/// Plain greedy decoding, no intervention.
pub fn decode_greedy(model: &Model, prompt: &Prompt, max_new: usize) -> Result<GenerationTrace> {
    generate(model, prompt, max_new, None)
}

/// Per-head records at the last prompt position (the pass that produces the
/// first answer token), plus the logits of that pass.
pub fn prompt_records(model: &Model, prompt: &Prompt) -> Result<(Vec<ActivationRecord>, Vec<f32>)> {
    let n = validate_prompt(model, prompt, 0)?;
    let x0 = match &prompt.embeddings {
        Some(m) => m.clone(),
        None => embed_prompt(model, &prompt.tokens)?,
    };
    let mut cache = KvCache::new(model.config.layers, model.config.hidden(), n);
    for pos in 0..n - 1 {
        forward_pos(model, &mut cache, x0.row(pos), pos, prompt.span, None, None, None)?;
    }
    let mut records = Vec::new();
    let hidden = forward_pos(
        model,
        &mut cache,
        x0.row(n - 1),
        n - 1,
        prompt.span,
        None,
        Some(&mut records),
        None,
    )?;
    let logits = logits_of(model, &hidden)?;
    Ok((records, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;
    use approx::assert_relative_eq;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 4,
            ffn_mult: 2,
            vocab_size: 13,
            max_seq: 16,
        };
        Model::init(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn combine_values_mean_of_two() {
        let v = Matrix::from_vec(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let o = combine_values(&[0.5, 0.5], &v).unwrap();
        assert_eq!(o, vec![3.0, 5.0]);
    }

    #[test]
    fn combine_values_hand_oracle() {
        let v = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 10.0, 10.0]).unwrap();
        let o = combine_values(&[0.2, 0.3, 0.5], &v).unwrap();
        assert_relative_eq!(o[0], 5.2, max_relative = 1e-6);
        assert_relative_eq!(o[1], 5.3, max_relative = 1e-6);
    }

    #[test]
    fn head_forward_single_token_degenerate() {
        let model = tiny_model(3);
        let x0 = embed_prompt(&model, &[5]).unwrap();
        let recs =
            head_forward(&model.config, &model.layers[0], &x0, 0, 1, VisualSpan::new(0, 1))
                .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].attn_row, vec![1.0]);
        // o must equal the single value row
        let xn = layer_norm(x0.row(0), &model.layers[0].ln1_gain, &model.layers[0].ln1_bias, LN_EPS)
            .unwrap();
        let v0 = vecmat(&xn, &model.layers[0].w_v[1]).unwrap();
        for (a, b) in recs[0].o.iter().zip(v0.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-6);
        }
    }

    #[test]
    fn head_forward_uniform_attention_is_mean() {
        // zero query projection => equal scores => uniform attention
        let mut model = tiny_model(4);
        for v in model.layers[0].w_q[0].data_mut() {
            *v = 0.0;
        }
        let x0 = embed_prompt(&model, &[1, 2]).unwrap();
        let recs =
            head_forward(&model.config, &model.layers[0], &x0, 0, 0, VisualSpan::new(0, 2))
                .unwrap();
        let xn = normed_rows(&x0, &model.layers[0].ln1_gain, &model.layers[0].ln1_bias).unwrap();
        let v = crate::linalg::matmul(&xn, &model.layers[0].w_v[0]).unwrap();
        let want: Vec<f32> = (0..v.cols())
            .map(|j| 0.5 * (v.get(0, j) + v.get(1, j)))
            .collect();
        for (a, b) in recs[1].o.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-5);
        }
        assert_relative_eq!(recs[1].attn_row[0], 0.5, max_relative = 1e-6);
    }

    #[test]
    fn head_forward_rejects_bad_span() {
        let model = tiny_model(3);
        let x0 = embed_prompt(&model, &[1, 2]).unwrap();
        let r = head_forward(&model.config, &model.layers[0], &x0, 0, 0, VisualSpan::new(1, 5));
        assert!(matches!(r, Err(VitiError::Config { .. })));
    }

    #[test]
    fn attention_is_causal() {
        let model = tiny_model(9);
        let x0 = embed_prompt(&model, &[1, 2, 3, 4, 5]).unwrap();
        for lw in &model.layers {
            let xn = normed_rows(&x0, &lw.ln1_gain, &lw.ln1_bias).unwrap();
            for (attn, _) in layer_attention(&model.config, lw, &xn).unwrap() {
                for i in 0..5 {
                    for j in (i + 1)..5 {
                        assert_eq!(attn.get(i, j), 0.0, "A[{i},{j}] must be 0");
                    }
                }
            }
        }
    }

    #[test]
    fn activation_in_convex_hull_of_values() {
        // coordinate-wise bounds: min_j V[j][c] <= o[c] <= max_j V[j][c]
        let model = tiny_model(11);
        let x0 = embed_prompt(&model, &[1, 2, 3, 4]).unwrap();
        let lw = &model.layers[0];
        let xn = normed_rows(&x0, &lw.ln1_gain, &lw.ln1_bias).unwrap();
        for h in 0..model.config.heads {
            let recs =
                head_forward(&model.config, lw, &x0, 0, h, VisualSpan::new(0, 2)).unwrap();
            let v = crate::linalg::matmul(&xn, &lw.w_v[h]).unwrap();
            for (i, rec) in recs.iter().enumerate() {
                for c in 0..v.cols() {
                    let lo = (0..=i).map(|j| v.get(j, c)).fold(f32::INFINITY, f32::min);
                    let hi = (0..=i).map(|j| v.get(j, c)).fold(f32::NEG_INFINITY, f32::max);
                    assert!(rec.o[c] >= lo - 1e-5 && rec.o[c] <= hi + 1e-5);
                }
            }
        }
    }

    /// Identity intervenor: inspects records but never replaces anything.
    struct IdentityIntervenor;
    impl Intervenor for IdentityIntervenor {
        fn intervene(
            &self,
            _layer: usize,
            records: &[ActivationRecord],
            _step: &mut StepTrace,
        ) -> Result<Vec<Option<Vec<f32>>>> {
            Ok(records.iter().map(|_| None).collect())
        }
    }

    #[test]
    fn layer_forward_identity_intervenor_bitwise() {
        let model = tiny_model(5);
        let x0 = embed_prompt(&model, &[1, 2, 3]).unwrap();
        let span = VisualSpan::new(0, 2);
        let plain =
            layer_forward(&model.config, &model.layers[0], &x0, 0, span, None, None).unwrap();
        let hooked = layer_forward(
            &model.config,
            &model.layers[0],
            &x0,
            0,
            span,
            Some(&IdentityIntervenor),
            None,
        )
        .unwrap();
        assert_eq!(plain.data(), hooked.data());
    }

    #[test]
    fn layer_forward_zero_ffn_keeps_attention_residual() {
        let mut model = tiny_model(6);
        for v in model.layers[0].w2.data_mut() {
            *v = 0.0;
        }
        let x0 = embed_prompt(&model, &[1, 2]).unwrap();
        let span = VisualSpan::new(0, 1);
        let out =
            layer_forward(&model.config, &model.layers[0], &x0, 0, span, None, None).unwrap();
        // with zero W2, the FFN adds nothing: out = x + attention residual
        let xn = normed_rows(&x0, &model.layers[0].ln1_gain, &model.layers[0].ln1_bias).unwrap();
        let pairs = layer_attention(&model.config, &model.layers[0], &xn).unwrap();
        let d = model.config.head_dim;
        let mut concat = Matrix::zeros(2, model.config.hidden());
        for (h, (attn, values)) in pairs.iter().enumerate() {
            for i in 0..2 {
                let o = combine_values(attn.row(i), values).unwrap();
                concat.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(&o);
            }
        }
        let att_out = crate::linalg::matmul(&concat, &model.layers[0].w_o).unwrap();
        for i in 0..2 {
            for j in 0..model.config.hidden() {
                assert_relative_eq!(
                    out.get(i, j),
                    x0.get(i, j) + att_out.get(i, j),
                    max_relative = 1e-5
                );
            }
        }
    }

    #[test]
    fn decode_deterministic() {
        let model = tiny_model(8);
        let prompt = Prompt::new(vec![1, 2, 3, 4], VisualSpan::new(1, 3));
        let a = decode_greedy(&model, &prompt, 5).unwrap();
        let b = decode_greedy(&model, &prompt, 5).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.steps.len(), 5);
    }

    #[test]
    fn decode_max_new_zero_is_empty() {
        let model = tiny_model(8);
        let prompt = Prompt::new(vec![1, 2, 3], VisualSpan::new(1, 2));
        let t = decode_greedy(&model, &prompt, 0).unwrap();
        assert!(t.tokens.is_empty());
        assert!(t.steps.is_empty());
    }

    #[test]
    fn decode_rejects_empty_prompt() {
        let model = tiny_model(8);
        let prompt = Prompt::new(vec![], VisualSpan::new(0, 1));
        assert!(matches!(
            decode_greedy(&model, &prompt, 1),
            Err(VitiError::Input(_))
        ));
    }

    #[test]
    fn decode_rejects_overlong_generation() {
        let model = tiny_model(8);
        let prompt = Prompt::new(vec![1; 10], VisualSpan::new(1, 3));
        assert!(matches!(
            decode_greedy(&model, &prompt, 10),
            Err(VitiError::Input(_))
        ));
    }

    #[test]
    fn incremental_matches_full_forward() {
        let model = tiny_model(12);
        let tokens = vec![1u32, 2, 3, 4, 5, 6];
        let span = VisualSpan::new(1, 4);
        let prompt = Prompt::new(tokens.clone(), span);
        let (_, logits_inc) = prompt_records(&model, &prompt).unwrap();
        let x0 = embed_prompt(&model, &tokens).unwrap();
        let logits_full = full_forward(&model, &x0, span).unwrap();
        for (a, b) in logits_inc.iter().zip(logits_full.row(tokens.len() - 1)) {
            assert_relative_eq!(a, b, max_relative = 1e-4, epsilon = 1e-5);
        }
    }

    #[test]
    fn prompt_records_cover_all_heads() {
        let model = tiny_model(10);
        let prompt = Prompt::new(vec![1, 2, 3, 4], VisualSpan::new(1, 3));
        let (recs, logits) = prompt_records(&model, &prompt).unwrap();
        assert_eq!(recs.len(), model.config.layers * model.config.heads);
        assert_eq!(logits.len(), model.config.vocab_size);
        for r in &recs {
            assert_eq!(r.attn_row.len(), 4);
            let s: f64 = r.attn_row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert_eq!(r.o.len(), model.config.head_dim);
            assert_eq!(r.mu.len(), model.config.head_dim);
        }
    }
}
