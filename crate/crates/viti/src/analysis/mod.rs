//! Empirical verification harnesses: the MI theorem check, degradation
//! curves, ablations, hyperparameter sweeps, and the overhead benchmark.

mod mi;

pub use mi::{mi_binned, MIEstimate};

use std::cell::RefCell;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitiError};
use crate::linalg::{dot, Rng};
use crate::perturb::{gaussian_perturb, NoiseSchedule};
use crate::runtime::{
    decode_greedy, embed_prompt, generate, ActivationRecord, Intervenor, Model, Prompt, StepTrace,
    VisualSpan,
};
use crate::synthtask::{eval_task, EvalReport, Perturbation, QASample};
use crate::vnd::ProbeBank;
use crate::vri::{GatePolicy, InterventionConfig, MixTarget, VitiIntervenor};

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..xs.len() {
        let a = rx[i] - mx;
        let b = ry[i] - my;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

// ---------------------------------------------------------------------------
// Degradation curve (Fig. 2 analog)
// ---------------------------------------------------------------------------

/// One row of the degradation curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationPoint {
    pub step: usize,
    pub existence_accuracy: f64,
    pub existence_f1: f64,
    pub overall_accuracy: f64,
    pub visual_attention_mass: f64,
    pub unsure_rate: f64,
}

/// Evaluate the model at each noise step and record accuracy, F1, and the
/// mean visual-attention mass at the answer pass.
pub fn degradation_curve(
    model: &Model,
    samples: &[QASample],
    steps: &[usize],
    schedule: &NoiseSchedule,
    noise_seed: u64,
) -> Result<Vec<DegradationPoint>> {
    if steps.is_empty() || steps[0] != 0 {
        return Err(VitiError::config("steps", "must start at 0"));
    }
    if steps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(VitiError::config("steps", "must be strictly ascending"));
    }
    let mut out = Vec::with_capacity(steps.len());
    for &step in steps {
        let perturbation = Perturbation::fixed(*schedule, step, noise_seed);
        let report = eval_task(model, samples, None, Some(&perturbation))?;
        out.push(DegradationPoint {
            step,
            existence_accuracy: report.existence.accuracy,
            existence_f1: report.existence.f1,
            overall_accuracy: report.overall_accuracy,
            visual_attention_mass: report.mean_visual_mass,
            unsure_rate: report.unsure_rate,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Theorem 1: MI non-decrease under intervention
// ---------------------------------------------------------------------------

/// Intervenor wrapper that records (o, o_hat) pairs for the selected heads.
struct CapturingIntervenor<'a> {
    inner: &'a VitiIntervenor<'a>,
    captured: RefCell<Vec<(usize, usize, Vec<f32>, Vec<f32>)>>,
    gated: RefCell<usize>,
}

impl Intervenor for CapturingIntervenor<'_> {
    fn intervene(
        &self,
        layer: usize,
        records: &[ActivationRecord],
        step: &mut StepTrace,
    ) -> Result<Vec<Option<Vec<f32>>>> {
        let replacements = self.inner.intervene(layer, records, step)?;
        let mut captured = self.captured.borrow_mut();
        for (rec, rep) in records.iter().zip(replacements.iter()) {
            if self.inner.selected().contains(&(layer, rec.head)) {
                let o_hat = rep.clone().unwrap_or_else(|| rec.o.clone());
                if rep.is_some() {
                    *self.gated.borrow_mut() += 1;
                }
                captured.push((layer, rec.head, rec.o.clone(), o_hat));
            }
        }
        Ok(replacements)
    }

    fn epsilon(&self) -> f32 {
        self.inner.epsilon()
    }
}

/// Outcome of the Theorem-1 statistical check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// Fraction of (head, projection) pairs with
    /// `MI(o_hat; vis) >= MI(o; vis) - tolerance`.
    pub satisfied_fraction: f64,
    pub pairs: usize,
    pub n_samples: usize,
    pub gated_activations: usize,
    /// No gate ever fired: the check is inconclusive rather than failed.
    pub inconclusive: bool,
    pub bins: usize,
    /// Per-pair (head, projection, mi_o, mi_ohat, tolerance).
    pub details: Vec<Theorem1Pair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theorem1Pair {
    pub layer: usize,
    pub head: usize,
    pub projection: usize,
    pub mi_o: f64,
    pub mi_o_hat: f64,
    pub tolerance: f64,
    pub satisfied: bool,
}

/// Empirical check of the MI inequality: project o, o_hat, and the mean
/// visual-embedding row onto random directions and compare binned MI
/// estimates, with the bootstrap CI width as tolerance.
///
/// Samples are evaluated under a cycle of noise steps so gates actually
/// fire; ungated passes contribute equality pairs.
pub fn theorem1_check(
    model: &Model,
    bank: &ProbeBank,
    cfg: InterventionConfig,
    samples: &[QASample],
    projections: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Theorem1Report> {
    let inner = VitiIntervenor::new(model, bank, cfg)?;
    let capture = CapturingIntervenor {
        inner: &inner,
        captured: RefCell::new(Vec::new()),
        gated: RefCell::new(0),
    };
    let steps = [0usize, schedule.total_steps / 2, schedule.total_steps];
    let mut vis_means: Vec<Vec<f32>> = Vec::with_capacity(samples.len());
    let mut sample_ranges: Vec<(usize, usize)> = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let step = steps[i % steps.len()];
        let x0 = embed_prompt(model, &s.tokens)?;
        let mut rng = Rng::derive(seed, i as u64);
        let xt = gaussian_perturb(&x0, s.visual_span(), step, schedule, &mut rng)?;
        let span = s.visual_span();
        let hd = model.config.hidden();
        let mut mean = vec![0.0f32; hd];
        for r in span.start..span.end {
            for (m, &v) in mean.iter_mut().zip(xt.row(r).iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= span.len() as f32;
        }
        vis_means.push(mean);
        let before = capture.captured.borrow().len();
        let prompt = Prompt::new(s.tokens.clone(), span).with_embeddings(xt);
        generate(model, &prompt, 1, Some(&capture))?;
        let after = capture.captured.borrow().len();
        sample_ranges.push((before, after));
    }
    let captured = capture.captured.into_inner();
    let gated = capture.gated.into_inner();
    if gated == 0 {
        return Ok(Theorem1Report {
            satisfied_fraction: 0.0,
            pairs: 0,
            n_samples: samples.len(),
            gated_activations: 0,
            inconclusive: true,
            bins: 0,
            details: Vec::new(),
        });
    }

    // per selected head, per sample: one (o, o_hat) pair
    let selected: Vec<(usize, usize)> = {
        let mut v: Vec<(usize, usize)> = inner.selected().iter().copied().collect();
        v.sort();
        v
    };
    let n = samples.len();
    let bins = (n / 30).clamp(4, 16);
    let mut rng = Rng::new(seed ^ 0x7e0);
    let hd = model.config.hidden();
    let d = model.config.head_dim;
    let mut details = Vec::new();
    let mut satisfied = 0usize;
    for proj in 0..projections {
        let dir_head: Vec<f32> = (0..d).map(|_| rng.normal()).collect();
        let dir_vis: Vec<f32> = (0..hd).map(|_| rng.normal()).collect();
        let vis_proj: Vec<f64> = vis_means.iter().map(|m| dot(&dir_vis, m)).collect();
        for &(layer, head) in &selected {
            let mut o_proj = Vec::with_capacity(n);
            let mut ohat_proj = Vec::with_capacity(n);
            for (si, &(lo, hi)) in sample_ranges.iter().enumerate() {
                let _ = si;
                let mut found = false;
                for rec in &captured[lo..hi] {
                    if rec.0 == layer && rec.1 == head {
                        o_proj.push(dot(&dir_head, &rec.2));
                        ohat_proj.push(dot(&dir_head, &rec.3));
                        found = true;
                        break;
                    }
                }
                if !found {
                    return Err(VitiError::Numeric(
                        "missing capture for a selected head".into(),
                    ));
                }
            }
            let mi_o = mi_binned(&o_proj, &vis_proj, bins, seed ^ 0x11)?;
            let mi_hat = mi_binned(&ohat_proj, &vis_proj, bins, seed ^ 0x12)?;
            let tolerance = mi_o.ci_width().max(mi_hat.ci_width());
            let ok = mi_hat.value >= mi_o.value - tolerance;
            satisfied += usize::from(ok);
            details.push(Theorem1Pair {
                layer,
                head,
                projection: proj,
                mi_o: mi_o.value,
                mi_o_hat: mi_hat.value,
                tolerance,
                satisfied: ok,
            });
        }
    }
    let pairs = details.len();
    Ok(Theorem1Report {
        satisfied_fraction: satisfied as f64 / pairs as f64,
        pairs,
        n_samples: n,
        gated_activations: gated,
        inconclusive: false,
        bins,
        details,
    })
}

// ---------------------------------------------------------------------------
// Ablations (Tab. 3 analog)
// ---------------------------------------------------------------------------

/// One ablation row with clean and perturbed evaluations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub clean: EvalReport,
    pub perturbed: EvalReport,
}

/// Results for {full, w/o VND, w/o VRI, baseline}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Noise steps cycled over the perturbed evaluation.
    pub perturb_steps: Vec<usize>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Run the component ablations on clean and perturbed inputs.
///
/// - `full`: probe-gated visual recall on the top-beta heads.
/// - `wo_vnd`: detector removed; every head of the selected layers is
///   intervened unconditionally at full strength alpha_0.
/// - `wo_vri`: detector kept; the visual activation is replaced by the
///   probe direction rescaled to the activation norm.
/// - `baseline`: no intervention.
pub fn ablation_suite(
    model: &Model,
    bank: &ProbeBank,
    samples: &[QASample],
    cfg: InterventionConfig,
    schedule: &NoiseSchedule,
    perturb_steps: &[usize],
    noise_seed: u64,
) -> Result<AblationTable> {
    let perturbation = Perturbation {
        schedule: *schedule,
        steps: perturb_steps.to_vec(),
        seed: noise_seed,
    };
    let full = VitiIntervenor::new(model, bank, cfg)?;
    let wo_vnd = VitiIntervenor::new(model, bank, cfg)?
        .with_gate_policy(GatePolicy::AlwaysOn);
    let layerwide = wo_vnd.selected_layerwide();
    let wo_vnd = wo_vnd.with_selected(layerwide);
    let wo_vri = VitiIntervenor::new(model, bank, cfg)?.with_mix_target(MixTarget::ProbeDirection);

    let mut rows = Vec::new();
    for (name, iv) in [
        ("full", Some(&full)),
        ("wo_vnd", Some(&wo_vnd)),
        ("wo_vri", Some(&wo_vri)),
        ("baseline", None),
    ] {
        rows.push(AblationRow {
            name: name.to_string(),
            clean: eval_task(model, samples, iv, None)?,
            perturbed: eval_task(model, samples, iv, Some(&perturbation))?,
        });
    }
    Ok(AblationTable {
        rows,
        perturb_steps: perturb_steps.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Sweep (Fig. 8 analog)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha0: f32,
    pub beta: f64,
    /// Perturbed-input existence accuracy.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub best: SweepCell,
    pub baseline_score: f64,
    pub perturb_steps: Vec<usize>,
}

impl SweepResult {
    /// Flat CSV rows `alpha0,beta,score`.
    pub fn csv_rows(&self) -> Vec<String> {
        self.cells
            .iter()
            .map(|c| format!("{},{},{}", c.alpha0, c.beta, c.score))
            .collect()
    }
}

/// Full cartesian sweep over intervention strength and head-selection
/// fraction. An `alpha0` of 0 short-circuits to the baseline path, so that
/// row always equals the baseline score.
pub fn sweep(
    model: &Model,
    bank: &ProbeBank,
    samples: &[QASample],
    alpha0_grid: &[f32],
    beta_grid: &[f64],
    base_cfg: InterventionConfig,
    schedule: &NoiseSchedule,
    perturb_steps: &[usize],
    noise_seed: u64,
) -> Result<SweepResult> {
    if alpha0_grid.is_empty() || beta_grid.is_empty() {
        return Err(VitiError::config("grid", "sweep grids must be non-empty"));
    }
    let perturbation = Perturbation {
        schedule: *schedule,
        steps: perturb_steps.to_vec(),
        seed: noise_seed,
    };
    let baseline = eval_task(model, samples, None, Some(&perturbation))?;
    let mut cells = Vec::with_capacity(alpha0_grid.len() * beta_grid.len());
    for &alpha0 in alpha0_grid {
        for &beta in beta_grid {
            let cfg = InterventionConfig {
                alpha0,
                beta,
                ..base_cfg
            };
            let iv = VitiIntervenor::new(model, bank, cfg)?;
            let report = eval_task(model, samples, Some(&iv), Some(&perturbation))?;
            cells.push(SweepCell {
                alpha0,
                beta,
                score: report.existence.accuracy,
            });
        }
    }
    let best = *cells
        .iter()
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap()
                .then(b.alpha0.partial_cmp(&a.alpha0).unwrap().reverse())
                .then(b.beta.partial_cmp(&a.beta).unwrap().reverse())
        })
        .expect("non-empty grid");
    Ok(SweepResult {
        cells,
        best,
        baseline_score: baseline.existence.accuracy,
        perturb_steps: perturb_steps.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Overhead benchmark (Fig. 5 analog)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub context_len: usize,
    pub max_new: usize,
    pub repeats: usize,
    /// Median wall-clock per generated token, microseconds.
    pub greedy_us_per_token: f64,
    pub viti_us_per_token: f64,
    pub ratio: f64,
    /// Peak-RSS high-water delta over the run, bytes (0 when unavailable).
    pub peak_memory_delta_bytes: u64,
}

fn peak_rss_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines().find(|l| l.starts_with("VmHWM:")).and_then(|l| {
                l.split_whitespace()
                    .nth(1)
                    .and_then(|kb| kb.parse::<u64>().ok())
                    .map(|kb| kb * 1024)
            })
        })
        .unwrap_or(0)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median per-token latency of plain greedy decoding vs the intervened
/// path, interleaved so background load biases both sides equally. One
/// warmup round per path is discarded.
pub fn overhead_benchmark(
    model: &Model,
    bank: &ProbeBank,
    cfg: InterventionConfig,
    prompts: &[Prompt],
    max_new: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats < 5 {
        return Err(VitiError::config("repeats", "need at least 5 repeats"));
    }
    if prompts.is_empty() {
        return Err(VitiError::Input("no benchmark prompts".into()));
    }
    let iv = VitiIntervenor::new(model, bank, cfg)?;
    let mem_before = peak_rss_bytes();
    // warmup
    decode_greedy(model, &prompts[0], max_new)?;
    generate(model, &prompts[0], max_new, Some(&iv))?;
    let mut greedy_us = Vec::with_capacity(repeats);
    let mut viti_us = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let prompt = &prompts[rep % prompts.len()];
        let t0 = Instant::now();
        let tr = decode_greedy(model, prompt, max_new)?;
        greedy_us.push(t0.elapsed().as_micros() as f64 / tr.tokens.len() as f64);
        let t1 = Instant::now();
        let tv = generate(model, prompt, max_new, Some(&iv))?;
        viti_us.push(t1.elapsed().as_micros() as f64 / tv.tokens.len() as f64);
    }
    let g = median(&mut greedy_us);
    let v = median(&mut viti_us);
    let mem_after = peak_rss_bytes();
    Ok(BenchReport {
        context_len: prompts[0].tokens.len(),
        max_new,
        repeats,
        greedy_us_per_token: g,
        viti_us_per_token: v,
        ratio: v / g,
        peak_memory_delta_bytes: mem_after.saturating_sub(mem_before),
    })
}

/// Random prompts (with a visual span) for benchmarking.
pub fn bench_prompts(
    model: &Model,
    context_len: usize,
    span: VisualSpan,
    count: usize,
    seed: u64,
) -> Result<Vec<Prompt>> {
    if context_len < 2 {
        return Err(VitiError::config("context_len", "too short"));
    }
    span.validate(context_len)?;
    let mut rng = Rng::new(seed);
    let vocab = model.config.vocab_size as u64;
    Ok((0..count)
        .map(|_| {
            let tokens: Vec<u32> = (0..context_len)
                .map(|_| rng.below(1, vocab) as u32)
                .collect();
            Prompt::new(tokens, span)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_perfect_orders() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let down = [9.0, 7.0, 5.0, 3.0, 1.0];
        let up = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert!((spearman(&xs, &down) + 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &up) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [1.0, 1.0, 2.0, 2.0];
        let r = spearman(&xs, &ys);
        assert!(r > 0.8 && r <= 1.0);
    }

    #[test]
    fn degradation_rejects_bad_steps() {
        let cfg = crate::runtime::ModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            ffn_mult: 2,
            vocab_size: crate::synthtask::vocab::VOCAB_SIZE,
            max_seq: 32,
        };
        let model = Model::init(cfg, &mut Rng::new(1)).unwrap();
        let samples = crate::synthtask::gen_dataset(1, 4, &Default::default()).unwrap();
        let schedule = NoiseSchedule::default();
        assert!(degradation_curve(&model, &samples, &[250, 500], &schedule, 1).is_err());
        assert!(degradation_curve(&model, &samples, &[0, 500, 500], &schedule, 1).is_err());
    }

    #[test]
    fn degradation_step_zero_matches_direct_eval() {
        let cfg = crate::runtime::ModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 4,
            ffn_mult: 2,
            vocab_size: crate::synthtask::vocab::VOCAB_SIZE,
            max_seq: 32,
        };
        let model = Model::init(cfg, &mut Rng::new(2)).unwrap();
        let samples = crate::synthtask::gen_dataset(2, 20, &Default::default()).unwrap();
        let schedule = NoiseSchedule::default();
        let curve = degradation_curve(&model, &samples, &[0, 100], &schedule, 5).unwrap();
        let direct = eval_task(&model, &samples, None, None).unwrap();
        assert_eq!(curve[0].existence_accuracy, direct.existence.accuracy);
        assert_eq!(curve[0].overall_accuracy, direct.overall_accuracy);
        assert_eq!(curve[0].visual_attention_mass, direct.mean_visual_mass);
    }
}
