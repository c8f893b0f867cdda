//! Synthetic visual-QA world: grid scenes of attribute-tagged objects
//! serialized as visual tokens, existence/color/count questions with exact
//! answers, a toy-model trainer, and task evaluation.
//!
//! Prompt layout (question before scene, so the final position is the only
//! one that can read both):
//!
//! ```text
//! [BOS] [P0..P5] [question tokens] [SEP] [cell 0 .. cell 8] [QM]
//! ```

mod train;

pub use train::{mean_loss, train_toy_model, TrainHyper};

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::atomic_write;
use crate::error::{Result, VitiError};
use crate::linalg::Rng;
use crate::perturb::{gaussian_perturb, NoiseSchedule};
use crate::runtime::{decode_greedy, embed_prompt, generate, Model, Prompt, VisualSpan};
use crate::vri::VitiIntervenor;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

pub const N_SHAPES: usize = 3;
pub const N_COLORS: usize = 4;
pub const GRID_CELLS: usize = 9;
pub const PREAMBLE_LEN: usize = 6;

pub mod vocab {
    use super::{N_COLORS, N_SHAPES, PREAMBLE_LEN};

    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const SEP: u32 = 2;
    /// Visual region: object tokens 3..15, empty cell 15.
    pub const VIS_BASE: u32 = 3;
    pub const VIS_EMPTY: u32 = VIS_BASE + (N_SHAPES * N_COLORS) as u32;
    pub const VIS_COUNT: usize = N_SHAPES * N_COLORS + 1;

    pub const COLOR_WORDS: [u32; N_COLORS] = [16, 17, 18, 19]; // red blue yellow white
    pub const SHAPE_WORDS: [u32; N_SHAPES] = [20, 21, 22]; // circle square triangle
    pub const YES: u32 = 23;
    pub const NO: u32 = 24;
    pub const COUNT_WORDS: [u32; 5] = [25, 26, 27, 28, 29];
    pub const IS: u32 = 30;
    pub const THERE: u32 = 31;
    pub const A: u32 = 32;
    pub const WHAT: u32 = 33;
    pub const COLOR: u32 = 34;
    pub const HOW: u32 = 35;
    pub const MANY: u32 = 36;
    pub const THE: u32 = 37;
    /// "Unsure" answer learned for unreadable scenes.
    pub const UNSURE: u32 = 38;
    pub const PREAMBLE: [u32; PREAMBLE_LEN] = [39, 40, 41, 42, 43, 44];
    pub const QM: u32 = 45;

    pub const VOCAB_SIZE: usize = 48;

    pub fn object(shape: usize, color: usize) -> u32 {
        VIS_BASE + (shape * N_COLORS + color) as u32
    }
}

// ---------------------------------------------------------------------------
// Scenes and questions
// ---------------------------------------------------------------------------

/// An object occupying one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: usize,
    pub color: usize,
}

/// 3x3 grid of optionally occupied cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub cells: Vec<Option<SceneObject>>,
}

impl Scene {
    /// Serialize row-major, one visual token per cell.
    pub fn tokens(&self) -> Vec<u32> {
        self.cells
            .iter()
            .map(|c| match c {
                Some(o) => vocab::object(o.shape, o.color),
                None => vocab::VIS_EMPTY,
            })
            .collect()
    }

    /// Reconstruct a scene from its token serialization.
    pub fn from_tokens(tokens: &[u32]) -> Result<Scene> {
        let cells = tokens
            .iter()
            .map(|&t| {
                if t == vocab::VIS_EMPTY {
                    Ok(None)
                } else if (vocab::VIS_BASE..vocab::VIS_EMPTY).contains(&t) {
                    let idx = (t - vocab::VIS_BASE) as usize;
                    Ok(Some(SceneObject {
                        shape: idx / N_COLORS,
                        color: idx % N_COLORS,
                    }))
                } else {
                    Err(VitiError::Input(format!("token {t} is not a visual token")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene { cells })
    }

    pub fn contains(&self, shape: usize, color: usize) -> bool {
        self.cells
            .iter()
            .flatten()
            .any(|o| o.shape == shape && o.color == color)
    }

    pub fn count_shape(&self, shape: usize) -> usize {
        self.cells.iter().flatten().filter(|o| o.shape == shape).count()
    }

    /// Color of the queried shape when exactly one such object exists.
    pub fn unique_color_of(&self, shape: usize) -> Option<usize> {
        let colors: Vec<usize> = self
            .cells
            .iter()
            .flatten()
            .filter(|o| o.shape == shape)
            .map(|o| o.color)
            .collect();
        if colors.len() == 1 {
            Some(colors[0])
        } else {
            None
        }
    }
}

/// Question categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Existence,
    Color,
    Count,
}

/// One prompt/answer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub tokens: Vec<u32>,
    /// Half-open [start, end) of the visual tokens.
    pub span: (usize, usize),
    pub answer: u32,
    pub kind: QuestionKind,
}

impl QASample {
    pub fn visual_span(&self) -> VisualSpan {
        VisualSpan::new(self.span.0, self.span.1)
    }

    pub fn prompt(&self) -> Prompt {
        Prompt::new(self.tokens.clone(), self.visual_span())
    }

    /// Scene parsed back out of the serialized tokens.
    pub fn scene(&self) -> Result<Scene> {
        Scene::from_tokens(&self.tokens[self.span.0..self.span.1])
    }
}

/// Dataset generation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Fractions of existence/color/count questions; existence absorbs the
    /// remainder.
    pub mix: (f64, f64, f64),
    /// Draw absent existence queries that share shape or color with a
    /// present object (POPE-adversarial style).
    pub adversarial: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            mix: (0.6, 0.2, 0.2),
            adversarial: true,
        }
    }
}

fn build_prompt(question: &[u32], scene: &Scene) -> (Vec<u32>, (usize, usize)) {
    let mut tokens = Vec::with_capacity(2 + PREAMBLE_LEN + question.len() + GRID_CELLS + 1);
    tokens.push(vocab::BOS);
    tokens.extend_from_slice(&vocab::PREAMBLE);
    tokens.extend_from_slice(question);
    tokens.push(vocab::SEP);
    let start = tokens.len();
    tokens.extend(scene.tokens());
    let end = tokens.len();
    tokens.push(vocab::QM);
    (tokens, (start, end))
}

fn gen_scene(rng: &mut Rng) -> Scene {
    let n_obj = rng.below(2, 5) as usize;
    let cells_idx = rng.choose_distinct(GRID_CELLS, n_obj);
    let mut cells = vec![None; GRID_CELLS];
    for &c in &cells_idx {
        cells[c] = Some(SceneObject {
            shape: rng.below(0, N_SHAPES as u64) as usize,
            color: rng.below(0, N_COLORS as u64) as usize,
        });
    }
    Scene { cells }
}

fn gen_sample(rng: &mut Rng, kind: QuestionKind, want_yes: bool, adversarial: bool) -> QASample {
    loop {
        let scene = gen_scene(rng);
        let present: Vec<(usize, usize)> = scene
            .cells
            .iter()
            .flatten()
            .map(|o| (o.shape, o.color))
            .collect();
        match kind {
            QuestionKind::Existence => {
                let (shape, color, answer) = if want_yes {
                    let &(s, c) = &present[rng.below(0, present.len() as u64) as usize];
                    (s, c, vocab::YES)
                } else {
                    let candidates: Vec<(usize, usize)> = if adversarial {
                        let mut v = Vec::new();
                        for &(s, c) in &present {
                            for c2 in 0..N_COLORS {
                                if !scene.contains(s, c2) {
                                    v.push((s, c2));
                                }
                            }
                            for s2 in 0..N_SHAPES {
                                if !scene.contains(s2, c) {
                                    v.push((s2, c));
                                }
                            }
                        }
                        v
                    } else {
                        let mut v = Vec::new();
                        for s in 0..N_SHAPES {
                            for c in 0..N_COLORS {
                                if !scene.contains(s, c) {
                                    v.push((s, c));
                                }
                            }
                        }
                        v
                    };
                    if candidates.is_empty() {
                        continue;
                    }
                    let (s, c) = candidates[rng.below(0, candidates.len() as u64) as usize];
                    (s, c, vocab::NO)
                };
                let q = [
                    vocab::IS,
                    vocab::THERE,
                    vocab::A,
                    vocab::COLOR_WORDS[color],
                    vocab::SHAPE_WORDS[shape],
                ];
                let (tokens, span) = build_prompt(&q, &scene);
                return QASample {
                    tokens,
                    span,
                    answer,
                    kind,
                };
            }
            QuestionKind::Color => {
                let unique: Vec<usize> = (0..N_SHAPES)
                    .filter(|&s| scene.count_shape(s) == 1)
                    .collect();
                if unique.is_empty() {
                    continue;
                }
                let shape = unique[rng.below(0, unique.len() as u64) as usize];
                let color = scene.unique_color_of(shape).expect("unique shape");
                let q = [vocab::WHAT, vocab::COLOR, vocab::THE, vocab::SHAPE_WORDS[shape]];
                let (tokens, span) = build_prompt(&q, &scene);
                return QASample {
                    tokens,
                    span,
                    answer: vocab::COLOR_WORDS[color],
                    kind,
                };
            }
            QuestionKind::Count => {
                let shape = rng.below(0, N_SHAPES as u64) as usize;
                let n = scene.count_shape(shape);
                debug_assert!(n <= 4);
                let q = [vocab::HOW, vocab::MANY, vocab::SHAPE_WORDS[shape]];
                let (tokens, span) = build_prompt(&q, &scene);
                return QASample {
                    tokens,
                    span,
                    answer: vocab::COUNT_WORDS[n],
                    kind,
                };
            }
        }
    }
}

/// Generate a dataset. Deterministic under the seed: sample `i` draws from
/// the stream (seed, i), so subsets and parallel generation agree.
/// Existence questions alternate yes/no, keeping them balanced within one.
pub fn gen_dataset(seed: u64, size: usize, cfg: &TaskConfig) -> Result<Vec<QASample>> {
    if size == 0 {
        return Err(VitiError::Input("dataset size must be positive".into()));
    }
    let n_color = (size as f64 * cfg.mix.1).round() as usize;
    let n_count = (size as f64 * cfg.mix.2).round() as usize;
    // deterministic striping: colors and counts spread over the index space,
    // existence takes the rest
    let mut kinds = vec![QuestionKind::Existence; size];
    let mut color_left = n_color;
    let mut count_left = n_count;
    for (i, k) in kinds.iter_mut().enumerate() {
        let phase = i % 10;
        if color_left > 0 && (phase == 3 || phase == 8) {
            *k = QuestionKind::Color;
            color_left -= 1;
        } else if count_left > 0 && (phase == 5 || phase == 9) {
            *k = QuestionKind::Count;
            count_left -= 1;
        }
    }
    let mut exist_rank = 0usize;
    let mut out = Vec::with_capacity(size);
    for (i, kind) in kinds.iter().enumerate() {
        let mut rng = Rng::derive(seed, i as u64);
        let want_yes = match kind {
            QuestionKind::Existence => {
                exist_rank += 1;
                exist_rank % 2 == 1
            }
            _ => false,
        };
        out.push(gen_sample(&mut rng, *kind, want_yes, cfg.adversarial));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset file (line-delimited JSON with a header record)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub size: usize,
    pub mix: (f64, f64, f64),
    pub adversarial: bool,
    pub grid_cells: usize,
}

/// Write header + one JSON record per line, atomically.
pub fn save_dataset(header: &DatasetHeader, samples: &[QASample], path: &Path) -> Result<()> {
    let head = serde_json::to_string(header)?;
    let lines = samples
        .iter()
        .map(serde_json::to_string)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    atomic_write(path, |w| {
        writeln!(w, "{head}")?;
        for line in &lines {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

/// Load a dataset file written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<QASample>)> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let head_line = lines
        .next()
        .ok_or_else(|| VitiError::Dataset(format!("{} is empty", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&head_line)?;
    if header.format_version != 1 {
        return Err(VitiError::Version(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }
    let mut samples = Vec::with_capacity(header.size);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str::<QASample>(&line)?);
    }
    Ok((header, samples))
}

// ---------------------------------------------------------------------------
// Metrics and evaluation
// ---------------------------------------------------------------------------

/// Binary classification metrics for existence questions.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

/// Compute accuracy/precision/recall/F1 with `positive` as the positive
/// class; predictions outside {positive, anything} count as plain mismatches.
pub fn binary_metrics(pairs: &[(u32, u32)], positive: u32) -> BinaryMetrics {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    let mut fneg = 0usize;
    for &(gold, pred) in pairs {
        match (gold == positive, pred == positive) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            (false, false) => {
                if gold == pred {
                    tn += 1;
                }
                // wrong non-positive predictions count against accuracy only
            }
        }
    }
    let n = pairs.len();
    let accuracy = if n == 0 { 0.0 } else { (tp + tn) as f64 / n as f64 };
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fneg == 0 {
        0.0
    } else {
        tp as f64 / (tp + fneg) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BinaryMetrics {
        accuracy,
        precision,
        recall,
        f1,
        n,
    }
}

/// Evaluation results with a per-question-kind breakdown.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub existence: BinaryMetrics,
    pub color_accuracy: f64,
    pub color_n: usize,
    pub count_accuracy: f64,
    pub count_n: usize,
    pub overall_accuracy: f64,
    pub n: usize,
    /// Mean attention mass on the visual span at the answer pass.
    pub mean_visual_mass: f64,
    /// Fraction of answers that were the "unsure" token.
    pub unsure_rate: f64,
    /// Gate firings per sample (0 without intervention).
    pub gate_fires_per_sample: f64,
}

/// How evaluation inputs are perturbed.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub schedule: NoiseSchedule,
    /// Noise steps cycled over samples (a single entry fixes the step).
    pub steps: Vec<usize>,
    /// Seed for the per-sample noise streams.
    pub seed: u64,
}

impl Perturbation {
    pub fn fixed(schedule: NoiseSchedule, step: usize, seed: u64) -> Self {
        Perturbation {
            schedule,
            steps: vec![step],
            seed,
        }
    }
}

/// Evaluate the model on QA samples, optionally with perturbed inputs and
/// the intervention. Single-token answers; greedy decoding.
pub fn eval_task(
    model: &Model,
    samples: &[QASample],
    intervenor: Option<&VitiIntervenor>,
    perturbation: Option<&Perturbation>,
) -> Result<EvalReport> {
    let mut exist_pairs = Vec::new();
    let mut color_ok = 0usize;
    let mut color_n = 0usize;
    let mut count_ok = 0usize;
    let mut count_n = 0usize;
    let mut correct = 0usize;
    let mut mass = 0.0f64;
    let mut unsure = 0usize;
    let mut fires = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        let mut prompt = sample.prompt();
        if let Some(p) = perturbation {
            let step = p.steps[i % p.steps.len()];
            let x0 = embed_prompt(model, &sample.tokens)?;
            let mut rng = Rng::derive(p.seed, i as u64);
            let xt = gaussian_perturb(&x0, sample.visual_span(), step, &p.schedule, &mut rng)?;
            prompt = prompt.with_embeddings(xt);
        }
        let trace = match intervenor {
            Some(iv) => generate(model, &prompt, 1, Some(iv))?,
            None => decode_greedy(model, &prompt, 1)?,
        };
        let pred = trace.tokens[0];
        mass += trace.steps[0].visual_mass as f64;
        fires += trace.gate_fire_count();
        unsure += usize::from(pred == vocab::UNSURE);
        let ok = pred == sample.answer;
        correct += usize::from(ok);
        match sample.kind {
            QuestionKind::Existence => exist_pairs.push((sample.answer, pred)),
            QuestionKind::Color => {
                color_n += 1;
                color_ok += usize::from(ok);
            }
            QuestionKind::Count => {
                count_n += 1;
                count_ok += usize::from(ok);
            }
        }
    }
    let n = samples.len();
    Ok(EvalReport {
        existence: binary_metrics(&exist_pairs, vocab::YES),
        color_accuracy: if color_n == 0 {
            0.0
        } else {
            color_ok as f64 / color_n as f64
        },
        color_n,
        count_accuracy: if count_n == 0 {
            0.0
        } else {
            count_ok as f64 / count_n as f64
        },
        count_n,
        overall_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        n,
        mean_visual_mass: if n == 0 { 0.0 } else { mass / n as f64 },
        unsure_rate: if n == 0 { 0.0 } else { unsure as f64 / n as f64 },
        gate_fires_per_sample: if n == 0 { 0.0 } else { fires as f64 / n as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dataset_deterministic_and_balanced() {
        let cfg = TaskConfig::default();
        let a = gen_dataset(11, 200, &cfg).unwrap();
        let b = gen_dataset(11, 200, &cfg).unwrap();
        assert_eq!(a, b);
        let yes = a
            .iter()
            .filter(|s| s.kind == QuestionKind::Existence && s.answer == vocab::YES)
            .count();
        let no = a
            .iter()
            .filter(|s| s.kind == QuestionKind::Existence && s.answer == vocab::NO)
            .count();
        assert!(yes.abs_diff(no) <= 1, "existence yes/no {yes}/{no}");
        assert!(a.iter().any(|s| s.kind == QuestionKind::Color));
        assert!(a.iter().any(|s| s.kind == QuestionKind::Count));
    }

    #[test]
    fn gold_answers_match_scene_interpreter() {
        // independent oracle: re-parse the scene from tokens, re-derive the
        // answer from the question tokens
        let cfg = TaskConfig::default();
        let samples = gen_dataset(5, 300, &cfg).unwrap();
        for s in &samples {
            let scene = s.scene().unwrap();
            let q = &s.tokens[1 + PREAMBLE_LEN..s.span.0 - 1];
            match s.kind {
                QuestionKind::Existence => {
                    let color = vocab::COLOR_WORDS.iter().position(|&w| w == q[3]).unwrap();
                    let shape = vocab::SHAPE_WORDS.iter().position(|&w| w == q[4]).unwrap();
                    let want = if scene.contains(shape, color) {
                        vocab::YES
                    } else {
                        vocab::NO
                    };
                    assert_eq!(s.answer, want);
                }
                QuestionKind::Color => {
                    let shape = vocab::SHAPE_WORDS.iter().position(|&w| w == q[3]).unwrap();
                    let color = scene.unique_color_of(shape).unwrap();
                    assert_eq!(s.answer, vocab::COLOR_WORDS[color]);
                }
                QuestionKind::Count => {
                    let shape = vocab::SHAPE_WORDS.iter().position(|&w| w == q[2]).unwrap();
                    assert_eq!(s.answer, vocab::COUNT_WORDS[scene.count_shape(shape)]);
                }
            }
        }
    }

    #[test]
    fn adversarial_negatives_share_an_attribute() {
        let cfg = TaskConfig {
            adversarial: true,
            ..Default::default()
        };
        let samples = gen_dataset(3, 200, &cfg).unwrap();
        for s in samples
            .iter()
            .filter(|s| s.kind == QuestionKind::Existence && s.answer == vocab::NO)
        {
            let scene = s.scene().unwrap();
            let q = &s.tokens[1 + PREAMBLE_LEN..s.span.0 - 1];
            let color = vocab::COLOR_WORDS.iter().position(|&w| w == q[3]).unwrap();
            let shape = vocab::SHAPE_WORDS.iter().position(|&w| w == q[4]).unwrap();
            let shares = scene
                .cells
                .iter()
                .flatten()
                .any(|o| o.shape == shape || o.color == color);
            assert!(shares, "negative query must share shape or color");
        }
    }

    #[test]
    fn span_tokens_are_visual() {
        let samples = gen_dataset(2, 50, &TaskConfig::default()).unwrap();
        for s in &samples {
            assert_eq!(s.span.1 - s.span.0, GRID_CELLS);
            for &t in &s.tokens[s.span.0..s.span.1] {
                assert!((vocab::VIS_BASE..=vocab::VIS_EMPTY).contains(&t));
            }
            assert_eq!(*s.tokens.last().unwrap(), vocab::QM);
        }
    }

    #[test]
    fn dataset_file_roundtrip_bytes() {
        let cfg = TaskConfig::default();
        let samples = gen_dataset(7, 40, &cfg).unwrap();
        let header = DatasetHeader {
            format_version: 1,
            seed: 7,
            size: samples.len(),
            mix: cfg.mix,
            adversarial: cfg.adversarial,
            grid_cells: GRID_CELLS,
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_dataset(&header, &samples, &p1).unwrap();
        let (h2, s2) = load_dataset(&p1).unwrap();
        save_dataset(&h2, &s2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(s2, samples);
    }

    #[test]
    fn metrics_perfect_predictions() {
        let pairs: Vec<(u32, u32)> = vec![
            (vocab::YES, vocab::YES),
            (vocab::NO, vocab::NO),
            (vocab::YES, vocab::YES),
        ];
        let m = binary_metrics(&pairs, vocab::YES);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn metrics_all_yes_predictor_closed_form() {
        let pairs: Vec<(u32, u32)> = (0..100)
            .map(|i| {
                let gold = if i % 2 == 0 { vocab::YES } else { vocab::NO };
                (gold, vocab::YES)
            })
            .collect();
        let m = binary_metrics(&pairs, vocab::YES);
        assert_relative_eq!(m.accuracy, 0.5, max_relative = 1e-12);
        assert_relative_eq!(m.recall, 1.0, max_relative = 1e-12);
        assert_relative_eq!(m.precision, 0.5, max_relative = 1e-12);
        assert_relative_eq!(m.f1, 2.0 / 3.0, max_relative = 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn f1_identity_vs_confusion_matrix(preds in proptest::collection::vec(0u8..2, 10..80),
                                               golds in proptest::collection::vec(0u8..2, 10..80)) {
                let n = preds.len().min(golds.len());
                let pairs: Vec<(u32, u32)> = (0..n)
                    .map(|i| {
                        let g = if golds[i] == 1 { vocab::YES } else { vocab::NO };
                        let p = if preds[i] == 1 { vocab::YES } else { vocab::NO };
                        (g, p)
                    })
                    .collect();
                let m = binary_metrics(&pairs, vocab::YES);
                // brute-force confusion matrix
                let tp = pairs.iter().filter(|(g, p)| *g == vocab::YES && *p == vocab::YES).count() as f64;
                let fp = pairs.iter().filter(|(g, p)| *g != vocab::YES && *p == vocab::YES).count() as f64;
                let fneg = pairs.iter().filter(|(g, p)| *g == vocab::YES && *p != vocab::YES).count() as f64;
                let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
                let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
                prop_assert!((m.f1 - f1).abs() < 1e-12);
                prop_assert!((m.precision - prec).abs() < 1e-12);
                prop_assert!((m.recall - rec).abs() < 1e-12);
            }
        }
    }
}
