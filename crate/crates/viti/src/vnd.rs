//! Visual Neglect Detector: head-level sigmoid probes trained with binary
//! cross-entropy, ranked by validation accuracy, selectable top-beta.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::atomic_write;
use crate::error::{Result, VitiError};
use crate::linalg::{sigmoid64, Rng};
use crate::perturb::ProbeDataset;

pub const BANK_MAGIC: &[u8; 4] = b"VPRB";
pub const BANK_VERSION: u16 = 1;

/// Linear probe for one (layer, head).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Probe {
    pub layer: usize,
    pub head: usize,
    /// Direction in head-activation space, length D.
    pub theta: Vec<f32>,
    /// Learned offset; zero recovers the pure dot-product form.
    pub bias: f32,
    /// Accuracy on the held-out split at threshold 0.5.
    pub val_accuracy: f32,
}

/// Probe score: sigmoid of the (biased) dot product with the activation.
pub fn probe_score(probe: &Probe, o: &[f32]) -> Result<f32> {
    if o.len() != probe.theta.len() {
        return Err(VitiError::Shape(format!(
            "probe dim {} vs activation dim {}",
            probe.theta.len(),
            o.len()
        )));
    }
    let z = crate::linalg::dot(&probe.theta, o) + probe.bias as f64;
    // clamp in f32 so the result stays strictly inside (0, 1) after the cast
    Ok((sigmoid64(z) as f32).clamp(1e-7, 1.0 - 1e-7))
}

/// Binary cross-entropy with probability clipping at [1e-7, 1 - 1e-7].
pub fn bce_loss(p: f64, label: u8) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean BCE over a row set plus L2 penalty, with its analytic gradient.
///
/// Returns (loss, d/dtheta, d/dbias). All math in f64.
pub fn mean_bce_and_grad(
    theta: &[f64],
    bias: f64,
    rows: &[(&[f32], u8)],
    l2: f64,
) -> (f64, Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grad_theta = vec![0.0f64; theta.len()];
    let mut grad_bias = 0.0;
    for (x, c) in rows {
        let z: f64 = x
            .iter()
            .zip(theta.iter())
            .map(|(&xi, &ti)| xi as f64 * ti)
            .sum::<f64>()
            + bias;
        let p = sigmoid64(z);
        loss += bce_loss(p, *c);
        let d = p - *c as f64;
        for (g, &xi) in grad_theta.iter_mut().zip(x.iter()) {
            *g += d * xi as f64;
        }
        grad_bias += d;
    }
    loss /= n;
    grad_bias /= n;
    let mut l2_term = 0.0;
    for (g, t) in grad_theta.iter_mut().zip(theta.iter()) {
        *g = *g / n + l2 * t;
        l2_term += t * t;
    }
    (loss + 0.5 * l2 * l2_term, grad_theta, grad_bias)
}

/// Probe training hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub split_ratio: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        // full-batch GD; hot enough to fit the mixed positive classes
        ProbeHyper {
            lr: 0.2,
            epochs: 1500,
            l2: 1e-5,
            split_ratio: 0.8,
            seed: 0,
        }
    }
}

/// Train a single probe by full-batch gradient descent on mean BCE + L2.
pub fn train_probe(
    layer: usize,
    head: usize,
    rows: &[(Vec<f32>, u8)],
    hyper: &ProbeHyper,
) -> Result<Probe> {
    if rows.is_empty() {
        return Err(VitiError::Training("no probe rows".into()));
    }
    let dim = rows[0].0.len();
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    let mut rng = Rng::derive(hyper.seed, (layer * 10_007 + head) as u64);
    rng.shuffle(&mut idx);
    let n_train = ((rows.len() as f64) * hyper.split_ratio).round() as usize;
    let n_train = n_train.clamp(1, rows.len().saturating_sub(1));
    let (train_idx, val_idx) = idx.split_at(n_train);

    let count = |ids: &[usize], c: u8| ids.iter().filter(|&&i| rows[i].1 == c).count();
    if count(train_idx, 0) < 2 || count(train_idx, 1) < 2 {
        return Err(VitiError::Training(format!(
            "probe ({layer},{head}) needs at least 2 rows per class in the training split"
        )));
    }

    let train_rows: Vec<(&[f32], u8)> = train_idx
        .iter()
        .map(|&i| (rows[i].0.as_slice(), rows[i].1))
        .collect();
    let mut theta = vec![0.0f64; dim];
    let mut bias = 0.0f64;
    for _ in 0..hyper.epochs {
        let (_, gt, gb) = mean_bce_and_grad(&theta, bias, &train_rows, hyper.l2);
        for (t, g) in theta.iter_mut().zip(gt.iter()) {
            *t -= hyper.lr * g;
        }
        bias -= hyper.lr * gb;
    }
    let mut correct = 0usize;
    for &i in val_idx {
        let z: f64 = rows[i]
            .0
            .iter()
            .zip(theta.iter())
            .map(|(&xi, &ti)| xi as f64 * ti)
            .sum::<f64>()
            + bias;
        let pred = u8::from(sigmoid64(z) > 0.5);
        correct += usize::from(pred == rows[i].1);
    }
    let val_accuracy = if val_idx.is_empty() {
        0.0
    } else {
        correct as f32 / val_idx.len() as f32
    };
    Ok(Probe {
        layer,
        head,
        theta: theta.iter().map(|&t| t as f32).collect(),
        bias: bias as f32,
        val_accuracy,
    })
}

/// Training metadata kept with a bank.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BankMeta {
    pub seed: u64,
    pub split_ratio: f64,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

/// One trained probe per (layer, head).
#[derive(Debug, Clone)]
pub struct ProbeBank {
    /// Exactly L*H probes, sorted by (layer, head).
    pub probes: Vec<Probe>,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub config_hash: [u8; 32],
    pub meta: BankMeta,
}

impl ProbeBank {
    pub fn probe(&self, layer: usize, head: usize) -> &Probe {
        &self.probes[layer * self.heads + head]
    }

    /// Validation accuracies sorted descending (the Fig.-4-style curve).
    pub fn sorted_accuracies(&self) -> Vec<f32> {
        let mut accs: Vec<f32> = self.probes.iter().map(|p| p.val_accuracy).collect();
        accs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        accs
    }
}

/// Train one probe per (layer, head) from a probe dataset.
///
/// Layer/head extents are inferred from the records; a missing (l, h)
/// combination is a dataset error. `workers > 1` trains probes on that many
/// threads; results are identical to the single-threaded run.
pub fn train_probe_bank(
    dataset: &ProbeDataset,
    hyper: &ProbeHyper,
    workers: usize,
) -> Result<ProbeBank> {
    let mut grouped: BTreeMap<(usize, usize), Vec<(Vec<f32>, u8)>> = BTreeMap::new();
    let mut max_layer = 0;
    let mut max_head = 0;
    for rec in &dataset.records {
        max_layer = max_layer.max(rec.layer as usize);
        max_head = max_head.max(rec.head as usize);
        grouped
            .entry((rec.layer as usize, rec.head as usize))
            .or_default()
            .push((rec.activation.clone(), rec.label));
    }
    let layers = max_layer + 1;
    let heads = max_head + 1;
    for l in 0..layers {
        for h in 0..heads {
            if !grouped.contains_key(&(l, h)) {
                return Err(VitiError::Dataset(format!(
                    "probe dataset has no rows for head ({l},{h})"
                )));
            }
        }
    }
    let jobs: Vec<((usize, usize), Vec<(Vec<f32>, u8)>)> = grouped.into_iter().collect();
    let mut probes: Vec<Probe> = if workers > 1 {
        let chunks: Vec<&[((usize, usize), Vec<(Vec<f32>, u8)>)]> =
            jobs.chunks(jobs.len().div_ceil(workers)).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .into_iter()
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|((l, h), rows)| train_probe(*l, *h, rows, hyper))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::new();
            for h in handles {
                out.extend(h.join().expect("probe worker panicked")?);
            }
            Ok::<_, VitiError>(out)
        })?
    } else {
        jobs.iter()
            .map(|((l, h), rows)| train_probe(*l, *h, rows, hyper))
            .collect::<Result<Vec<_>>>()?
    };
    probes.sort_by_key(|p| (p.layer, p.head));
    let head_dim = probes[0].theta.len();
    Ok(ProbeBank {
        probes,
        layers,
        heads,
        head_dim,
        config_hash: dataset.config_hash,
        meta: BankMeta {
            seed: hyper.seed,
            split_ratio: hyper.split_ratio,
            epochs: hyper.epochs,
            lr: hyper.lr,
            l2: hyper.l2,
        },
    })
}

/// Pick the `max(1, floor(beta * L * H))` heads with highest validation
/// accuracy; ties broken by lower layer, then lower head.
pub fn select_top_beta(bank: &ProbeBank, beta: f64) -> Result<Vec<(usize, usize)>> {
    if beta <= 0.0 || beta > 1.0 {
        return Err(VitiError::config("beta", format!("{beta} outside (0, 1]")));
    }
    let total = bank.layers * bank.heads;
    let k = ((beta * total as f64).floor() as usize).max(1);
    let mut order: Vec<&Probe> = bank.probes.iter().collect();
    order.sort_by(|a, b| {
        b.val_accuracy
            .partial_cmp(&a.val_accuracy)
            .unwrap()
            .then(a.layer.cmp(&b.layer))
            .then(a.head.cmp(&b.head))
    });
    Ok(order[..k.min(total)].iter().map(|p| (p.layer, p.head)).collect())
}

/// Write a probe bank (magic "VPRB").
pub fn save_bank(bank: &ProbeBank, path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&bank.config_hash)?;
        w.write_all(&(bank.layers as u16).to_le_bytes())?;
        w.write_all(&(bank.heads as u16).to_le_bytes())?;
        w.write_all(&(bank.head_dim as u16).to_le_bytes())?;
        w.write_all(&bank.meta.seed.to_le_bytes())?;
        w.write_all(&bank.meta.split_ratio.to_le_bytes())?;
        w.write_all(&(bank.meta.epochs as u32).to_le_bytes())?;
        w.write_all(&bank.meta.lr.to_le_bytes())?;
        w.write_all(&bank.meta.l2.to_le_bytes())?;
        for p in &bank.probes {
            w.write_all(&(p.layer as u16).to_le_bytes())?;
            w.write_all(&(p.head as u16).to_le_bytes())?;
            w.write_all(&p.val_accuracy.to_le_bytes())?;
            w.write_all(&p.bias.to_le_bytes())?;
            for t in &p.theta {
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

/// Load a probe bank, rejecting bad magic/version.
pub fn load_bank(path: &Path) -> Result<ProbeBank> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BANK_MAGIC {
        return Err(VitiError::Version(format!(
            "bad probe bank magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b)?;
    if u16::from_le_bytes(u16b) != BANK_VERSION {
        return Err(VitiError::Version("unsupported probe bank version".into()));
    }
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash)?;
    let read_u16 = |r: &mut BufReader<File>| -> Result<u16> {
        let mut b = [0u8; 2];
        r.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    };
    let layers = read_u16(&mut r)? as usize;
    let heads = read_u16(&mut r)? as usize;
    let head_dim = read_u16(&mut r)? as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let split_ratio = f64::from_le_bytes(b8);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let epochs = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let lr = f64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let l2 = f64::from_le_bytes(b8);
    let mut probes = Vec::with_capacity(layers * heads);
    for _ in 0..layers * heads {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let layer = u16::from_le_bytes(b2) as usize;
        r.read_exact(&mut b2)?;
        let head = u16::from_le_bytes(b2) as usize;
        r.read_exact(&mut b4)?;
        let val_accuracy = f32::from_le_bytes(b4);
        r.read_exact(&mut b4)?;
        let bias = f32::from_le_bytes(b4);
        let mut theta = vec![0.0f32; head_dim];
        for t in theta.iter_mut() {
            r.read_exact(&mut b4)?;
            *t = f32::from_le_bytes(b4);
        }
        probes.push(Probe {
            layer,
            head,
            theta,
            bias,
            val_accuracy,
        });
    }
    Ok(ProbeBank {
        probes,
        layers,
        heads,
        head_dim,
        config_hash,
        meta: BankMeta {
            seed,
            split_ratio,
            epochs,
            lr,
            l2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn probe(theta: Vec<f32>, bias: f32) -> Probe {
        Probe {
            layer: 0,
            head: 0,
            theta,
            bias,
            val_accuracy: 0.0,
        }
    }

    #[test]
    fn probe_score_zero_logit() {
        let p = probe(vec![0.0, 0.0], 0.0);
        assert_eq!(probe_score(&p, &[3.0, -4.0]).unwrap(), 0.5);
    }

    #[test]
    fn probe_score_sigmoid_oracle() {
        // <theta, o> + bias = 1 => sigmoid(1)
        let p = probe(vec![1.0], 0.5);
        assert_relative_eq!(
            probe_score(&p, &[0.5]).unwrap(),
            0.731_058_6,
            max_relative = 1e-5
        );
    }

    #[test]
    fn probe_score_negation_symmetry() {
        let p = probe(vec![0.7, -0.3], 0.2);
        let q = probe(vec![-0.7, 0.3], -0.2);
        let o = [1.5, 2.5];
        let a = probe_score(&p, &o).unwrap();
        let b = probe_score(&q, &o).unwrap();
        assert_relative_eq!(a + b, 1.0, max_relative = 1e-6);
    }

    #[test]
    fn probe_score_dim_mismatch() {
        let p = probe(vec![1.0, 1.0], 0.0);
        assert!(matches!(
            probe_score(&p, &[1.0]),
            Err(VitiError::Shape(_))
        ));
    }

    #[test]
    fn bce_known_values() {
        assert_relative_eq!(bce_loss(0.5, 1), std::f64::consts::LN_2, max_relative = 1e-9);
        assert_relative_eq!(bce_loss(0.5, 0), std::f64::consts::LN_2, max_relative = 1e-9);
        assert!(bce_loss(1.0, 1) < 1e-6); // clipped near zero
        assert_relative_eq!(bce_loss(0.9, 0), 2.302_585, max_relative = 1e-5);
    }

    fn separable_rows(n: usize, dim: usize, gap: f32, seed: u64) -> Vec<(Vec<f32>, u8)> {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let center = if label == 1 { gap } else { -gap };
            let x: Vec<f32> = (0..dim).map(|_| center + 0.3 * rng.normal()).collect();
            rows.push((x, label));
        }
        rows
    }

    #[test]
    fn train_probe_separable_data() {
        let rows = separable_rows(200, 4, 1.5, 3);
        let hyper = ProbeHyper {
            epochs: 200,
            ..Default::default()
        };
        let p = train_probe(0, 0, &rows, &hyper).unwrap();
        assert_eq!(p.val_accuracy, 1.0);
    }

    #[test]
    fn train_probe_shuffled_labels_near_chance() {
        let mut rng = Rng::new(9);
        let rows: Vec<(Vec<f32>, u8)> = (0..400)
            .map(|i| {
                let x: Vec<f32> = (0..6).map(|_| rng.normal()).collect();
                (x, (i % 2) as u8)
            })
            .collect();
        let p = train_probe(0, 0, &rows, &ProbeHyper::default()).unwrap();
        assert!(
            (p.val_accuracy - 0.5).abs() <= 0.1,
            "val acc {} not near chance",
            p.val_accuracy
        );
    }

    #[test]
    fn train_probe_single_class_fails() {
        let rows: Vec<(Vec<f32>, u8)> = (0..50).map(|i| (vec![i as f32], 1u8)).collect();
        assert!(matches!(
            train_probe(0, 0, &rows, &ProbeHyper::default()),
            Err(VitiError::Training(_))
        ));
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(17);
        for trial in 0..10 {
            let dim = 3 + (trial % 4);
            let rows: Vec<(Vec<f32>, u8)> = (0..40)
                .map(|i| {
                    let x: Vec<f32> = (0..dim).map(|_| rng.normal()).collect();
                    (x, (i % 2) as u8)
                })
                .collect();
            let refs: Vec<(&[f32], u8)> = rows.iter().map(|(x, c)| (x.as_slice(), *c)).collect();
            let theta: Vec<f64> = (0..dim).map(|_| rng.normal() as f64 * 0.5).collect();
            let bias = rng.normal() as f64 * 0.5;
            let l2 = 1e-4;
            let (_, gt, gb) = mean_bce_and_grad(&theta, bias, &refs, l2);
            let h = 1e-4;
            for d in 0..dim {
                let mut tp = theta.clone();
                tp[d] += h;
                let mut tm = theta.clone();
                tm[d] -= h;
                let (lp, _, _) = mean_bce_and_grad(&tp, bias, &refs, l2);
                let (lm, _, _) = mean_bce_and_grad(&tm, bias, &refs, l2);
                let fd = (lp - lm) / (2.0 * h);
                let rel = (gt[d] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-5, "grad[{d}]={} fd={} rel={}", gt[d], fd, rel);
            }
            let (lp, _, _) = mean_bce_and_grad(&theta, bias + h, &refs, l2);
            let (lm, _, _) = mean_bce_and_grad(&theta, bias - h, &refs, l2);
            let fd = (lp - lm) / (2.0 * h);
            assert!((gb - fd).abs() / fd.abs().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn train_loss_nonincreasing_small_lr() {
        let rows = separable_rows(100, 3, 0.8, 5);
        let refs: Vec<(&[f32], u8)> = rows.iter().map(|(x, c)| (x.as_slice(), *c)).collect();
        let mut theta = vec![0.0f64; 3];
        let mut bias = 0.0;
        let mut prev = f64::INFINITY;
        for _ in 0..300 {
            let (loss, gt, gb) = mean_bce_and_grad(&theta, bias, &refs, 1e-4);
            assert!(loss <= prev + 1e-12, "loss increased: {prev} -> {loss}");
            prev = loss;
            for (t, g) in theta.iter_mut().zip(gt.iter()) {
                *t -= 1e-3 * g;
            }
            bias -= 1e-3 * gb;
        }
    }

    fn fake_bank(accs: &[f32], layers: usize, heads: usize) -> ProbeBank {
        let probes = (0..layers * heads)
            .map(|i| Probe {
                layer: i / heads,
                head: i % heads,
                theta: vec![0.0; 4],
                bias: 0.0,
                val_accuracy: accs[i],
            })
            .collect();
        ProbeBank {
            probes,
            layers,
            heads,
            head_dim: 4,
            config_hash: [0; 32],
            meta: BankMeta {
                seed: 0,
                split_ratio: 0.8,
                epochs: 1,
                lr: 0.1,
                l2: 0.0,
            },
        }
    }

    #[test]
    fn select_top_beta_counts() {
        let accs: Vec<f32> = (0..20).map(|i| i as f32 / 20.0).collect();
        let bank = fake_bank(&accs, 2, 10);
        assert_eq!(select_top_beta(&bank, 1.0).unwrap().len(), 20);
        assert_eq!(select_top_beta(&bank, 0.10).unwrap().len(), 2);
        // floor would give 0; clamps to 1
        assert_eq!(select_top_beta(&bank, 0.01).unwrap().len(), 1);
        assert!(select_top_beta(&bank, 0.0).is_err());
        assert!(select_top_beta(&bank, 1.5).is_err());
    }

    #[test]
    fn select_top_beta_nested_and_deterministic() {
        let accs: Vec<f32> = (0..30).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
        let bank = fake_bank(&accs, 3, 10);
        let mut prev: Vec<(usize, usize)> = Vec::new();
        for k in 1..=10 {
            let beta = k as f64 / 10.0;
            let sel = select_top_beta(&bank, beta).unwrap();
            assert_eq!(sel, select_top_beta(&bank, beta).unwrap());
            for p in &prev {
                assert!(sel.contains(p), "beta nesting violated at {beta}");
            }
            prev = sel;
        }
    }

    #[test]
    fn select_top_beta_tie_break() {
        let mut accs = vec![0.5f32; 8];
        accs[5] = 0.9;
        let bank = fake_bank(&accs, 2, 4);
        let sel = select_top_beta(&bank, 0.5).unwrap();
        // best head first, then ties by (layer, head)
        assert_eq!(sel, vec![(1, 1), (0, 0), (0, 1), (0, 2)]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn probe_score_strictly_inside_unit_interval(
                theta in proptest::collection::vec(-10.0f32..10.0, 1..8),
                bias in -10.0f32..10.0,
            ) {
                let dim = theta.len();
                let o: Vec<f32> = (0..dim).map(|i| (i as f32 - 1.5) * 2.0).collect();
                let p = Probe { layer: 0, head: 0, theta, bias, val_accuracy: 0.0 };
                let s = probe_score(&p, &o).unwrap();
                prop_assert!(s > 0.0 && s < 1.0);
            }
        }
    }
}
