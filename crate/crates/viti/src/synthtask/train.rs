//! Toy-model trainer: cross-entropy at the answer position with Adam,
//! manual backprop, and noise augmentation that shapes the behaviors the
//! intervention experiments rely on.
//!
//! Two augmentation branches applied per training sample:
//!   - a "readable noise" branch keeps the gold label under light-to-heavy
//!     Gaussian noising of the scene, teaching the readout to decode
//!     attenuated visual content;
//!   - an "unreadable" branch noises near the end of the schedule and
//!     trains toward a soft target splitting mass between the unsure token
//!     and the gold answer, which pins small logit margins on destroyed
//!     scenes and grows an off-scene fallback attention pattern.

use crate::error::{Result, VitiError};
use crate::linalg::{layer_norm, matmul, sigmoid, Matrix, Rng};
use crate::perturb::{gaussian_perturb, NoiseSchedule};
use crate::runtime::{full_forward, Model, ModelConfig, LN_EPS};

use super::{vocab, QASample};

/// Trainer hyperparameters, including the augmentation knobs.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Stop once clean train accuracy reaches this level.
    pub stop_acc: f64,
    /// Probability of the gold-label noise branch.
    pub gold_frac: f64,
    /// Highest noise step used by the gold-label branch.
    pub gold_tmax: usize,
    /// Probability of the unsure branch.
    pub abstain_frac: f64,
    /// Lowest noise step used by the unsure branch (up to total_steps).
    pub abstain_tmin: usize,
    /// Soft-target mass on the unsure token in the unsure branch.
    pub unsure_weight: f32,
    /// Shared direction added to visual-token embeddings at init, in units
    /// of sqrt(hidden); mirrors the modality gap of real multimodal models.
    pub modality_offset: f32,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            epochs: 24,
            batch: 32,
            seed: 0,
            stop_acc: 0.99,
            gold_frac: 0.25,
            gold_tmax: 800,
            abstain_frac: 0.15,
            abstain_tmin: 700,
            unsure_weight: 0.4,
            modality_offset: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient buffers and Adam
// ---------------------------------------------------------------------------

struct LayerGrads {
    w_q: Vec<Matrix>,
    w_k: Vec<Matrix>,
    w_v: Vec<Matrix>,
    w_o: Matrix,
    w1: Matrix,
    w2: Matrix,
    ln1_gain: Vec<f32>,
    ln1_bias: Vec<f32>,
    ln2_gain: Vec<f32>,
    ln2_bias: Vec<f32>,
}

struct Grads {
    tok_emb: Matrix,
    pos_emb: Matrix,
    layers: Vec<LayerGrads>,
    final_gain: Vec<f32>,
    final_bias: Vec<f32>,
    w_out: Matrix,
}

impl Grads {
    fn zeros_like(model: &Model) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Grads {
            tok_emb: zeros(&model.tok_emb),
            pos_emb: zeros(&model.pos_emb),
            layers: model
                .layers
                .iter()
                .map(|lw| LayerGrads {
                    w_q: lw.w_q.iter().map(zeros).collect(),
                    w_k: lw.w_k.iter().map(zeros).collect(),
                    w_v: lw.w_v.iter().map(zeros).collect(),
                    w_o: zeros(&lw.w_o),
                    w1: zeros(&lw.w1),
                    w2: zeros(&lw.w2),
                    ln1_gain: vec![0.0; lw.ln1_gain.len()],
                    ln1_bias: vec![0.0; lw.ln1_bias.len()],
                    ln2_gain: vec![0.0; lw.ln2_gain.len()],
                    ln2_bias: vec![0.0; lw.ln2_bias.len()],
                })
                .collect(),
            final_gain: vec![0.0; model.final_gain.len()],
            final_bias: vec![0.0; model.final_bias.len()],
            w_out: zeros(&model.w_out),
        }
    }

    fn clear(&mut self) {
        let z = |m: &mut Matrix| m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        z(&mut self.tok_emb);
        z(&mut self.pos_emb);
        for lg in &mut self.layers {
            lg.w_q.iter_mut().for_each(|m| z(m));
            lg.w_k.iter_mut().for_each(|m| z(m));
            lg.w_v.iter_mut().for_each(|m| z(m));
            z(&mut lg.w_o);
            z(&mut lg.w1);
            z(&mut lg.w2);
            for s in [
                &mut lg.ln1_gain,
                &mut lg.ln1_bias,
                &mut lg.ln2_gain,
                &mut lg.ln2_bias,
            ] {
                s.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.final_gain.iter_mut().for_each(|v| *v = 0.0);
        self.final_bias.iter_mut().for_each(|v| *v = 0.0);
        z(&mut self.w_out);
    }
}

struct Adam {
    m: Grads,
    v: Grads,
    t: u64,
    lr: f64,
}

fn adam_update(t: u64, lr: f64, param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32]) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let c1 = 1.0 - B1.powi(t as i32);
    let c2 = 1.0 - B2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = B1 * m[i] as f64 + (1.0 - B1) * g;
        let vi = B2 * v[i] as f64 + (1.0 - B2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + EPS);
        param[i] -= step as f32;
    }
}

impl Adam {
    fn new(model: &Model, lr: f64) -> Self {
        Adam {
            m: Grads::zeros_like(model),
            v: Grads::zeros_like(model),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, model: &mut Model, g: &Grads) {
        self.t += 1;
        let t = self.t;
        let lr = self.lr;
        adam_update(t, lr, model.tok_emb.data_mut(), g.tok_emb.data(), self.m.tok_emb.data_mut(), self.v.tok_emb.data_mut());
        adam_update(t, lr, model.pos_emb.data_mut(), g.pos_emb.data(), self.m.pos_emb.data_mut(), self.v.pos_emb.data_mut());
        for (l, lw) in model.layers.iter_mut().enumerate() {
            let gl = &g.layers[l];
            let ml = &mut self.m.layers[l];
            let vl = &mut self.v.layers[l];
            for h in 0..lw.w_q.len() {
                adam_update(t, lr, lw.w_q[h].data_mut(), gl.w_q[h].data(), ml.w_q[h].data_mut(), vl.w_q[h].data_mut());
                adam_update(t, lr, lw.w_k[h].data_mut(), gl.w_k[h].data(), ml.w_k[h].data_mut(), vl.w_k[h].data_mut());
                adam_update(t, lr, lw.w_v[h].data_mut(), gl.w_v[h].data(), ml.w_v[h].data_mut(), vl.w_v[h].data_mut());
            }
            adam_update(t, lr, lw.w_o.data_mut(), gl.w_o.data(), ml.w_o.data_mut(), vl.w_o.data_mut());
            adam_update(t, lr, lw.w1.data_mut(), gl.w1.data(), ml.w1.data_mut(), vl.w1.data_mut());
            adam_update(t, lr, lw.w2.data_mut(), gl.w2.data(), ml.w2.data_mut(), vl.w2.data_mut());
            adam_update(t, lr, &mut lw.ln1_gain, &gl.ln1_gain, &mut ml.ln1_gain, &mut vl.ln1_gain);
            adam_update(t, lr, &mut lw.ln1_bias, &gl.ln1_bias, &mut ml.ln1_bias, &mut vl.ln1_bias);
            adam_update(t, lr, &mut lw.ln2_gain, &gl.ln2_gain, &mut ml.ln2_gain, &mut vl.ln2_gain);
            adam_update(t, lr, &mut lw.ln2_bias, &gl.ln2_bias, &mut ml.ln2_bias, &mut vl.ln2_bias);
        }
        adam_update(t, lr, &mut model.final_gain, &g.final_gain, &mut self.m.final_gain, &mut self.v.final_gain);
        adam_update(t, lr, &mut model.final_bias, &g.final_bias, &mut self.m.final_bias, &mut self.v.final_bias);
        adam_update(t, lr, model.w_out.data_mut(), g.w_out.data(), self.m.w_out.data_mut(), self.v.w_out.data_mut());
    }
}

// ---------------------------------------------------------------------------
// Forward/backward
// ---------------------------------------------------------------------------

struct LnCache {
    xhat: Matrix,
    inv: Vec<f32>,
}

fn ln_fwd(x: &Matrix, gain: &[f32], bias: &[f32]) -> (Matrix, LnCache) {
    let n = x.rows();
    let d = x.cols();
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv = vec![0.0f32; n];
    for i in 0..n {
        let row = x.row(i);
        let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var: f64 = row
            .iter()
            .map(|&v| {
                let e = v as f64 - mean;
                e * e
            })
            .sum::<f64>()
            / d as f64;
        let iv = 1.0 / (var + LN_EPS as f64).sqrt();
        inv[i] = iv as f32;
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..d {
            let h = ((row[j] as f64 - mean) * iv) as f32;
            xh[j] = h;
            o[j] = h * gain[j] + bias[j];
        }
    }
    (out, LnCache { xhat, inv })
}

fn ln_bwd(
    dy: &Matrix,
    cache: &LnCache,
    gain: &[f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
) -> Matrix {
    let n = dy.rows();
    let d = dy.cols();
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut m1 = 0.0f64;
        let mut m2 = 0.0f64;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            let dxh = (dyr[j] * gain[j]) as f64;
            m1 += dxh;
            m2 += dxh * xh[j] as f64;
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let iv = cache.inv[i] as f64;
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = (dyr[j] * gain[j]) as f64;
            dxr[j] = (iv * (dxh - m1 - xh[j] as f64 * m2)) as f32;
        }
    }
    dx
}

struct LayerCache {
    xn: Matrix,
    ln1: LnCache,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    attn: Vec<Matrix>,
    concat: Matrix,
    xn2: Matrix,
    ln2: LnCache,
    hpre: Matrix,
    hact: Matrix,
}

struct FwdCache {
    layers: Vec<LayerCache>,
    xf_last: Vec<f32>,
    lnf: LnCache,
    probs: Vec<f32>,
}

fn softmax_vec(logits: &[f32]) -> Vec<f32> {
    let mx = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - mx) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / sum) as f32).collect()
}

fn forward_cached(model: &Model, x0: &Matrix) -> Result<(Vec<f32>, FwdCache)> {
    let cfg = &model.config;
    let n = x0.rows();
    let d = cfg.head_dim;
    let scale = 1.0 / (d as f32).sqrt();
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.layers);
    for lw in &model.layers {
        let (xn, ln1) = ln_fwd(&x, &lw.ln1_gain, &lw.ln1_bias);
        let mut q = Vec::with_capacity(cfg.heads);
        let mut k = Vec::with_capacity(cfg.heads);
        let mut v = Vec::with_capacity(cfg.heads);
        let mut attn = Vec::with_capacity(cfg.heads);
        let mut concat = Matrix::zeros(n, cfg.hidden());
        for h in 0..cfg.heads {
            let qh = matmul(&xn, &lw.w_q[h])?;
            let kh = matmul(&xn, &lw.w_k[h])?;
            let vh = matmul(&xn, &lw.w_v[h])?;
            let mut aw = Matrix::zeros(n, n);
            for i in 0..n {
                let qr = qh.row(i);
                let mut mx = f32::NEG_INFINITY;
                let mut srow = vec![0.0f32; i + 1];
                for (j, s) in srow.iter_mut().enumerate() {
                    *s = (crate::linalg::dot(qr, kh.row(j)) as f32) * scale;
                    mx = mx.max(*s);
                }
                let mut sum = 0.0f64;
                for s in srow.iter_mut() {
                    let e = ((*s - mx) as f64).exp();
                    *s = e as f32;
                    sum += e;
                }
                let ar = aw.row_mut(i);
                for (j, s) in srow.iter().enumerate() {
                    ar[j] = (*s as f64 / sum) as f32;
                }
            }
            // o rows into the concat block
            for i in 0..n {
                let ar = aw.row(i);
                let mut acc = vec![0.0f64; d];
                for (j, &w) in ar.iter().enumerate().take(i + 1) {
                    let vr = vh.row(j);
                    let w = w as f64;
                    for (a, &vv) in acc.iter_mut().zip(vr.iter()) {
                        *a += w * vv as f64;
                    }
                }
                let dst = &mut concat.row_mut(i)[h * d..(h + 1) * d];
                for (o, &a) in dst.iter_mut().zip(acc.iter()) {
                    *o = a as f32;
                }
            }
            q.push(qh);
            k.push(kh);
            v.push(vh);
            attn.push(aw);
        }
        let att_out = matmul(&concat, &lw.w_o)?;
        let mut xa = x.clone();
        for i in 0..n {
            let row = xa.row_mut(i);
            for (rv, &av) in row.iter_mut().zip(att_out.row(i).iter()) {
                *rv += av;
            }
        }
        let (xn2, ln2) = ln_fwd(&xa, &lw.ln2_gain, &lw.ln2_bias);
        let hpre = matmul(&xn2, &lw.w1)?;
        let mut hact = hpre.clone();
        for v in hact.data_mut() {
            *v *= sigmoid(*v);
        }
        let mut xo = xa.clone();
        for i in 0..n {
            let hr = hact.row(i);
            let row = xo.row_mut(i);
            for (j, rv) in row.iter_mut().enumerate() {
                *rv += crate::linalg::dot(hr, lw.w2.row(j)) as f32;
            }
        }
        layers.push(LayerCache {
            xn,
            ln1,
            q,
            k,
            v,
            attn,
            concat,
            xn2,
            ln2,
            hpre,
            hact,
        });
        x = xo;
    }
    // final norm + logits at the last row only (loss is there)
    let last = x.row(n - 1);
    let xf = layer_norm(last, &model.final_gain, &model.final_bias, LN_EPS)?;
    let logits = crate::linalg::vecmat(&xf, &model.w_out)?;
    let probs = softmax_vec(&logits);
    // reuse LnCache layout for one row
    let mean: f64 = last.iter().map(|&v| v as f64).sum::<f64>() / last.len() as f64;
    let var: f64 = last
        .iter()
        .map(|&v| {
            let e = v as f64 - mean;
            e * e
        })
        .sum::<f64>()
        / last.len() as f64;
    let iv = (1.0 / (var + LN_EPS as f64).sqrt()) as f32;
    let mut xhat = Matrix::zeros(1, last.len());
    for (j, v) in xhat.row_mut(0).iter_mut().enumerate() {
        *v = ((last[j] as f64 - mean) * iv as f64) as f32;
    }
    let cache = FwdCache {
        layers,
        xf_last: xf,
        lnf: LnCache {
            xhat,
            inv: vec![iv],
        },
        probs,
    };
    Ok((logits, cache))
}

/// Accumulate dA^T B into `out`.
fn add_at_b(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let br = b.row(i);
        for (j, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(j);
            for (o, &bv) in orow.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    }
}

fn backward(
    model: &Model,
    tokens: &[u32],
    cache: &FwdCache,
    target: &[(u32, f32)],
    grads: &mut Grads,
    weight: f32,
) -> Result<f64> {
    let cfg = &model.config;
    let n = tokens.len();
    let hd = cfg.hidden();
    let d = cfg.head_dim;
    // cross-entropy toward the (possibly soft) target
    let mut loss = 0.0f64;
    let mut dlogits: Vec<f32> = cache.probs.clone();
    for &(tok, w) in target {
        let p = cache.probs[tok as usize] as f64;
        loss -= w as f64 * (p + 1e-12).ln();
        dlogits[tok as usize] -= w;
    }
    for v in dlogits.iter_mut() {
        *v *= weight;
    }
    // w_out: xf^T dlogits
    for (j, &xfv) in cache.xf_last.iter().enumerate() {
        let row = grads.w_out.row_mut(j);
        for (r, &dl) in row.iter_mut().zip(dlogits.iter()) {
            *r += xfv * dl;
        }
    }
    let mut dxf = vec![0.0f32; hd];
    for (j, dv) in dxf.iter_mut().enumerate() {
        *dv = crate::linalg::dot(model.w_out.row(j), &dlogits) as f32;
    }
    // final ln backward (single row)
    let dxf_m = Matrix::from_vec(1, hd, dxf)?;
    let dlast = ln_bwd(
        &dxf_m,
        &cache.lnf,
        &model.final_gain,
        &mut grads.final_gain,
        &mut grads.final_bias,
    );
    let mut dx = Matrix::zeros(n, hd);
    dx.row_mut(n - 1).copy_from_slice(dlast.row(0));

    for l in (0..cfg.layers).rev() {
        let lw = &model.layers[l];
        let lc = &cache.layers[l];
        let gl = &mut grads.layers[l];
        // FFN backward
        let dhact = matmul(&dx, &lw.w2)?;
        add_at_b(&mut gl.w2, &dx, &lc.hact);
        let mut dhpre = dhact;
        for (dv, &hp) in dhpre.data_mut().iter_mut().zip(lc.hpre.data().iter()) {
            let s = sigmoid(hp);
            *dv *= s + hp * s * (1.0 - s);
        }
        add_at_b(&mut gl.w1, &lc.xn2, &dhpre);
        let dxn2 = matmul(&dhpre, &lw.w1.transpose())?;
        let dxa_ln = ln_bwd(&dxn2, &lc.ln2, &lw.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);
        let mut dxa = dx;
        for (a, &b) in dxa.data_mut().iter_mut().zip(dxa_ln.data().iter()) {
            *a += b;
        }
        // attention output backward
        let dconcat = matmul(&dxa, &lw.w_o.transpose())?;
        add_at_b(&mut gl.w_o, &lc.concat, &dxa);
        let mut dxn = Matrix::zeros(n, hd);
        for h in 0..cfg.heads {
            let mut do_h = Matrix::zeros(n, d);
            for i in 0..n {
                do_h
                    .row_mut(i)
                    .copy_from_slice(&dconcat.row(i)[h * d..(h + 1) * d]);
            }
            let aw = &lc.attn[h];
            let vh = &lc.v[h];
            // dA = dO V^T (lower triangle only)
            let mut da = Matrix::zeros(n, n);
            for i in 0..n {
                let dor = do_h.row(i);
                let dar = da.row_mut(i);
                for (j, dav) in dar.iter_mut().enumerate().take(i + 1) {
                    *dav = crate::linalg::dot(dor, vh.row(j)) as f32;
                }
            }
            // dV = A^T dO
            let mut dv = Matrix::zeros(n, d);
            add_at_b(&mut dv, aw, &do_h);
            // dS = A (dA - rowsum(dA * A)) / sqrt(D)
            let scale = 1.0 / (d as f32).sqrt();
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let ar = aw.row(i);
                let dar = da.row(i);
                let dot_i: f64 = ar
                    .iter()
                    .zip(dar.iter())
                    .take(i + 1)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                let dsr = ds.row_mut(i);
                for j in 0..=i {
                    dsr[j] = ar[j] * (dar[j] - dot_i as f32) * scale;
                }
            }
            let dq = matmul(&ds, &lc.k[h])?;
            let dk = matmul(&ds.transpose(), &lc.q[h])?;
            add_at_b(&mut gl.w_q[h], &lc.xn, &dq);
            add_at_b(&mut gl.w_k[h], &lc.xn, &dk);
            add_at_b(&mut gl.w_v[h], &lc.xn, &dv);
            for (m, w) in [(&dq, &lw.w_q[h]), (&dk, &lw.w_k[h]), (&dv, &lw.w_v[h])] {
                let contrib = matmul(m, &w.transpose())?;
                for (a, &b) in dxn.data_mut().iter_mut().zip(contrib.data().iter()) {
                    *a += b;
                }
            }
        }
        let dx_ln = ln_bwd(&dxn, &lc.ln1, &lw.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);
        let mut dprev = dxa;
        for (a, &b) in dprev.data_mut().iter_mut().zip(dx_ln.data().iter()) {
            *a += b;
        }
        dx = dprev;
    }
    // embeddings
    for (i, &tok) in tokens.iter().enumerate() {
        let dr = dx.row(i);
        let te = grads.tok_emb.row_mut(tok as usize);
        for (t, &v) in te.iter_mut().zip(dr.iter()) {
            *t += v;
        }
        let pe = grads.pos_emb.row_mut(i);
        for (p, &v) in pe.iter_mut().zip(dr.iter()) {
            *p += v;
        }
    }
    Ok(loss * weight as f64)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Apply the shared modality direction to the visual vocabulary region.
fn apply_modality_offset(model: &mut Model, offset: f32, rng: &mut Rng) {
    if offset == 0.0 {
        return;
    }
    let hd = model.config.hidden();
    let mut u: Vec<f32> = (0..hd).map(|_| rng.normal()).collect();
    let nrm = crate::linalg::norm(&u) as f32;
    for v in u.iter_mut() {
        *v /= nrm;
    }
    let scale = offset * (hd as f32).sqrt();
    for tok in vocab::VIS_BASE..=vocab::VIS_EMPTY {
        let row = model.tok_emb.row_mut(tok as usize);
        for (r, &uv) in row.iter_mut().zip(u.iter()) {
            *r += scale * uv;
        }
    }
}

fn clean_accuracy(model: &Model, samples: &[QASample]) -> Result<f64> {
    let mut ok = 0usize;
    for s in samples {
        let x0 = crate::runtime::embed_prompt(model, &s.tokens)?;
        let logits = full_forward(model, &x0, s.visual_span())?;
        let row = logits.row(s.tokens.len() - 1);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        ok += usize::from(best as u32 == s.answer);
    }
    Ok(ok as f64 / samples.len() as f64)
}

/// Train the toy transformer on QA samples.
///
/// Minibatch Adam over length-bucketed batches, single-threaded for
/// determinism. Stops early once clean train accuracy reaches
/// `hyper.stop_acc`. Fails on divergence (NaN loss).
pub fn train_toy_model(
    dataset: &[QASample],
    config: ModelConfig,
    hyper: &TrainHyper,
    schedule: &NoiseSchedule,
) -> Result<Model> {
    if dataset.is_empty() {
        return Err(VitiError::Input("empty training dataset".into()));
    }
    schedule.validate()?;
    for s in dataset {
        if s.tokens.len() > config.max_seq {
            return Err(VitiError::Input(format!(
                "sample length {} exceeds max_seq {}",
                s.tokens.len(),
                config.max_seq
            )));
        }
        if s.tokens.iter().any(|&t| t as usize >= config.vocab_size) {
            return Err(VitiError::Input("sample token outside vocab".into()));
        }
    }
    let mut rng = Rng::new(hyper.seed);
    let mut model = Model::init(config, &mut rng)?;
    apply_modality_offset(&mut model, hyper.modality_offset, &mut rng);
    let mut opt = Adam::new(&model, hyper.lr);
    let mut grads = Grads::zeros_like(&model);

    // bucket sample indices by sequence length
    let mut buckets: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in dataset.iter().enumerate() {
        buckets.entry(s.tokens.len()).or_default().push(i);
    }
    let probe_n = dataset.len().min(200);
    let abstain_lo = hyper.abstain_tmin.min(schedule.total_steps);
    let gold_hi = hyper.gold_tmax.min(schedule.total_steps).max(1);

    for epoch in 0..hyper.epochs {
        // batch order: shuffle within buckets, then shuffle batch list
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for ids in buckets.values() {
            let mut ids = ids.clone();
            rng.shuffle(&mut ids);
            for chunk in ids.chunks(hyper.batch.max(1)) {
                batches.push(chunk.to_vec());
            }
        }
        rng.shuffle(&mut batches);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for batch in &batches {
            grads.clear();
            let weight = 1.0 / batch.len() as f32;
            for &si in batch {
                let s = &dataset[si];
                let mut x0 = crate::runtime::embed_prompt(&model, &s.tokens)?;
                let mut target: Vec<(u32, f32)> = vec![(s.answer, 1.0)];
                let r = rng.uniform();
                if r < hyper.abstain_frac {
                    let t = rng.below(abstain_lo as u64, schedule.total_steps as u64 + 1) as usize;
                    x0 = gaussian_perturb(&x0, s.visual_span(), t, schedule, &mut rng)?;
                    target = vec![
                        (vocab::UNSURE, hyper.unsure_weight),
                        (s.answer, 1.0 - hyper.unsure_weight),
                    ];
                } else if r < hyper.abstain_frac + hyper.gold_frac {
                    let t = rng.below(1, gold_hi as u64 + 1) as usize;
                    x0 = gaussian_perturb(&x0, s.visual_span(), t, schedule, &mut rng)?;
                }
                let (_, cache) = forward_cached(&model, &x0)?;
                epoch_loss += backward(&model, &s.tokens, &cache, &target, &mut grads, weight)?
                    * batch.len() as f64;
                seen += 1;
            }
            if !epoch_loss.is_finite() {
                return Err(VitiError::Training(format!(
                    "loss diverged at epoch {epoch}"
                )));
            }
            opt.step(&mut model, &grads);
        }
        let _ = epoch_loss / seen.max(1) as f64;
        let acc = clean_accuracy(&model, &dataset[..probe_n])?;
        if acc >= hyper.stop_acc && epoch + 1 >= 6 {
            break;
        }
    }
    if !model.is_finite() {
        return Err(VitiError::Training("non-finite weights after training".into()));
    }
    Ok(model)
}

/// Mean training loss of the model on a clean sample set (diagnostic).
pub fn mean_loss(model: &Model, samples: &[QASample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let x0 = crate::runtime::embed_prompt(model, &s.tokens)?;
        let (_, cache) = forward_cached(model, &x0)?;
        total -= ((cache.probs[s.answer as usize]) as f64 + 1e-12).ln();
    }
    Ok(total / samples.len() as f64)
}
