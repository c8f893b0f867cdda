//! Binned plug-in mutual information with quantile bins and a bootstrap
//! confidence interval.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VitiError};
use crate::linalg::Rng;

/// Point estimate with bootstrap interval, in nats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MIEstimate {
    pub value: f64,
    pub estimator: String,
    pub bins: usize,
    pub n_samples: usize,
    /// Percentile bootstrap interval (2.5%, 97.5%) from 200 resamples.
    pub bootstrap_ci: (f64, f64),
    /// Set when an input column was constant; the estimate is pinned to 0.
    pub degenerate: bool,
}

impl MIEstimate {
    /// Width of the бootstrap interval, used as the comparison tolerance.
    pub fn ci_width(&self) -> f64 {
        self.bootstrap_ci.1 - self.bootstrap_ci.0
    }
}

/// Equal-mass (quantile) bin labels: sample at sort-rank r lands in bin
/// `floor(r * bins / n)`. Invariant under strictly monotone relabeling.
fn quantile_bins(xs: &[f64], bins: usize) -> Vec<usize> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap().then(a.cmp(&b)));
    let mut labels = vec![0usize; n];
    for (rank, &idx) in order.iter().enumerate() {
        labels[idx] = rank * bins / n;
    }
    labels
}

/// Plug-in MI of two discrete label sequences, with an occupied-cell
/// Miller-Madow bias correction.
fn mi_of_labels(xb: &[usize], yb: &[usize], bins: usize) -> f64 {
    let n = xb.len();
    let mut joint = vec![0u32; bins * bins];
    let mut px = vec![0u32; bins];
    let mut py = vec![0u32; bins];
    for (&a, &b) in xb.iter().zip(yb.iter()) {
        joint[a * bins + b] += 1;
        px[a] += 1;
        py[b] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    let mut k_joint = 0usize;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            if c == 0 {
                continue;
            }
            k_joint += 1;
            let pxy = c as f64 / nf;
            let indep = (px[a] as f64 / nf) * (py[b] as f64 / nf);
            mi += pxy * (pxy / indep).ln();
        }
    }
    let k_x = px.iter().filter(|&&c| c > 0).count();
    let k_y = py.iter().filter(|&&c| c > 0).count();
    // Miller-Madow for MI: subtract (K_xy - K_x - K_y + 1) / (2n)
    mi - (k_joint as f64 - k_x as f64 - k_y as f64 + 1.0) / (2.0 * nf)
}

/// Binned plug-in mutual information between two scalar samples.
///
/// Requires `n >= 30 * bins` paired samples. A constant column is a
/// degenerate distribution: the estimate is 0 with an empty interval.
pub fn mi_binned(xs: &[f64], ys: &[f64], bins: usize, seed: u64) -> Result<MIEstimate> {
    if xs.len() != ys.len() {
        return Err(VitiError::Shape(format!(
            "mi_binned sample lengths {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if bins < 2 {
        return Err(VitiError::config("bins", "need at least 2 bins"));
    }
    let n = xs.len();
    if n < 30 * bins {
        return Err(VitiError::config(
            "n_samples",
            format!("{n} samples for {bins} bins; need at least {}", 30 * bins),
        ));
    }
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Ok(MIEstimate {
            value: 0.0,
            estimator: "binned-plugin".into(),
            bins,
            n_samples: n,
            bootstrap_ci: (0.0, 0.0),
            degenerate: true,
        });
    }
    let xb = quantile_bins(xs, bins);
    let yb = quantile_bins(ys, bins);
    let value = mi_of_labels(&xb, &yb, bins);

    const RESAMPLES: usize = 200;
    let mut rng = Rng::new(seed);
    let mut boot = Vec::with_capacity(RESAMPLES);
    let mut rx = vec![0usize; n];
    let mut ry = vec![0usize; n];
    for _ in 0..RESAMPLES {
        for i in 0..n {
            let j = rng.below(0, n as u64) as usize;
            rx[i] = xb[j];
            ry[i] = yb[j];
        }
        boot.push(mi_of_labels(&rx, &ry, bins));
    }
    boot.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = boot[(RESAMPLES as f64 * 0.025) as usize];
    let hi = boot[((RESAMPLES as f64 * 0.975) as usize).min(RESAMPLES - 1)];
    Ok(MIEstimate {
        value,
        estimator: "binned-plugin".into(),
        bins,
        n_samples: n,
        bootstrap_ci: (lo, hi),
        degenerate: false,
    })
}
