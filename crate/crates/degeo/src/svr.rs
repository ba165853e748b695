//! Epsilon-insensitive support vector regression with a radial basis
//! kernel, trained by sequential minimal optimization.
//!
//! Feature columns are standardized before training and the same
//! standardization constants travel with the model, so predictions are
//! invariant to affine rescaling of raw feature columns. Working-set
//! selection is deterministic (maximal violating pair with a second-order
//! gain for the partner), so retraining on permuted rows reproduces the
//! same function up to float summation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training controls. `bandwidth` falls back to the median pairwise
/// distance between standardized rows when unset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvrConfig {
    pub epsilon: f64,
    pub c: f64,
    /// KKT violation tolerance for stopping.
    pub tol: f64,
    pub bandwidth: Option<f64>,
}

impl Default for SvrConfig {
    fn default() -> Self {
        // 0/1 targets tie many gradients, so a loose gap lets permuted row
        // orders stop at different near-optima; a tight default keeps the
        // trained function reproducible.
        SvrConfig {
            epsilon: 0.1,
            c: 10.0,
            tol: 1e-8,
            bandwidth: None,
        }
    }
}

/// A trained model: standardization constants, support vectors (already
/// standardized), their coefficients, bias, and the kernel bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvrModel {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub support_vectors: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub bandwidth: f64,
    pub epsilon: f64,
    pub c: f64,
}

impl SvrModel {
    /// Deterministic output for a raw (unstandardized) feature vector.
    pub fn predict(&self, features: &[f64]) -> f64 {
        assert_eq!(
            features.len(),
            self.means.len(),
            "feature vector has {} entries, model expects {}",
            features.len(),
            self.means.len()
        );
        let z: Vec<f64> = features
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        let mut f = self.bias;
        for (sv, w) in self.support_vectors.iter().zip(&self.coefficients) {
            f += w * rbf(&z, sv, self.bandwidth);
        }
        f
    }

    pub fn save_json<W: std::io::Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)
            .map_err(|e| Error::Format(format!("cannot serialize model: {e}")))
    }

    pub fn load_json<R: std::io::Read>(reader: R) -> Result<SvrModel> {
        serde_json::from_reader(reader)
            .map_err(|e| Error::Format(format!("cannot read model: {e}")))
    }
}

fn rbf(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

fn standardize(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut means = vec![0.0; dim];
    for row in rows {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    let mut scales = vec![0.0; dim];
    for row in rows {
        for ((s, m), x) in scales.iter_mut().zip(&means).zip(row) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut scales {
        *s = s.sqrt();
        if *s == 0.0 {
            *s = 1.0; // constant column: centred to zero, scale moot
        }
    }
    let standardized = rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(means.iter().zip(&scales))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
        .collect();
    (means, scales, standardized)
}

fn median_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let m = if dists.is_empty() {
        0.0
    } else {
        dists[dists.len() / 2]
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Train on raw feature rows and numeric targets.
pub fn train(
    rows: &[Vec<f64>],
    targets: &[f64],
    feature_names: &[&str],
    config: &SvrConfig,
) -> Result<SvrModel> {
    if rows.len() < 2 {
        return Err(Error::Training(format!(
            "need at least 2 rows, got {}",
            rows.len()
        )));
    }
    if rows.len() != targets.len() {
        return Err(Error::Training(format!(
            "{} rows but {} targets",
            rows.len(),
            targets.len()
        )));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Training("ragged feature rows".to_string()));
    }
    if dim != feature_names.len() {
        return Err(Error::Training(format!(
            "{dim} features but {} names",
            feature_names.len()
        )));
    }
    let lo = targets.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Training(
            "degenerate single-valued targets".to_string(),
        ));
    }

    let (means, scales, z) = standardize(rows);
    let bandwidth = config
        .bandwidth
        .unwrap_or_else(|| median_pairwise_distance(&z));
    if !(bandwidth > 0.0) {
        return Err(Error::Training(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }

    let n = z.len();
    let mut kernel = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let k = rbf(&z[i], &z[j], bandwidth);
            kernel[i * n + j] = k;
            kernel[j * n + i] = k;
        }
    }

    let (weights, bias) = smo(&kernel, targets, config.epsilon, config.c, config.tol, n)?;

    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for (i, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            support_vectors.push(z[i].clone());
            coefficients.push(*w);
        }
    }
    Ok(SvrModel {
        feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
        means,
        scales,
        support_vectors,
        coefficients,
        bias,
        bandwidth,
        epsilon: config.epsilon,
        c: config.c,
    })
}

/// Sequential minimal optimization on the epsilon-SVR dual.
///
/// Each sample carries an up coefficient (pushes the fit up) and a down
/// coefficient; `w_i` is their difference. The maximal violating pair is
/// updated until the duality gap drops under `tol`.
fn smo(
    kernel: &[f64],
    targets: &[f64],
    epsilon: f64,
    c: f64,
    tol: f64,
    n: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut alpha_up = vec![0.0f64; n];
    let mut alpha_dn = vec![0.0f64; n];
    // f_tilde = sum_j w_j K_ij, maintained incrementally.
    let mut f = vec![0.0f64; n];
    let tau = 1e-12;
    let max_steps = 100_000.max(500 * n);

    for _step in 0..max_steps {
        // gmax over coordinates that may push w up, gmin over those that may
        // push w down. gamma_up = y - f - eps, gamma_dn = y - f + eps.
        let mut gmax = f64::NEG_INFINITY;
        let mut gmin = f64::INFINITY;
        let mut a = usize::MAX; // sample index of the max violator
        let mut a_up = true; // which coordinate of sample a
        for i in 0..n {
            let up = targets[i] - f[i] - epsilon;
            let dn = targets[i] - f[i] + epsilon;
            if alpha_up[i] < c && up > gmax {
                gmax = up;
                a = i;
                a_up = true;
            }
            if alpha_dn[i] > 0.0 && dn > gmax {
                gmax = dn;
                a = i;
                a_up = false;
            }
            if alpha_up[i] > 0.0 && up < gmin {
                gmin = up;
            }
            if alpha_dn[i] < c && dn < gmin {
                gmin = dn;
            }
        }
        if gmax - gmin <= tol {
            return Ok(finish(&alpha_up, &alpha_dn, gmax, gmin));
        }

        // Partner: maximize the second-order gain among w-down-feasible
        // coordinates.
        let gamma_a = gmax;
        let kaa = kernel[a * n + a];
        let mut best_gain = f64::NEG_INFINITY;
        let mut b = usize::MAX;
        let mut b_up = true;
        for j in 0..n {
            let kab = kernel[a * n + j];
            let mut eta = kaa + kernel[j * n + j] - 2.0 * kab;
            if eta <= 0.0 {
                eta = tau;
            }
            let up = targets[j] - f[j] - epsilon;
            let dn = targets[j] - f[j] + epsilon;
            if alpha_up[j] > 0.0 && gamma_a - up > 0.0 {
                let gain = (gamma_a - up) * (gamma_a - up) / eta;
                if gain > best_gain {
                    best_gain = gain;
                    b = j;
                    b_up = true;
                }
            }
            if alpha_dn[j] < c && gamma_a - dn > 0.0 {
                let gain = (gamma_a - dn) * (gamma_a - dn) / eta;
                if gain > best_gain {
                    best_gain = gain;
                    b = j;
                    b_up = false;
                }
            }
        }
        if b == usize::MAX {
            return Ok(finish(&alpha_up, &alpha_dn, gmax, gmin));
        }

        let gamma_b = if b_up {
            targets[b] - f[b] - epsilon
        } else {
            targets[b] - f[b] + epsilon
        };
        let mut eta = kaa + kernel[b * n + b] - 2.0 * kernel[a * n + b];
        if eta <= 0.0 {
            eta = tau;
        }
        let mut t = (gamma_a - gamma_b) / eta;
        // Box the step: coordinate a moves w up, b moves w down.
        let room_a = if a_up { c - alpha_up[a] } else { alpha_dn[a] };
        let room_b = if b_up { alpha_up[b] } else { c - alpha_dn[b] };
        t = t.min(room_a).min(room_b);
        if t <= 0.0 {
            return Ok(finish(&alpha_up, &alpha_dn, gmax, gmin));
        }
        if a_up {
            alpha_up[a] += t;
        } else {
            alpha_dn[a] -= t;
        }
        if b_up {
            alpha_up[b] -= t;
        } else {
            alpha_dn[b] += t;
        }
        for i in 0..n {
            f[i] += t * (kernel[a * n + i] - kernel[b * n + i]);
        }
    }
    Err(Error::Training(
        "SMO did not reach the KKT tolerance".to_string(),
    ))
}

fn finish(alpha_up: &[f64], alpha_dn: &[f64], gmax: f64, gmin: f64) -> (Vec<f64>, f64) {
    let weights = alpha_up.iter().zip(alpha_dn).map(|(u, d)| u - d).collect();
    let bias = if gmax.is_finite() && gmin.is_finite() {
        (gmax + gmin) / 2.0
    } else {
        0.0
    };
    (weights, bias)
}
