//! The change-point-in-tree probability model.
//!
//! Scores outside the expression branch are i.i.d. N(mu, sigma1_sq). Inside
//! the branch, each sibling pair is bivariate normal around the mother's
//! score plus a lifetime-proportional drift beta, with common variance
//! sigma2_sq and correlation rho. The change-point cell itself stays in the
//! background set: the topmost pairs condition on its score, so it needs the
//! background marginal.
//!
//! A mother with a single observed child contributes the marginal
//! N(x0 + beta * t, sigma2_sq) instead of the bivariate term.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreTree;

/// Prior hyperparameters.
///
/// `g,h` and `a,b` are inverse-gamma shape/scale for the background and
/// pair variances, `r,s` the normal mean/variance for the growth rate,
/// `p,q` the normal mean/variance for the background mean, `u,v` the beta
/// shapes for the sibling correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub g: f64,
    pub h: f64,
    pub a: f64,
    pub b: f64,
    pub r: f64,
    pub s: f64,
    pub p: f64,
    pub q: f64,
    pub u: f64,
    pub v: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("g", self.g),
            ("h", self.h),
            ("a", self.a),
            ("b", self.b),
            ("s", self.s),
            ("q", self.q),
            ("u", self.u),
            ("v", self.v),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Argument(format!(
                    "hyperparameter {name} must be positive, got {value}"
                )));
            }
        }
        if !self.r.is_finite() || !self.p.is_finite() {
            return Err(Error::Argument(
                "hyperparameters r and p must be finite".to_string(),
            ));
        }
        Ok(())
    }

    /// Weakly informative defaults for scores standardized to unit variance:
    /// the variance priors sit at the data scale and the mean prior at the
    /// sample median.
    pub fn data_driven(scores: &[f64]) -> Hyperparams {
        let n = scores.len().max(1) as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = if scores.len() > 1 {
            scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            1.0
        };
        let var = if var > 0.0 { var } else { 1.0 };
        let mut sorted = scores.to_vec();
        sorted.sort_by(|x, y| x.total_cmp(y));
        let median = if sorted.is_empty() {
            0.0
        } else if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        Hyperparams {
            g: 2.0,
            h: var,
            a: 2.0,
            b: var,
            r: 0.0,
            s: 100.0 * var,
            p: median,
            q: 100.0 * var,
            u: 2.0,
            v: 2.0,
        }
    }

    /// Parse a `key=value` configuration. Lines starting with `#` and blank
    /// lines are ignored; every one of the ten keys must appear.
    pub fn from_key_value_str(text: &str) -> Result<Hyperparams> {
        let mut map: BTreeMap<&str, f64> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected key=value", lineno + 1)))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: bad value: {e}", lineno + 1)))?;
            map.insert(
                match key.trim() {
                    "g" => "g",
                    "h" => "h",
                    "a" => "a",
                    "b" => "b",
                    "r" => "r",
                    "s" => "s",
                    "p" => "p",
                    "q" => "q",
                    "u" => "u",
                    "v" => "v",
                    other => {
                        return Err(Error::Format(format!(
                            "line {}: unknown key `{other}`",
                            lineno + 1
                        )))
                    }
                },
                value,
            );
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("missing key `{k}`")))
        };
        let hyper = Hyperparams {
            g: get("g")?,
            h: get("h")?,
            a: get("a")?,
            b: get("b")?,
            r: get("r")?,
            s: get("s")?,
            p: get("p")?,
            q: get("q")?,
            u: get("u")?,
            v: get("v")?,
        };
        hyper.validate()?;
        Ok(hyper)
    }

    pub fn to_key_value_string(&self) -> String {
        format!(
            "g={}\nh={}\na={}\nb={}\nr={}\ns={}\np={}\nq={}\nu={}\nv={}\n",
            self.g, self.h, self.a, self.b, self.r, self.s, self.p, self.q, self.u, self.v
        )
    }
}

/// The six unknowns of the model. The change point is stored as a node
/// index into the tree the state was fitted on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelState {
    pub m: usize,
    pub mu: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub beta: f64,
    pub rho: f64,
}

impl ModelState {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1_sq > 0.0) || !(self.sigma2_sq > 0.0) {
            return Err(Error::Argument("variances must be positive".to_string()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Argument(format!(
                "rho must lie in (0,1), got {}",
                self.rho
            )));
        }
        if !self.mu.is_finite() || !self.beta.is_finite() {
            return Err(Error::Argument("mu and beta must be finite".to_string()));
        }
        Ok(())
    }
}

/// One mother-conditioned sibling group inside the branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiblingPair {
    pub mother_score: f64,
    /// (score, lifetime) of the first child.
    pub first: (f64, f64),
    /// Second child, absent when only one was observed.
    pub second: Option<(f64, f64)>,
}

/// Cells split by a choice of change point: background cells (the change
/// point included) and the sibling groups covering its strict descendants.
#[derive(Debug, Clone)]
pub struct BranchPartition {
    pub background: Vec<usize>,
    pub pairs: Vec<SiblingPair>,
}

impl BranchPartition {
    pub fn n_full_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.second.is_some()).count()
    }

    pub fn n_singles(&self) -> usize {
        self.pairs.iter().filter(|p| p.second.is_none()).count()
    }

    pub fn branch_cell_count(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| if p.second.is_some() { 2 } else { 1 })
            .sum()
    }
}

/// Split a tree by the change point `m_ix`: strict descendants become
/// branch cells grouped by mother, everything else is background.
pub fn partition(tree: &ScoreTree, m_ix: usize) -> Result<BranchPartition> {
    let topo = tree.topology();
    if m_ix >= topo.len() {
        return Err(Error::UnknownCell(format!("node index {m_ix}")));
    }
    let subtree = topo.subtree_ix(m_ix);
    let mut in_branch = vec![false; topo.len()];
    for &ix in &subtree[1..] {
        in_branch[ix] = true;
    }
    let background = (0..topo.len()).filter(|&i| !in_branch[i]).collect();
    let mut pairs = Vec::new();
    for &mother in &subtree {
        let kids = topo.children_ix(mother);
        if kids.is_empty() {
            continue;
        }
        let child = |ix: usize| (tree.score_ix(ix), tree.lifetime_ix(ix));
        pairs.push(SiblingPair {
            mother_score: tree.score_ix(mother),
            first: child(kids[0]),
            second: kids.get(1).map(|&c| child(c)),
        });
    }
    Ok(BranchPartition { background, pairs })
}

/// Residuals of one group under (beta): child score minus mother score
/// minus beta times lifetime.
fn residuals(pair: &SiblingPair, beta: f64) -> (f64, Option<f64>) {
    let d1 = pair.first.0 - pair.mother_score - beta * pair.first.1;
    let d2 = pair.second.map(|(x, t)| x - pair.mother_score - beta * t);
    (d1, d2)
}

/// The branch quadratic form J. Full pairs contribute
/// `d1^2 + d2^2 - 2 rho d1 d2`; single-child groups contribute
/// `(1 - rho^2) d^2` so that `J / (2 (1 - rho^2) sigma2_sq)` is exactly the
/// branch exponent with singles entering at their marginal variance.
pub fn j_statistic(partition: &BranchPartition, beta: f64, rho: f64) -> f64 {
    let mut j = 0.0;
    for pair in &partition.pairs {
        let (d1, d2) = residuals(pair, beta);
        match d2 {
            Some(d2) => j += d1 * d1 + d2 * d2 - 2.0 * rho * d1 * d2,
            None => j += (1.0 - rho * rho) * d1 * d1,
        }
    }
    j
}

/// The linear statistic K entering the growth-rate conditional.
pub fn k_statistic(partition: &BranchPartition, rho: f64, sigma2_sq: f64, r: f64, s: f64) -> f64 {
    let mut k = r / s;
    for pair in &partition.pairs {
        let e1 = pair.first.0 - pair.mother_score;
        let t1 = pair.first.1;
        match pair.second {
            Some((x2, t2)) => {
                let e2 = x2 - pair.mother_score;
                k +=
                    ((t1 - rho * t2) * e1 + (t2 - rho * t1) * e2) / ((1.0 - rho * rho) * sigma2_sq);
            }
            None => k += t1 * e1 / sigma2_sq,
        }
    }
    k
}

/// Precision of the growth-rate conditional: `1/s` plus the lifetime
/// quadratic form of every group.
pub fn beta_precision(partition: &BranchPartition, rho: f64, sigma2_sq: f64, s: f64) -> f64 {
    let mut d = 1.0 / s;
    for pair in &partition.pairs {
        let t1 = pair.first.1;
        match pair.second {
            Some((_, t2)) => {
                d += (t1 * t1 + t2 * t2 - 2.0 * rho * t1 * t2) / ((1.0 - rho * rho) * sigma2_sq)
            }
            None => d += t1 * t1 / sigma2_sq,
        }
    }
    d
}

/// Sums entering the rho conditional: with `A = sum(d1^2 + d2^2)` and
/// `B = sum(d1 d2)` over full pairs, the paired J at correlation rho is
/// `A - 2 rho B`. Singles do not involve rho.
pub fn rho_pair_sums(partition: &BranchPartition, beta: f64) -> (f64, f64) {
    let mut a = 0.0;
    let mut b = 0.0;
    for pair in &partition.pairs {
        let (d1, d2) = residuals(pair, beta);
        if let Some(d2) = d2 {
            a += d1 * d1 + d2 * d2;
            b += d1 * d2;
        }
    }
    (a, b)
}

const LN_2PI: f64 = 1.8378770664093453;

/// Log density (up to the prior normalizing constants) of the joint
/// posterior at `state`: priors, background Gaussian product, and the
/// branch pair product.
pub fn log_posterior(state: &ModelState, tree: &ScoreTree, hyper: &Hyperparams) -> Result<f64> {
    state.validate()?;
    hyper.validate()?;
    let part = partition(tree, state.m)?;
    let mut lp = 0.0;

    // Priors, without their state-independent normalizers.
    lp += (-hyper.g - 1.0) * state.sigma1_sq.ln() - hyper.h / state.sigma1_sq;
    lp += (-hyper.a - 1.0) * state.sigma2_sq.ln() - hyper.b / state.sigma2_sq;
    lp += -(state.beta - hyper.r).powi(2) / (2.0 * hyper.s);
    lp += -(state.mu - hyper.p).powi(2) / (2.0 * hyper.q);
    lp += (hyper.u - 1.0) * state.rho.ln() + (hyper.v - 1.0) * (1.0 - state.rho).ln();

    // Background cells.
    let n_bg = part.background.len() as f64;
    let ssr: f64 = part
        .background
        .iter()
        .map(|&ix| (tree.score_ix(ix) - state.mu).powi(2))
        .sum();
    lp += -0.5 * n_bg * (LN_2PI + state.sigma1_sq.ln()) - ssr / (2.0 * state.sigma1_sq);

    // Branch pair groups.
    let n_full = part.n_full_pairs() as f64;
    let n_single = part.n_singles() as f64;
    let one_minus_rho_sq = 1.0 - state.rho * state.rho;
    let j = j_statistic(&part, state.beta, state.rho);
    lp += -n_full * (LN_2PI + 0.5 * one_minus_rho_sq.ln() + state.sigma2_sq.ln());
    lp += -0.5 * n_single * (LN_2PI + state.sigma2_sq.ln());
    lp += -j / (2.0 * one_minus_rho_sq * state.sigma2_sq);

    Ok(lp)
}
