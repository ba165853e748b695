//! Cell-level metrics, branch-level misclassification counts, and the
//! ad-hoc global-threshold baseline the tree model is compared against.

use std::collections::BTreeSet;

use crate::error::Result;
use crate::lineage::{CellId, LineageTree, Topology};
use crate::scoring::{quantile_sorted, ScoreTree};
use crate::synth::GroundTruth;

/// Cell-level confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// TPR, FPR and PPV; PPV is absent when nothing was predicted positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub ppv: Option<f64>,
}

pub fn confusion(
    predicted: &BTreeSet<CellId>,
    expressing: &BTreeSet<CellId>,
    universe: &[CellId],
) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for cell in universe {
        match (predicted.contains(cell), expressing.contains(cell)) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    c
}

impl ConfusionCounts {
    pub fn metrics(&self) -> CellMetrics {
        let pos = self.true_pos + self.false_neg;
        let neg = self.false_pos + self.true_neg;
        let predicted = self.true_pos + self.false_pos;
        CellMetrics {
            tpr: if pos == 0 {
                0.0
            } else {
                self.true_pos as f64 / pos as f64
            },
            fpr: if neg == 0 {
                0.0
            } else {
                self.false_pos as f64 / neg as f64
            },
            ppv: (predicted > 0).then(|| self.true_pos as f64 / predicted as f64),
        }
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Cell-level TPR/FPR/PPV of a predicted expressing set.
pub fn cell_metrics(
    predicted: &BTreeSet<CellId>,
    truth: &GroundTruth,
    universe: &[CellId],
) -> CellMetrics {
    let expressing: BTreeSet<CellId> = truth.expressing.iter().cloned().collect();
    confusion(predicted, &expressing, universe).metrics()
}

/// The ad-hoc baseline: flag every cell whose score strictly exceeds one
/// global quantile of all cell scores in the file.
pub fn apm_baseline(tree: &LineageTree, threshold_quantile: f64) -> Result<Vec<CellId>> {
    let scored = ScoreTree::from_lineage(tree)?;
    Ok(apm_baseline_scores(&scored, threshold_quantile))
}

pub fn apm_baseline_scores(tree: &ScoreTree, threshold_quantile: f64) -> Vec<CellId> {
    let mut sorted = tree.scores();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let threshold = quantile_sorted(&sorted, threshold_quantile);
    (0..tree.len())
        .filter(|&ix| tree.score_ix(ix) > threshold)
        .map(|ix| tree.topology().name(ix).clone())
        .collect()
}

/// True when the subtrees rooted at the two cells share any node, i.e. one
/// root is an ancestor of the other or they coincide.
pub fn subtrees_intersect(topo: &Topology, a: usize, b: usize) -> bool {
    let ancestor_or_eq = |top: usize, mut below: usize| loop {
        if top == below {
            return true;
        }
        match topo.parent_ix(below) {
            Some(p) => below = p,
            None => return false,
        }
    };
    ancestor_or_eq(a, b) || ancestor_or_eq(b, a)
}

/// Branch-level classification tally for one tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BranchTally {
    pub detected: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl BranchTally {
    pub fn false_total(&self) -> usize {
        self.false_pos + self.false_neg
    }

    pub fn add(&mut self, other: &BranchTally) {
        self.detected += other.detected;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }
}

/// Classify each detected branch (root, accepted) against the truth: a
/// detection is true when its node set intersects some true branch's
/// node set.
pub fn branch_tally(
    topo: &Topology,
    detected: &[(CellId, bool)],
    truth: &GroundTruth,
) -> Result<BranchTally> {
    let mut tally = BranchTally {
        detected: detected.len(),
        ..Default::default()
    };
    let true_roots: Vec<usize> = truth
        .branch_roots
        .iter()
        .map(|r| topo.lookup(r))
        .collect::<Result<_>>()?;
    for (root, accepted) in detected {
        let ix = topo.lookup(root)?;
        let is_true = true_roots.iter().any(|&t| subtrees_intersect(topo, t, ix));
        match (*accepted, is_true) {
            (true, false) => tally.false_pos += 1,
            (false, true) => tally.false_neg += 1,
            _ => {}
        }
    }
    Ok(tally)
}

/// Tallies stratified by the number of true branches (0 through 4+).
#[derive(Debug, Clone, Default)]
pub struct StratifiedTally {
    pub strata: [BranchTally; 5],
}

pub const STRATUM_NAMES: [&str; 5] = ["None", "One", "Two", "Three", "Four"];

impl StratifiedTally {
    pub fn record(&mut self, true_branches: usize, tally: &BranchTally) {
        self.strata[true_branches.min(4)].add(tally);
    }

    pub fn overall(&self) -> BranchTally {
        let mut total = BranchTally::default();
        for s in &self.strata {
            total.add(s);
        }
        total
    }
}
