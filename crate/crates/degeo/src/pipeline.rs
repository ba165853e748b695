//! End-to-end orchestration shared by the command-line tool and the
//! benchmark harnesses: classifier training data collection, threshold
//! selection, and the detect-then-refine flow for a single file.

use rayon::prelude::*;

use crate::detector::{
    detect_branches, extract_features, BranchFeatures, DetectOptions, DetectOutcome, StopReason,
    StoppingRule,
};
use crate::error::{Error, Result};
use crate::eval::subtrees_intersect;
use crate::lineage::LineageTree;
use crate::refine::{fit_noise, refine_onsets, refine_whole_tree, OnsetReport};
use crate::sampler::{derive_seed, fit_with_candidates, ChainConfig, FitOptions};
use crate::scoring::ScoreTree;
use crate::svr::{SvrConfig, SvrModel};
use crate::synth::GroundTruth;
use crate::{detector, synth};

/// Run the fit-delete loop with oracle labels: keep deleting while the
/// detected branch overlaps a true one, stop at the first miss. Every
/// detection becomes one labelled feature row.
pub fn oracle_rows_for_tree(
    tree: &ScoreTree,
    truth: &GroundTruth,
    chain: &ChainConfig,
) -> Result<Vec<(BranchFeatures, bool)>> {
    let scores = tree.scores();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let scale = var.sqrt();
    if !(scale > 0.0) {
        return Err(Error::Numerical(
            "constant scores in training tree".to_string(),
        ));
    }
    let true_roots: Vec<usize> = truth
        .branch_roots
        .iter()
        .map(|r| tree.topology().lookup(r))
        .collect::<Result<_>>()?;

    let mut working = tree.clone();
    let mut rows = Vec::new();
    for round in 0u64.. {
        let candidates = working.candidate_set_ix();
        if candidates.is_empty() {
            break;
        }
        let opts = FitOptions {
            chain: ChainConfig {
                rng_seed: derive_seed(chain.rng_seed, round),
                ..chain.clone()
            },
            hyper: None,
            scale: Some(scale),
        };
        let fit = fit_with_candidates(&working, &candidates, &opts)?;
        let features = extract_features(&fit, &working)?;
        // Truth roots live on the original topology; compare there.
        let fit_ix_orig = tree.topology().lookup(&fit.m_star)?;
        let is_true = true_roots
            .iter()
            .any(|&t| subtrees_intersect(tree.topology(), t, fit_ix_orig));
        rows.push((features, is_true));
        if !is_true {
            break;
        }
        working = working.without_branch(fit.m_star_ix)?;
    }
    Ok(rows)
}

/// Labelled rows over a batch of trees, one independent seed stream each.
pub fn collect_training_rows(
    trees: &[(ScoreTree, GroundTruth)],
    chain: &ChainConfig,
) -> Result<Vec<(BranchFeatures, bool)>> {
    let per_tree: Vec<Result<Vec<(BranchFeatures, bool)>>> = trees
        .par_iter()
        .enumerate()
        .map(|(i, (tree, truth))| {
            let chain = ChainConfig {
                rng_seed: derive_seed(chain.rng_seed, 0x5452_0000 + i as u64),
                ..chain.clone()
            };
            oracle_rows_for_tree(tree, truth, &chain)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_tree {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Candidate acceptance thresholds: 0.05 through 0.50.
pub fn threshold_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) * 0.05).collect()
}

/// Pick the grid threshold minimizing the false classification rate over
/// labelled rows; ties go to the smallest threshold.
pub fn select_threshold(model: &SvrModel, rows: &[(BranchFeatures, bool)]) -> (f64, f64) {
    let outputs: Vec<(f64, bool)> = rows
        .iter()
        .map(|(f, l)| (detector::svr_predict(model, f), *l))
        .collect();
    let mut best = (threshold_grid()[0], f64::INFINITY);
    for threshold in threshold_grid() {
        let errors = outputs
            .iter()
            .filter(|(o, l)| (*o >= threshold) != *l)
            .count();
        let rate = errors as f64 / outputs.len().max(1) as f64;
        if rate < best.1 {
            best = (threshold, rate);
        }
    }
    best
}

/// A trained classifier with its selected threshold and training rows.
pub struct TrainedClassifier {
    pub model: SvrModel,
    pub threshold: f64,
    pub training_error_rate: f64,
    pub rows: Vec<(BranchFeatures, bool)>,
}

/// Train the default classifier on mimic trees generated from the default
/// template.
pub fn train_classifier(
    n_trees: usize,
    seed: u64,
    template_seed: u64,
    svr_config: &SvrConfig,
    chain: &ChainConfig,
) -> Result<TrainedClassifier> {
    let template = synth::default_score_template(template_seed);
    let trees = synth::gen_mimic_score_trees(&template, n_trees, seed)?;
    let rows = collect_training_rows(&trees, chain)?;
    let model = detector::svr_train(&rows, svr_config)?;
    let (threshold, training_error_rate) = select_threshold(&model, &rows);
    Ok(TrainedClassifier {
        model,
        threshold,
        training_error_rate,
        rows,
    })
}

/// Full single-file run: score, detect, and refine onsets when the input
/// carries raw series.
pub struct FileRun {
    pub outcome: DetectOutcome,
    pub report: Option<OnsetReport>,
}

pub fn detect_and_refine(
    lineage: &LineageTree,
    stopping: &StoppingRule<'_>,
    opts: &DetectOptions,
) -> Result<FileRun> {
    let tree = ScoreTree::from_lineage(lineage)?;
    let outcome = detect_branches(&tree, stopping, opts)?;
    let accepted = outcome.accepted_roots();
    let report = if accepted.is_empty() {
        None
    } else {
        let noise = fit_noise(&tree, &accepted)?;
        Some(refine_onsets(&tree, &accepted, &noise)?)
    };
    Ok(FileRun { outcome, report })
}

/// Step-4-only fallback for files where expression is too broad for the
/// change-point background assumption.
pub fn refine_only(lineage: &LineageTree) -> Result<OnsetReport> {
    let tree = ScoreTree::from_lineage(lineage)?;
    refine_whole_tree(&tree)
}

/// Cells predicted expressing by a detection outcome: strict descendants
/// of every accepted change point.
pub fn predicted_cells(tree: &ScoreTree, outcome: &DetectOutcome) -> Result<Vec<crate::CellId>> {
    let topo = tree.topology();
    let mut out = std::collections::BTreeSet::new();
    for branch in outcome.accepted() {
        let ix = topo.lookup(&branch.m_star)?;
        for d in topo.subtree_ix(ix).into_iter().skip(1) {
            out.insert(topo.name(d).clone());
        }
    }
    Ok(out.into_iter().collect())
}

/// Convenience wrapper asserting a posterior fit still converges when run
/// standalone; used by convergence surveys.
pub fn fit_converges(tree: &ScoreTree, chain: &ChainConfig) -> bool {
    let opts = FitOptions {
        chain: chain.clone(),
        hyper: None,
        scale: None,
    };
    match fit_with_candidates(tree, &tree.candidate_set_ix(), &opts) {
        Ok(fit) => fit
            .rhats
            .iter()
            .all(|(_, r)| (r - 1.0).abs() < chain.rhat_tolerance),
        Err(_) => false,
    }
}

/// True when a detection loop ended for a benign reason.
pub fn finished_cleanly(outcome: &DetectOutcome) -> bool {
    matches!(
        outcome.stop,
        StopReason::Rejected | StopReason::CandidatesExhausted
    )
}

/// Branch-level tallies against ground truth for one outcome.
pub fn tally_outcome(
    tree: &ScoreTree,
    outcome: &DetectOutcome,
    truth: &GroundTruth,
) -> Result<crate::eval::BranchTally> {
    let detected: Vec<(crate::CellId, bool)> = outcome
        .branches
        .iter()
        .map(|b| (b.m_star.clone(), b.accepted))
        .collect();
    crate::eval::branch_tally(tree.topology(), &detected, truth)
}

/// How many true branches an outcome's accepted set covers (node-set
/// intersection matching).
pub fn covered_true_branches(
    tree: &ScoreTree,
    outcome: &DetectOutcome,
    truth: &GroundTruth,
) -> Result<usize> {
    let topo = tree.topology();
    let accepted: Vec<usize> = outcome
        .accepted()
        .map(|b| topo.lookup(&b.m_star))
        .collect::<Result<_>>()?;
    let mut covered = 0;
    for root in &truth.branch_roots {
        let t = topo.lookup(root)?;
        if accepted.iter().any(|&a| subtrees_intersect(topo, t, a)) {
            covered += 1;
        }
    }
    Ok(covered)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_grid_covers_expected_range() {
        let grid = threshold_grid();
        assert_eq!(grid.len(), 10);
        assert!((grid[0] - 0.05).abs() < 1e-12);
        assert!((grid[9] - 0.50).abs() < 1e-12);
        assert!(grid.windows(2).all(|w| (w[1] - w[0] - 0.05).abs() < 1e-12));
    }

    #[test]
    fn select_threshold_prefers_smallest_on_ties() {
        // A model with no support vectors outputs its bias everywhere; set
        // outputs so that every grid point above it classifies all rows as
        // negative.
        let model = SvrModel {
            feature_names: detector::FEATURE_NAMES
                .iter()
                .map(|s| s.to_string())
                .collect(),
            means: vec![0.0; 7],
            scales: vec![1.0; 7],
            support_vectors: vec![],
            coefficients: vec![],
            bias: 0.0,
            bandwidth: 1.0,
            epsilon: 0.1,
            c: 10.0,
        };
        let f = BranchFeatures {
            beta_hat: 0.0,
            n_branch_cells: 1.0,
            n_pairs: 1.0,
            posterior_prob_m: 0.5,
            mean_elevation: 0.0,
            rho_hat: 0.5,
            frac_extreme: 0.0,
        };
        let rows = vec![(f, false), (f, false)];
        let (threshold, rate) = select_threshold(&model, &rows);
        assert_eq!(rate, 0.0);
        assert!(
            (threshold - 0.05).abs() < 1e-12,
            "smallest tied threshold wins"
        );
    }
}
