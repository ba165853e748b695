//! Step 3: iterate fit, classify, delete until a detected branch is
//! rejected.
//!
//! Every fit reports exactly one branch, so detection loops: a trained
//! regression classifier (or the simpler growth-rate rule) decides whether
//! the branch is real expression. Accepted branches are removed from the
//! tree, the candidate set is recomputed, and the search continues; the
//! first rejection stops it. Each accepted branch strictly shrinks the
//! tree, so the loop always terminates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineage::CellId;
use crate::model::{partition, Hyperparams};
use crate::sampler::{
    derive_seed, fit_with_candidates, ChainConfig, FitOptions, FitResult, FittedParams,
};
use crate::scoring::ScoreTree;
use crate::svr::{self, SvrConfig, SvrModel};

/// Default acceptance cut on the classifier output.
pub const DEFAULT_SVR_THRESHOLD: f64 = 0.15;

/// Standard-normal 97.5% quantile used by the extreme-score feature.
pub const Z_975: f64 = 1.959964;

pub const FEATURE_NAMES: [&str; 7] = [
    "beta_hat",
    "n_branch_cells",
    "n_pairs",
    "posterior_prob_m",
    "mean_elevation",
    "rho_hat",
    "frac_extreme",
];

/// Summary of a fitted branch fed to the classifier. `beta_hat` is in
/// standardized score units so models port across files; the remaining
/// features are counts, probabilities, or dimensionless ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchFeatures {
    pub beta_hat: f64,
    pub n_branch_cells: f64,
    pub n_pairs: f64,
    pub posterior_prob_m: f64,
    pub mean_elevation: f64,
    pub rho_hat: f64,
    pub frac_extreme: f64,
}

impl BranchFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.beta_hat,
            self.n_branch_cells,
            self.n_pairs,
            self.posterior_prob_m,
            self.mean_elevation,
            self.rho_hat,
            self.frac_extreme,
        ]
    }
}

/// Compute the seven branch features from a converged fit.
pub fn extract_features(fit: &FitResult, tree: &ScoreTree) -> Result<BranchFeatures> {
    let part = partition(tree, fit.m_star_ix)?;
    let branch: Vec<usize> = tree
        .topology()
        .subtree_ix(fit.m_star_ix)
        .into_iter()
        .skip(1)
        .collect();
    let n_branch = branch.len().max(1) as f64;
    let mean_branch: f64 = branch.iter().map(|&ix| tree.score_ix(ix)).sum::<f64>() / n_branch;
    let sigma1 = fit.params.sigma1_sq.sqrt();
    let cutoff = fit.params.mu + Z_975 * sigma1;
    let n_extreme = branch
        .iter()
        .filter(|&&ix| tree.score_ix(ix) > cutoff)
        .count();
    Ok(BranchFeatures {
        beta_hat: fit.params_std.beta,
        n_branch_cells: branch.len() as f64,
        n_pairs: part.pairs.len() as f64,
        posterior_prob_m: fit.posterior_prob_m,
        mean_elevation: (mean_branch - fit.params.mu) / sigma1,
        rho_hat: fit.params.rho,
        frac_extreme: n_extreme as f64 / n_branch,
    })
}

/// Train the branch classifier on labelled feature rows (true expression
/// coded 1, false coded 0).
pub fn svr_train(rows: &[(BranchFeatures, bool)], config: &SvrConfig) -> Result<SvrModel> {
    if rows.iter().all(|(_, l)| *l) || rows.iter().all(|(_, l)| !*l) {
        return Err(Error::Training(
            "training rows carry a single class".to_string(),
        ));
    }
    let features: Vec<Vec<f64>> = rows.iter().map(|(f, _)| f.to_vec()).collect();
    let targets: Vec<f64> = rows
        .iter()
        .map(|(_, l)| if *l { 1.0 } else { 0.0 })
        .collect();
    svr::train(&features, &targets, &FEATURE_NAMES, config)
}

pub fn svr_predict(model: &SvrModel, features: &BranchFeatures) -> f64 {
    model.predict(&features.to_vec())
}

/// Growth-rate stopping rule: keep searching unless the new branch's rate
/// drops under a third of the mean of previously accepted rates. An empty
/// history always continues.
pub fn beta_criterion(history: &[f64], new_beta: f64) -> bool {
    if history.is_empty() {
        return true;
    }
    let mean = history.iter().sum::<f64>() / history.len() as f64;
    new_beta >= mean / 3.0
}

/// How the detection loop decides to keep or stop.
#[derive(Debug, Clone)]
pub enum StoppingRule<'m> {
    Svr { model: &'m SvrModel, threshold: f64 },
    Beta,
}

/// One reported change point with everything the classifier saw.
#[derive(Debug, Clone)]
pub struct DetectedBranch {
    pub m_star: CellId,
    pub params: FittedParams,
    pub features: BranchFeatures,
    /// Classifier output; absent under the growth-rate rule.
    pub svr_output: Option<f64>,
    pub accepted: bool,
    /// Convergence diagnostics of the fit that produced this branch.
    pub rhats: Vec<(String, f64)>,
    pub converged_at: usize,
}

/// Why the loop stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    /// A detected branch was classified as non-expression.
    Rejected,
    /// No cells remained with an eligible descendant count.
    CandidatesExhausted,
    /// A fit failed to converge; earlier branches are still reported.
    ConvergenceFailure { message: String },
}

#[derive(Debug, Clone)]
pub struct DetectOutcome {
    pub branches: Vec<DetectedBranch>,
    pub stop: StopReason,
}

impl DetectOutcome {
    pub fn accepted(&self) -> impl Iterator<Item = &DetectedBranch> {
        self.branches.iter().filter(|b| b.accepted)
    }

    pub fn accepted_roots(&self) -> Vec<CellId> {
        self.accepted().map(|b| b.m_star.clone()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DetectOptions {
    pub chain: ChainConfig,
    pub hyper: Option<Hyperparams>,
}

/// Run the detection loop on a score tree.
pub fn detect_branches(
    tree: &ScoreTree,
    stopping: &StoppingRule<'_>,
    opts: &DetectOptions,
) -> Result<DetectOutcome> {
    if tree.candidate_set_ix().is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    // One standardization scale for the whole loop so growth rates stay
    // comparable across rounds.
    let scores = tree.scores();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let scale = var.sqrt();
    if !(scale > 0.0) {
        return Err(Error::Numerical(
            "constant scores: nothing to detect".to_string(),
        ));
    }

    let mut working = tree.clone();
    let mut branches = Vec::new();
    let mut accepted_history: Vec<f64> = Vec::new();
    for round in 0u64.. {
        let candidates = working.candidate_set_ix();
        if candidates.is_empty() {
            return Ok(DetectOutcome {
                branches,
                stop: StopReason::CandidatesExhausted,
            });
        }
        let fit_opts = FitOptions {
            chain: ChainConfig {
                rng_seed: derive_seed(opts.chain.rng_seed, round),
                ..opts.chain.clone()
            },
            hyper: opts.hyper.clone(),
            scale: Some(scale),
        };
        let fit = match fit_with_candidates(&working, &candidates, &fit_opts) {
            Ok(f) => f,
            Err(Error::NoConvergence {
                max_iterations,
                rhats,
            }) => {
                return Ok(DetectOutcome {
                    branches,
                    stop: StopReason::ConvergenceFailure {
                        message: format!(
                            "no convergence within {max_iterations} iterations; R-hat {rhats:?}"
                        ),
                    },
                });
            }
            Err(e) => return Err(e),
        };
        let features = extract_features(&fit, &working)?;
        let (svr_output, accepted) = match stopping {
            StoppingRule::Svr { model, threshold } => {
                let out = svr_predict(model, &features);
                (Some(out), out >= *threshold)
            }
            StoppingRule::Beta => (None, beta_criterion(&accepted_history, fit.params.beta)),
        };
        branches.push(DetectedBranch {
            m_star: fit.m_star.clone(),
            params: fit.params,
            features,
            svr_output,
            accepted,
            rhats: fit.rhats.clone(),
            converged_at: fit.converged_at,
        });
        if !accepted {
            return Ok(DetectOutcome {
                branches,
                stop: StopReason::Rejected,
            });
        }
        accepted_history.push(fit.params.beta);
        working = working.without_branch(fit.m_star_ix)?;
    }
    unreachable!("detection loop exits by rejection or exhaustion");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lineage::Topology;
    use crate::sampler::PosteriorSample;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn complete_score_tree(depth: usize) -> ScoreTree {
        let mut names = vec!["ABa".to_string()];
        let mut frontier = vec!["ABa".to_string()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for f in &frontier {
                for s in ["a", "p"] {
                    let child = format!("{f}{s}");
                    names.push(child.clone());
                    next.push(child);
                }
            }
            frontier = next;
        }
        let ids = names.iter().map(|n| CellId::new(n).unwrap()).collect();
        let topo = Topology::from_ids(ids).unwrap();
        let n = topo.len();
        ScoreTree::from_scores(topo, vec![0.0; n], vec![20; n]).unwrap()
    }

    fn noise_tree(depth: usize, seed: u64, sd: f64) -> ScoreTree {
        let mut tree = complete_score_tree(depth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sd).unwrap();
        for ix in 0..tree.len() {
            let v = normal.sample(&mut rng);
            tree.set_score_ix(ix, v);
        }
        tree
    }

    fn plant_branch(tree: &mut ScoreTree, root: &str, beta: f64, seed: u64) {
        let topo = tree.topology().clone();
        let r = topo.lookup(&CellId::new(root).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut order = topo.subtree_ix(r);
        order.sort_by_key(|&ix| topo.name(ix).as_str().len());
        for &mother in &order {
            for &c in topo.children_ix(mother) {
                let v = tree.score_ix(mother) + beta * tree.lifetime_ix(c) + noise.sample(&mut rng);
                tree.set_score_ix(c, v);
            }
        }
    }

    fn fake_fit(tree: &ScoreTree, m_star_ix: usize, params: FittedParams, prob: f64) -> FitResult {
        FitResult {
            m_star: tree.topology().name(m_star_ix).clone(),
            m_star_ix,
            params,
            params_std: params,
            posterior_prob_m: prob,
            rhats: Vec::new(),
            converged_at: 0,
            sample: PosteriorSample {
                chains: vec![],
                first_iteration: 0,
                thinning: 1,
            },
            scale: 1.0,
        }
    }

    #[test]
    fn features_flat_branch_at_mu() {
        let tree = complete_score_tree(3); // all scores 0
        let root = tree
            .topology()
            .lookup(&CellId::new("ABaa").unwrap())
            .unwrap();
        let params = FittedParams {
            mu: 0.0,
            sigma1_sq: 1.0,
            sigma2_sq: 1.0,
            beta: 0.0,
            rho: 0.5,
        };
        let f = extract_features(&fake_fit(&tree, root, params, 1.0), &tree).unwrap();
        assert_abs_diff_eq!(f.mean_elevation, 0.0);
        assert_abs_diff_eq!(f.frac_extreme, 0.0);
        assert_abs_diff_eq!(f.posterior_prob_m, 1.0);
        assert_abs_diff_eq!(f.n_branch_cells, 6.0);
        assert_abs_diff_eq!(f.n_pairs, 3.0);
    }

    #[test]
    fn features_all_extreme_branch() {
        let mut tree = complete_score_tree(3);
        let topo = tree.topology().clone();
        let root = topo.lookup(&CellId::new("ABaa").unwrap()).unwrap();
        for ix in topo.subtree_ix(root).into_iter().skip(1) {
            tree.set_score_ix(ix, 5.0);
        }
        let params = FittedParams {
            mu: 0.0,
            sigma1_sq: 1.0,
            sigma2_sq: 1.0,
            beta: 0.1,
            rho: 0.5,
        };
        let f = extract_features(&fake_fit(&tree, root, params, 0.8), &tree).unwrap();
        assert_abs_diff_eq!(f.frac_extreme, 1.0);
        assert_abs_diff_eq!(f.mean_elevation, 5.0);
    }

    #[test]
    fn beta_criterion_thresholds() {
        assert!(!beta_criterion(&[3.0], 0.9), "0.9 < 1.0 stops");
        assert!(beta_criterion(&[3.0], 1.1));
        assert!(beta_criterion(&[], -5.0), "empty history always continues");
        assert!(
            beta_criterion(&[3.0, 6.0], 1.5),
            "mean 4.5 / 3 = 1.5 boundary continues"
        );
    }

    #[test]
    fn default_threshold_accepts_at_the_documented_cut() {
        assert_eq!(DEFAULT_SVR_THRESHOLD, 0.15);
        assert!(0.16 >= DEFAULT_SVR_THRESHOLD, "0.16 is accepted");
        assert!(0.14 < DEFAULT_SVR_THRESHOLD, "0.14 is rejected");
    }

    #[test]
    fn beta_rule_accepts_planted_branches_and_stops() {
        let mut tree = noise_tree(6, 3, 0.3);
        plant_branch(&mut tree, "ABaaaa", 0.15, 11);
        plant_branch(&mut tree, "ABappa", 0.12, 12);
        let opts = DetectOptions {
            chain: ChainConfig {
                max_iterations: 1200,
                burn_in: 300,
                rng_seed: 21,
                ..Default::default()
            },
            ..Default::default()
        };
        let outcome = detect_branches(&tree, &StoppingRule::Beta, &opts).unwrap();
        let accepted = outcome.accepted_roots();
        // Matched by node-set overlap: with two bright branches the
        // posterior may settle one level up where the candidate set allows.
        let overlaps = |planted: &str| {
            accepted
                .iter()
                .any(|c| c.as_str().starts_with(planted) || planted.starts_with(c.as_str()))
        };
        assert!(overlaps("ABaaaa"), "accepted: {accepted:?}");
        assert!(overlaps("ABappa"), "accepted: {accepted:?}");
        assert_eq!(outcome.stop, StopReason::Rejected);
        // Accepted branches are node-disjoint: roots must be distinct
        // non-nested cells after deletion.
        for a in &accepted {
            for b in &accepted {
                if a != b {
                    assert!(!a.as_str().starts_with(b.as_str()));
                }
            }
        }
    }

    #[test]
    fn svr_rule_is_deterministic() {
        let mut tree = noise_tree(6, 5, 0.3);
        plant_branch(&mut tree, "ABaaaa", 0.2, 13);
        // A tiny hand-made training set: strong branches versus flat ones.
        let strong = BranchFeatures {
            beta_hat: 0.15,
            n_branch_cells: 14.0,
            n_pairs: 7.0,
            posterior_prob_m: 0.9,
            mean_elevation: 4.0,
            rho_hat: 0.5,
            frac_extreme: 0.9,
        };
        let weak = BranchFeatures {
            beta_hat: 0.01,
            n_branch_cells: 8.0,
            n_pairs: 4.0,
            posterior_prob_m: 0.2,
            mean_elevation: 0.3,
            rho_hat: 0.5,
            frac_extreme: 0.05,
        };
        let mut rows = Vec::new();
        for i in 0..10 {
            let bump = f64::from(i) * 0.01;
            let mut s = strong;
            s.mean_elevation += bump;
            rows.push((s, true));
            let mut w = weak;
            w.mean_elevation += bump;
            rows.push((w, false));
        }
        let model = svr_train(&rows, &SvrConfig::default()).unwrap();
        assert!(svr_predict(&model, &strong) > svr_predict(&model, &weak));

        let rule = StoppingRule::Svr {
            model: &model,
            threshold: DEFAULT_SVR_THRESHOLD,
        };
        let opts = DetectOptions {
            chain: ChainConfig {
                max_iterations: 1200,
                burn_in: 300,
                rng_seed: 31,
                ..Default::default()
            },
            ..Default::default()
        };
        let a = detect_branches(&tree, &rule, &opts).unwrap();
        let b = detect_branches(&tree, &rule, &opts).unwrap();
        assert_eq!(a.accepted_roots(), b.accepted_roots());
        assert_eq!(a.branches.len(), b.branches.len());
        for (x, y) in a.branches.iter().zip(&b.branches) {
            assert_eq!(x.svr_output, y.svr_output);
        }
        // The planted branch is found; every reported branch got an output.
        assert!(a.accepted_roots().iter().any(|c| c.as_str() == "ABaaaa"));
        assert!(a.branches.iter().all(|b| b.svr_output.is_some()));
    }

    #[test]
    fn single_class_training_rejected() {
        let f = BranchFeatures {
            beta_hat: 0.1,
            n_branch_cells: 10.0,
            n_pairs: 5.0,
            posterior_prob_m: 0.5,
            mean_elevation: 2.0,
            rho_hat: 0.5,
            frac_extreme: 0.5,
        };
        let rows = vec![(f, true), (f, true)];
        assert!(matches!(
            svr_train(&rows, &SvrConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn tiny_tree_is_detection_error() {
        let tree = complete_score_tree(1);
        let opts = DetectOptions::default();
        assert!(matches!(
            detect_branches(&tree, &StoppingRule::Beta, &opts),
            Err(Error::EmptyCandidateSet)
        ));
    }
}
