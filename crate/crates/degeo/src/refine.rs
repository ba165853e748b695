//! Step 4: exact onset and end time points inside accepted branches.
//!
//! Background noise is refitted from the valid points of all cells outside
//! the accepted branches; points above its 97.5% normal quantile are
//! extreme. Along each path from a branch root to its leaves, maximal runs
//! of at least 10 valid points that are at least 97.5% extreme form
//! expression segments; segments separated by at most two valid points are
//! merged. The earliest segment start on a path is its onset, the latest
//! segment end its end.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::lineage::CellId;
use crate::scoring::ScoreTree;

/// Standard-normal 97.5% quantile.
pub const Z_975: f64 = 1.959964;

/// Minimum valid points per expression segment.
pub const MIN_SEGMENT_POINTS: usize = 10;

/// Minimum extreme fraction inside a segment.
pub const MIN_EXTREME_FRACTION: f64 = 0.975;

/// Segments closer than this many intervening valid points are merged.
pub const MERGE_GAP: usize = 2;

/// Fitted background noise and its extreme-value cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub mu_hat: f64,
    pub sigma_hat_sq: f64,
    pub extreme_threshold: f64,
}

impl NoiseModel {
    pub fn from_points(points: &[f64]) -> Result<NoiseModel> {
        if points.len() < 2 {
            return Err(Error::Refinement(format!(
                "need at least 2 background points, got {}",
                points.len()
            )));
        }
        let n = points.len() as f64;
        let mu_hat = points.iter().sum::<f64>() / n;
        let sigma_hat_sq = points.iter().map(|x| (x - mu_hat).powi(2)).sum::<f64>() / (n - 1.0);
        if !(sigma_hat_sq > 0.0) {
            return Err(Error::Refinement("zero background variance".to_string()));
        }
        Ok(NoiseModel {
            mu_hat,
            sigma_hat_sq,
            extreme_threshold: mu_hat + Z_975 * sigma_hat_sq.sqrt(),
        })
    }

    pub fn is_extreme(&self, value: f64) -> bool {
        value > self.extreme_threshold
    }
}

/// Fit the noise model on valid points of every cell outside the accepted
/// branches (branch roots and their strict descendants are excluded).
pub fn fit_noise(tree: &ScoreTree, accepted_roots: &[CellId]) -> Result<NoiseModel> {
    let topo = tree.topology();
    let mut excluded = vec![false; topo.len()];
    for root in accepted_roots {
        let ix = topo.lookup(root)?;
        for sub in topo.subtree_ix(ix) {
            excluded[sub] = true;
        }
    }
    let mut points = Vec::new();
    for ix in 0..topo.len() {
        if !excluded[ix] {
            points.extend_from_slice(&tree.cell_ix(ix).valid_values);
        }
    }
    NoiseModel::from_points(&points)
}

/// Noise fitted from the earliest fifth of all valid time points, for trees
/// where expression is too widespread to leave a clean background.
pub fn fit_noise_early(tree: &ScoreTree) -> Result<NoiseModel> {
    let mut times: Vec<i64> = Vec::new();
    for ix in 0..tree.len() {
        times.extend_from_slice(&tree.cell_ix(ix).valid_times);
    }
    if times.is_empty() {
        return Err(Error::Refinement("tree has no valid points".to_string()));
    }
    times.sort_unstable();
    let cutoff = times[(times.len() - 1) / 5];
    let mut points = Vec::new();
    for ix in 0..tree.len() {
        let cell = tree.cell_ix(ix);
        for (t, v) in cell.valid_times.iter().zip(&cell.valid_values) {
            if *t <= cutoff {
                points.push(*v);
            }
        }
    }
    NoiseModel::from_points(&points)
}

/// One valid point on a root-to-leaf path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub cell: usize,
    pub time: i64,
    pub value: f64,
}

/// A maximal extreme run on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionSegment {
    pub start: (CellId, i64),
    pub end: (CellId, i64),
    pub n_valid_points: usize,
    pub n_extreme_points: usize,
}

/// Concatenated valid points of the cells along one path, ancestor first;
/// cell boundaries do not break the series.
pub fn path_series(tree: &ScoreTree, path: &[usize]) -> Vec<PathPoint> {
    let mut out = Vec::new();
    for &ix in path {
        let cell = tree.cell_ix(ix);
        for (t, v) in cell.valid_times.iter().zip(&cell.valid_values) {
            out.push(PathPoint {
                cell: ix,
                time: *t,
                value: *v,
            });
        }
    }
    out
}

/// Index ranges of segments within a path series.
fn segment_ranges(extreme: &[bool]) -> Vec<(usize, usize)> {
    let n = extreme.len();
    let mut raw: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if !extreme[i] {
            i += 1;
            continue;
        }
        // Grow right while the extreme fraction stays at or above the cut.
        let mut j = i;
        let mut n_extreme = 1usize;
        while j + 1 < n {
            let next = n_extreme + usize::from(extreme[j + 1]);
            let len = j + 2 - i;
            if (next as f64) / (len as f64) >= MIN_EXTREME_FRACTION {
                j += 1;
                n_extreme = next;
            } else {
                break;
            }
        }
        let scan_end = j;
        // Drop non-extreme tail points so segments end on extreme values.
        while !extreme[j] {
            j -= 1;
        }
        if j + 1 - i >= MIN_SEGMENT_POINTS {
            raw.push((i, j));
        }
        i = scan_end + 1;
    }

    // Merge across small gaps of intervening valid points.
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for (s, e) in raw {
        match merged.last_mut() {
            Some((_, prev_end)) if s - *prev_end - 1 <= MERGE_GAP => *prev_end = e,
            _ => merged.push((s, e)),
        }
    }
    merged
}

/// All expression segments along one path series.
pub fn find_segments(
    tree: &ScoreTree,
    series: &[PathPoint],
    noise: &NoiseModel,
) -> Vec<ExpressionSegment> {
    let extreme: Vec<bool> = series.iter().map(|p| noise.is_extreme(p.value)).collect();
    segment_ranges(&extreme)
        .into_iter()
        .map(|(s, e)| ExpressionSegment {
            start: (tree.topology().name(series[s].cell).clone(), series[s].time),
            end: (tree.topology().name(series[e].cell).clone(), series[e].time),
            n_valid_points: e - s + 1,
            n_extreme_points: extreme[s..=e].iter().filter(|x| **x).count(),
        })
        .collect()
}

/// Onsets and ends found below one accepted branch root.
#[derive(Debug, Clone)]
pub struct BranchOnsets {
    pub root: CellId,
    /// Distinct (cell, time, segment index) onset points across paths.
    pub onsets: Vec<(CellId, i64, usize)>,
    pub ends: Vec<(CellId, i64, usize)>,
    /// Distinct segments across paths, in discovery order.
    pub segments: Vec<ExpressionSegment>,
}

/// Per-file refinement output.
#[derive(Debug, Clone)]
pub struct OnsetReport {
    pub noise: NoiseModel,
    pub branches: Vec<BranchOnsets>,
}

/// Find per-path onsets and ends in every accepted branch: the earliest
/// segment start on a path is an onset, the latest segment end an end.
/// Points shared by sibling paths are reported once.
pub fn refine_onsets(
    tree: &ScoreTree,
    accepted_roots: &[CellId],
    noise: &NoiseModel,
) -> Result<OnsetReport> {
    let topo = tree.topology();
    let mut branches = Vec::new();
    for root in accepted_roots {
        let root_ix = topo.lookup(root)?;
        let mut seen_onsets: BTreeSet<(CellId, i64)> = BTreeSet::new();
        let mut seen_ends: BTreeSet<(CellId, i64)> = BTreeSet::new();
        let mut onsets = Vec::new();
        let mut ends = Vec::new();
        let mut segments: Vec<ExpressionSegment> = Vec::new();
        for path in topo.paths_to_leaves_ix(root_ix) {
            let series = path_series(tree, &path);
            let found = find_segments(tree, &series, noise);
            if found.is_empty() {
                continue;
            }
            let mut seg_ids = Vec::with_capacity(found.len());
            for seg in found {
                let id = match segments.iter().position(|s| *s == seg) {
                    Some(id) => id,
                    None => {
                        segments.push(seg);
                        segments.len() - 1
                    }
                };
                seg_ids.push(id);
            }
            let first = &segments[seg_ids[0]];
            if seen_onsets.insert(first.start.clone()) {
                onsets.push((first.start.0.clone(), first.start.1, seg_ids[0]));
            }
            let last = &segments[*seg_ids.last().unwrap()];
            if seen_ends.insert(last.end.clone()) {
                ends.push((last.end.0.clone(), last.end.1, *seg_ids.last().unwrap()));
            }
        }
        branches.push(BranchOnsets {
            root: root.clone(),
            onsets,
            ends,
            segments,
        });
    }
    Ok(OnsetReport {
        noise: *noise,
        branches,
    })
}

/// Whole-tree fallback: treat each root of the forest as a branch root and
/// fit the noise from the earliest fifth of the observations.
pub fn refine_whole_tree(tree: &ScoreTree) -> Result<OnsetReport> {
    let noise = fit_noise_early(tree)?;
    let roots: Vec<CellId> = tree
        .topology()
        .roots_ix()
        .iter()
        .map(|&ix| tree.topology().name(ix).clone())
        .collect();
    refine_onsets(tree, &roots, &noise)
}
