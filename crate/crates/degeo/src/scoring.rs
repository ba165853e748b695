//! Step 1: collapse each cell's fluorescence series to a single cell score.
//!
//! Points next to division events fluctuate, so each series is trimmed at
//! both ends before scoring: two points per end when the cell lived more
//! than 8 time points, one per end for 5-8 points, nothing for shorter
//! cells. The score is the midpoint of the 5% and 95% empirical quantiles
//! of the surviving points, which tracks short-lived expression better
//! than a median and resists outliers better than a mean.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::lineage::{CellId, CellRecord, LineageTree, Topology};
use crate::lineage::{CANDIDATE_MAX_DESCENDANTS, CANDIDATE_MIN_DESCENDANTS};

/// Empirical quantile with linear interpolation at rank `1 + (n-1)p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (n as f64 - 1.0) * p.clamp(0.0, 1.0);
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Drop division-boundary points: 2 per end above 8 points, 1 per end for
/// 5-8 points, none for 4 or fewer.
pub fn truncate_series(record: &CellRecord) -> (Vec<i64>, Vec<f64>) {
    let n = record.times.len();
    let cut = if n > 8 {
        2
    } else if n >= 5 {
        1
    } else {
        0
    };
    (
        record.times[cut..n - cut].to_vec(),
        record.intensities[cut..n - cut].to_vec(),
    )
}

/// Midpoint of the 5% and 95% quantiles of the valid points.
pub fn cell_score(valid: &[f64]) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::Argument(
            "cell score of empty point list".to_string(),
        ));
    }
    let mut sorted = valid.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok((quantile_sorted(&sorted, 0.05) + quantile_sorted(&sorted, 0.95)) / 2.0)
}

/// Per-cell summary kept alongside the topology.
#[derive(Debug, Clone)]
pub struct ScoredCell {
    pub score: f64,
    /// Number of raw time points before truncation, in minutes.
    pub lifetime: u32,
    pub valid_times: Vec<i64>,
    pub valid_values: Vec<f64>,
}

/// A lineage tree reduced to one score and lifetime per cell.
#[derive(Debug, Clone)]
pub struct ScoreTree {
    topo: Topology,
    cells: Vec<ScoredCell>,
}

impl ScoreTree {
    /// Score every cell of a parsed tree, preserving topology.
    pub fn from_lineage(tree: &LineageTree) -> Result<Self> {
        let topo = tree.topology().clone();
        let mut cells = Vec::with_capacity(topo.len());
        for ix in 0..topo.len() {
            let rec = tree.record_ix(ix);
            let (valid_times, valid_values) = truncate_series(rec);
            let score = cell_score(&valid_values)
                .map_err(|e| Error::Argument(format!("cell {}: {e}", rec.id)))?;
            cells.push(ScoredCell {
                score,
                lifetime: rec.times.len() as u32,
                valid_times,
                valid_values,
            });
        }
        Ok(ScoreTree { topo, cells })
    }

    /// Build directly from per-cell scores and lifetimes (no raw series).
    pub fn from_scores(topo: Topology, scores: Vec<f64>, lifetimes: Vec<u32>) -> Result<Self> {
        if scores.len() != topo.len() || lifetimes.len() != topo.len() {
            return Err(Error::Argument(format!(
                "{} cells but {} scores / {} lifetimes",
                topo.len(),
                scores.len(),
                lifetimes.len()
            )));
        }
        let cells = scores
            .into_iter()
            .zip(lifetimes)
            .map(|(score, lifetime)| ScoredCell {
                score,
                lifetime,
                valid_times: Vec::new(),
                valid_values: Vec::new(),
            })
            .collect();
        Ok(ScoreTree { topo, cells })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn len(&self) -> usize {
        self.topo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topo.is_empty()
    }

    pub fn cell_ix(&self, ix: usize) -> &ScoredCell {
        &self.cells[ix]
    }

    pub fn score_ix(&self, ix: usize) -> f64 {
        self.cells[ix].score
    }

    pub fn lifetime_ix(&self, ix: usize) -> f64 {
        f64::from(self.cells[ix].lifetime)
    }

    pub fn score(&self, id: &CellId) -> Result<f64> {
        Ok(self.cells[self.topo.lookup(id)?].score)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.score).collect()
    }

    pub fn candidate_set_ix(&self) -> Vec<usize> {
        self.topo
            .candidate_set_ix(CANDIDATE_MIN_DESCENDANTS, CANDIDATE_MAX_DESCENDANTS)
    }

    /// A new tree with `ix` and its strict descendants removed.
    pub fn without_branch(&self, ix: usize) -> Result<ScoreTree> {
        let retained = self.topo.retained_after_delete(ix);
        let ids = retained
            .iter()
            .map(|&i| self.topo.name(i).clone())
            .collect();
        let topo = Topology::from_ids(ids)?;
        // Topology::from_ids sorts by name; map cells over by name order,
        // which `retained` already follows.
        let cells = retained.iter().map(|&i| self.cells[i].clone()).collect();
        Ok(ScoreTree { topo, cells })
    }

    /// Replace a cell's score, returning the previous value.
    pub fn set_score_ix(&mut self, ix: usize, score: f64) -> f64 {
        std::mem::replace(&mut self.cells[ix].score, score)
    }

    /// Debug dump: `cell,score` rows in name order.
    pub fn write_score_table<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["cell", "score"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for ix in 0..self.topo.len() {
            wtr.write_record([
                self.topo.name(ix).as_str(),
                &format!("{}", self.cells[ix].score),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Full table including lifetimes, readable back via `read_table`.
    pub fn write_table<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["cell", "lifetime", "score"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for ix in 0..self.topo.len() {
            wtr.write_record([
                self.topo.name(ix).as_str(),
                &self.cells[ix].lifetime.to_string(),
                &format!("{}", self.cells[ix].score),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_table<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let mut rows: Vec<(CellId, u32, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let id = CellId::new(rec.get(0).unwrap_or("").trim())?;
            let lifetime: u32 = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("bad lifetime: {e}")))?;
            let score: f64 = rec
                .get(2)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("bad score: {e}")))?;
            rows.push((id, lifetime, score));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        let topo = Topology::from_ids(rows.iter().map(|r| r.0.clone()).collect())?;
        let lifetimes = rows.iter().map(|r| r.1).collect();
        let scores = rows.iter().map(|r| r.2).collect();
        Self::from_scores(topo, scores, lifetimes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn record(times: &[i64], values: &[f64]) -> CellRecord {
        CellRecord {
            id: CellId::new("ABa").unwrap(),
            times: times.to_vec(),
            intensities: values.to_vec(),
        }
    }

    /// Oracle: sort and apply the 1 + (n-1)p rank rule directly.
    fn oracle_score(points: &[f64]) -> f64 {
        let mut v = points.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len() as f64;
        let q = |p: f64| {
            let rank = 1.0 + (n - 1.0) * p; // 1-indexed
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let frac = rank - rank.floor();
            v[lo - 1] * (1.0 - frac) + v[hi - 1] * frac
        };
        (q(0.05) + q(0.95)) / 2.0
    }

    #[test]
    fn truncation_by_lifetime() {
        let twelve: Vec<i64> = (0..12).collect();
        let vals: Vec<f64> = (0..12).map(f64::from).collect();
        let (t, v) = truncate_series(&record(&twelve, &vals));
        assert_eq!(t, (2..10).collect::<Vec<i64>>());
        assert_eq!(v.len(), 8);

        let six: Vec<i64> = (0..6).collect();
        let vals: Vec<f64> = (0..6).map(f64::from).collect();
        let (t, _) = truncate_series(&record(&six, &vals));
        assert_eq!(t, vec![1, 2, 3, 4]);

        let three: Vec<i64> = (0..3).collect();
        let vals = vec![7.0; 3];
        let (t, v) = truncate_series(&record(&three, &vals));
        assert_eq!(t, vec![0, 1, 2]);
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn constant_series_scores_constant() {
        let v = vec![3.5; 17];
        assert_abs_diff_eq!(cell_score(&v).unwrap(), 3.5);
    }

    #[test]
    fn outlier_series_matches_oracle() {
        let mut v = vec![0.0; 9];
        v.push(100.0);
        // rank95 = 1 + 9*0.95 = 9.55 between the 9th (0) and 10th (100)
        // order statistics.
        let score = cell_score(&v).unwrap();
        assert_abs_diff_eq!(score, oracle_score(&v), epsilon = 1e-12);
        assert_abs_diff_eq!(score, 55.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn two_point_series_matches_oracle() {
        let v = vec![1.0, 5.0];
        let score = cell_score(&v).unwrap();
        assert_abs_diff_eq!(score, oracle_score(&v), epsilon = 1e-12);
        // q05 = 1.2, q95 = 4.8
        assert_abs_diff_eq!(score, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_input_is_argument_error() {
        assert!(matches!(cell_score(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn single_outlier_in_forty_zeros_stays_small() {
        let mut v = vec![0.0; 40];
        v[17] = 1e6;
        let score = cell_score(&v).unwrap();
        assert!(
            score < 1e6 / 2.0,
            "score {score} should sit well below half the outlier"
        );
        assert_abs_diff_eq!(score, oracle_score(&v), epsilon = 1e-6);
    }

    fn small_tree() -> LineageTree {
        let mk = |name: &str, base: f64| CellRecord {
            id: CellId::new(name).unwrap(),
            times: (0..10).collect(),
            intensities: (0..10).map(|j| base + f64::from(j) * 0.1).collect(),
        };
        LineageTree::from_records(vec![
            mk("ABa", 1.0),
            mk("ABaa", 2.0),
            mk("ABap", 3.0),
            mk("ABaaa", 4.0),
            mk("ABaap", 5.0),
        ])
        .unwrap()
    }

    #[test]
    fn score_tree_matches_per_cell_oracle() {
        let lineage = small_tree();
        let tree = ScoreTree::from_lineage(&lineage).unwrap();
        assert_eq!(tree.len(), 5);
        for rec in lineage.records() {
            let (_, valid) = truncate_series(rec);
            let expected = oracle_score(&valid);
            assert_abs_diff_eq!(tree.score(&rec.id).unwrap(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_cell_tree_scores() {
        let lineage = LineageTree::from_records(vec![CellRecord {
            id: CellId::new("ABa").unwrap(),
            times: vec![3],
            intensities: vec![42.0],
        }])
        .unwrap();
        let tree = ScoreTree::from_lineage(&lineage).unwrap();
        assert_abs_diff_eq!(tree.score(&CellId::new("ABa").unwrap()).unwrap(), 42.0);
    }

    #[test]
    fn constant_tree_scores_constant() {
        let mk = |name: &str| CellRecord {
            id: CellId::new(name).unwrap(),
            times: (0..12).collect(),
            intensities: vec![9.0; 12],
        };
        let lineage = LineageTree::from_records(vec![mk("ABa"), mk("ABaa"), mk("ABap")]).unwrap();
        let tree = ScoreTree::from_lineage(&lineage).unwrap();
        for ix in 0..tree.len() {
            assert_abs_diff_eq!(tree.score_ix(ix), 9.0);
        }
    }

    #[test]
    fn score_table_round_trips() {
        let tree = ScoreTree::from_lineage(&small_tree()).unwrap();
        let mut buf = Vec::new();
        tree.write_table(&mut buf).unwrap();
        let back = ScoreTree::read_table(buf.as_slice()).unwrap();
        assert_eq!(back.len(), tree.len());
        for ix in 0..tree.len() {
            assert_eq!(back.score_ix(ix), tree.score_ix(ix));
            assert_eq!(back.lifetime_ix(ix), tree.lifetime_ix(ix));
        }
    }

    proptest! {
        #[test]
        fn score_within_range(points in proptest::collection::vec(-1e6f64..1e6, 1..60)) {
            let score = cell_score(&points).unwrap();
            let lo = points.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(score >= lo - 1e-9 && score <= hi + 1e-9);
        }

        #[test]
        fn score_ignores_time_shift(
            values in proptest::collection::vec(-100f64..100.0, 1..40),
            shift in -1000i64..1000,
        ) {
            let times: Vec<i64> = (0..values.len() as i64).collect();
            let shifted: Vec<i64> = times.iter().map(|t| t + shift).collect();
            let a = truncate_series(&record(&times, &values));
            let b = truncate_series(&record(&shifted, &values));
            prop_assert_eq!(cell_score(&a.1).unwrap(), cell_score(&b.1).unwrap());
        }
    }
}
