//! Benchmark data with known ground truth.
//!
//! Three generators mirror the three evaluation protocols: mimic score
//! trees (template noise resampled, real branch scores re-planted), score
//! trees drawn from the change-point model itself, and full time-series
//! trees with planted per-point onsets. No annotated real files ship with
//! the crate, so a synthetic default template stands in: a ~700-cell
//! asymmetric topology with five annotated expression branches of varied
//! strength, built deterministically from a seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::lineage::{CellId, CellRecord, LineageTree, Topology};
use crate::model::Hyperparams;
use crate::sampler::derive_seed;
use crate::scoring::ScoreTree;

/// Lower truncation for generated growth rates: expression branches grow.
pub const GENERATED_BETA_MIN: f64 = 0.05;

/// Priors used when generating model-law trees. Tighter than the fitting
/// defaults: growth centred at 0.4 score units per minute, pair noise well
/// under the background spread.
pub fn generation_hyper() -> Hyperparams {
    Hyperparams {
        g: 3.0,
        h: 2.0,
        a: 3.0,
        b: 0.5,
        r: 0.4,
        s: 0.0225,
        p: 0.0,
        q: 1.0,
        u: 2.0,
        v: 2.0,
    }
}

/// True parameters of one generated branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub root: CellId,
    pub beta: f64,
    pub rho: f64,
    pub sigma2_sq: f64,
}

/// What a generated tree really contains.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub branch_roots: Vec<CellId>,
    /// Strict descendants of the roots (plus onset cells, which always lie
    /// inside the branches here).
    pub expressing: Vec<CellId>,
    /// Per-point onsets: (cell containing the onset, minute).
    pub onsets: Vec<(CellId, i64)>,
    /// Per-branch generating parameters (model-law trees only).
    pub branch_params: Vec<BranchParams>,
    /// Generating background (mu, sigma1_sq), when known.
    pub background: Option<(f64, f64)>,
}

impl GroundTruth {
    /// Flags match the branch roots: a cell is expressing iff it strictly
    /// descends from some root (onset cells included by construction).
    pub fn is_consistent(&self, topo: &Topology) -> bool {
        let mut expected = std::collections::BTreeSet::new();
        for root in &self.branch_roots {
            let Ok(ix) = topo.lookup(root) else {
                return false;
            };
            for d in topo.subtree_ix(ix).into_iter().skip(1) {
                expected.insert(topo.name(d).clone());
            }
        }
        let actual: std::collections::BTreeSet<CellId> = self.expressing.iter().cloned().collect();
        expected == actual && self.onsets.iter().all(|(c, _)| actual.contains(c))
    }

    pub fn from_roots(topo: &Topology, roots: Vec<CellId>) -> Result<GroundTruth> {
        let mut expressing = Vec::new();
        for root in &roots {
            let ix = topo.lookup(root)?;
            for d in topo.subtree_ix(ix).into_iter().skip(1) {
                expressing.push(topo.name(d).clone());
            }
        }
        expressing.sort();
        expressing.dedup();
        Ok(GroundTruth {
            branch_roots: roots,
            expressing,
            ..Default::default()
        })
    }

    /// Side-car table: one row per mentioned cell with its role and, for
    /// onset cells, the onset minute.
    pub fn write_table<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["cell", "kind", "onset_minute"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for root in &self.branch_roots {
            wtr.write_record([root.as_str(), "root", ""])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        let onset_of = |c: &CellId| {
            self.onsets
                .iter()
                .find(|(oc, _)| oc == c)
                .map(|(_, t)| t.to_string())
                .unwrap_or_default()
        };
        for cell in &self.expressing {
            wtr.write_record([cell.as_str(), "expressing", &onset_of(cell)])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_table<R: std::io::Read>(reader: R) -> Result<GroundTruth> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let mut truth = GroundTruth::default();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let cell = CellId::new(rec.get(0).unwrap_or("").trim())?;
            match rec.get(1).unwrap_or("").trim() {
                "root" => truth.branch_roots.push(cell),
                "expressing" => {
                    if let Some(t) = rec.get(2).filter(|s| !s.trim().is_empty()) {
                        let minute: i64 = t
                            .trim()
                            .parse()
                            .map_err(|e| Error::Format(format!("bad onset minute: {e}")))?;
                        truth.onsets.push((cell.clone(), minute));
                    }
                    truth.expressing.push(cell);
                }
                other => return Err(Error::Format(format!("unknown kind `{other}`"))),
            }
        }
        Ok(truth)
    }
}

/// Topology plus per-cell lifetimes and birth times, the scaffold every
/// generator shares.
#[derive(Debug, Clone)]
pub struct Shape {
    pub topo: Topology,
    pub lifetimes: Vec<u32>,
    pub births: Vec<i64>,
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Division depth below each founder, before per-node raggedness.
const FOUNDER_DEPTHS: [(&str, i64); 5] = [("AB", 8), ("MS", 5), ("C", 5), ("E", 4), ("D", 4)];

/// Build the default ~700-cell scaffold: founder skeleton, ragged division
/// depths, lifetimes around 28 minutes.
pub fn default_shape(seed: u64) -> Shape {
    let mut names: Vec<String> = ["P0", "P1", "P2", "P3", "P4", "EMS", "Z2", "Z3"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (founder, base) in FOUNDER_DEPTHS {
        let mut frontier = vec![(founder.to_string(), 0i64)];
        while let Some((name, depth)) = frontier.pop() {
            names.push(name.clone());
            let jitter = (fnv1a(name.as_bytes(), seed) % 3) as i64 - 1;
            if depth < base + jitter {
                for s in ["a", "p"] {
                    frontier.push((format!("{name}{s}"), depth + 1));
                }
            }
        }
    }
    let ids = names
        .iter()
        .map(|n| CellId::new(n).expect("generated names are valid"))
        .collect();
    let topo = Topology::from_ids(ids).expect("generated topology is a valid forest");

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5348_4150));
    let life_draw = Normal::new(28.0, 9.0).unwrap();
    let lifetimes: Vec<u32> = (0..topo.len())
        .map(|_| {
            let life: f64 = life_draw.sample(&mut rng);
            life.round().clamp(12.0, 55.0) as u32
        })
        .collect();
    let mut births = vec![0i64; topo.len()];
    let mut stack: Vec<usize> = topo.roots_ix().to_vec();
    while let Some(ix) = stack.pop() {
        for &c in topo.children_ix(ix) {
            births[c] = births[ix] + i64::from(lifetimes[ix]);
            stack.push(c);
        }
    }
    Shape {
        topo,
        lifetimes,
        births,
    }
}

/// One annotated expression branch of a template.
#[derive(Debug, Clone)]
pub struct AnnotatedBranch {
    pub root: CellId,
    /// Global minute at which the planted signal switches on (time-series
    /// templates only).
    pub onset_minute: Option<i64>,
}

/// A tree with its expression branches labelled.
#[derive(Debug, Clone)]
pub struct Template<T> {
    pub tree: T,
    pub branches: Vec<AnnotatedBranch>,
}

impl<T> Template<T> {
    pub fn branch_roots(&self) -> Vec<CellId> {
        self.branches.iter().map(|b| b.root.clone()).collect()
    }
}

/// Pick branch roots for the default templates: candidate cells whose
/// parent is too large to be a candidate itself, pairwise disjoint.
fn template_roots(shape: &Shape, seed: u64, want: usize) -> Vec<usize> {
    let counts = shape.topo.descendant_counts();
    let mut eligible: Vec<usize> = (0..shape.topo.len())
        .filter(|&ix| {
            (10..=30).contains(&counts[ix])
                && shape
                    .topo
                    .parent_ix(ix)
                    .map(|p| counts[p] > 30)
                    .unwrap_or(false)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x524f_4f54));
    // Deterministic shuffle.
    for i in (1..eligible.len()).rev() {
        let j = rng.random_range(0..=i);
        eligible.swap(i, j);
    }
    let mut chosen: Vec<usize> = Vec::new();
    for ix in eligible {
        let name = shape.topo.name(ix).as_str();
        let disjoint = chosen.iter().all(|&c| {
            let cn = shape.topo.name(c).as_str();
            !name.starts_with(cn) && !cn.starts_with(name)
        });
        if disjoint {
            chosen.push(ix);
            if chosen.len() == want {
                break;
            }
        }
    }
    chosen
}

/// Growth rates of the five default template branches, score units per
/// minute of lifetime.
const TEMPLATE_BETAS: [f64; 5] = [0.08, 0.12, 0.2, 0.3, 0.45];
const TEMPLATE_RHOS: [f64; 5] = [0.5, 0.5, 0.4, 0.6, 0.5];
const TEMPLATE_SIGMA2: [f64; 5] = [0.0625, 0.09, 0.04, 0.09, 0.16];

/// Generate model-law scores over a shape: i.i.d. background, then each
/// branch grown top-down from its root's score.
fn generate_scores(
    shape: &Shape,
    mu: f64,
    sigma1_sq: f64,
    branches: &[(usize, f64, f64, f64)], // (root, beta, rho, sigma2_sq)
    rng: &mut ChaCha8Rng,
) -> ScoreTree {
    let n = shape.topo.len();
    let bg = Normal::new(mu, sigma1_sq.sqrt()).unwrap();
    let mut scores: Vec<f64> = (0..n).map(|_| bg.sample(rng)).collect();
    let unit = Normal::new(0.0, 1.0).unwrap();
    for &(root, beta, rho, sigma2_sq) in branches {
        let sigma2 = sigma2_sq.sqrt();
        let mut order = shape.topo.subtree_ix(root);
        order.sort_by_key(|&ix| shape.topo.name(ix).as_str().len());
        for &mother in &order {
            let kids = shape.topo.children_ix(mother);
            if kids.is_empty() {
                continue;
            }
            let x0 = scores[mother];
            let z1: f64 = unit.sample(rng);
            scores[kids[0]] = x0 + beta * f64::from(shape.lifetimes[kids[0]]) + sigma2 * z1;
            if kids.len() == 2 {
                let z2: f64 = unit.sample(rng);
                let d2 = sigma2 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
                scores[kids[1]] = x0 + beta * f64::from(shape.lifetimes[kids[1]]) + d2;
            }
        }
    }
    ScoreTree::from_scores(shape.topo.clone(), scores, shape.lifetimes.clone())
        .expect("shape-consistent scores")
}

/// The default annotated score-tree template.
pub fn default_score_template(seed: u64) -> Template<ScoreTree> {
    let shape = default_shape(seed);
    let roots = template_roots(&shape, seed, 5);
    assert!(
        roots.len() == 5,
        "default shape must yield 5 template branches"
    );
    let branches: Vec<(usize, f64, f64, f64)> = roots
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, TEMPLATE_BETAS[i], TEMPLATE_RHOS[i], TEMPLATE_SIGMA2[i]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5343_4f52));
    let tree = generate_scores(&shape, 0.0, 1.0, &branches, &mut rng);
    Template {
        tree,
        branches: roots
            .iter()
            .map(|&r| AnnotatedBranch {
                root: shape.topo.name(r).clone(),
                onset_minute: None,
            })
            .collect(),
    }
}

/// Onset generation below the root for each default time-series branch:
/// generation 1 ramps from the start, deeper onsets leave the first
/// generations at background level.
const TEMPLATE_ONSET_GENERATION: [usize; 5] = [1, 2, 3, 3, 4];
const TEMPLATE_TS_SLOPES: [f64; 5] = [0.12, 0.1, 0.07, 0.15, 0.1];

/// Per-minute intensity level once a planted signal is on.
const TS_JUMP: f64 = 2.5;
const TS_POINT_NOISE: f64 = 0.35;

/// The default annotated time-series template: background points N(0,1),
/// five branches switching to an elevated ramp at a branch-specific minute.
pub fn default_timeseries_template(seed: u64) -> Template<LineageTree> {
    let shape = default_shape(seed);
    let roots = template_roots(&shape, seed, 5);
    assert!(
        roots.len() == 5,
        "default shape must yield 5 template branches"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5453_4552));
    let noise = Normal::new(0.0, 1.0).unwrap();
    let point_noise = Normal::new(0.0, TS_POINT_NOISE).unwrap();

    // Hot-from minute per branch: just after the youngest cell of the
    // onset generation is born (plus the truncation margin).
    let mut hot_from = vec![None::<i64>; shape.topo.len()];
    let mut annotations = Vec::new();
    for (i, &root) in roots.iter().enumerate() {
        let gen_of =
            |ix: usize| shape.topo.name(ix).as_str().len() - shape.topo.name(root).as_str().len();
        let target_gen = TEMPLATE_ONSET_GENERATION[i];
        let sub: Vec<usize> = shape.topo.subtree_ix(root).into_iter().skip(1).collect();
        let max_gen = sub.iter().map(|&ix| gen_of(ix)).max().unwrap_or(1);
        let g = target_gen.min(max_gen);
        let k = sub
            .iter()
            .filter(|&&ix| gen_of(ix) == g)
            .map(|&ix| shape.births[ix])
            .max()
            .unwrap()
            + 2;
        for &ix in &sub {
            hot_from[ix] = Some(k);
        }
        annotations.push(AnnotatedBranch {
            root: shape.topo.name(root).clone(),
            onset_minute: Some(k),
        });
    }

    let mut records = Vec::with_capacity(shape.topo.len());
    for ix in 0..shape.topo.len() {
        let birth = shape.births[ix];
        let life = i64::from(shape.lifetimes[ix]);
        let times: Vec<i64> = (birth..birth + life).collect();
        let slope = annotations
            .iter()
            .position(|a| shape.topo.name(ix).as_str().starts_with(a.root.as_str()))
            .map(|i| TEMPLATE_TS_SLOPES[i])
            .unwrap_or(0.1);
        let intensities: Vec<f64> = times
            .iter()
            .map(|t| match hot_from[ix] {
                Some(k) if *t >= k => {
                    TS_JUMP + slope * (*t - k) as f64 + point_noise.sample(&mut rng)
                }
                _ => noise.sample(&mut rng),
            })
            .collect();
        records.push(CellRecord {
            id: shape.topo.name(ix).clone(),
            times,
            intensities,
        });
    }
    Template {
        tree: LineageTree::from_records(records).expect("generated records are consistent"),
        branches: annotations,
    }
}

/// Uniformly choose how many branches to plant (0..=4) and which.
fn choose_branches(n_branches: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = rng.random_range(0..=4usize.min(n_branches));
    let mut all: Vec<usize> = (0..n_branches).collect();
    for i in (1..all.len()).rev() {
        let j = rng.random_range(0..=i);
        all.swap(i, j);
    }
    all.truncate(k);
    all.sort_unstable();
    all
}

/// Mimic score trees: every score resampled from the template's
/// non-expression scores, then 0..=4 annotated branches re-planted
/// verbatim at their own locations.
pub fn gen_mimic_score_trees(
    template: &Template<ScoreTree>,
    n: usize,
    seed: u64,
) -> Result<Vec<(ScoreTree, GroundTruth)>> {
    if template.branches.is_empty() {
        return Err(Error::Argument(
            "template has no annotated branches".to_string(),
        ));
    }
    let topo = template.tree.topology();
    let mut in_branch = vec![false; topo.len()];
    for b in &template.branches {
        let ix = topo.lookup(&b.root)?;
        for d in topo.subtree_ix(ix).into_iter().skip(1) {
            in_branch[d] = true;
        }
    }
    let pool: Vec<f64> = (0..topo.len())
        .filter(|&ix| !in_branch[ix])
        .map(|ix| template.tree.score_ix(ix))
        .collect();
    if pool.len() < 30 {
        return Err(Error::Argument(format!(
            "template has only {} non-expression cells",
            pool.len()
        )));
    }

    let mut out = Vec::with_capacity(n);
    for tree_ix in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4d49_4d00 + tree_ix as u64));
        let mut tree = template.tree.clone();
        for ix in 0..topo.len() {
            let v = pool[rng.random_range(0..pool.len())];
            tree.set_score_ix(ix, v);
        }
        let picked = choose_branches(template.branches.len(), &mut rng);
        let mut roots = Vec::new();
        for &b in &picked {
            let root_ix = topo.lookup(&template.branches[b].root)?;
            for d in topo.subtree_ix(root_ix).into_iter().skip(1) {
                tree.set_score_ix(d, template.tree.score_ix(d));
            }
            roots.push(template.branches[b].root.clone());
        }
        let truth = GroundTruth::from_roots(topo, roots)?;
        out.push((tree, truth));
    }
    Ok(out)
}

/// Model-law score trees on a template's topology and lifetimes. Branch
/// counts cycle 0..=10 across the batch; parameters are drawn from the
/// priors, growth rates truncated positive.
pub fn gen_model_trees(
    template: &ScoreTree,
    hyper: &Hyperparams,
    n: usize,
    seed: u64,
) -> Result<Vec<(ScoreTree, GroundTruth)>> {
    hyper.validate()?;
    if template.is_empty() {
        return Err(Error::Argument("empty template topology".to_string()));
    }
    let shape = Shape {
        topo: template.topology().clone(),
        lifetimes: (0..template.len())
            .map(|ix| template.cell_ix(ix).lifetime)
            .collect(),
        births: vec![0; template.len()],
    };
    let candidates = template.candidate_set_ix();
    let mut out = Vec::with_capacity(n);
    for tree_ix in 0..n {
        let n_branches = tree_ix % 11;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x4d4f_4400 + tree_ix as u64));
        let roots = draw_disjoint_roots(&shape.topo, &candidates, n_branches, &mut rng)?;

        let mu = Normal::new(hyper.p, hyper.q.sqrt())
            .unwrap()
            .sample(&mut rng);
        let sigma1_sq = inverse_gamma_sample(hyper.g, hyper.h, &mut rng);
        let mut branch_specs = Vec::with_capacity(roots.len());
        let mut branch_params = Vec::with_capacity(roots.len());
        for &root in &roots {
            let beta = truncated_normal(hyper.r, hyper.s.sqrt(), GENERATED_BETA_MIN, &mut rng);
            let rho = Beta::new(hyper.u, hyper.v)
                .unwrap()
                .sample(&mut rng)
                .clamp(1e-6, 1.0 - 1e-6);
            let sigma2_sq = inverse_gamma_sample(hyper.a, hyper.b, &mut rng);
            branch_specs.push((root, beta, rho, sigma2_sq));
            branch_params.push(BranchParams {
                root: shape.topo.name(root).clone(),
                beta,
                rho,
                sigma2_sq,
            });
        }
        let tree = generate_scores(&shape, mu, sigma1_sq, &branch_specs, &mut rng);
        let mut truth = GroundTruth::from_roots(
            &shape.topo,
            roots.iter().map(|&r| shape.topo.name(r).clone()).collect(),
        )?;
        truth.branch_params = branch_params;
        truth.background = Some((mu, sigma1_sq));
        out.push((tree, truth));
    }
    Ok(out)
}

fn inverse_gamma_sample(shape: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    1.0 / Gamma::new(shape, 1.0 / scale)
        .unwrap()
        .sample(rng)
        .max(1e-12)
}

fn truncated_normal(mean: f64, sd: f64, min: f64, rng: &mut ChaCha8Rng) -> f64 {
    let d = Normal::new(mean, sd).unwrap();
    for _ in 0..1000 {
        let v = d.sample(rng);
        if v >= min {
            return v;
        }
    }
    min
}

fn draw_disjoint_roots(
    topo: &Topology,
    candidates: &[usize],
    want: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    for _attempt in 0..1000 {
        let mut chosen: Vec<usize> = Vec::with_capacity(want);
        let mut tries = 0;
        while chosen.len() < want && tries < 200 {
            tries += 1;
            let cand = candidates[rng.random_range(0..candidates.len())];
            let name = topo.name(cand).as_str();
            let ok = chosen.iter().all(|&c| {
                let cn = topo.name(c).as_str();
                !name.starts_with(cn) && !cn.starts_with(name)
            });
            if ok {
                chosen.push(cand);
            }
        }
        if chosen.len() == want {
            chosen.sort_unstable();
            return Ok(chosen);
        }
    }
    Err(Error::Argument(format!(
        "cannot place {want} disjoint branch roots"
    )))
}

/// Planted time-series trees: per-cell series resampled from the
/// template's non-expression points, 0..=4 annotated branches inserted
/// verbatim, per-point onsets carried into the ground truth.
pub fn gen_planted_timeseries_trees(
    template: &Template<LineageTree>,
    n: usize,
    seed: u64,
) -> Result<Vec<(LineageTree, GroundTruth)>> {
    if template.branches.is_empty() {
        return Err(Error::Argument(
            "template has no annotated branches".to_string(),
        ));
    }
    let topo = template.tree.topology();
    let mut in_branch = vec![false; topo.len()];
    for b in &template.branches {
        let ix = topo.lookup(&b.root)?;
        for d in topo.subtree_ix(ix).into_iter().skip(1) {
            in_branch[d] = true;
        }
    }
    let pool: Vec<f64> = (0..topo.len())
        .filter(|&ix| !in_branch[ix])
        .flat_map(|ix| template.tree.record_ix(ix).intensities.iter().copied())
        .collect();
    if pool.len() < 30 {
        return Err(Error::Argument("template noise pool too small".to_string()));
    }

    let mut out = Vec::with_capacity(n);
    for tree_ix in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5453_0000 + tree_ix as u64));
        let mut records: Vec<CellRecord> = (0..topo.len())
            .map(|ix| {
                let rec = template.tree.record_ix(ix);
                CellRecord {
                    id: rec.id.clone(),
                    times: rec.times.clone(),
                    intensities: rec
                        .intensities
                        .iter()
                        .map(|_| pool[rng.random_range(0..pool.len())])
                        .collect(),
                }
            })
            .collect();
        let picked = choose_branches(template.branches.len(), &mut rng);
        let mut roots = Vec::new();
        let mut onsets = Vec::new();
        for &b in &picked {
            let branch = &template.branches[b];
            let root_ix = topo.lookup(&branch.root)?;
            for d in topo.subtree_ix(root_ix).into_iter().skip(1) {
                records[d] = template.tree.record_ix(d).clone();
                if let Some(k) = branch.onset_minute {
                    let rec = template.tree.record_ix(d);
                    let alive = rec.times.first().is_some_and(|&b0| b0 <= k)
                        && rec.times.last().is_some_and(|&e| e >= k);
                    if alive {
                        onsets.push((rec.id.clone(), k));
                    }
                }
            }
            roots.push(branch.root.clone());
        }
        let tree = LineageTree::from_records(records)?;
        let mut truth = GroundTruth::from_roots(topo, roots)?;
        onsets.sort();
        truth.onsets = onsets;
        out.push((tree, truth));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring;

    /// Two-sample Kolmogorov-Smirnov statistic.
    fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            let fa = i as f64 / a.len() as f64;
            let fb = j as f64 / b.len() as f64;
            d = d.max((fa - fb).abs());
        }
        d
    }

    #[test]
    fn default_shape_is_realistic() {
        let shape = default_shape(7);
        assert!(
            (600..900).contains(&shape.topo.len()),
            "shape has {} cells",
            shape.topo.len()
        );
        // Binary forest with the founder skeleton as roots of record.
        for ix in 0..shape.topo.len() {
            assert!(shape.topo.children_ix(ix).len() <= 2);
            if let Some(p) = shape.topo.parent_ix(ix) {
                assert_eq!(
                    shape.births[ix],
                    shape.births[p] + i64::from(shape.lifetimes[p])
                );
            }
        }
        let candidates = shape.topo.candidate_set_ix(6, 30);
        assert!(
            candidates.len() > 30,
            "only {} candidates",
            candidates.len()
        );
        // Shape generation is seed deterministic.
        let again = default_shape(7);
        assert_eq!(shape.topo.len(), again.topo.len());
        assert_eq!(shape.lifetimes, again.lifetimes);
    }

    #[test]
    fn template_roots_have_oversized_parents() {
        let shape = default_shape(7);
        let roots = template_roots(&shape, 7, 5);
        assert_eq!(roots.len(), 5);
        let counts = shape.topo.descendant_counts();
        for &r in &roots {
            assert!((10..=30).contains(&counts[r]));
            let p = shape.topo.parent_ix(r).unwrap();
            assert!(
                counts[p] > 30,
                "parent of a template root must not be a candidate"
            );
        }
    }

    #[test]
    fn mimic_trees_honor_branch_counts() {
        let template = default_score_template(7);
        let trees = gen_mimic_score_trees(&template, 40, 11).unwrap();
        assert_eq!(trees.len(), 40);
        let mut seen_zero = false;
        let mut seen_multi = false;
        for (tree, truth) in &trees {
            assert!(truth.is_consistent(tree.topology()));
            assert!(truth.branch_roots.len() <= 4);
            seen_zero |= truth.branch_roots.is_empty();
            seen_multi |= truth.branch_roots.len() >= 2;
            // Planted branches carry the template's exact scores.
            for root in &truth.branch_roots {
                let ix = tree.topology().lookup(root).unwrap();
                for d in tree.topology().subtree_ix(ix).into_iter().skip(1) {
                    assert_eq!(tree.score_ix(d), template.tree.score_ix(d));
                }
            }
        }
        assert!(seen_zero && seen_multi);
    }

    #[test]
    fn mimic_noise_matches_template_pool() {
        let template = default_score_template(7);
        let topo = template.tree.topology();
        let mut in_branch = vec![false; topo.len()];
        for b in &template.branches {
            let ix = topo.lookup(&b.root).unwrap();
            for d in topo.subtree_ix(ix).into_iter().skip(1) {
                in_branch[d] = true;
            }
        }
        let pool: Vec<f64> = (0..topo.len())
            .filter(|&ix| !in_branch[ix])
            .map(|ix| template.tree.score_ix(ix))
            .collect();

        let trees = gen_mimic_score_trees(&template, 100, 13).unwrap();
        let mut passes = 0;
        for (tree, truth) in &trees {
            let mut noise_ix = vec![true; topo.len()];
            for root in &truth.branch_roots {
                let ix = topo.lookup(root).unwrap();
                for d in topo.subtree_ix(ix).into_iter().skip(1) {
                    noise_ix[d] = false;
                }
            }
            let noise: Vec<f64> = (0..topo.len())
                .filter(|&ix| noise_ix[ix])
                .map(|ix| tree.score_ix(ix))
                .collect();
            let d = ks_statistic(&noise, &pool);
            let n = noise.len() as f64;
            let m = pool.len() as f64;
            let crit = 1.62762 * ((n + m) / (n * m)).sqrt();
            if d < crit {
                passes += 1;
            }
        }
        assert!(
            passes >= 95,
            "only {passes}/100 generations pass the KS check"
        );
    }

    #[test]
    fn model_trees_zero_roots_are_background() {
        let template = default_score_template(7).tree;
        let hyper = generation_hyper();
        // tree_ix 0 gets 0 branches by the cycling design.
        let trees = gen_model_trees(&template, &hyper, 1, 17).unwrap();
        let (tree, truth) = &trees[0];
        assert!(truth.branch_roots.is_empty());
        let (mu, sigma1_sq) = truth.background.unwrap();
        let n = tree.len() as f64;
        let mean = tree.scores().iter().sum::<f64>() / n;
        assert!(
            (mean - mu).abs() < 3.0 * sigma1_sq.sqrt() / n.sqrt(),
            "sample mean {mean} too far from {mu}"
        );
    }

    #[test]
    fn model_trees_branch_means_grow() {
        let template = default_score_template(7).tree;
        let hyper = generation_hyper();
        // Monte Carlo across replicates: mean branch elevation tracks
        // beta times the mean cumulative lifetime below each root.
        let trees = gen_model_trees(&template, &hyper, 22, 19).unwrap();
        let mut rel_err_sum = 0.0;
        let mut checked = 0;
        for (tree, truth) in &trees {
            let (mu, _) = truth.background.unwrap();
            for params in &truth.branch_params {
                assert!(params.beta >= GENERATED_BETA_MIN);
                let topo = tree.topology();
                let root = topo.lookup(&params.root).unwrap();
                let branch: Vec<usize> = topo.subtree_ix(root).into_iter().skip(1).collect();
                if branch.len() < 10 {
                    continue;
                }
                // Expected elevation of a branch cell: beta times the sum of
                // lifetimes on the path from the root's child down to it.
                let mut expected = 0.0;
                for &ix in &branch {
                    let mut cum = 0.0;
                    let mut cur = ix;
                    while cur != root {
                        cum += tree.lifetime_ix(cur);
                        cur = topo.parent_ix(cur).unwrap();
                    }
                    expected += params.beta * cum;
                }
                expected /= branch.len() as f64;
                let observed = branch.iter().map(|&ix| tree.score_ix(ix)).sum::<f64>()
                    / branch.len() as f64
                    - tree.score_ix(root);
                let _ = mu;
                rel_err_sum += (observed - expected).abs() / expected.max(1.0);
                checked += 1;
            }
        }
        assert!(
            checked > 20,
            "need enough branches to average, got {checked}"
        );
        let mean_rel_err = rel_err_sum / checked as f64;
        assert!(
            mean_rel_err < 0.25,
            "mean relative elevation error {mean_rel_err}"
        );
    }

    #[test]
    fn model_trees_pair_correlation_tracks_rho() {
        let template = default_score_template(7).tree;
        let mut hyper = generation_hyper();
        // Pin rho near 0.7 via a tight Beta prior.
        hyper.u = 70.0;
        hyper.v = 30.0;
        let trees = gen_model_trees(&template, &hyper, 44, 23).unwrap();
        let mut num = 0.0;
        let mut d1sq = 0.0;
        let mut d2sq = 0.0;
        for (tree, truth) in &trees {
            let topo = tree.topology();
            for params in &truth.branch_params {
                let root = topo.lookup(&params.root).unwrap();
                for &mother in &topo.subtree_ix(root) {
                    let kids = topo.children_ix(mother);
                    if kids.len() != 2 {
                        continue;
                    }
                    let d1 = tree.score_ix(kids[0])
                        - tree.score_ix(mother)
                        - params.beta * tree.lifetime_ix(kids[0]);
                    let d2 = tree.score_ix(kids[1])
                        - tree.score_ix(mother)
                        - params.beta * tree.lifetime_ix(kids[1]);
                    num += d1 * d2;
                    d1sq += d1 * d1;
                    d2sq += d2 * d2;
                }
            }
        }
        let corr = num / (d1sq.sqrt() * d2sq.sqrt());
        assert!(
            (corr - 0.7).abs() < 0.1,
            "residual correlation {corr} should track 0.7"
        );
    }

    #[test]
    fn planted_timeseries_trees_verbatim_and_scored() {
        let template = default_timeseries_template(7);
        let trees = gen_planted_timeseries_trees(&template, 30, 29).unwrap();
        let template_scores = scoring::ScoreTree::from_lineage(&template.tree).unwrap();
        let mut saw_onsets = false;
        for (tree, truth) in &trees {
            assert!(truth.is_consistent(tree.topology()));
            for root in &truth.branch_roots {
                let ix = tree.topology().lookup(root).unwrap();
                for d in tree.topology().subtree_ix(ix).into_iter().skip(1) {
                    assert_eq!(
                        tree.record_ix(d).intensities,
                        template.tree.record_ix(d).intensities,
                        "planted series must be verbatim"
                    );
                }
            }
            // Re-scoring a planted tree reproduces template scores on
            // planted cells.
            let scored = scoring::ScoreTree::from_lineage(tree).unwrap();
            for root in &truth.branch_roots {
                let ix = tree.topology().lookup(root).unwrap();
                for d in tree.topology().subtree_ix(ix).into_iter().skip(1) {
                    assert_eq!(scored.score_ix(d), template_scores.score_ix(d));
                }
            }
            saw_onsets |= !truth.onsets.is_empty();
        }
        assert!(saw_onsets);
    }

    #[test]
    fn zero_planted_trees_stay_inside_pool() {
        let template = default_timeseries_template(7);
        let topo = template.tree.topology();
        let mut in_branch = vec![false; topo.len()];
        for b in &template.branches {
            let ix = topo.lookup(&b.root).unwrap();
            for d in topo.subtree_ix(ix).into_iter().skip(1) {
                in_branch[d] = true;
            }
        }
        let pool_max = (0..topo.len())
            .filter(|&ix| !in_branch[ix])
            .flat_map(|ix| template.tree.record_ix(ix).intensities.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max);

        let trees = gen_planted_timeseries_trees(&template, 8, 31).unwrap();
        for (tree, truth) in &trees {
            if !truth.branch_roots.is_empty() {
                continue;
            }
            for rec in tree.records() {
                for v in &rec.intensities {
                    assert!(*v <= pool_max, "resampled noise cannot exceed the pool");
                }
            }
        }
    }

    #[test]
    fn true_state_scores_well_under_the_posterior() {
        use crate::model::{log_posterior, ModelState};
        // The generating state should not be systematically beaten by
        // nearby perturbed states.
        let template = default_score_template(7).tree;
        let hyper = generation_hyper();
        let trees = gen_model_trees(&template, &hyper, 45, 41).unwrap();
        let mut wins = 0usize;
        let mut trials = 0usize;
        for (tree, truth) in trees.iter().filter(|(_, t)| t.branch_roots.len() == 1) {
            let params = &truth.branch_params[0];
            let (mu, sigma1_sq) = truth.background.unwrap();
            let m = tree.topology().lookup(&params.root).unwrap();
            let state = ModelState {
                m,
                mu,
                sigma1_sq,
                sigma2_sq: params.sigma2_sq,
                beta: params.beta,
                rho: params.rho.clamp(1e-3, 1.0 - 1e-3),
            };
            let lp_true = log_posterior(&state, tree, &hyper).unwrap();
            let mut perturbed = Vec::new();
            let mut s = state;
            s.mu += 0.5;
            perturbed.push(s);
            let mut s = state;
            s.beta += 0.2;
            perturbed.push(s);
            let mut s = state;
            s.sigma1_sq *= 3.0;
            perturbed.push(s);
            let mut s = state;
            s.sigma2_sq *= 4.0;
            perturbed.push(s);
            for p in perturbed {
                trials += 1;
                if lp_true > log_posterior(&p, tree, &hyper).unwrap() {
                    wins += 1;
                }
            }
        }
        assert!(trials >= 12);
        assert!(
            wins as f64 >= 0.8 * trials as f64,
            "true state won only {wins}/{trials} comparisons"
        );
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let template = default_score_template(7);
        let a = gen_mimic_score_trees(&template, 5, 3).unwrap();
        let b = gen_mimic_score_trees(&template, 5, 3).unwrap();
        for ((ta, _), (tb, _)) in a.iter().zip(&b) {
            assert_eq!(ta.scores(), tb.scores());
        }
        let c = gen_mimic_score_trees(&template, 5, 4).unwrap();
        assert_ne!(a[0].0.scores(), c[0].0.scores());
    }

    #[test]
    fn truth_table_round_trips() {
        let template = default_timeseries_template(7);
        let trees = gen_planted_timeseries_trees(&template, 6, 37).unwrap();
        let (_, truth) = trees
            .iter()
            .find(|(_, t)| !t.branch_roots.is_empty())
            .expect("some tree has branches");
        let mut buf = Vec::new();
        truth.write_table(&mut buf).unwrap();
        let back = GroundTruth::read_table(buf.as_slice()).unwrap();
        assert_eq!(back.branch_roots, truth.branch_roots);
        assert_eq!(back.expressing, truth.expressing);
        assert_eq!(back.onsets, truth.onsets);
    }
}
