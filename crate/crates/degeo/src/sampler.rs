//! Step 2: Gibbs sampling of the change-point-in-tree model.
//!
//! The four continuous parameters with conjugate conditionals (both
//! variances, the growth rate, the background mean) are drawn in closed
//! form. The sibling correlation has no conjugate form and is drawn from a
//! deterministic grid approximation of its density. The change point is
//! drawn exactly from its discrete conditional: subtree aggregates are
//! precomputed once per tree so every candidate's weight costs O(1) per
//! sweep.
//!
//! Chains run in parallel with independent ChaCha streams; convergence is
//! judged by the potential scale reduction factor of the five continuous
//! parameters at a fixed ladder of checkpoints, so extending the iteration
//! budget never undoes a convergence verdict.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lineage::CellId;
use crate::model::{
    beta_precision, j_statistic, k_statistic, log_posterior, partition, rho_pair_sums, Hyperparams,
    ModelState,
};
use crate::scoring::ScoreTree;

/// Multi-chain sampler configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub max_iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub rng_seed: u64,
    pub rhat_tolerance: f64,
    pub rho_grid_size: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_chains: 4,
            max_iterations: 5000,
            burn_in: 1000,
            thinning: 1,
            rng_seed: 0,
            rhat_tolerance: 0.2,
            rho_grid_size: 200,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains < 2 {
            return Err(Error::Argument("need at least 2 chains".to_string()));
        }
        if self.burn_in + 8 > self.max_iterations {
            return Err(Error::Argument(format!(
                "burn_in {} leaves too few of {} iterations",
                self.burn_in, self.max_iterations
            )));
        }
        if self.thinning == 0 {
            return Err(Error::Argument("thinning must be at least 1".to_string()));
        }
        if !(self.rhat_tolerance > 0.0) {
            return Err(Error::Argument(
                "rhat_tolerance must be positive".to_string(),
            ));
        }
        if self.rho_grid_size < 2 {
            return Err(Error::Argument(
                "rho grid needs at least 2 cells".to_string(),
            ));
        }
        Ok(())
    }
}

/// Mix a root seed with a purpose tag (splitmix64 finalizer), so every
/// consumer of randomness gets its own documented stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0) || !(scale > 0.0) {
        return Err(Error::Numerical(format!(
            "inverse-gamma parameters out of range: shape {shape}, scale {scale}"
        )));
    }
    let gamma = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| Error::Numerical(format!("gamma sampler: {e}")))?;
    let y: f64 = gamma.sample(rng);
    if y <= 0.0 {
        return Err(Error::Numerical("gamma sample underflow".to_string()));
    }
    Ok(1.0 / y)
}

/// Background-variance conditional: inverse gamma with shape
/// `g + |background| / 2` and scale `h + SSR/2`.
pub fn draw_sigma1_sq<R: Rng + ?Sized>(
    state: &ModelState,
    tree: &ScoreTree,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    let part = partition(tree, state.m)?;
    let ssr: f64 = part
        .background
        .iter()
        .map(|&ix| (tree.score_ix(ix) - state.mu).powi(2))
        .sum();
    inverse_gamma(
        hyper.g + part.background.len() as f64 / 2.0,
        hyper.h + ssr / 2.0,
        rng,
    )
}

/// Pair-variance conditional: inverse gamma with one unit of shape per full
/// pair, half a unit per single-child group, and scale `b + J/(2(1-rho^2))`.
pub fn draw_sigma2_sq<R: Rng + ?Sized>(
    state: &ModelState,
    tree: &ScoreTree,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    let part = partition(tree, state.m)?;
    let j = j_statistic(&part, state.beta, state.rho);
    let shape = hyper.a + part.n_full_pairs() as f64 + part.n_singles() as f64 / 2.0;
    let scale = hyper.b + j / (2.0 * (1.0 - state.rho * state.rho));
    inverse_gamma(shape, scale, rng)
}

/// Growth-rate conditional: normal with mean `K/D` and variance `1/D`.
pub fn draw_beta<R: Rng + ?Sized>(
    state: &ModelState,
    tree: &ScoreTree,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    let part = partition(tree, state.m)?;
    let k = k_statistic(&part, state.rho, state.sigma2_sq, hyper.r, hyper.s);
    let d = beta_precision(&part, state.rho, state.sigma2_sq, hyper.s);
    let normal = Normal::new(k / d, (1.0 / d).sqrt())
        .map_err(|e| Error::Numerical(format!("beta sampler: {e}")))?;
    Ok(normal.sample(rng))
}

/// Background-mean conditional: conjugate normal over the background set.
pub fn draw_mu<R: Rng + ?Sized>(
    state: &ModelState,
    tree: &ScoreTree,
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<f64> {
    let part = partition(tree, state.m)?;
    let sum: f64 = part.background.iter().map(|&ix| tree.score_ix(ix)).sum();
    let n = part.background.len() as f64;
    let precision = 1.0 / hyper.q + n / state.sigma1_sq;
    let mean = (hyper.p / hyper.q + sum / state.sigma1_sq) / precision;
    let normal = Normal::new(mean, (1.0 / precision).sqrt())
        .map_err(|e| Error::Numerical(format!("mu sampler: {e}")))?;
    Ok(normal.sample(rng))
}

/// Log density of the rho conditional up to rho-free terms.
fn rho_log_density(rho: f64, u: f64, v: f64, n_full: f64, a: f64, b: f64, sigma2_sq: f64) -> f64 {
    let one_minus = 1.0 - rho * rho;
    (u - 1.0) * rho.ln() + (v - 1.0) * (1.0 - rho).ln()
        - 0.5 * n_full * one_minus.ln()
        - (a - 2.0 * rho * b) / (2.0 * one_minus * sigma2_sq)
}

fn sample_rho_grid<R: Rng + ?Sized>(
    u: f64,
    v: f64,
    n_full: f64,
    a: f64,
    b: f64,
    sigma2_sq: f64,
    grid_size: usize,
    rng: &mut R,
) -> Result<f64> {
    let g = grid_size as f64;
    let mut logs = Vec::with_capacity(grid_size);
    let mut max = f64::NEG_INFINITY;
    for i in 0..grid_size {
        let rho = (i as f64 + 0.5) / g;
        let ld = rho_log_density(rho, u, v, n_full, a, b, sigma2_sq);
        if ld > max {
            max = ld;
        }
        logs.push(ld);
    }
    if !max.is_finite() {
        return Err(Error::Numerical(
            "rho density vanished on the whole grid".to_string(),
        ));
    }
    let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    let target: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut cell = grid_size - 1;
    for (i, l) in logs.iter().enumerate() {
        acc += (l - max).exp();
        if acc >= target {
            cell = i;
            break;
        }
    }
    let jitter: f64 = rng.random::<f64>();
    Ok((cell as f64 + jitter) / g)
}

/// Sibling-correlation conditional via grid approximation: evaluate the log
/// density at cell centres over (0,1), sample a cell, jitter inside it.
pub fn draw_rho<R: Rng + ?Sized>(
    state: &ModelState,
    tree: &ScoreTree,
    hyper: &Hyperparams,
    grid_size: usize,
    rng: &mut R,
) -> Result<f64> {
    let part = partition(tree, state.m)?;
    let (a, b) = rho_pair_sums(&part, state.beta);
    sample_rho_grid(
        hyper.u,
        hyper.v,
        part.n_full_pairs() as f64,
        a,
        b,
        state.sigma2_sq,
        grid_size,
        rng,
    )
}

/// Exact draw from the discrete change-point conditional over the
/// candidate set (uniform prior, so only the likelihood enters).
pub fn draw_m<R: Rng + ?Sized>(
    state: &ModelState,
    tree: &ScoreTree,
    candidates: &[usize],
    rng: &mut R,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut engine = Engine::new(tree, candidates.to_vec());
    engine.draw_m(state, rng)
}

/// Precomputed subtree aggregates so each sweep's change-point draw is one
/// pass over the tree.
struct Engine<'t> {
    tree: &'t ScoreTree,
    post_order: Vec<usize>,
    candidates: Vec<usize>,
    n: f64,
    total_x: f64,
    total_x2: f64,
    /// Aggregates over strict descendants.
    desc_cnt: Vec<f64>,
    desc_x: Vec<f64>,
    desc_x2: Vec<f64>,
    /// Pair-group counts over the subtree including the node as mother.
    sub_full: Vec<f64>,
    sub_single: Vec<f64>,
    // Scratch reused across sweeps.
    group_term: Vec<f64>,
    j_incl: Vec<f64>,
    subtree_buf: Vec<usize>,
}

struct BranchGroupSums {
    /// Full-pair residual sums at the current beta: sum(d1^2 + d2^2) and
    /// sum(d1 d2).
    a: f64,
    b: f64,
    /// Single-child squared residuals.
    s_single: f64,
    n_full: f64,
    n_single: f64,
}

impl<'t> Engine<'t> {
    fn new(tree: &'t ScoreTree, candidates: Vec<usize>) -> Self {
        let topo = tree.topology();
        let n = topo.len();
        let post_order = topo.post_order();
        let mut desc_cnt = vec![0.0; n];
        let mut desc_x = vec![0.0; n];
        let mut desc_x2 = vec![0.0; n];
        let mut sub_full = vec![0.0; n];
        let mut sub_single = vec![0.0; n];
        for &ix in &post_order {
            let kids = topo.children_ix(ix);
            match kids.len() {
                2 => sub_full[ix] += 1.0,
                1 => sub_single[ix] += 1.0,
                _ => {}
            }
            for &c in kids {
                let x = tree.score_ix(c);
                desc_cnt[ix] += desc_cnt[c] + 1.0;
                desc_x[ix] += desc_x[c] + x;
                desc_x2[ix] += desc_x2[c] + x * x;
                sub_full[ix] += sub_full[c];
                sub_single[ix] += sub_single[c];
            }
        }
        let total_x: f64 = (0..n).map(|i| tree.score_ix(i)).sum();
        let total_x2: f64 = (0..n).map(|i| tree.score_ix(i).powi(2)).sum();
        Engine {
            tree,
            post_order,
            candidates,
            n: n as f64,
            total_x,
            total_x2,
            desc_cnt,
            desc_x,
            desc_x2,
            sub_full,
            sub_single,
            group_term: vec![0.0; n],
            j_incl: vec![0.0; n],
            subtree_buf: Vec::with_capacity(64),
        }
    }

    fn background_count(&self, m: usize) -> f64 {
        self.n - self.desc_cnt[m]
    }

    fn background_ssr(&self, m: usize, mu: f64) -> f64 {
        let sum = self.total_x - self.desc_x[m];
        let sum2 = self.total_x2 - self.desc_x2[m];
        let cnt = self.background_count(m);
        (sum2 - 2.0 * mu * sum + cnt * mu * mu).max(0.0)
    }

    /// Walk the groups of the branch rooted at `m` (the node itself plus
    /// strict descendants act as mothers).
    fn branch_group_sums(&mut self, m: usize, beta: f64) -> BranchGroupSums {
        let topo = self.tree.topology();
        let mut out = BranchGroupSums {
            a: 0.0,
            b: 0.0,
            s_single: 0.0,
            n_full: 0.0,
            n_single: 0.0,
        };
        self.subtree_buf.clear();
        self.subtree_buf.push(m);
        let mut head = 0;
        while head < self.subtree_buf.len() {
            let mother = self.subtree_buf[head];
            head += 1;
            let kids = topo.children_ix(mother);
            self.subtree_buf.extend_from_slice(kids);
            if kids.is_empty() {
                continue;
            }
            let x0 = self.tree.score_ix(mother);
            let d1 = self.tree.score_ix(kids[0]) - x0 - beta * self.tree.lifetime_ix(kids[0]);
            if kids.len() == 2 {
                let d2 = self.tree.score_ix(kids[1]) - x0 - beta * self.tree.lifetime_ix(kids[1]);
                out.a += d1 * d1 + d2 * d2;
                out.b += d1 * d2;
                out.n_full += 1.0;
            } else {
                out.s_single += d1 * d1;
                out.n_single += 1.0;
            }
        }
        out
    }

    /// K and D sums for the growth-rate conditional at the current rho.
    fn beta_terms(
        &mut self,
        m: usize,
        rho: f64,
        sigma2_sq: f64,
        hyper: &Hyperparams,
    ) -> (f64, f64) {
        let topo = self.tree.topology();
        let mut k = hyper.r / hyper.s;
        let mut d = 1.0 / hyper.s;
        let one_minus = 1.0 - rho * rho;
        self.subtree_buf.clear();
        self.subtree_buf.push(m);
        let mut head = 0;
        while head < self.subtree_buf.len() {
            let mother = self.subtree_buf[head];
            head += 1;
            let kids = topo.children_ix(mother);
            self.subtree_buf.extend_from_slice(kids);
            if kids.is_empty() {
                continue;
            }
            let x0 = self.tree.score_ix(mother);
            let e1 = self.tree.score_ix(kids[0]) - x0;
            let t1 = self.tree.lifetime_ix(kids[0]);
            if kids.len() == 2 {
                let e2 = self.tree.score_ix(kids[1]) - x0;
                let t2 = self.tree.lifetime_ix(kids[1]);
                k += ((t1 - rho * t2) * e1 + (t2 - rho * t1) * e2) / (one_minus * sigma2_sq);
                d += (t1 * t1 + t2 * t2 - 2.0 * rho * t1 * t2) / (one_minus * sigma2_sq);
            } else {
                k += t1 * e1 / sigma2_sq;
                d += t1 * t1 / sigma2_sq;
            }
        }
        (k, d)
    }

    /// One sweep of the exact change-point draw: group terms for every
    /// mother in the tree, subtree-inclusive sums, then one weight per
    /// candidate.
    fn draw_m<R: Rng + ?Sized>(&mut self, state: &ModelState, rng: &mut R) -> Result<usize> {
        let topo = self.tree.topology();
        let rho = state.rho;
        let one_minus = 1.0 - rho * rho;
        for &ix in &self.post_order {
            let kids = topo.children_ix(ix);
            let term = if kids.is_empty() {
                0.0
            } else {
                let x0 = self.tree.score_ix(ix);
                let d1 =
                    self.tree.score_ix(kids[0]) - x0 - state.beta * self.tree.lifetime_ix(kids[0]);
                if kids.len() == 2 {
                    let d2 = self.tree.score_ix(kids[1])
                        - x0
                        - state.beta * self.tree.lifetime_ix(kids[1]);
                    d1 * d1 + d2 * d2 - 2.0 * rho * d1 * d2
                } else {
                    one_minus * d1 * d1
                }
            };
            self.group_term[ix] = term;
            self.j_incl[ix] = term + kids.iter().map(|&c| self.j_incl[c]).sum::<f64>();
        }

        let ln_s1 = state.sigma1_sq.ln();
        let ln_s2 = state.sigma2_sq.ln();
        let ln_om = one_minus.ln();
        let mut max = f64::NEG_INFINITY;
        let mut logw = Vec::with_capacity(self.candidates.len());
        for &m in &self.candidates {
            let w = -0.5 * self.background_count(m) * ln_s1
                - self.background_ssr(m, state.mu) / (2.0 * state.sigma1_sq)
                - self.sub_full[m] * (0.5 * ln_om + ln_s2)
                - self.sub_single[m] * 0.5 * ln_s2
                - self.j_incl[m] / (2.0 * one_minus * state.sigma2_sq);
            if w > max {
                max = w;
            }
            logw.push(w);
        }
        if !max.is_finite() {
            return Err(Error::Numerical(
                "change-point weights vanished".to_string(),
            ));
        }
        let total: f64 = logw.iter().map(|w| (w - max).exp()).sum();
        let target: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, w) in logw.iter().enumerate() {
            acc += (w - max).exp();
            if acc >= target {
                return Ok(self.candidates[i]);
            }
        }
        Ok(*self.candidates.last().unwrap())
    }

    fn initial_state<R: Rng + ?Sized>(
        &self,
        hyper: &Hyperparams,
        rng: &mut R,
    ) -> Result<ModelState> {
        let m = self.candidates[rng.random_range(0..self.candidates.len())];
        let mu = Normal::new(hyper.p, hyper.q.sqrt())
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng);
        let sigma1_sq = inverse_gamma(hyper.g, hyper.h, rng)?;
        let sigma2_sq = inverse_gamma(hyper.a, hyper.b, rng)?;
        let beta = Normal::new(hyper.r, hyper.s.sqrt())
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng);
        let rho = Beta::new(hyper.u, hyper.v)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng)
            .clamp(1e-6, 1.0 - 1e-6);
        Ok(ModelState {
            m,
            mu,
            sigma1_sq,
            sigma2_sq,
            beta,
            rho,
        })
    }

    /// Systematic scan: M, mu, sigma1_sq, beta, sigma2_sq, rho.
    fn sweep<R: Rng + ?Sized>(
        &mut self,
        state: &mut ModelState,
        hyper: &Hyperparams,
        grid_size: usize,
        rng: &mut R,
    ) -> Result<()> {
        state.m = self.draw_m(state, rng)?;

        let n_bg = self.background_count(state.m);
        let bg_sum = self.total_x - self.desc_x[state.m];
        let precision = 1.0 / hyper.q + n_bg / state.sigma1_sq;
        let mean = (hyper.p / hyper.q + bg_sum / state.sigma1_sq) / precision;
        state.mu = Normal::new(mean, (1.0 / precision).sqrt())
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng);

        state.sigma1_sq = inverse_gamma(
            hyper.g + n_bg / 2.0,
            hyper.h + self.background_ssr(state.m, state.mu) / 2.0,
            rng,
        )?;

        let (k, d) = self.beta_terms(state.m, state.rho, state.sigma2_sq, hyper);
        state.beta = Normal::new(k / d, (1.0 / d).sqrt())
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(rng);

        let sums = self.branch_group_sums(state.m, state.beta);
        let one_minus = 1.0 - state.rho * state.rho;
        let j_pair = sums.a - 2.0 * state.rho * sums.b;
        state.sigma2_sq = inverse_gamma(
            hyper.a + sums.n_full + sums.n_single / 2.0,
            hyper.b + j_pair / (2.0 * one_minus) + sums.s_single / 2.0,
            rng,
        )?;

        state.rho = sample_rho_grid(
            hyper.u,
            hyper.v,
            sums.n_full,
            sums.a,
            sums.b,
            state.sigma2_sq,
            grid_size,
            rng,
        )?;
        Ok(())
    }
}

/// One chain's full trace (every iteration, before burn-in and thinning).
fn run_chain_raw(
    tree: &ScoreTree,
    hyper: &Hyperparams,
    candidates: &[usize],
    config: &ChainConfig,
    chain_index: usize,
) -> Result<Vec<ModelState>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut engine = Engine::new(tree, candidates.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    rng.set_stream(chain_index as u64 + 1);
    let mut state = engine
        .initial_state(hyper, &mut rng)
        .map_err(|e| Error::Chain {
            iteration: 0,
            source: Box::new(e),
        })?;
    let mut trace = Vec::with_capacity(config.max_iterations);
    for iteration in 0..config.max_iterations {
        engine
            .sweep(&mut state, hyper, config.rho_grid_size, &mut rng)
            .map_err(|e| Error::Chain {
                iteration,
                source: Box::new(e),
            })?;
        trace.push(state);
    }
    Ok(trace)
}

/// Post-burn-in, thinned draws of a single chain.
pub fn run_chain(
    tree: &ScoreTree,
    hyper: &Hyperparams,
    candidates: &[usize],
    config: &ChainConfig,
    chain_index: usize,
) -> Result<Vec<ModelState>> {
    config.validate()?;
    let raw = run_chain_raw(tree, hyper, candidates, config, chain_index)?;
    Ok(raw[config.burn_in..]
        .iter()
        .copied()
        .step_by(config.thinning)
        .collect())
}

/// Gelman-Rubin potential scale reduction factor over scalar traces.
///
/// Returns 1 by convention when every chain is constant at the same value.
pub fn rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 || chains.iter().any(|c| c.len() < 2) {
        return Err(Error::Argument(
            "rhat needs at least 2 chains of at least 2 draws".to_string(),
        ));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap() as f64;
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().take(n as usize).sum::<f64>() / n)
        .collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, m)| {
            c.iter()
                .take(n as usize)
                .map(|x| (x - m).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect();
    let w: f64 = vars.iter().sum::<f64>() / vars.len() as f64;
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let b_over_n =
        means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() as f64 - 1.0);
    if w == 0.0 {
        return Ok(if b_over_n == 0.0 { 1.0 } else { f64::INFINITY });
    }
    // Clipped at 1 from below: the finite-sample estimate dips to
    // sqrt((n-1)/n) when chains agree perfectly.
    Ok((((w * (n - 1.0) / n + b_over_n) / w).sqrt()).max(1.0))
}

/// Posterior draws, per chain, in standardized score units.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub chains: Vec<Vec<ModelState>>,
    /// Iteration index of the first retained draw and the thinning stride.
    pub first_iteration: usize,
    pub thinning: usize,
}

impl PosteriorSample {
    pub fn pooled(&self) -> impl Iterator<Item = &ModelState> {
        self.chains.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat table (iteration, chain, M, mu, sigma1_sq, sigma2_sq, beta, rho)
    /// with parameters rescaled to input units.
    pub fn write_table<W: std::io::Write>(
        &self,
        writer: W,
        tree: &ScoreTree,
        scale: f64,
    ) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "iteration",
            "chain",
            "M",
            "mu",
            "sigma1_sq",
            "sigma2_sq",
            "beta",
            "rho",
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
        for (chain_ix, chain) in self.chains.iter().enumerate() {
            for (k, st) in chain.iter().enumerate() {
                let iteration = self.first_iteration + k * self.thinning;
                wtr.write_record([
                    iteration.to_string(),
                    chain_ix.to_string(),
                    tree.topology().name(st.m).as_str().to_string(),
                    format!("{}", st.mu * scale),
                    format!("{}", st.sigma1_sq * scale * scale),
                    format!("{}", st.sigma2_sq * scale * scale),
                    format!("{}", st.beta * scale),
                    format!("{}", st.rho),
                ])
                .map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Conditional posterior means of the continuous parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedParams {
    pub mu: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub beta: f64,
    pub rho: f64,
}

/// Result of a converged multi-chain fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub m_star: CellId,
    pub m_star_ix: usize,
    /// Conditional posterior means given M = M*, in input units.
    pub params: FittedParams,
    /// Same, in standardized units (scores divided by `scale`).
    pub params_std: FittedParams,
    /// Pooled posterior frequency of M*.
    pub posterior_prob_m: f64,
    /// R-hat of the five continuous parameters at the convergence checkpoint.
    pub rhats: Vec<(String, f64)>,
    /// Iterations consumed when convergence was declared.
    pub converged_at: usize,
    pub sample: PosteriorSample,
    /// Standardization factor applied to scores before sampling.
    pub scale: f64,
}

/// Options for `fit`: explicit priors and standardization scale override
/// the data-driven defaults.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub chain: ChainConfig,
    pub hyper: Option<Hyperparams>,
    pub scale: Option<f64>,
}

const PARAM_NAMES: [&str; 5] = ["mu", "sigma1_sq", "sigma2_sq", "beta", "rho"];

fn param_trace(raw: &[ModelState], lo: usize, hi: usize, which: usize) -> Vec<f64> {
    raw[lo..hi]
        .iter()
        .map(|s| match which {
            0 => s.mu,
            1 => s.sigma1_sq,
            2 => s.sigma2_sq,
            3 => s.beta,
            _ => s.rho,
        })
        .collect()
}

/// Fit the model on the tree's own candidate set.
pub fn fit(tree: &ScoreTree, opts: &FitOptions) -> Result<FitResult> {
    let candidates = tree.candidate_set_ix();
    fit_with_candidates(tree, &candidates, opts)
}

/// Run all chains, declare convergence at the first checkpoint where every
/// continuous parameter satisfies `|rhat - 1| < tolerance`, and report the
/// posterior mode of the change point with conditional posterior means.
pub fn fit_with_candidates(
    tree: &ScoreTree,
    candidates: &[usize],
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.chain.validate()?;
    if candidates.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }

    let raw_scores = tree.scores();
    let scale = match opts.scale {
        Some(s) => s,
        None => {
            let n = raw_scores.len() as f64;
            let mean = raw_scores.iter().sum::<f64>() / n;
            let var =
                raw_scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            var.sqrt()
        }
    };
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Numerical(format!("degenerate score scale {scale}")));
    }
    let std_tree = standardized_copy(tree, scale)?;
    let data_driven;
    let hyper = match &opts.hyper {
        Some(h) => {
            h.validate()?;
            h
        }
        None => {
            data_driven = Hyperparams::data_driven(&std_tree.scores());
            &data_driven
        }
    };

    let config = &opts.chain;
    let traces: Vec<Result<Vec<ModelState>>> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| run_chain_raw(&std_tree, hyper, candidates, config, chain))
        .collect();
    let mut chains = Vec::with_capacity(config.n_chains);
    for t in traces {
        chains.push(t?);
    }

    // Fixed checkpoint ladder: convergence is declared at the first
    // checkpoint that passes, so a larger budget can only add checkpoints.
    let post = config.max_iterations - config.burn_in;
    let checkpoints: Vec<usize> = (1..=4)
        .map(|k| config.burn_in + post * k / 4)
        .filter(|&c| c > config.burn_in + 1)
        .collect();
    let mut converged_at = None;
    let mut last_rhats = Vec::new();
    for &cp in &checkpoints {
        let mut rhats = Vec::with_capacity(5);
        let mut ok = true;
        for (which, name) in PARAM_NAMES.iter().enumerate() {
            let per_chain: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| param_trace(c, config.burn_in, cp, which))
                .collect();
            let r = rhat(&per_chain)?;
            ok &= (r - 1.0).abs() < config.rhat_tolerance;
            rhats.push((name.to_string(), r));
        }
        last_rhats = rhats;
        if ok {
            converged_at = Some(cp);
            break;
        }
    }
    let Some(cp) = converged_at else {
        return Err(Error::NoConvergence {
            max_iterations: config.max_iterations,
            rhats: last_rhats,
        });
    };

    let sample = PosteriorSample {
        chains: chains
            .iter()
            .map(|c| {
                c[config.burn_in..cp]
                    .iter()
                    .copied()
                    .step_by(config.thinning)
                    .collect()
            })
            .collect(),
        first_iteration: config.burn_in,
        thinning: config.thinning,
    };

    // Posterior mode of M, ties broken by cell name.
    let mut counts = vec![0usize; tree.len()];
    for st in sample.pooled() {
        counts[st.m] += 1;
    }
    let total: usize = counts.iter().sum();
    let m_star_ix = candidates
        .iter()
        .copied()
        .max_by(|&x, &y| {
            counts[x]
                .cmp(&counts[y])
                .then_with(|| tree.topology().name(y).cmp(tree.topology().name(x)))
        })
        .unwrap();

    let cond: Vec<&ModelState> = sample.pooled().filter(|s| s.m == m_star_ix).collect();
    let k = cond.len().max(1) as f64;
    let params_std = FittedParams {
        mu: cond.iter().map(|s| s.mu).sum::<f64>() / k,
        sigma1_sq: cond.iter().map(|s| s.sigma1_sq).sum::<f64>() / k,
        sigma2_sq: cond.iter().map(|s| s.sigma2_sq).sum::<f64>() / k,
        beta: cond.iter().map(|s| s.beta).sum::<f64>() / k,
        rho: cond.iter().map(|s| s.rho).sum::<f64>() / k,
    };
    let params = FittedParams {
        mu: params_std.mu * scale,
        sigma1_sq: params_std.sigma1_sq * scale * scale,
        sigma2_sq: params_std.sigma2_sq * scale * scale,
        beta: params_std.beta * scale,
        rho: params_std.rho,
    };

    Ok(FitResult {
        m_star: tree.topology().name(m_star_ix).clone(),
        m_star_ix,
        params,
        params_std,
        posterior_prob_m: cond.len() as f64 / total.max(1) as f64,
        rhats: last_rhats,
        converged_at: cp,
        sample,
        scale,
    })
}

fn standardized_copy(tree: &ScoreTree, scale: f64) -> Result<ScoreTree> {
    let mut out = tree.clone();
    for ix in 0..out.len() {
        let s = out.score_ix(ix) / scale;
        out.set_score_ix(ix, s);
    }
    Ok(out)
}

/// Log posterior evaluated on the standardized tree; exposed for
/// stationarity diagnostics.
pub fn sample_log_posterior(
    tree: &ScoreTree,
    scale: f64,
    hyper: &Hyperparams,
    state: &ModelState,
) -> Result<f64> {
    let std_tree = standardized_copy(tree, scale)?;
    log_posterior(state, &std_tree, hyper)
}
