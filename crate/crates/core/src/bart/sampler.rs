//! Backfitting Metropolis-within-Gibbs sampler for the sum-of-trees model.
//!
//! Each sweep visits the trees in order. For tree `j` the partial residual
//! of all other trees is formed, one structural move is proposed (grow 0.25,
//! prune 0.25, change 0.50) and accepted on the likelihood with leaf values
//! integrated out, then every leaf value is redrawn from its normal full
//! conditional. The residual variance is redrawn once per sweep.
//!
//! Split thresholds are midpoints between adjacent distinct training values
//! of a feature. A node can split on feature `f` when its rows hold at
//! least two distinct values of `f`; the tree prior gives such a node at
//! depth `d` split probability `alpha (1 + d)^-beta` and a uniform rule
//! (uniform feature among splittable ones, then uniform cut point strictly
//! inside the node's range). Nodes that cannot split are leaves with prior
//! probability one.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tree::{RegTree, WorkKind, WorkTree};
use crate::stats::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveKind {
    Grow,
    Prune,
    Change,
}

pub const GROW_PROB: f64 = 0.25;
pub const PRUNE_PROB: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveOutcome {
    /// No node admits the move; the tree is unchanged.
    Invalid,
    Rejected,
    Accepted,
}

/// Proposal and acceptance counts per move type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub grow_proposed: u64,
    pub grow_accepted: u64,
    pub prune_proposed: u64,
    pub prune_accepted: u64,
    pub change_proposed: u64,
    pub change_accepted: u64,
}

impl MoveStats {
    pub fn grow_rate(&self) -> f64 {
        self.grow_accepted as f64 / self.grow_proposed.max(1) as f64
    }

    fn record(&mut self, kind: MoveKind, outcome: MoveOutcome) {
        let acc = (outcome == MoveOutcome::Accepted) as u64;
        match kind {
            MoveKind::Grow => {
                self.grow_proposed += 1;
                self.grow_accepted += acc;
            }
            MoveKind::Prune => {
                self.prune_proposed += 1;
                self.prune_accepted += acc;
            }
            MoveKind::Change => {
                self.change_proposed += 1;
                self.change_accepted += acc;
            }
        }
    }
}

/// Prior hyperparameters on the standardised outcome scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub alpha: f64,
    pub beta: f64,
    /// Leaf prior standard deviation.
    pub leaf_sd: f64,
    pub nu: f64,
    pub lambda: f64,
}

impl Prior {
    pub fn split_prob(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

/// Training features in column form with the sorted distinct values that
/// define the candidate cut points.
pub(crate) struct Features {
    pub cols: Vec<Vec<f64>>,
    pub distinct: Vec<Vec<f64>>,
}

impl Features {
    pub fn new(x: &Array2<f64>) -> Self {
        let cols: Vec<Vec<f64>> = (0..x.ncols()).map(|j| x.column(j).to_vec()).collect();
        let distinct = cols
            .iter()
            .map(|c| {
                let mut v = c.clone();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        Self { cols, distinct }
    }

    /// Number of cut points strictly inside the range of `f` over `rows`.
    fn n_cuts(&self, f: usize, rows: &[u32]) -> (usize, usize) {
        let col = &self.cols[f];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in rows {
            let v = col[i as usize];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(lo < hi) {
            return (0, 0);
        }
        let d = &self.distinct[f];
        let a = d.partition_point(|&v| v < lo);
        let b = d.partition_point(|&v| v < hi);
        (a, b - a)
    }

    /// Features with at least one cut point inside the node, with the index
    /// of the first cut and the number of cuts.
    fn splittable(&self, rows: &[u32]) -> Vec<(usize, usize, usize)> {
        (0..self.cols.len())
            .filter_map(|f| {
                let (start, k) = self.n_cuts(f, rows);
                (k > 0).then_some((f, start, k))
            })
            .collect()
    }

    fn can_split(&self, rows: &[u32]) -> bool {
        (0..self.cols.len()).any(|f| self.n_cuts(f, rows).1 > 0)
    }

    /// Threshold between distinct values `c` and `c + 1` of feature `f`.
    fn cut(&self, f: usize, c: usize) -> f64 {
        let d = &self.distinct[f];
        let mid = 0.5 * (d[c] + d[c + 1]);
        if mid >= d[c + 1] {
            d[c]
        } else {
            mid
        }
    }
}

pub struct Sampler {
    pub(crate) feats: Features,
    y: Vec<f64>,
    pub(crate) trees: Vec<WorkTree>,
    preds: Vec<Vec<f64>>,
    total: Vec<f64>,
    sigma: f64,
    fixed_sigma: bool,
    prior: Prior,
    rng: Rng,
    stats: MoveStats,
    resid: Vec<f64>,
}

impl Sampler {
    pub fn new(x: &Array2<f64>, y_std: Vec<f64>, n_trees: usize, prior: Prior, sigma0: f64, rng: Rng) -> Self {
        let n = y_std.len();
        Self {
            feats: Features::new(x),
            y: y_std,
            trees: (0..n_trees).map(|_| WorkTree::stump(n, 0.0)).collect(),
            preds: vec![vec![0.0; n]; n_trees],
            total: vec![0.0; n],
            sigma: sigma0,
            fixed_sigma: false,
            prior,
            rng,
            stats: MoveStats::default(),
            resid: vec![0.0; n],
        }
    }

    /// Hold the residual scale at its initial value.
    pub fn fix_sigma(mut self) -> Self {
        self.fixed_sigma = true;
        self
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn move_stats(&self) -> MoveStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = MoveStats::default();
    }

    pub fn snapshot(&self) -> Vec<RegTree> {
        self.trees.iter().map(WorkTree::to_reg).collect()
    }

    /// In-sample fit of the current state.
    pub fn fitted(&self) -> &[f64] {
        &self.total
    }

    /// One backfitting sweep over all trees followed by the residual-scale
    /// update.
    pub fn sweep(&mut self) {
        for j in 0..self.trees.len() {
            self.sweep_tree(j);
        }
        // exact recomputation avoids drift from incremental updates
        let n = self.y.len();
        for i in 0..n {
            self.total[i] = self.preds.iter().map(|p| p[i]).sum();
        }
        if !self.fixed_sigma {
            self.draw_sigma();
        }
    }

    /// Set the working residual to the outcome minus every tree but `j`.
    pub fn refresh_residual(&mut self, j: usize) {
        for i in 0..self.y.len() {
            self.resid[i] = self.y[i] - self.total[i] + self.preds[j][i];
        }
    }

    fn sweep_tree(&mut self, j: usize) {
        self.refresh_residual(j);
        let u: f64 = self.rng.gen();
        let kind = if u < GROW_PROB {
            MoveKind::Grow
        } else if u < GROW_PROB + PRUNE_PROB {
            MoveKind::Prune
        } else {
            MoveKind::Change
        };
        let outcome = self.propose(j, kind);
        self.stats.record(kind, outcome);
        self.draw_leaves(j);
    }

    fn leaf_loglik(&self, rows: &[u32]) -> f64 {
        let s: f64 = rows.iter().map(|&i| self.resid[i as usize]).sum();
        leaf_marginal(rows.len(), s, self.sigma * self.sigma, self.prior.leaf_sd.powi(2))
    }

    fn leaf_log_prior(&self, depth: usize, rows: &[u32]) -> f64 {
        if self.feats.can_split(rows) {
            (1.0 - self.prior.split_prob(depth)).ln()
        } else {
            0.0
        }
    }

    /// Metropolis-Hastings step of the given kind on tree `j`, using the
    /// residual set by the last [`Sampler::refresh_residual`].
    pub fn propose(&mut self, j: usize, kind: MoveKind) -> MoveOutcome {
        match kind {
            MoveKind::Grow => self.propose_grow(j),
            MoveKind::Prune => self.propose_prune(j),
            MoveKind::Change => self.propose_change(j),
        }
    }

    fn propose_grow(&mut self, j: usize) -> MoveOutcome {
        let tree = &self.trees[j];
        let growable: Vec<usize> = tree
            .leaves()
            .into_iter()
            .filter(|&k| self.feats.can_split(&tree.nodes[k].rows))
            .collect();
        if growable.is_empty() {
            return MoveOutcome::Invalid;
        }
        let k = growable[self.rng.gen_range(0..growable.len())];
        let options = self.feats.splittable(&tree.nodes[k].rows);
        let (f, start, n_cuts) = options[self.rng.gen_range(0..options.len())];
        let c = start + self.rng.gen_range(0..n_cuts);
        let threshold = self.feats.cut(f, c);

        let node = &tree.nodes[k];
        let depth = node.depth;
        let col = &self.feats.cols[f];
        let (l, r): (Vec<u32>, Vec<u32>) = node.rows.iter().partition(|&&i| col[i as usize] <= threshold);

        let sibling_is_leaf = node.parent.is_some_and(|p| match tree.nodes[p].kind {
            WorkKind::Split { left, right, .. } => {
                let s = if left == k { right } else { left };
                tree.is_leaf(s)
            }
            _ => false,
        });
        let nog_after = tree.prunable().len() + 1 - sibling_is_leaf as usize;
        let ps = self.prior.split_prob(depth);
        let log_ratio = (PRUNE_PROB / GROW_PROB).ln() + (growable.len() as f64).ln()
            - (nog_after as f64).ln()
            + ps.ln()
            - (1.0 - ps).ln()
            + self.leaf_log_prior(depth + 1, &l)
            + self.leaf_log_prior(depth + 1, &r)
            + self.leaf_loglik(&l)
            + self.leaf_loglik(&r)
            - self.leaf_loglik(&node.rows);

        if self.accept(log_ratio) {
            self.trees[j].grow(k, f, threshold, &self.feats.cols[f]);
            MoveOutcome::Accepted
        } else {
            MoveOutcome::Rejected
        }
    }

    fn propose_prune(&mut self, j: usize) -> MoveOutcome {
        let tree = &self.trees[j];
        let nog = tree.prunable();
        if nog.is_empty() {
            return MoveOutcome::Invalid;
        }
        let k = nog[self.rng.gen_range(0..nog.len())];
        let WorkKind::Split { left, right, .. } = tree.nodes[k].kind else {
            unreachable!()
        };
        let growable_before = tree
            .leaves()
            .into_iter()
            .filter(|&q| self.feats.can_split(&tree.nodes[q].rows))
            .count();
        let (lrows, rrows) = (&tree.nodes[left].rows, &tree.nodes[right].rows);
        let growable_after = growable_before + 1
            - self.feats.can_split(lrows) as usize
            - self.feats.can_split(rrows) as usize;
        let depth = tree.nodes[k].depth;
        let ps = self.prior.split_prob(depth);
        let log_ratio = (GROW_PROB / PRUNE_PROB).ln() + (nog.len() as f64).ln()
            - (growable_after as f64).ln()
            + (1.0 - ps).ln()
            - ps.ln()
            - self.leaf_log_prior(depth + 1, lrows)
            - self.leaf_log_prior(depth + 1, rrows)
            + self.leaf_loglik(&tree.nodes[k].rows)
            - self.leaf_loglik(lrows)
            - self.leaf_loglik(rrows);

        if self.accept(log_ratio) {
            self.trees[j].prune(k);
            MoveOutcome::Accepted
        } else {
            MoveOutcome::Rejected
        }
    }

    fn propose_change(&mut self, j: usize) -> MoveOutcome {
        let tree = &self.trees[j];
        let internal = tree.internal();
        if internal.is_empty() {
            return MoveOutcome::Invalid;
        }
        let k = internal[self.rng.gen_range(0..internal.len())];
        let options = self.feats.splittable(&tree.nodes[k].rows);
        let (f, start, n_cuts) = options[self.rng.gen_range(0..options.len())];
        let c = start + self.rng.gen_range(0..n_cuts);
        let threshold = self.feats.cut(f, c);

        let mut candidate = tree.clone();
        if !candidate.change(k, f, threshold, &self.feats.cols) {
            return MoveOutcome::Rejected;
        }
        // The rule prior at `k` cancels against its proposal probability
        // because the node's rows, and hence its rule set, are unchanged.
        let log_ratio = self.subtree_log_post(&candidate, k) - self.subtree_log_post(tree, k);
        if self.accept(log_ratio) {
            self.trees[j] = candidate;
            MoveOutcome::Accepted
        } else {
            MoveOutcome::Rejected
        }
    }

    /// Log prior (excluding the rule at `root`) plus leaf-marginal
    /// likelihood for the subtree under `root`.
    fn subtree_log_post(&self, t: &WorkTree, root: usize) -> f64 {
        let mut acc = 0.0;
        let mut stack = vec![root];
        while let Some(k) = stack.pop() {
            let node = &t.nodes[k];
            match node.kind {
                WorkKind::Leaf { .. } => {
                    acc += self.leaf_log_prior(node.depth, &node.rows) + self.leaf_loglik(&node.rows);
                }
                WorkKind::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    acc += self.prior.split_prob(node.depth).ln();
                    if k != root {
                        let options = self.feats.splittable(&node.rows);
                        let n_cuts = options
                            .iter()
                            .find(|o| o.0 == feature)
                            .map_or(0, |o| o.2);
                        if n_cuts == 0 {
                            return f64::NEG_INFINITY;
                        }
                        acc -= (options.len() as f64).ln() + (n_cuts as f64).ln();
                    }
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        acc
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        if log_ratio >= 0.0 {
            return true;
        }
        let u: f64 = self.rng.gen();
        u.ln() < log_ratio
    }

    fn draw_leaves(&mut self, j: usize) {
        let s2 = self.sigma * self.sigma;
        let t2 = self.prior.leaf_sd * self.prior.leaf_sd;
        let leaves = self.trees[j].leaves();
        for k in leaves {
            let rows = std::mem::take(&mut self.trees[j].nodes[k].rows);
            let s: f64 = rows.iter().map(|&i| self.resid[i as usize]).sum();
            let n = rows.len() as f64;
            let denom = s2 + n * t2;
            let mean = t2 * s / denom;
            let sd = (s2 * t2 / denom).sqrt();
            let z: f64 = StandardNormal.sample(&mut self.rng);
            let value = mean + sd * z;
            for &i in &rows {
                let i = i as usize;
                self.total[i] += value - self.preds[j][i];
                self.preds[j][i] = value;
            }
            let node = &mut self.trees[j].nodes[k];
            node.rows = rows;
            node.kind = WorkKind::Leaf { value };
        }
    }

    fn draw_sigma(&mut self) {
        let n = self.y.len();
        let ssr: f64 = self
            .y
            .iter()
            .zip(&self.total)
            .map(|(y, f)| (y - f) * (y - f))
            .sum();
        let dof = self.prior.nu + n as f64;
        let chi = ChiSquared::new(dof).expect("positive degrees of freedom");
        let x: f64 = chi.sample(&mut self.rng);
        self.sigma = ((self.prior.nu * self.prior.lambda + ssr) / x).sqrt();
    }
}

/// Log marginal likelihood of `n` residuals with sum `s` in one leaf, after
/// integrating the leaf value against its normal prior. Terms shared by all
/// tree structures are dropped.
pub fn leaf_marginal(n: usize, s: f64, sigma2: f64, leaf_var: f64) -> f64 {
    let denom = sigma2 + n as f64 * leaf_var;
    0.5 * (sigma2 / denom).ln() + leaf_var * s * s / (2.0 * sigma2 * denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::rng_for;

    fn prior() -> Prior {
        Prior {
            alpha: 0.95,
            beta: 2.0,
            leaf_sd: 0.1,
            nu: 3.0,
            lambda: 0.1,
        }
    }

    fn line(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, 1), |(i, _)| i as f64)
    }

    #[test]
    fn prune_on_stump_is_invalid() {
        let mut s = Sampler::new(&line(10), vec![0.0; 10], 1, prior(), 1.0, rng_for(1, &[]));
        let before = s.snapshot();
        assert_eq!(s.propose(0, MoveKind::Prune), MoveOutcome::Invalid);
        assert_eq!(s.propose(0, MoveKind::Change), MoveOutcome::Invalid);
        assert_eq!(s.snapshot(), before);
    }

    #[test]
    fn grow_then_prune_restores_topology() {
        let x = Array2::from_shape_fn((30, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let feats = Features::new(&x);
        let mut t = WorkTree::stump(30, 0.0);
        let th = feats.cut(0, 3);
        t.grow(0, 0, th, &feats.cols[0]);
        let original = t.to_reg().topology();
        let WorkKind::Split { left, .. } = t.nodes[0].kind else { panic!() };
        let th2 = feats.cut(1, 4);
        t.grow(left, 1, th2, &feats.cols[1]);
        assert_ne!(t.to_reg().topology(), original);
        t.prune(left);
        assert_eq!(t.to_reg().topology(), original);
        assert_eq!(t.leaves().len(), 2);
    }

    #[test]
    fn marginal_matches_numeric_integration() {
        // integrate prod N(r_i | mu, s2) N(mu | 0, t2) over mu on a fine grid
        let r = [0.3, -0.1, 0.5];
        let (s2, t2) = (0.4f64, 0.2f64);
        let h = 1e-4;
        let mut integral = 0.0;
        let mut mu = -6.0;
        while mu < 6.0 {
            let lik: f64 = r
                .iter()
                .map(|x: &f64| (-(x - mu).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt())
                .product();
            let pri = (-mu * mu / (2.0 * t2)).exp() / (2.0 * std::f64::consts::PI * t2).sqrt();
            integral += lik * pri * h;
            mu += h;
        }
        let ss: f64 = r.iter().map(|x| x * x).sum();
        let dropped = -(r.len() as f64) / 2.0 * (2.0 * std::f64::consts::PI * s2).ln() - ss / (2.0 * s2);
        let closed = leaf_marginal(3, r.iter().sum(), s2, t2) + dropped;
        assert!((integral.ln() - closed).abs() < 1e-6);
    }
}
