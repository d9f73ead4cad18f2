//! Random forests for regression and classification.
//!
//! Used for the chained-equations imputation models, for propensity scores
//! and for shadow-feature covariate screening. Trees use axis-aligned
//! splits `x <= threshold` chosen by variance reduction (regression) or
//! Gini decrease (classification).

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::stats::{self, rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` selects ⌈p/3⌉ for regression and
    /// ⌈√p⌉ for classification.
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            min_leaf: 5,
            max_depth: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn resolved_mtry(&self, p: usize, classification: bool) -> usize {
        let default = if classification {
            (p as f64).sqrt().ceil() as usize
        } else {
            p.div_ceil(3)
        };
        self.mtry.unwrap_or(default).clamp(1, p.max(1))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::config("forest needs n_trees >= 1"));
        }
        if self.min_leaf == 0 {
            return Err(Error::config("forest needs min_leaf >= 1"));
        }
        if let Some(m) = self.mtry {
            if m == 0 || (p > 0 && m > p) {
                return Err(Error::config(format!("mtry {m} outside 1..={p}")));
            }
        }
        Ok(())
    }
}

/// Response variable for a forest fit.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Regression(Vec<f64>),
    Classes { labels: Vec<usize>, n_classes: usize },
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Response::Regression(y) => y.len(),
            Response::Classes { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&self, i: usize) -> f64 {
        match self {
            Response::Regression(y) => y[i],
            Response::Classes { labels, .. } => labels[i] as f64,
        }
    }

    fn n_classes(&self) -> Option<usize> {
        match self {
            Response::Regression(_) => None,
            Response::Classes { n_classes, .. } => Some(*n_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    /// Mean response (regression) or majority-free class-probability vector.
    pub mean: f64,
    pub probs: Vec<f64>,
    /// In-bag responses that landed here, kept for predictive draws.
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(Leaf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_for(&self, row: ArrayView1<f64>) -> &Leaf {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf(l) => return l,
            }
        }
    }

    pub fn is_root_only(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, k: usize) -> usize {
            match &t.nodes[k] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Out-of-bag training rows per tree (empty without bootstrap).
    pub oob_indices: Vec<Vec<usize>>,
    pub n_features: usize,
    pub n_classes: Option<usize>,
    pub seed: u64,
}

pub fn fit_forest(x: &Array2<f64>, y: &Response, p: &ForestParams) -> Result<Forest> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::schema(format!("{} responses for {} rows", y.len(), n)));
    }
    if n == 0 {
        return Err(Error::data("cannot fit a forest on zero rows"));
    }
    p.validate(x.ncols())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("forest covariates must be finite"));
    }
    if let Response::Classes { labels, n_classes } = y {
        if labels.iter().any(|&l| l >= *n_classes) {
            return Err(Error::data("class label out of range"));
        }
    }
    let cols: Vec<Vec<f64>> = (0..x.ncols()).map(|j| x.column(j).to_vec()).collect();
    let mtry = p.resolved_mtry(x.ncols(), y.n_classes().is_some());

    let fitted: Vec<(Tree, Vec<usize>)> = (0..p.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(p.seed, &[t as u64]);
            let (rows, oob) = if p.bootstrap {
                let mut counts = vec![0usize; n];
                let rows: Vec<usize> = (0..n)
                    .map(|_| {
                        let i = rng.gen_range(0..n);
                        counts[i] += 1;
                        i
                    })
                    .collect();
                let oob = (0..n).filter(|&i| counts[i] == 0).collect();
                (rows, oob)
            } else {
                ((0..n).collect(), Vec::new())
            };
            let builder = TreeBuilder {
                cols: &cols,
                y,
                mtry,
                min_leaf: p.min_leaf,
                max_depth: p.max_depth,
            };
            (builder.build(rows, &mut rng), oob)
        })
        .collect();

    let (trees, oob_indices) = fitted.into_iter().unzip();
    Ok(Forest {
        trees,
        oob_indices,
        n_features: x.ncols(),
        n_classes: y.n_classes(),
        seed: p.seed,
    })
}

struct TreeBuilder<'a> {
    cols: &'a [Vec<f64>],
    y: &'a Response,
    mtry: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn build(&self, rows: Vec<usize>, rng: &mut Rng) -> Tree {
        let mut tree = Tree { nodes: Vec::new() };
        self.grow(&mut tree, rows, 0, rng);
        tree
    }

    fn grow(&self, tree: &mut Tree, rows: Vec<usize>, depth: usize, rng: &mut Rng) -> usize {
        let id = tree.nodes.len();
        tree.nodes.push(Node::Leaf(self.leaf(&rows)));
        let can_split = rows.len() >= 2 * self.min_leaf
            && self.max_depth.is_none_or(|d| depth < d)
            && !self.is_pure(&rows);
        if !can_split {
            return id;
        }
        let Some(best) = self.best_split(&rows, rng) else {
            return id;
        };
        let col = &self.cols[best.feature];
        let (l, r): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| col[i] <= best.threshold);
        let left = self.grow(tree, l, depth + 1, rng);
        let right = self.grow(tree, r, depth + 1, rng);
        tree.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn is_pure(&self, rows: &[usize]) -> bool {
        let first = self.y.value(rows[0]);
        rows.iter().all(|&i| self.y.value(i) == first)
    }

    fn leaf(&self, rows: &[usize]) -> Leaf {
        let samples: Vec<f64> = rows.iter().map(|&i| self.y.value(i)).collect();
        match self.y {
            Response::Regression(_) => Leaf {
                mean: stats::mean(&samples),
                probs: Vec::new(),
                samples,
            },
            Response::Classes { n_classes, .. } => {
                let mut probs = vec![0.0; *n_classes];
                for &s in &samples {
                    probs[s as usize] += 1.0;
                }
                let total = samples.len() as f64;
                probs.iter_mut().for_each(|p| *p /= total);
                Leaf {
                    mean: f64::NAN,
                    probs,
                    samples,
                }
            }
        }
    }

    /// Best split over a random subset of `mtry` features. If none of them
    /// yields a positive-gain split, further features are tried in the same
    /// random order until one does.
    fn best_split(&self, rows: &[usize], rng: &mut Rng) -> Option<Candidate> {
        let p = self.cols.len();
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(rng);
        let mut first: Vec<usize> = order[..self.mtry].to_vec();
        first.sort_unstable();
        let mut best = self.best_among(&first, rows);
        let mut k = self.mtry;
        while best.is_none() && k < p {
            best = self.best_among(&[order[k]], rows);
            k += 1;
        }
        best
    }

    fn best_among(&self, features: &[usize], rows: &[usize]) -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for &f in features {
            if let Some(c) = self.best_for_feature(f, rows) {
                if best.as_ref().is_none_or(|b| c.gain > b.gain) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn best_for_feature(&self, f: usize, rows: &[usize]) -> Option<Candidate> {
        let col = &self.cols[f];
        let mut sorted: Vec<usize> = rows.to_vec();
        sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
        let n = sorted.len();
        let min_leaf = self.min_leaf;
        let mut best: Option<Candidate> = None;
        let mut consider = |k: usize, gain: f64| {
            // split between sorted[k-1] and sorted[k]
            let lo = col[sorted[k - 1]];
            let hi = col[sorted[k]];
            if lo == hi || gain <= 1e-12 {
                return;
            }
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                let mut t = 0.5 * (lo + hi);
                if t >= hi {
                    t = lo;
                }
                best = Some(Candidate {
                    gain,
                    feature: f,
                    threshold: t,
                });
            }
        };
        match self.y {
            Response::Regression(y) => {
                let total: f64 = sorted.iter().map(|&i| y[i]).sum();
                let parent = total * total / n as f64;
                let mut left = 0.0;
                for k in 1..n {
                    left += y[sorted[k - 1]];
                    if k < min_leaf || n - k < min_leaf {
                        continue;
                    }
                    let right = total - left;
                    let gain =
                        left * left / k as f64 + right * right / (n - k) as f64 - parent;
                    consider(k, gain);
                }
            }
            Response::Classes { labels, n_classes } => {
                let mut total = vec![0.0; *n_classes];
                for &i in &sorted {
                    total[labels[i]] += 1.0;
                }
                let parent = total.iter().map(|c| c * c).sum::<f64>() / n as f64;
                let mut left = vec![0.0; *n_classes];
                for k in 1..n {
                    left[labels[sorted[k - 1]]] += 1.0;
                    if k < min_leaf || n - k < min_leaf {
                        continue;
                    }
                    let (mut sl, mut sr) = (0.0, 0.0);
                    for c in 0..*n_classes {
                        let r = total[c] - left[c];
                        sl += left[c] * left[c];
                        sr += r * r;
                    }
                    let gain = sl / k as f64 + sr / (n - k) as f64 - parent;
                    consider(k, gain);
                }
            }
        }
        best
    }
}

impl Forest {
    fn check_schema(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.n_features {
            return Err(Error::schema(format!(
                "forest trained on {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Regression predictions: per row, the mean over trees.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_schema(x)?;
        if self.n_classes.is_some() {
            return Err(Error::schema("use predict_proba for a classification forest"));
        }
        Ok((0..x.nrows())
            .map(|i| self.mean_over(self.trees.iter(), x.row(i)))
            .collect())
    }

    fn mean_over<'a>(&self, trees: impl Iterator<Item = &'a Tree>, row: ArrayView1<f64>) -> f64 {
        let per_tree: Vec<f64> = trees.map(|t| t.leaf_for(row).mean).collect();
        stats::sorted_mean(&per_tree)
    }

    fn proba_over<'a>(&self, trees: impl Iterator<Item = &'a Tree>, row: ArrayView1<f64>) -> Vec<f64> {
        let k = self.n_classes.unwrap_or(0);
        let leaves: Vec<&Leaf> = trees.map(|t| t.leaf_for(row)).collect();
        let mut probs: Vec<f64> = (0..k)
            .map(|c| {
                let v: Vec<f64> = leaves.iter().map(|l| l.probs[c]).collect();
                stats::sorted_mean(&v)
            })
            .collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        probs
    }

    /// Class probabilities, one vector per row summing to one.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Vec<Vec<f64>>> {
        self.check_schema(x)?;
        if self.n_classes.is_none() {
            return Err(Error::schema("predict_proba needs a classification forest"));
        }
        Ok((0..x.nrows())
            .map(|i| self.proba_over(self.trees.iter(), x.row(i)))
            .collect())
    }

    fn oob_trees_per_row(&self, n: usize) -> Vec<Vec<usize>> {
        let mut per_row = vec![Vec::new(); n];
        for (t, oob) in self.oob_indices.iter().enumerate() {
            for &i in oob {
                per_row[i].push(t);
            }
        }
        per_row
    }

    /// Out-of-bag regression predictions on the training matrix. Rows that
    /// were in-bag for every tree fall back to the full-forest mean.
    pub fn predict_oob(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_schema(x)?;
        let per_row = self.oob_trees_per_row(x.nrows());
        Ok((0..x.nrows())
            .map(|i| {
                if per_row[i].is_empty() {
                    self.mean_over(self.trees.iter(), x.row(i))
                } else {
                    self.mean_over(per_row[i].iter().map(|&t| &self.trees[t]), x.row(i))
                }
            })
            .collect())
    }

    pub fn predict_proba_oob(&self, x: &Array2<f64>) -> Result<Vec<Vec<f64>>> {
        self.check_schema(x)?;
        if self.n_classes.is_none() {
            return Err(Error::schema("predict_proba_oob needs a classification forest"));
        }
        let per_row = self.oob_trees_per_row(x.nrows());
        Ok((0..x.nrows())
            .map(|i| {
                if per_row[i].is_empty() {
                    self.proba_over(self.trees.iter(), x.row(i))
                } else {
                    self.proba_over(per_row[i].iter().map(|&t| &self.trees[t]), x.row(i))
                }
            })
            .collect())
    }

    /// Predictive draw for one row: a tree chosen uniformly at random, then
    /// one in-bag response sampled from the leaf the row lands in.
    pub fn draw(&self, row: ArrayView1<f64>, rng: &mut Rng) -> f64 {
        let t = &self.trees[rng.gen_range(0..self.trees.len())];
        let leaf = t.leaf_for(row);
        leaf.samples[rng.gen_range(0..leaf.samples.len())]
    }
}

/// Per-feature permutation importance with the spread of the per-tree
/// loss increases it averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Mean out-of-bag loss increase after permuting each feature, computed per
/// tree on that tree's out-of-bag rows (squared error for regression, Brier
/// score for classification).
pub fn permutation_importance(f: &Forest, x: &Array2<f64>, y: &Response) -> Result<Importance> {
    f.check_schema(x)?;
    if y.len() != x.nrows() {
        return Err(Error::schema("response length differs from rows"));
    }
    if f.oob_indices.iter().all(Vec::is_empty) {
        return Err(Error::config(
            "permutation importance needs out-of-bag rows (fit with bootstrap)",
        ));
    }
    let p = x.ncols();
    let loss = |leaf: &Leaf, i: usize| -> f64 {
        match y {
            Response::Regression(v) => (leaf.mean - v[i]).powi(2),
            Response::Classes { labels, .. } => leaf
                .probs
                .iter()
                .enumerate()
                .map(|(c, &pc)| {
                    let t = (labels[i] == c) as u8 as f64;
                    (pc - t).powi(2)
                })
                .sum(),
        }
    };

    // deltas[t][j]
    let deltas: Vec<Vec<f64>> = f
        .trees
        .par_iter()
        .enumerate()
        .filter(|(t, _)| !f.oob_indices[*t].is_empty())
        .map(|(t, tree)| {
            let oob = &f.oob_indices[t];
            let base: f64 = oob.iter().map(|&i| loss(tree.leaf_for(x.row(i)), i)).sum::<f64>()
                / oob.len() as f64;
            let mut row = vec![0.0; p];
            (0..p)
                .map(|j| {
                    let mut rng = rng_for(f.seed, &[0x1a9e, t as u64, j as u64]);
                    let mut perm: Vec<usize> = oob.clone();
                    perm.shuffle(&mut rng);
                    let permuted: f64 = oob
                        .iter()
                        .zip(&perm)
                        .map(|(&i, &src)| {
                            row.iter_mut()
                                .zip(x.row(i).iter())
                                .for_each(|(r, v)| *r = *v);
                            row[j] = x[[src, j]];
                            let view = ArrayView1::from(&row[..]);
                            loss(tree.leaf_for(view), i)
                        })
                        .sum::<f64>()
                        / oob.len() as f64;
                    permuted - base
                })
                .collect()
        })
        .collect();

    let mut mean = Vec::with_capacity(p);
    let mut sd = Vec::with_capacity(p);
    for j in 0..p {
        let d: Vec<f64> = deltas.iter().map(|row| row[j]).collect();
        mean.push(stats::mean(&d));
        sd.push(stats::sd(&d));
    }
    Ok(Importance { mean, sd })
}

/// Outcome of shadow-feature covariate screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub accepted: Vec<String>,
    pub hits: Vec<usize>,
    pub p_values: Vec<f64>,
    pub rounds: usize,
}

pub const SELECTION_ALPHA: f64 = 0.01;

/// Shadow-feature screening: each round appends an independently permuted
/// copy of every feature, fits a forest and records a hit for each real
/// feature whose importance beats the largest shadow importance. Features
/// whose hit count is significantly above one half (one-sided binomial test
/// at [`SELECTION_ALPHA`]) are accepted.
pub fn select_covariates(
    x: &Array2<f64>,
    names: &[String],
    y: &Response,
    rounds: usize,
    params: &ForestParams,
    seed: u64,
) -> Result<Selection> {
    if rounds < 10 {
        return Err(Error::config("covariate selection needs at least 10 rounds"));
    }
    if names.len() != x.ncols() {
        return Err(Error::schema("feature names do not match matrix width"));
    }
    let p = x.ncols();
    if p == 0 {
        return Ok(Selection {
            accepted: Vec::new(),
            hits: Vec::new(),
            p_values: Vec::new(),
            rounds,
        });
    }
    let n = x.nrows();
    let mut hits = vec![0usize; p];
    for r in 0..rounds {
        let mut rng = rng_for(seed, &[0x5ad0, r as u64]);
        let mut aug = Array2::zeros((n, 2 * p));
        aug.slice_mut(ndarray::s![.., ..p]).assign(x);
        for j in 0..p {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for (i, &src) in perm.iter().enumerate() {
                aug[[i, p + j]] = x[[src, j]];
            }
        }
        let fp = ForestParams {
            seed: stats::derive_seed(seed, &[0xf0e5, r as u64]),
            ..params.clone()
        };
        let forest = fit_forest(&aug, y, &fp)?;
        let imp = permutation_importance(&forest, &aug, y)?;
        let shadow_max = imp.mean[p..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for j in 0..p {
            if imp.mean[j] > shadow_max {
                hits[j] += 1;
            }
        }
    }
    let null = Binomial::new(0.5, rounds as u64).map_err(|e| Error::numeric(e.to_string()))?;
    let p_values: Vec<f64> = hits
        .iter()
        .map(|&h| if h == 0 { 1.0 } else { null.sf(h as u64 - 1) })
        .collect();
    let accepted = names
        .iter()
        .zip(&p_values)
        .filter(|(_, &pv)| pv < SELECTION_ALPHA)
        .map(|(n, _)| n.clone())
        .collect();
    Ok(Selection {
        accepted,
        hits,
        p_values,
        rounds,
    })
}
