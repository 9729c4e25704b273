//! Gradient-boosted regression trees under squared-error loss.
//!
//! Each stage fits a depth-limited tree to the current residuals by greedy
//! variance-reduction splits and adds it scaled by the shrinkage. Split
//! search is an exact scan over each feature's sorted unique training
//! values, done on per-node histograms indexed by unique-value rank. Gain
//! ties are broken by the lowest feature index, then the lowest threshold.
//!
//! Rows with a missing (NaN) value at a split feature follow the child that
//! received more training rows.

use std::ops::Index;

use ndarray::ArrayView2;
use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbmSpec {
    pub n_trees: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub min_samples_leaf: usize,
    pub subsample: f64,
}

impl Default for GbmSpec {
    fn default() -> Self {
        Self {
            n_trees: 300,
            max_depth: 3,
            shrinkage: 0.1,
            min_samples_leaf: 20,
            subsample: 1.0,
        }
    }
}

impl GbmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(domain("n_trees, max_depth and min_samples_leaf must be positive"));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(domain(format!("shrinkage must lie in (0, 1], got {}", self.shrinkage)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(domain(format!("subsample must lie in (0, 1], got {}", self.subsample)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        missing_left: bool,
    },
    Leaf {
        value: f64,
    },
}

/// Nodes stored flat; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_value<X: Index<usize, Output = f64> + ?Sized>(&self, x: &X) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    missing_left,
                } => {
                    let v = x[*feature];
                    let go_left = if v.is_nan() { *missing_left } else { v <= *threshold };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub spec: GbmSpec,
    pub base_score: f64,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl GbmModel {
    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(domain(format!("expected {} features, got {}", self.n_features, x.len())));
        }
        if x.iter().any(|v| v.is_infinite()) {
            return Err(domain("infinite feature value"));
        }
        Ok(())
    }

    /// `base_score + shrinkage · Σ tree(x)` without the non-negativity clamp.
    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.base_score
            + self.spec.shrinkage * self.trees.iter().map(|t| t.leaf_value(x)).sum::<f64>())
    }

    /// Forecast clamped at zero.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_raw(x)?.max(0.0))
    }

    /// Raw score after each stage: element `k` includes the first `k` trees.
    pub fn staged_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut acc = self.base_score;
        let mut out = Vec::with_capacity(self.trees.len() + 1);
        out.push(acc);
        for t in &self.trees {
            acc += self.spec.shrinkage * t.leaf_value(x);
            out.push(acc);
        }
        Ok(out)
    }

    pub fn predict_rows(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        x.rows()
            .into_iter()
            .map(|row| self.predict(&row.to_vec()))
            .collect()
    }
}

pub fn fit(x: ArrayView2<f64>, y: &[f64], spec: &GbmSpec, seed: u64) -> Result<GbmModel> {
    spec.validate()?;
    let (n, p) = x.dim();
    if y.len() != n {
        return Err(domain(format!("X has {n} rows but y has {}", y.len())));
    }
    if n < 2 * spec.min_samples_leaf {
        return Err(domain(format!(
            "need at least {} rows for min_samples_leaf = {}, got {n}",
            2 * spec.min_samples_leaf,
            spec.min_samples_leaf
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(domain("non-finite target"));
    }
    if x.iter().any(|v| v.is_infinite()) {
        return Err(domain("infinite feature value"));
    }

    let base_score = y.iter().sum::<f64>() / n as f64;
    let mut model = GbmModel {
        spec: *spec,
        base_score,
        n_features: p,
        trees: Vec::new(),
    };
    if y.iter().all(|v| *v == y[0]) {
        return Ok(model);
    }

    let binned = Binned::new(x);
    let mut score = vec![base_score; n];
    let mut residual = vec![0.0; n];
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let sample_size = if spec.subsample < 1.0 {
        ((n as f64 * spec.subsample).floor() as usize).clamp(2 * spec.min_samples_leaf, n)
    } else {
        n
    };
    let mut builder = TreeBuilder::new(&binned, spec);

    for _ in 0..spec.n_trees {
        for i in 0..n {
            residual[i] = y[i] - score[i];
        }
        let rows: Vec<u32> = if sample_size < n {
            let mut picked: Vec<u32> = index::sample(&mut rng, n, sample_size)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            picked.sort_unstable();
            picked
        } else {
            (0..n as u32).collect()
        };
        let tree = builder.build(rows, &residual);
        if tree.nodes.len() == 1 {
            if sample_size == n {
                break;
            }
            continue;
        }
        for (i, s) in score.iter_mut().enumerate() {
            *s += spec.shrinkage * tree.leaf_value(&x.row(i));
        }
        model.trees.push(tree);
    }
    Ok(model)
}

/// Column-major rank codes of every value; `u32::MAX` marks NaN.
struct Binned {
    n: usize,
    p: usize,
    values: Vec<Vec<f64>>,
    codes: Vec<Vec<u32>>,
}

const MISSING: u32 = u32::MAX;

impl Binned {
    fn new(x: ArrayView2<f64>) -> Self {
        let (n, p) = x.dim();
        let mut values = Vec::with_capacity(p);
        let mut codes = Vec::with_capacity(p);
        for col in x.columns() {
            let mut uniq: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
            uniq.sort_by(|a, b| a.partial_cmp(b).expect("NaN filtered"));
            uniq.dedup();
            let code: Vec<u32> = col
                .iter()
                .map(|v| {
                    if v.is_nan() {
                        MISSING
                    } else {
                        uniq.partition_point(|u| u < v) as u32
                    }
                })
                .collect();
            values.push(uniq);
            codes.push(code);
        }
        Self { n, p, values, codes }
    }
}

#[derive(Clone)]
struct Hist {
    /// Per feature: (count, residual sum) per unique-value rank.
    count: Vec<Vec<u32>>,
    sum: Vec<Vec<f64>>,
}

impl Hist {
    fn zeros(binned: &Binned) -> Self {
        Self {
            count: binned.values.iter().map(|v| vec![0; v.len()]).collect(),
            sum: binned.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    fn fill(&mut self, binned: &Binned, rows: &[u32], residual: &[f64]) {
        for f in 0..binned.p {
            let (count, sum) = (&mut self.count[f], &mut self.sum[f]);
            count.iter_mut().for_each(|c| *c = 0);
            sum.iter_mut().for_each(|s| *s = 0.0);
            let codes = &binned.codes[f];
            for &r in rows {
                let c = codes[r as usize];
                if c != MISSING {
                    count[c as usize] += 1;
                    sum[c as usize] += residual[r as usize];
                }
            }
        }
    }

    fn subtract_from(&mut self, parent: &Hist) {
        for f in 0..self.count.len() {
            for (c, pc) in self.count[f].iter_mut().zip(&parent.count[f]) {
                *c = pc - *c;
            }
            for (s, ps) in self.sum[f].iter_mut().zip(&parent.sum[f]) {
                *s = ps - *s;
            }
        }
    }
}

struct SplitChoice {
    feature: usize,
    rank: usize,
    gain: f64,
}

struct TreeBuilder<'a> {
    binned: &'a Binned,
    spec: &'a GbmSpec,
    nodes: Vec<Node>,
}

impl<'a> TreeBuilder<'a> {
    fn new(binned: &'a Binned, spec: &'a GbmSpec) -> Self {
        Self {
            binned,
            spec,
            nodes: Vec::new(),
        }
    }

    fn build(&mut self, rows: Vec<u32>, residual: &[f64]) -> Tree {
        self.nodes.clear();
        let mut hist = Hist::zeros(self.binned);
        hist.fill(self.binned, &rows, residual);
        self.grow(rows, hist, residual, 0);
        Tree {
            nodes: std::mem::take(&mut self.nodes),
        }
    }

    fn grow(&mut self, rows: Vec<u32>, hist: Hist, residual: &[f64], depth: usize) -> usize {
        let id = self.nodes.len();
        let total: f64 = rows.iter().map(|&r| residual[r as usize]).sum();
        let mean = total / rows.len() as f64;
        self.nodes.push(Node::Leaf { value: mean });
        if depth >= self.spec.max_depth || rows.len() < 2 * self.spec.min_samples_leaf {
            return id;
        }
        let sse: f64 = rows
            .iter()
            .map(|&r| (residual[r as usize] - mean).powi(2))
            .sum();
        let Some(choice) = self.best_split(&hist, sse) else {
            return id;
        };

        let codes = &self.binned.codes[choice.feature];
        let (mut left, mut right): (Vec<u32>, Vec<u32>) = (Vec::new(), Vec::new());
        let mut missing = Vec::new();
        for &r in &rows {
            match codes[r as usize] {
                MISSING => missing.push(r),
                c if (c as usize) <= choice.rank => left.push(r),
                _ => right.push(r),
            }
        }
        let missing_left = left.len() >= right.len();
        if missing_left {
            left.extend(missing);
            left.sort_unstable();
        } else {
            right.extend(missing);
            right.sort_unstable();
        }

        // Histogram of the smaller child directly, the larger by subtraction.
        let (small, small_is_left) = if left.len() <= right.len() {
            (&left, true)
        } else {
            (&right, false)
        };
        let mut small_hist = Hist::zeros(self.binned);
        small_hist.fill(self.binned, small, residual);
        let mut large_hist = small_hist.clone();
        large_hist.subtract_from(&hist);
        drop(hist);
        let (left_hist, right_hist) = if small_is_left {
            (small_hist, large_hist)
        } else {
            (large_hist, small_hist)
        };

        let threshold = self.binned.values[choice.feature][choice.rank];
        let l = self.grow(left, left_hist, residual, depth + 1);
        let r = self.grow(right, right_hist, residual, depth + 1);
        self.nodes[id] = Node::Split {
            feature: choice.feature,
            threshold,
            left: l,
            right: r,
            missing_left,
        };
        id
    }

    fn best_split(&self, hist: &Hist, sse: f64) -> Option<SplitChoice> {
        let min_leaf = self.spec.min_samples_leaf as u64;
        let min_gain = 1e-12 * sse.max(f64::MIN_POSITIVE);
        let mut best: Option<SplitChoice> = None;
        for f in 0..self.binned.p {
            let (count, sum) = (&hist.count[f], &hist.sum[f]);
            let n_tot: u64 = count.iter().map(|&c| c as u64).sum();
            let s_tot: f64 = sum.iter().sum();
            if n_tot < 2 * min_leaf {
                continue;
            }
            let parent = s_tot * s_tot / n_tot as f64;
            let (mut n_left, mut s_left) = (0u64, 0.0);
            for rank in 0..count.len().saturating_sub(1) {
                n_left += count[rank] as u64;
                s_left += sum[rank];
                if count[rank] == 0 || n_left < min_leaf {
                    continue;
                }
                let n_right = n_tot - n_left;
                if n_right < min_leaf {
                    break;
                }
                let s_right = s_tot - s_left;
                let gain = s_left * s_left / n_left as f64 + s_right * s_right / n_right as f64 - parent;
                if gain > min_gain && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(SplitChoice {
                        feature: f,
                        rank,
                        gain,
                    });
                }
            }
        }
        best
    }
}

impl std::fmt::Debug for Binned {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Binned({} x {})", self.n, self.p)
    }
}
