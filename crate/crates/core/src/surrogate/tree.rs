//! CART regression and classification trees over fixed-width feature rows.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::N_FEATURES;

pub type Row = [f64; N_FEATURES];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    SquaredError,
    FriedmanMse,
    AbsoluteError,
    Poisson,
    Gini,
    Entropy,
    LogLoss,
}

impl Criterion {
    pub fn is_classification(self) -> bool {
        matches!(self, Self::Gini | Self::Entropy | Self::LogLoss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    All,
    Sqrt,
    Log2,
}

impl MaxFeatures {
    pub fn count(self, n: usize) -> usize {
        let k = match self {
            Self::All => n,
            Self::Sqrt => (n as f64).sqrt().floor() as usize,
            Self::Log2 => (n as f64).log2().floor() as usize,
        };
        k.clamp(1, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub criterion: Criterion,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_features: MaxFeatures,
    pub max_leaves: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            criterion: Criterion::SquaredError,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            max_leaves: None,
        }
    }
}

const LEAF: u8 = u8::MAX;

/// Flat binary tree. Internal node `i` sends `x[feature[i]] <= threshold[i]`
/// to `left[i]` and everything else (including NaN) to `left[i] + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<u8>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self {
            feature: vec![LEAF],
            threshold: vec![0.0],
            left: vec![0],
            value: vec![value],
        }
    }

    #[inline]
    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] == LEAF
    }

    #[inline]
    pub fn leaf_index(&self, x: &Row) -> usize {
        let mut i = 0;
        while self.feature[i] != LEAF {
            let l = self.left[i] as usize;
            i = if x[self.feature[i] as usize] <= self.threshold[i] {
                l
            } else {
                l + 1
            };
        }
        i
    }

    #[inline]
    pub fn predict(&self, x: &Row) -> f64 {
        self.value[self.leaf_index(x)]
    }

    pub fn n_leaves(&self) -> usize {
        self.feature.iter().filter(|&&f| f == LEAF).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            if t.is_leaf(i) {
                0
            } else {
                let l = t.left[i] as usize;
                1 + go(t, l).max(go(t, l + 1))
            }
        }
        go(self, 0)
    }

    fn push_leaf(&mut self, value: f64) -> usize {
        self.feature.push(LEAF);
        self.threshold.push(0.0);
        self.left.push(0);
        self.value.push(value);
        self.feature.len() - 1
    }

    /// Fit on `idx` (which may repeat rows, as a bootstrap does).
    pub fn fit(
        x: &[Row],
        y: &[f64],
        mut idx: Vec<usize>,
        params: &TreeParams,
        rng: &mut impl Rng,
    ) -> Self {
        Builder::new(x, y, params).grow(&mut idx, rng)
    }

    /// Fit, then apply `leaf_value` to each leaf's sample targets.
    pub fn fit_with_leaf_values(
        x: &[Row],
        y: &[f64],
        idx: Vec<usize>,
        params: &TreeParams,
        rng: &mut impl Rng,
        leaf_value: impl Fn(&mut Vec<f64>) -> f64,
    ) -> Self {
        let mut t = Self::fit(x, y, idx.clone(), params, rng);
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); t.feature.len()];
        for &i in &idx {
            groups[t.leaf_index(&x[i])].push(y[i]);
        }
        for (node, g) in groups.iter_mut().enumerate() {
            if t.is_leaf(node) && !g.is_empty() {
                t.value[node] = leaf_value(g);
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug)]
struct Split {
    feature: usize,
    threshold: f64,
    /// Rows in the left child after sorting by the feature.
    n_left: usize,
    gain: f64,
}

struct Frontier {
    node: usize,
    lo: usize,
    hi: usize,
    depth: usize,
    split: Split,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    // max-heap on gain, earlier nodes first on ties
    fn cmp(&self, other: &Self) -> Ordering {
        self.split
            .gain
            .total_cmp(&other.split.gain)
            .then(other.node.cmp(&self.node))
    }
}

#[derive(Clone, Copy)]
struct Tot(f64);
impl PartialEq for Tot {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Tot {}
impl PartialOrd for Tot {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Tot {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Insert-only running median with the sum of absolute deviations.
#[derive(Default)]
struct RunningMedian {
    low: BinaryHeap<Tot>,
    high: BinaryHeap<std::cmp::Reverse<Tot>>,
    low_sum: f64,
    high_sum: f64,
}

impl RunningMedian {
    fn push(&mut self, v: f64) {
        if self.low.peek().is_none_or(|m| v <= m.0) {
            self.low.push(Tot(v));
            self.low_sum += v;
        } else {
            self.high.push(std::cmp::Reverse(Tot(v)));
            self.high_sum += v;
        }
        if self.low.len() > self.high.len() + 1 {
            let m = self.low.pop().expect("nonempty").0;
            self.low_sum -= m;
            self.high.push(std::cmp::Reverse(Tot(m)));
            self.high_sum += m;
        } else if self.high.len() > self.low.len() {
            let m = self.high.pop().expect("nonempty").0 .0;
            self.high_sum -= m;
            self.low.push(Tot(m));
            self.low_sum += m;
        }
    }

    fn abs_dev(&self) -> f64 {
        let m = self.low.peek().map_or(0.0, |t| t.0);
        let (nl, nh) = (self.low.len() as f64, self.high.len() as f64);
        (m * nl - self.low_sum) + (self.high_sum - m * nh)
    }
}

pub(crate) fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn xlogx_ratio(s: f64, n: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        s * (s / n).ln()
    }
}

fn class_loss(c: Criterion, pos: f64, n: f64) -> f64 {
    let p = pos / n;
    match c {
        Criterion::Gini => n * 2.0 * p * (1.0 - p),
        _ => {
            let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
            n * (h(p) + h(1.0 - p))
        }
    }
}

struct Builder<'a> {
    x: &'a [Row],
    y: &'a [f64],
    params: &'a TreeParams,
    n_try: usize,
    pairs: Vec<(f64, f64)>,
    prefix: Vec<f64>,
}

impl<'a> Builder<'a> {
    fn new(x: &'a [Row], y: &'a [f64], params: &'a TreeParams) -> Self {
        Self {
            x,
            y,
            params,
            n_try: params.max_features.count(N_FEATURES),
            pairs: Vec::new(),
            prefix: Vec::new(),
        }
    }

    fn leaf_value(&self, idx: &[usize]) -> f64 {
        match self.params.criterion {
            Criterion::AbsoluteError => {
                let mut v: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
                median(&mut v)
            }
            _ => idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64,
        }
    }

    fn grow(mut self, idx: &mut [usize], rng: &mut impl Rng) -> Tree {
        let mut tree = Tree::default();
        if idx.is_empty() {
            return Tree::leaf(0.0);
        }
        tree.push_leaf(self.leaf_value(idx));
        let mut heap = BinaryHeap::new();
        let mut leaves = 1usize;
        if let Some(split) = self.best_split(idx, 0, rng) {
            heap.push(Frontier {
                node: 0,
                lo: 0,
                hi: idx.len(),
                depth: 0,
                split,
            });
        }
        let max_leaves = self.params.max_leaves.unwrap_or(usize::MAX);
        while let Some(f) = heap.pop() {
            if leaves >= max_leaves {
                break;
            }
            let s = f.split;
            let range = &mut idx[f.lo..f.hi];
            // stable partition by the threshold keeps the build deterministic
            let (mut l, mut r): (Vec<usize>, Vec<usize>) = range
                .iter()
                .partition(|&&i| self.x[i][s.feature] <= s.threshold);
            debug_assert_eq!(l.len(), s.n_left);
            let mid = f.lo + l.len();
            let left_val = self.leaf_value(&l);
            let right_val = self.leaf_value(&r);
            l.append(&mut r);
            range.copy_from_slice(&l);

            let left = tree.push_leaf(left_val);
            tree.push_leaf(right_val);
            tree.feature[f.node] = s.feature as u8;
            tree.threshold[f.node] = s.threshold;
            tree.left[f.node] = left as u32;
            leaves += 1;
            for (node, lo, hi) in [(left, f.lo, mid), (left + 1, mid, f.hi)] {
                if let Some(split) = self.best_split(&idx[lo..hi], f.depth + 1, rng) {
                    heap.push(Frontier {
                        node,
                        lo,
                        hi,
                        depth: f.depth + 1,
                        split,
                    });
                }
            }
        }
        tree
    }

    fn best_split(&mut self, idx: &[usize], depth: usize, rng: &mut impl Rng) -> Option<Split> {
        let p = self.params;
        let n = idx.len();
        if n < p.min_samples_split.max(2) || n < 2 * p.min_samples_leaf.max(1) {
            return None;
        }
        if p.max_depth.is_some_and(|d| depth >= d) {
            return None;
        }
        let first = self.y[idx[0]];
        if idx.iter().all(|&i| self.y[i] == first) {
            return None;
        }
        let mut features: [usize; N_FEATURES] = std::array::from_fn(|i| i);
        if self.n_try < N_FEATURES {
            features.shuffle(rng);
        }
        let mut best: Option<Split> = None;
        for &f in &features[..self.n_try] {
            if let Some(s) = self.split_on(idx, f) {
                if best.is_none_or(|b| s.gain > b.gain) {
                    best = Some(s);
                }
            }
        }
        best.filter(|s| s.gain > 1e-12 * (1.0 + s.gain.abs()) && s.gain.is_finite())
    }

    fn split_on(&mut self, idx: &[usize], f: usize) -> Option<Split> {
        let (x, y) = (self.x, self.y);
        self.pairs.clear();
        self.pairs.extend(idx.iter().map(|&i| (x[i][f], y[i])));
        self.pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let pairs = &self.pairs;
        let n = pairs.len();
        if pairs[0].0 == pairs[n - 1].0 {
            return None;
        }
        let min_leaf = self.params.min_samples_leaf.max(1);
        let crit = self.params.criterion;

        // losses of the left part for each prefix length, when needed
        let prefix = &mut self.prefix;
        prefix.clear();
        if crit == Criterion::AbsoluteError {
            prefix.resize(n + 1, 0.0);
            let mut rm = RunningMedian::default();
            for (k, &(_, v)) in pairs.iter().enumerate() {
                rm.push(v);
                prefix[k + 1] = rm.abs_dev();
            }
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let nf = n as f64;
        let parent = match crit {
            Criterion::SquaredError | Criterion::FriedmanMse => total_sq - total * total / nf,
            Criterion::AbsoluteError => prefix[n],
            Criterion::Poisson => -xlogx_ratio(total, nf),
            _ => class_loss(crit, total, nf),
        };

        let mut suffix_rm = RunningMedian::default();
        let mut suffix_loss = vec![
            0.0;
            if crit == Criterion::AbsoluteError {
                n + 1
            } else {
                0
            }
        ];
        if crit == Criterion::AbsoluteError {
            for k in (0..n).rev() {
                suffix_rm.push(pairs[k].1);
                suffix_loss[k] = suffix_rm.abs_dev();
            }
        }

        let mut best: Option<Split> = None;
        let (mut s_l, mut sq_l) = (0.0, 0.0);
        for k in 0..n - 1 {
            let (xv, yv) = pairs[k];
            s_l += yv;
            sq_l += yv * yv;
            let n_l = k + 1;
            if n_l < min_leaf || n - n_l < min_leaf {
                continue;
            }
            let xn = pairs[k + 1].0;
            if xv == xn {
                continue;
            }
            let (nl, nr) = (n_l as f64, (n - n_l) as f64);
            let s_r = total - s_l;
            let children = match crit {
                Criterion::SquaredError | Criterion::FriedmanMse => {
                    (sq_l - s_l * s_l / nl) + ((total_sq - sq_l) - s_r * s_r / nr)
                }
                Criterion::AbsoluteError => prefix[n_l] + suffix_loss[n_l],
                Criterion::Poisson => {
                    if s_l <= 0.0 || s_r <= 0.0 {
                        continue;
                    }
                    -xlogx_ratio(s_l, nl) - xlogx_ratio(s_r, nr)
                }
                _ => class_loss(crit, s_l, nl) + class_loss(crit, s_r, nr),
            };
            let gain = parent - children;
            if best.is_none_or(|b| gain > b.gain) {
                let mut threshold = xv + (xn - xv) / 2.0;
                if !(threshold < xn) {
                    threshold = xv;
                }
                best = Some(Split {
                    feature: f,
                    threshold,
                    n_left: n_l,
                    gain,
                });
            }
        }
        best
    }
}
