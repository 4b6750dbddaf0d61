//! Regression forests of CART trees over mixed numeric and categorical
//! features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureKind {
    Numeric,
    /// Values are indices into `levels`.
    Categorical {
        levels: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub kind: FeatureKind,
}

impl Feature {
    pub fn numeric(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    /// Human-readable form of a stored value.
    pub fn label(&self, value: f64) -> String {
        match &self.kind {
            FeatureKind::Numeric => format!("{value}"),
            FeatureKind::Categorical { levels } => levels[value as usize].clone(),
        }
    }
}

/// Rows of feature values with one regression target each.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub features: Vec<Feature>,
    pub rows: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

impl Table {
    pub fn new(features: Vec<Feature>, rows: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        if rows.len() != target.len() {
            return Err(shape_err!("{} rows but {} targets", rows.len(), target.len()));
        }
        if rows.is_empty() {
            return Err(invalid!("table has no rows"));
        }
        if let Some(t) = target.iter().find(|t| !t.is_finite()) {
            return Err(invalid!("target value {t} is not finite"));
        }
        for row in &rows {
            if row.len() != features.len() {
                return Err(shape_err!(
                    "row of {} values for {} features",
                    row.len(),
                    features.len()
                ));
            }
            for (v, f) in row.iter().zip(&features) {
                let ok = match &f.kind {
                    FeatureKind::Numeric => v.is_finite(),
                    FeatureKind::Categorical { levels } => {
                        v.fract() == 0.0 && *v >= 0.0 && (*v as usize) < levels.len()
                    }
                };
                if !ok {
                    return Err(invalid!("value {v} is not valid for feature '{}'", f.name));
                }
            }
        }
        Ok(Self { features, rows, target })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorted distinct values of feature `f`.
    pub fn values(&self, f: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r[f]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    /// The rows at `keep`, in order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            features: self.features.clone(),
            rows: keep.iter().map(|&i| self.rows[i].clone()).collect(),
            target: keep.iter().map(|&i| self.target[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub min_leaf: usize,
    pub feature_fraction: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 200,
            min_leaf: 2,
            feature_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.min_leaf == 0 {
            return Err(invalid!("forest needs at least one tree and a positive leaf size"));
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return Err(invalid!(
                "feature fraction must lie in (0, 1], got {}",
                self.feature_fraction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    /// Values `≤` the threshold go left.
    Below(f64),
    /// Levels marked `true` go left; unseen levels go right.
    Levels(Vec<bool>),
}

impl Rule {
    fn goes_left(&self, v: f64) -> bool {
        match self {
            Rule::Below(t) => v <= *t,
            Rule::Levels(set) => set.get(v as usize).copied().unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
        count: usize,
    },
    Split {
        feature: usize,
        rule: Rule,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Root first.
    pub nodes: Vec<Node>,
    pub bootstrap_seed: u64,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    i = if rule.goes_left(row[*feature]) { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    pub features: Vec<Feature>,
    pub trees: Vec<Tree>,
    pub config: ForestConfig,
    /// Squared-error reduction credited to each feature, summed over trees.
    pub split_gain: Vec<f64>,
}

struct Split {
    feature: usize,
    rule: Rule,
    gain: f64,
}

/// Running sums for squared error.
#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sq: f64,
}

impl Moments {
    fn push(&mut self, y: f64) {
        self.n += 1.0;
        self.sum += y;
        self.sq += y * y;
    }

    fn minus(self, o: Self) -> Self {
        Self {
            n: self.n - o.n,
            sum: self.sum - o.sum,
            sq: self.sq - o.sq,
        }
    }

    fn sse(&self) -> f64 {
        if self.n == 0.0 {
            0.0
        } else {
            (self.sq - self.sum * self.sum / self.n).max(0.0)
        }
    }
}

struct Builder<'a> {
    table: &'a Table,
    min_leaf: usize,
    mtry: usize,
    nodes: Vec<Node>,
    gain: Vec<f64>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let value = idx.iter().map(|&i| self.table.target[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf {
            value,
            count: idx.len(),
        });
        self.nodes.len() - 1
    }

    fn grow(&mut self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> usize {
        let mut total = Moments::default();
        idx.iter().for_each(|&i| total.push(self.table.target[i]));
        let sse = total.sse();
        if idx.len() < 2 * self.min_leaf || sse <= 1e-12 * total.sq.max(1.0) {
            return self.leaf(idx);
        }
        // Sampled features first; the rest only if none of those can split.
        let mut order: Vec<usize> = (0..self.table.features.len()).collect();
        order.shuffle(rng);
        let mut best: Option<Split> = None;
        for (k, &f) in order.iter().enumerate() {
            if k >= self.mtry && best.is_some() {
                break;
            }
            if let Some(s) = self.best_split(f, idx, total) {
                if best.as_ref().is_none_or(|b| s.gain > b.gain) {
                    best = Some(s);
                }
            }
        }
        let Some(split) = best.filter(|s| s.gain > 1e-12 * sse) else {
            return self.leaf(idx);
        };
        let mid = partition(idx, |i| split.rule.goes_left(self.table.rows[i][split.feature]));
        self.gain[split.feature] += split.gain;
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0, count: 0 });
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, rng);
        let right = self.grow(r, rng);
        self.nodes[at] = Node::Split {
            feature: split.feature,
            rule: split.rule,
            left,
            right,
        };
        at
    }

    fn best_split(&self, f: usize, idx: &[usize], total: Moments) -> Option<Split> {
        let t = self.table;
        let parent = total.sse();
        let min = self.min_leaf as f64;
        match &t.features[f].kind {
            FeatureKind::Numeric => {
                let mut sorted: Vec<(f64, f64)> = idx.iter().map(|&i| (t.rows[i][f], t.target[i])).collect();
                sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut left = Moments::default();
                let mut best: Option<(f64, f64)> = None;
                for w in 0..sorted.len() - 1 {
                    left.push(sorted[w].1);
                    if sorted[w].0 == sorted[w + 1].0 || left.n < min || (total.n - left.n) < min {
                        continue;
                    }
                    let gain = parent - left.sse() - total.minus(left).sse();
                    if best.is_none_or(|b| gain > b.1) {
                        best = Some((0.5 * (sorted[w].0 + sorted[w + 1].0), gain));
                    }
                }
                best.map(|(th, gain)| Split {
                    feature: f,
                    rule: Rule::Below(th),
                    gain,
                })
            }
            FeatureKind::Categorical { levels } => {
                let mut stats = vec![Moments::default(); levels.len()];
                idx.iter().for_each(|&i| stats[t.rows[i][f] as usize].push(t.target[i]));
                let mut present: Vec<usize> = (0..levels.len()).filter(|&l| stats[l].n > 0.0).collect();
                present.sort_by(|&a, &b| {
                    (stats[a].sum / stats[a].n)
                        .total_cmp(&(stats[b].sum / stats[b].n))
                        .then(a.cmp(&b))
                });
                let mut left = Moments::default();
                let mut best: Option<(usize, f64)> = None;
                for k in 0..present.len().saturating_sub(1) {
                    let s = stats[present[k]];
                    left.n += s.n;
                    left.sum += s.sum;
                    left.sq += s.sq;
                    if left.n < min || (total.n - left.n) < min {
                        continue;
                    }
                    let gain = parent - left.sse() - total.minus(left).sse();
                    if best.is_none_or(|b| gain > b.1) {
                        best = Some((k, gain));
                    }
                }
                best.map(|(k, gain)| {
                    let mut set = vec![false; levels.len()];
                    present[..=k].iter().for_each(|&l| set[l] = true);
                    Split {
                        feature: f,
                        rule: Rule::Levels(set),
                        gain,
                    }
                })
            }
        }
    }
}

/// Moves entries satisfying `left` to the front; returns their count.
fn partition(idx: &mut [usize], left: impl Fn(usize) -> bool) -> usize {
    let mut mid = 0;
    for k in 0..idx.len() {
        if left(idx[k]) {
            idx.swap(mid, k);
            mid += 1;
        }
    }
    mid
}

impl RegressionForest {
    /// Fits `config.trees` trees on bootstrap resamples of `table`.
    pub fn fit(table: &Table, config: &ForestConfig) -> Result<Self> {
        config.validate()?;
        if table.is_empty() {
            return Err(invalid!("cannot fit a forest to no rows"));
        }
        let nf = table.features.len();
        let mtry = ((nf as f64 * config.feature_fraction).ceil() as usize).clamp(1, nf.max(1));
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let mut trees = Vec::with_capacity(config.trees);
        let mut gain = vec![0.0; nf];
        for _ in 0..config.trees {
            let bootstrap_seed: u64 = master.random();
            let mut rng = ChaCha8Rng::seed_from_u64(bootstrap_seed);
            let n = table.len();
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut b = Builder {
                table,
                min_leaf: config.min_leaf,
                mtry,
                nodes: Vec::new(),
                gain: vec![0.0; nf],
            };
            b.grow(&mut idx, &mut rng);
            gain.iter_mut().zip(&b.gain).for_each(|(g, x)| *g += x);
            trees.push(Tree {
                nodes: b.nodes,
                bootstrap_seed,
            });
        }
        Ok(Self {
            features: table.features.clone(),
            trees,
            config: *config,
            split_gain: gain,
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn mse(&self, table: &Table) -> f64 {
        mse(table.rows.iter().map(|r| self.predict(r)), &table.target)
    }

    /// Coefficient of determination on `table`.
    pub fn r2(&self, table: &Table) -> f64 {
        let mean = table.target.iter().sum::<f64>() / table.len() as f64;
        let var = mse(std::iter::repeat_n(mean, table.len()), &table.target);
        1.0 - self.mse(table) / var
    }

    /// Mean prediction over `table` with feature `f` forced to `value`.
    pub fn partial_dependence(&self, table: &Table, f: usize, value: f64) -> f64 {
        let mut row = Vec::new();
        let sum: f64 = table
            .rows
            .iter()
            .map(|r| {
                row.clone_from(r);
                row[f] = value;
                self.predict(&row)
            })
            .sum();
        sum / table.len() as f64
    }

    /// Share of the total squared-error reduction credited to each feature;
    /// all zero when no tree split.
    pub fn gini_importance(&self) -> Vec<f64> {
        let total: f64 = self.split_gain.iter().sum();
        if total > 0.0 {
            self.split_gain.iter().map(|g| g / total).collect()
        } else {
            vec![0.0; self.split_gain.len()]
        }
    }

    /// Mean increase in squared error on `table` when one feature column
    /// is shuffled, over `repeats` shuffles.
    pub fn permutation_importance(&self, table: &Table, repeats: usize, seed: u64) -> Result<Vec<f64>> {
        if table.features != self.features {
            return Err(invalid!("table features differ from the forest's"));
        }
        if repeats == 0 {
            return Err(invalid!("permutation importance needs at least one repeat"));
        }
        let base = self.mse(table);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = table.rows.clone();
        let mut out = Vec::with_capacity(self.features.len());
        for f in 0..self.features.len() {
            let mut column: Vec<f64> = table.rows.iter().map(|r| r[f]).collect();
            let mut increase = 0.0;
            for _ in 0..repeats {
                column.shuffle(&mut rng);
                rows.iter_mut().zip(&column).for_each(|(r, v)| r[f] = *v);
                increase += mse(rows.iter().map(|r| self.predict(r)), &table.target) - base;
            }
            rows.iter_mut().zip(&table.rows).for_each(|(r, o)| r[f] = o[f]);
            out.push(increase / repeats as f64);
        }
        Ok(out)
    }
}

fn mse(pred: impl Iterator<Item = f64>, target: &[f64]) -> f64 {
    pred.zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / target.len() as f64
}
