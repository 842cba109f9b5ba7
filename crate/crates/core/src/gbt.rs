//! Gradient-boosted regression trees with exact greedy splits on squared error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{canonicalize, dense_row, dense_width};
use crate::error::{Error, Result};
use crate::ingest::DatasetSplits;
use crate::lawfit::{baseline_for, ChinchillaFit, Scope};
use crate::predictor::LossPredictor;
use crate::regressor::{build_examples, TargetKind};
use crate::schema::{schema_hash, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            rounds: 500,
            max_depth: 6,
            learning_rate: 0.05,
            min_leaf: 5,
        }
    }
}

/// Rows with `x[feature] < threshold` go left.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoostedForest {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub base_score: f64,
    pub n_features: usize,
}

impl BoostedForest {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Shape(format!("expected {} features, got {}", self.n_features, x.len())));
        }
        Ok(self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    /// Text dump: a header line, then one `tree` line per tree followed by its nodes.
    pub fn dump(&self) -> String {
        let mut s = format!(
            "forest trees={} learning_rate={} base_score={} features={}\n",
            self.trees.len(),
            self.learning_rate,
            self.base_score,
            self.n_features
        );
        for (k, t) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {k} nodes={}", t.nodes.len());
            for (i, n) in t.nodes.iter().enumerate() {
                let _ = match n {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => writeln!(s, "  {i} split f{feature} < {threshold:?} ? {left} : {right}"),
                    Node::Leaf { value } => writeln!(s, "  {i} leaf {value:?}"),
                };
            }
        }
        s
    }

    pub fn parse_dump(text: &str) -> Result<BoostedForest> {
        let bad = |line: &str| Error::Format(format!("tree dump: cannot parse `{line}`"));
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad(""))?;
        let kv: BTreeMap<&str, &str> = head.split_whitespace().skip(1).filter_map(|t| t.split_once('=')).collect();
        let num = |k: &str| -> Result<f64> { kv.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(head)) };
        let mut forest = BoostedForest {
            trees: Vec::new(),
            learning_rate: num("learning_rate")?,
            base_score: num("base_score")?,
            n_features: num("features")? as usize,
        };
        let n_trees = num("trees")? as usize;
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["tree", ..] => forest.trees.push(Tree { nodes: Vec::new() }),
                [_, "split", f, "<", t, "?", l, ":", r] => {
                    let tree = forest.trees.last_mut().ok_or_else(|| bad(line))?;
                    tree.nodes.push(Node::Split {
                        feature: f.strip_prefix('f').and_then(|f| f.parse().ok()).ok_or_else(|| bad(line))?,
                        threshold: t.parse().map_err(|_| bad(line))?,
                        left: l.parse().map_err(|_| bad(line))?,
                        right: r.parse().map_err(|_| bad(line))?,
                    });
                }
                [_, "leaf", v] => {
                    let tree = forest.trees.last_mut().ok_or_else(|| bad(line))?;
                    tree.nodes.push(Node::Leaf {
                        value: v.parse().map_err(|_| bad(line))?,
                    });
                }
                [] => {}
                _ => return Err(bad(line)),
            }
        }
        if forest.trees.len() != n_trees {
            return Err(Error::Format(format!("tree dump: expected {n_trees} trees, found {}", forest.trees.len())));
        }
        for t in &forest.trees {
            let valid = !t.nodes.is_empty()
                && t.nodes.iter().all(|n| match *n {
                    Node::Split { feature, left, right, .. } => {
                        feature < forest.n_features && left < t.nodes.len() && right < t.nodes.len()
                    }
                    Node::Leaf { value } => value.is_finite(),
                });
            if !valid {
                return Err(Error::Format("tree dump: malformed tree".into()));
            }
        }
        Ok(forest)
    }
}

/// Training outcome with the per-round training MSE (entry 0 is before any tree).
#[derive(Clone, Debug)]
pub struct GbtFit {
    pub forest: BoostedForest,
    pub train_mse: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Best split per open node for one feature, scanning the presorted row order once.
fn best_splits_for_feature(
    feature: usize,
    order: &[u32],
    x: &[Vec<f64>],
    g: &[f64],
    node_of: &[u32],
    totals: &[(usize, f64)],
    min_leaf: usize,
) -> Vec<Option<Candidate>> {
    let k = totals.len();
    let mut cnt = vec![0usize; k];
    let mut sum = vec![0.0f64; k];
    let mut last = vec![f64::NAN; k];
    let mut best: Vec<Option<Candidate>> = vec![None; k];
    for &r in order {
        let r = r as usize;
        let node = node_of[r];
        if node == u32::MAX {
            continue;
        }
        let node = node as usize;
        let v = x[r][feature];
        let (n, s) = totals[node];
        if cnt[node] >= min_leaf && n - cnt[node] >= min_leaf && v > last[node] {
            let (nl, sl) = (cnt[node] as f64, sum[node]);
            let (nr, sr) = ((n - cnt[node]) as f64, s - sl);
            let gain = sl * sl / nl + sr * sr / nr - s * s / n as f64;
            if gain > best[node].map_or(0.0, |b| b.gain) {
                best[node] = Some(Candidate {
                    gain,
                    feature,
                    threshold: last[node] + (v - last[node]) / 2.0,
                });
            }
        }
        cnt[node] += 1;
        sum[node] += g[r];
        last[node] = v;
    }
    best
}

/// Grows one depth-limited tree on targets `g`, level by level.
fn grow_tree(x: &[Vec<f64>], g: &[f64], sorted: &[Vec<u32>], p: &GbtParams) -> Tree {
    let n = g.len();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    // Open nodes of the current level: tree index, indexed by level-local id.
    let mut open = vec![0usize];
    let mut node_of = vec![0u32; n];
    for depth in 0..=p.max_depth {
        let mut totals = vec![(0usize, 0.0f64); open.len()];
        for r in 0..n {
            if node_of[r] != u32::MAX {
                let t = &mut totals[node_of[r] as usize];
                t.0 += 1;
                t.1 += g[r];
            }
        }
        for (k, &ti) in open.iter().enumerate() {
            let (c, s) = totals[k];
            nodes[ti] = Node::Leaf {
                value: if c > 0 { s / c as f64 } else { 0.0 },
            };
        }
        if depth == p.max_depth {
            break;
        }
        let per_feature: Vec<Vec<Option<Candidate>>> = sorted
            .par_iter()
            .enumerate()
            .map(|(f, order)| best_splits_for_feature(f, order, x, g, &node_of, &totals, p.min_leaf))
            .collect();
        // Features in ascending order; only a strictly larger gain replaces the incumbent.
        let mut chosen: Vec<Option<Candidate>> = vec![None; open.len()];
        for cands in &per_feature {
            for (k, c) in cands.iter().enumerate() {
                if let Some(c) = c {
                    if chosen[k].is_none_or(|b| c.gain > b.gain) {
                        chosen[k] = Some(*c);
                    }
                }
            }
        }
        let mut next_open = Vec::new();
        let mut remap = vec![u32::MAX; 2 * open.len()];
        for (k, c) in chosen.iter().enumerate() {
            if let Some(c) = c {
                let left = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[open[k]] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right: left + 1,
                };
                remap[2 * k] = next_open.len() as u32;
                next_open.push(left);
                remap[2 * k + 1] = next_open.len() as u32;
                next_open.push(left + 1);
            }
        }
        if next_open.is_empty() {
            break;
        }
        for r in 0..n {
            let k = node_of[r];
            if k == u32::MAX {
                continue;
            }
            node_of[r] = match chosen[k as usize] {
                Some(c) => remap[2 * k as usize + usize::from(x[r][c.feature] >= c.threshold)],
                None => u32::MAX,
            };
        }
        open = next_open;
    }
    Tree { nodes }
}

/// Squared-error boosting on dense rows.
pub fn fit_gbt(x: &[Vec<f64>], y: &[f64], p: &GbtParams) -> Result<GbtFit> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Argument(format!("need equal, nonzero row and target counts ({} vs {})", x.len(), y.len())));
    }
    if p.min_leaf == 0 || !(p.learning_rate > 0.0 && p.learning_rate <= 1.0) {
        return Err(Error::Argument("min_leaf must be >= 1 and learning rate in (0, 1]".into()));
    }
    if x.len() < 2 * p.min_leaf {
        return Err(Error::Argument(format!("need at least {} rows, got {}", 2 * p.min_leaf, x.len())));
    }
    let width = x[0].len();
    if x.iter().any(|r| r.len() != width) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite feature or target".into()));
    }
    let sorted: Vec<Vec<u32>> = (0..width)
        .into_par_iter()
        .map(|f| {
            let mut idx: Vec<u32> = (0..x.len() as u32).collect();
            idx.sort_by(|&a, &b| x[a as usize][f].total_cmp(&x[b as usize][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let n = y.len() as f64;
    let base = y.iter().sum::<f64>() / n;
    let mut pred = vec![base; y.len()];
    let mse = |pred: &[f64]| pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    let mut train_mse = vec![mse(&pred)];
    let mut trees = Vec::with_capacity(p.rounds);
    for _ in 0..p.rounds {
        let resid: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let tree = grow_tree(x, &resid, &sorted, p);
        for (pi, row) in pred.iter_mut().zip(x) {
            *pi += p.learning_rate * tree.predict(row);
        }
        trees.push(tree);
        train_mse.push(mse(&pred));
    }
    Ok(GbtFit {
        forest: BoostedForest {
            trees,
            learning_rate: p.learning_rate,
            base_score: base,
            n_features: width,
        },
        train_mse,
    })
}

/// Boosted forest on residual targets plus the baselines it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct GbtPredictor {
    pub forest: BoostedForest,
    pub baselines: BTreeMap<Scope, ChinchillaFit>,
    pub with_frac: bool,
}

impl GbtPredictor {
    pub fn fit(
        splits: &DatasetSplits,
        baselines: &BTreeMap<Scope, ChinchillaFit>,
        params: &GbtParams,
    ) -> Result<GbtPredictor> {
        let (fvs, ys) = build_examples(&splits.train, baselines, TargetKind::FinalLoss, 0)?;
        let rows = fvs.iter().map(|fv| dense_row(fv, false)).collect::<Result<Vec<_>>>()?;
        let fit = fit_gbt(&rows, &ys, params)?;
        Ok(GbtPredictor {
            forest: fit.forest,
            baselines: baselines.clone(),
            with_frac: false,
        })
    }

    pub fn predict_residual(&self, c: &RunConfig) -> Result<f64> {
        let fv = canonicalize(c)?;
        let fv = if self.with_frac { fv.with_frac(1.0)? } else { fv };
        self.forest.predict(&dense_row(&fv, self.with_frac)?)
    }

    pub fn predict_final_loss(&self, c: &RunConfig) -> Result<f64> {
        let base = baseline_for(&self.baselines, c)?.predict(c.model_size, c.data_size)?;
        Ok(base + self.predict_residual(c)?)
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let file = GbtFile {
            format: GBT_FORMAT.into(),
            schema_hash: schema_hash(),
            with_frac: self.with_frac,
            baselines: self.baselines.values().cloned().collect(),
            trees: self.forest.dump(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<GbtPredictor> {
        let file: GbtFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("gbt checkpoint: {e}")))?;
        if file.format != GBT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format `{}`", file.format)));
        }
        if file.schema_hash != schema_hash() {
            return Err(Error::schema("*", "checkpoint schema hash differs from the current field table"));
        }
        let forest = BoostedForest::parse_dump(&file.trees)?;
        if forest.n_features != dense_width(file.with_frac) {
            return Err(Error::Shape(format!("forest expects {} features", forest.n_features)));
        }
        Ok(GbtPredictor {
            forest,
            baselines: file.baselines.into_iter().map(|f| (f.scope.clone(), f)).collect(),
            with_frac: file.with_frac,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GbtPredictor> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

pub const GBT_FORMAT: &str = "confscale.gbt";

#[derive(Serialize, Deserialize)]
struct GbtFile {
    format: String,
    schema_hash: String,
    with_frac: bool,
    baselines: Vec<ChinchillaFit>,
    trees: String,
}

impl LossPredictor for GbtPredictor {
    fn predict_loss(&self, c: &RunConfig) -> Result<f64> {
        self.predict_final_loss(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(n: usize, f: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f).map(|j| if j == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(-1.0..1.0) }).collect())
            .collect();
        let y = x.iter().map(|r| r[0] * 0.3 + (r[1] * 3.0).sin() + if r[2] > 0.2 { 0.5 } else { 0.0 }).collect();
        (x, y)
    }

    #[test]
    fn zero_rounds_predict_the_mean() {
        let (x, y) = random_data(40, 3, 1);
        let fit = fit_gbt(&x, &y, &GbtParams { rounds: 0, ..Default::default() }).unwrap();
        let mean = y.iter().sum::<f64>() / 40.0;
        assert_eq!(fit.forest.predict(&x[3]).unwrap(), mean);
        assert_eq!(fit.forest.predict(&[9.0, 9.0, 9.0]).unwrap(), mean);
    }

    #[test]
    fn one_stump_separates_a_threshold_exactly() {
        let x: Vec<Vec<f64>> = [0.1, 0.5, 0.2, 0.9, 0.7, 0.3, 0.8, 0.6].iter().map(|v| vec![*v]).collect();
        let y: Vec<f64> = x.iter().map(|r| if r[0] < 0.55 { -1.0 } else { 2.0 }).collect();
        let p = GbtParams { rounds: 1, max_depth: 1, learning_rate: 1.0, min_leaf: 1 };
        let fit = fit_gbt(&x, &y, &p).unwrap();
        for (r, t) in x.iter().zip(&y) {
            assert!((fit.forest.predict(r).unwrap() - t).abs() < 1e-12);
        }
        // Brute force over all thresholds: the chosen one must minimize SSE.
        let sse = |thr: f64| {
            let (l, r): (Vec<_>, Vec<_>) = x.iter().zip(&y).partition(|(xi, _)| xi[0] < thr);
            let part = |v: &Vec<(&Vec<f64>, &f64)>| {
                let m = v.iter().map(|p| *p.1).sum::<f64>() / v.len().max(1) as f64;
                v.iter().map(|p| (p.1 - m).powi(2)).sum::<f64>()
            };
            part(&l) + part(&r)
        };
        let Node::Split { threshold, .. } = fit.forest.trees[0].nodes[0] else { panic!("no split") };
        let mut vals: Vec<f64> = x.iter().map(|r| r[0]).collect();
        vals.sort_by(f64::total_cmp);
        let best = vals.windows(2).map(|w| sse((w[0] + w[1]) / 2.0)).fold(f64::INFINITY, f64::min);
        assert!((sse(threshold) - best).abs() < 1e-12);
    }

    #[test]
    fn training_mse_never_increases() {
        let (x, y) = random_data(200, 4, 2);
        let fit = fit_gbt(&x, &y, &GbtParams { rounds: 60, max_depth: 3, ..Default::default() }).unwrap();
        for w in fit.train_mse.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{w:?}");
        }
        assert!(fit.forest.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn matches_an_independent_tree_walk() {
        let (x, y) = random_data(150, 4, 3);
        let fit = fit_gbt(&x, &y, &GbtParams { rounds: 30, max_depth: 4, ..Default::default() }).unwrap();
        // Recursive walk over the parsed dump, independent of Tree::predict.
        let parsed = BoostedForest::parse_dump(&fit.forest.dump()).unwrap();
        assert_eq!(parsed, fit.forest);
        fn walk(nodes: &[Node], i: usize, x: &[f64]) -> f64 {
            match &nodes[i] {
                Node::Leaf { value } => *value,
                Node::Split { feature, threshold, left, right } => {
                    if x[*feature] >= *threshold {
                        walk(nodes, *right, x)
                    } else {
                        walk(nodes, *left, x)
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..4.0)).collect();
            let oracle = parsed.base_score + parsed.learning_rate * parsed.trees.iter().map(|t| walk(&t.nodes, 0, &q)).sum::<f64>();
            assert!((fit.forest.predict(&q).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn stump_prediction_follows_the_predicate() {
        let forest = BoostedForest {
            trees: vec![Tree {
                nodes: vec![
                    Node::Split { feature: 0, threshold: 0.5, left: 1, right: 2 },
                    Node::Leaf { value: -0.1 },
                    Node::Leaf { value: 0.1 },
                ],
            }],
            learning_rate: 1.0,
            base_score: 0.0,
            n_features: 1,
        };
        assert_eq!(forest.predict(&[0.2]).unwrap(), -0.1);
        assert_eq!(forest.predict(&[0.5]).unwrap(), 0.1);
        assert!(matches!(forest.predict(&[0.2, 1.0]), Err(Error::Shape(_))));
        let empty = BoostedForest { trees: vec![], learning_rate: 0.1, base_score: 0.7, n_features: 1 };
        assert_eq!(empty.predict(&[3.0]).unwrap(), 0.7);
    }

    #[test]
    fn deterministic_and_rejects_empty() {
        let (x, y) = random_data(80, 3, 5);
        let p = GbtParams { rounds: 10, ..Default::default() };
        assert_eq!(fit_gbt(&x, &y, &p).unwrap().forest, fit_gbt(&x, &y, &p).unwrap().forest);
        assert!(matches!(fit_gbt(&[], &[], &p), Err(Error::Argument(_))));
    }

    #[test]
    fn ties_break_toward_lowest_feature() {
        // Two identical columns: the split must use feature 0.
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| if i < 5 { 0.0 } else { 1.0 }).collect();
        let p = GbtParams { rounds: 1, max_depth: 1, learning_rate: 1.0, min_leaf: 1 };
        let fit = fit_gbt(&x, &y, &p).unwrap();
        assert!(matches!(fit.forest.trees[0].nodes[0], Node::Split { feature: 0, .. }));
    }
}
