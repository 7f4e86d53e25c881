//! Random-forest regression and its use for rolling forecasts of seasonal
//! parameter series.
//!
//! Trees are grown greedily: at each node the split minimising the summed
//! squared error of the two children is taken over a random subset of
//! ⌈√d⌉ features. Thresholds are midpoints between adjacent distinct feature
//! values and samples with `x[feature] <= threshold` go left. Ties between
//! candidate splits go to the lowest feature index, then the lowest threshold.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("no training samples")]
    EmptyDataset,
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, ForestError>;

/// Relative tolerance under which two split errors count as equal.
pub const SPLIT_TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    /// ⌈√d⌉ candidate features per node.
    Sqrt,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub max_features: MaxFeatures,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 12, min_leaf: 2, bootstrap: true, max_features: MaxFeatures::Sqrt }
    }
}

impl ForestParams {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(ForestError::InvalidParams("n_trees must be positive".into()));
        }
        if self.min_leaf == 0 {
            return Err(ForestError::InvalidParams("min_leaf must be positive".into()));
        }
        Ok(())
    }

    fn candidates(&self, d: usize) -> usize {
        match self.max_features {
            MaxFeatures::All => d,
            MaxFeatures::Sqrt => ((d as f64).sqrt().ceil() as usize).clamp(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64, n_samples: usize },
}

/// Nodes in pre-order; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionForest {
    pub trees: Vec<RegressionTree>,
    pub n_features: usize,
    pub params: ForestParams,
    pub seed: u64,
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: &'a ForestParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    sse: f64,
}

impl Grower<'_> {
    /// Grow the subtree for `samples` (ascending, possibly repeated indices).
    fn grow(&mut self, samples: Vec<usize>, depth: usize) -> usize {
        let n = samples.len();
        let mean = samples.iter().map(|i| self.y[*i]).sum::<f64>() / n as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean, n_samples: n });

        let first = self.y[samples[0]];
        if samples.iter().all(|i| self.y[*i] == first) {
            self.nodes[id] = Node::Leaf { value: first, n_samples: n };
            return id;
        }
        if depth >= self.params.max_depth || n < 2 * self.params.min_leaf {
            return id;
        }
        let node_sse: f64 = samples.iter().map(|i| (self.y[*i] - mean).powi(2)).sum();
        let d = self.x[0].len();
        let features: Vec<usize> = if self.mtry >= d {
            (0..d).collect()
        } else {
            let mut f = index::sample(&mut self.rng, d, self.mtry).into_vec();
            f.sort_unstable();
            f
        };
        let Some(best) = self.best_split(&samples, &features, mean, node_sse) else {
            return id;
        };
        let (left, right): (Vec<usize>, Vec<usize>) =
            samples.into_iter().partition(|i| self.x[*i][best.feature] <= best.threshold);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id] = Node::Split { feature: best.feature, threshold: best.threshold, left: l, right: r };
        id
    }

    fn best_split(&self, samples: &[usize], features: &[usize], mean: f64, node_sse: f64) -> Option<BestSplit> {
        let n = samples.len();
        let min_leaf = self.params.min_leaf;
        let tol = SPLIT_TIE_TOLERANCE * node_sse;
        let mut best: Option<BestSplit> = None;
        let mut order: Vec<usize> = samples.to_vec();
        // centred targets keep the running sums well conditioned
        let total: f64 = samples.iter().map(|i| self.y[*i] - mean).sum();
        let total_sq: f64 = samples.iter().map(|i| (self.y[*i] - mean).powi(2)).sum();
        for &f in features {
            order.sort_by(|a, b| self.x[*a][f].total_cmp(&self.x[*b][f]).then(a.cmp(b)));
            let (mut sum_l, mut sq_l) = (0.0, 0.0);
            for k in 1..n {
                let v = self.y[order[k - 1]] - mean;
                sum_l += v;
                sq_l += v * v;
                let (lo, hi) = (self.x[order[k - 1]][f], self.x[order[k]][f]);
                if lo == hi || k < min_leaf || n - k < min_leaf {
                    continue;
                }
                let (nl, nr) = (k as f64, (n - k) as f64);
                let sum_r = total - sum_l;
                let sq_r = total_sq - sq_l;
                let sse = (sq_l - sum_l * sum_l / nl) + (sq_r - sum_r * sum_r / nr);
                if best.as_ref().is_none_or(|b| sse < b.sse - tol) {
                    best = Some(BestSplit { feature: f, threshold: midpoint(lo, hi), sse });
                }
            }
        }
        best.filter(|b| b.sse < node_sse - tol)
    }
}

/// Midpoint of two distinct values, never equal to the upper one.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = (lo + hi) / 2.0;
    if m >= hi || m < lo {
        lo
    } else {
        m
    }
}

fn check_dims(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() || y.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    if x.len() != y.len() {
        return Err(ForestError::DimensionMismatch { expected: x.len(), actual: y.len() });
    }
    let d = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != d) {
        return Err(ForestError::DimensionMismatch { expected: d, actual: row.len() });
    }
    Ok(d)
}

/// Fit a forest. Tree `t` draws from the ChaCha8 stream `t` of `seed`, so
/// trees can be grown in parallel without changing the result.
pub fn fit_forest(x: &[Vec<f64>], y: &[f64], params: &ForestParams, seed: u64) -> Result<RegressionForest> {
    let d = check_dims(x, y)?;
    params.validate()?;
    let n = x.len();
    let mtry = params.candidates(d);
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut samples: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            samples.sort_unstable();
            let mut g = Grower { x, y, params, mtry, rng, nodes: Vec::new() };
            g.grow(samples, 0);
            RegressionTree { nodes: g.nodes }
        })
        .collect();
    Ok(RegressionForest { trees, n_features: d, params: params.clone(), seed })
}

/// Mean of the per-tree predictions.
pub fn predict_forest(f: &RegressionForest, x: &[f64]) -> Result<f64> {
    if x.len() != f.n_features {
        return Err(ForestError::DimensionMismatch { expected: f.n_features, actual: x.len() });
    }
    Ok(f.trees.iter().map(|t| t.predict(x)).sum::<f64>() / f.trees.len() as f64)
}

/// A dated value of a per-pixel parameter series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub year: i32,
    pub doy: u32,
    pub value: f64,
}

/// Observation days within a year: `first_doy + k·cadence` up to `year_days`.
/// The grid restarts at `first_doy` every year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotGrid {
    pub first_doy: u32,
    pub cadence: u32,
    pub year_days: u32,
}

impl SlotGrid {
    pub fn new(first_doy: u32, cadence: u32) -> Self {
        Self { first_doy, cadence, year_days: 365 }
    }

    fn last_doy(&self) -> u32 {
        self.first_doy + (self.year_days - self.first_doy) / self.cadence * self.cadence
    }

    pub fn next(&self, year: i32, doy: u32) -> (i32, u32) {
        if doy + self.cadence <= self.last_doy() {
            (year, doy + self.cadence)
        } else {
            (year + 1, self.first_doy)
        }
    }

    pub fn prev(&self, year: i32, doy: u32) -> (i32, u32) {
        if doy >= self.first_doy + self.cadence {
            (year, doy - self.cadence)
        } else {
            (year - 1, self.last_doy())
        }
    }

    /// Days from `a` to `b` assuming `year_days`-long years.
    pub fn days_between(&self, a: (i32, u32), b: (i32, u32)) -> i64 {
        (b.0 - a.0) as i64 * self.year_days as i64 + b.1 as i64 - a.1 as i64
    }
}

type SeriesMap = HashMap<(i32, u32), f64>;

/// Lag features `[doy, lag-1, lag-2, same slot last year]` for a slot.
fn lag_features(map: &SeriesMap, grid: &SlotGrid, year: i32, doy: u32) -> Option<[f64; 4]> {
    let p1 = grid.prev(year, doy);
    let p2 = grid.prev(p1.0, p1.1);
    Some([doy as f64, *map.get(&p1)?, *map.get(&p2)?, *map.get(&(year - 1, doy))?])
}

fn series_map(history: &[Observation]) -> SeriesMap {
    history.iter().filter(|o| o.value.is_finite()).map(|o| ((o.year, o.doy), o.value)).collect()
}

/// Forecast each series forward by `horizon_days` with one forest trained on
/// the pooled histories. Each forecast step feeds back as a lag for the next.
pub fn forecast_pooled(
    histories: &[Vec<Observation>],
    grid: &SlotGrid,
    horizon_days: u32,
    params: &ForestParams,
    seed: u64,
) -> Result<Vec<Vec<Observation>>> {
    if horizon_days == 0 {
        return Ok(vec![Vec::new(); histories.len()]);
    }
    let maps: Vec<SeriesMap> = histories.iter().map(|h| series_map(h)).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (h, map) in histories.iter().zip(&maps) {
        for o in h.iter().filter(|o| o.value.is_finite()) {
            if let Some(f) = lag_features(map, grid, o.year, o.doy) {
                x.push(f.to_vec());
                y.push(o.value);
            }
        }
    }
    let years: std::collections::BTreeSet<i32> = histories.iter().flatten().map(|o| o.year).collect();
    if years.len() < 2 || x.is_empty() {
        return Err(ForestError::InsufficientHistory(format!(
            "{} season(s) and {} trainable sample(s); need two seasons",
            years.len(),
            x.len()
        )));
    }
    let forest = fit_forest(&x, &y, params, seed)?;

    let mut out = Vec::with_capacity(histories.len());
    for (h, map) in histories.iter().zip(maps) {
        let Some(last) = h.iter().filter(|o| o.value.is_finite()).map(|o| (o.year, o.doy)).max() else {
            return Err(ForestError::InsufficientHistory("series with no valid observations".into()));
        };
        out.push(roll_forward(&forest, map, grid, last, horizon_days)?);
    }
    Ok(out)
}

fn roll_forward(forest: &RegressionForest, mut map: SeriesMap, grid: &SlotGrid, last: (i32, u32), horizon_days: u32) -> Result<Vec<Observation>> {
    let mut steps = Vec::new();
    let mut slot = grid.next(last.0, last.1);
    while grid.days_between(last, slot) <= horizon_days as i64 {
        let features = match lag_features(&map, grid, slot.0, slot.1) {
            Some(f) => f,
            None => {
                // a gap right before the forecast: fall back to last year's value for missing lags
                let ly = map.get(&(slot.0 - 1, slot.1)).copied().ok_or_else(|| {
                    ForestError::InsufficientHistory(format!("no value for day {} of {}", slot.1, slot.0 - 1))
                })?;
                let p1 = grid.prev(slot.0, slot.1);
                let p2 = grid.prev(p1.0, p1.1);
                [slot.1 as f64, map.get(&p1).copied().unwrap_or(ly), map.get(&p2).copied().unwrap_or(ly), ly]
            }
        };
        let value = predict_forest(forest, &features)?;
        map.insert(slot, value);
        steps.push(Observation { year: slot.0, doy: slot.1, value });
        slot = grid.next(slot.0, slot.1);
    }
    Ok(steps)
}

/// Forecast a single series.
pub fn forecast_series(history: &[Observation], grid: &SlotGrid, horizon_days: u32, params: &ForestParams, seed: u64) -> Result<Vec<Observation>> {
    forecast_pooled(&[history.to_vec()], grid, horizon_days, params, seed).map(|mut v| v.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exact() -> ForestParams {
        ForestParams { n_trees: 1, max_depth: 64, min_leaf: 1, bootstrap: false, max_features: MaxFeatures::All }
    }

    #[test]
    fn single_sample_forest() {
        let f = fit_forest(&[vec![1.0, 2.0]], &[3.5], &ForestParams::default(), 1).unwrap();
        assert_eq!(predict_forest(&f, &[100.0, -4.0]).unwrap(), 3.5);
    }

    #[test]
    fn constant_targets() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let f = fit_forest(&x, &[2.0; 20], &ForestParams { n_trees: 5, ..Default::default() }, 9).unwrap();
        for row in &x {
            assert_eq!(predict_forest(&f, row).unwrap(), 2.0);
        }
        assert_eq!(predict_forest(&f, &[-50.0, 50.0]).unwrap(), 2.0);
    }

    #[test]
    fn prediction_is_mean_of_trees() {
        let leaf = |v| RegressionTree { nodes: vec![Node::Leaf { value: v, n_samples: 1 }] };
        let one = RegressionForest { trees: vec![leaf(7.0)], n_features: 2, params: exact(), seed: 0 };
        assert_eq!(predict_forest(&one, &[0.0, 1.0]).unwrap(), 7.0);
        let two = RegressionForest { trees: vec![leaf(4.0), leaf(6.0)], ..one.clone() };
        assert_eq!(predict_forest(&two, &[0.0, 1.0]).unwrap(), 5.0);
        assert_eq!(predict_forest(&two, &[0.0]), Err(ForestError::DimensionMismatch { expected: 2, actual: 1 }));
    }

    #[test]
    fn errors() {
        assert_eq!(fit_forest(&[], &[], &exact(), 0), Err(ForestError::EmptyDataset));
        assert!(matches!(fit_forest(&[vec![1.0], vec![1.0, 2.0]], &[1.0, 2.0], &exact(), 0), Err(ForestError::DimensionMismatch { .. })));
        assert!(matches!(fit_forest(&[vec![1.0]], &[1.0, 2.0], &exact(), 0), Err(ForestError::DimensionMismatch { .. })));
        assert!(fit_forest(&[vec![1.0]], &[1.0], &ForestParams { n_trees: 0, ..exact() }, 0).is_err());
    }

    #[test]
    fn min_leaf_and_depth_respected() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| ((i * 13) % 7) as f64).collect();
        let p = ForestParams { n_trees: 1, max_depth: 3, min_leaf: 4, bootstrap: false, max_features: MaxFeatures::All };
        let f = fit_forest(&x, &y, &p, 0).unwrap();
        let t = &f.trees[0];
        assert!(t.depth() <= 3);
        for n in &t.nodes {
            if let Node::Leaf { n_samples, .. } = n {
                assert!(*n_samples >= 4);
            }
        }
    }

    #[test]
    fn midpoint_never_reaches_upper() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        assert_eq!(midpoint(lo, hi), lo);
        assert_eq!(midpoint(1.0, 2.0), 1.5);
    }

    #[test]
    fn same_seed_same_forest() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos(), i as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 2.0 + r[1]).collect();
        let p = ForestParams { n_trees: 8, ..Default::default() };
        let a = fit_forest(&x, &y, &p, 11).unwrap();
        let b = fit_forest(&x, &y, &p, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, fit_forest(&x, &y, &p, 12).unwrap());
    }

    #[test]
    fn forest_json_round_trip() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let f = fit_forest(&x, &y, &ForestParams { n_trees: 3, ..Default::default() }, 5).unwrap();
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(serde_json::from_str::<RegressionForest>(&text).unwrap(), f);
    }

    fn season(year: i32, grid: &SlotGrid, f: impl Fn(u32) -> f64) -> Vec<Observation> {
        let mut out = Vec::new();
        let mut doy = grid.first_doy;
        while doy <= 365 {
            out.push(Observation { year, doy, value: f(doy) });
            doy += grid.cadence;
        }
        out
    }

    #[test]
    fn constant_history_forecasts_constant() {
        let grid = SlotGrid::new(1, 16);
        let mut h = season(2018, &grid, |_| 0.4);
        h.extend(season(2019, &grid, |_| 0.4));
        let fc = forecast_series(&h, &grid, 200, &ForestParams::default(), 3).unwrap();
        assert_eq!(fc.len(), 12);
        assert!(fc.iter().all(|o| (o.value - 0.4).abs() < 1e-12));
        assert_eq!((fc[0].year, fc[0].doy), (2020, 1));
    }

    #[test]
    fn periodic_history_repeats_last_season() {
        let grid = SlotGrid::new(1, 16);
        let shape = |d: u32| 0.2 + 0.5 * (-(((d as f64) - 180.0) / 50.0).powi(2)).exp();
        let mut h = season(2018, &grid, shape);
        h.extend(season(2019, &grid, shape));
        // observed first part of 2020
        h.extend(season(2020, &grid, shape).into_iter().filter(|o| o.doy <= 97));
        let fc = forecast_series(&h, &grid, 176, &exact(), 5).unwrap();
        assert_eq!(fc.len(), 11);
        for o in fc {
            assert_eq!(o.value, shape(o.doy), "day {}", o.doy);
        }
    }

    #[test]
    fn empty_horizon_and_short_history() {
        let grid = SlotGrid::new(1, 16);
        let h = season(2019, &grid, |d| d as f64);
        assert!(forecast_series(&h, &grid, 0, &exact(), 0).unwrap().is_empty());
        assert!(matches!(forecast_series(&h, &grid, 32, &exact(), 0), Err(ForestError::InsufficientHistory(_))));
    }

    #[test]
    fn slot_grid_wraps_years() {
        let g = SlotGrid::new(1, 16);
        assert_eq!(g.next(2020, 337), (2020, 353));
        assert_eq!(g.next(2020, 353), (2021, 1));
        assert_eq!(g.prev(2021, 1), (2020, 353));
        assert_eq!(g.days_between((2020, 353), (2021, 1)), 13);
    }

    proptest! {
        #[test]
        fn predictions_within_target_range(
            rows in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -100.0f64..100.0), 2..40),
            probe in (-50.0f64..50.0, -50.0f64..50.0),
            seed in any::<u64>(),
        ) {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let f = fit_forest(&x, &y, &ForestParams { n_trees: 5, ..Default::default() }, seed).unwrap();
            let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = predict_forest(&f, &[probe.0, probe.1]).unwrap();
            prop_assert!(p >= lo - 1e-9 && p <= hi + 1e-9);
        }

        #[test]
        fn deep_tree_interpolates_unique_rows(rows in prop::collection::btree_map((-1000i32..1000, -1000i32..1000), -50.0f64..50.0, 1..40)) {
            let x: Vec<Vec<f64>> = rows.keys().map(|(a, b)| vec![*a as f64, *b as f64]).collect();
            let y: Vec<f64> = rows.values().copied().collect();
            let f = fit_forest(&x, &y, &exact(), 0).unwrap();
            for (r, t) in x.iter().zip(&y) {
                prop_assert_eq!(predict_forest(&f, r).unwrap(), *t);
            }
        }
    }
}
