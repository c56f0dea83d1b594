use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{Calibration, Dataset, FeatureLayout, ModelArtifact, ModelParams, Normalization};
use crate::echo::{ChannelId, GazeInstance};
use crate::error::{Error, Result};
use crate::seed::Seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum SplitMethod {
    /// Every midpoint between sorted unique values.
    Exact,
    /// At most `max_bins` quantile bins per feature. Identical to `Exact`
    /// for features with no more than `max_bins` unique values.
    Histogram { max_bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// Fraction of instances drawn without replacement for each stage.
    pub subsample: f64,
    pub min_samples_leaf: usize,
    pub split: SplitMethod,
    pub seed: Seed,
}

impl Default for GbrtParams {
    fn default() -> Self {
        GbrtParams {
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.1,
            subsample: 0.8,
            min_samples_leaf: 1,
            split: SplitMethod::Histogram { max_bins: 64 },
            seed: Seed(0),
        }
    }
}

impl GbrtParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees < 1 {
            return Err(Error::config("n_trees must be at least 1"));
        }
        if self.max_depth < 1 {
            return Err(Error::config("max_depth must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::config("subsample must be in (0, 1]"));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::config("min_samples_leaf must be at least 1"));
        }
        if let SplitMethod::Histogram { max_bins } = self.split {
            if !(2..=256).contains(&max_bins) {
                return Err(Error::config("max_bins must be in 2..=256"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeNode {
    /// Samples with `x[feature] <= threshold` go left. `gain` is the drop in
    /// squared error the split achieved on the stage's training rows.
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
        gain: f64,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_with<F: Fn(usize) -> f32>(&self, z: &F) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if f64::from(z(feature as usize)) <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left as usize).max(walk(nodes, right as usize)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Boosted trees for one output coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub base: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Training mean squared error after each stage.
    pub train_mse: Vec<f64>,
}

impl Ensemble {
    pub fn predict_with<F: Fn(usize) -> f32>(&self, z: &F) -> f64 {
        self.base + self.learning_rate * self.trees.iter().map(|t| t.predict_with(z)).sum::<f64>()
    }
}

/// Feature-major quantized copy of a standardized training matrix.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    pub n: usize,
    pub d: usize,
    /// `bins[f * n + i]`: bin of sample `i` for feature `f`.
    pub bins: Vec<u8>,
    /// Ascending cut points per feature; bin `k` holds values in
    /// `(cuts[k-1], cuts[k]]`.
    pub cuts: Vec<Vec<f64>>,
    /// Histogram slots reserved per feature (largest bin count).
    stride: usize,
}

impl BinnedMatrix {
    /// `z` is row-major `n x d`.
    pub fn new(z: &[f32], n: usize, d: usize, max_bins: usize) -> Self {
        const BLOCK: usize = 64;
        let mut bins = vec![0u8; n * d];
        let mut cuts = Vec::with_capacity(d);
        let mut col = vec![0.0f32; BLOCK * n];
        let mut sorted = Vec::with_capacity(n);
        for f0 in (0..d).step_by(BLOCK) {
            let f1 = (f0 + BLOCK).min(d);
            let w = f1 - f0;
            for i in 0..n {
                for k in 0..w {
                    col[k * n + i] = z[i * d + f0 + k];
                }
            }
            for k in 0..w {
                let values = &col[k * n..(k + 1) * n];
                sorted.clear();
                sorted.extend_from_slice(values);
                sorted.sort_by(f32::total_cmp);
                let c = cut_points(&sorted, max_bins);
                let out = &mut bins[(f0 + k) * n..(f0 + k + 1) * n];
                for (b, &v) in out.iter_mut().zip(values) {
                    *b = c.partition_point(|&t| t < f64::from(v)) as u8;
                }
                cuts.push(c);
            }
        }
        let stride = cuts.iter().map(|c| c.len() + 1).max().unwrap_or(1);
        BinnedMatrix {
            n,
            d,
            bins,
            cuts,
            stride,
        }
    }

    fn n_bins(&self, f: usize) -> usize {
        self.cuts[f].len() + 1
    }
}

/// Midpoints between adjacent unique values, thinned to quantiles when
/// there are more than `max_bins` uniques.
fn cut_points(sorted: &[f32], max_bins: usize) -> Vec<f64> {
    let mut uniq: Vec<f32> = sorted.to_vec();
    uniq.dedup();
    let mid = |a: f32, b: f32| (f64::from(a) + f64::from(b)) / 2.0;
    if uniq.len() <= max_bins {
        return uniq.windows(2).map(|w| mid(w[0], w[1])).collect();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for k in 1..max_bins {
        let i = k * n / max_bins;
        if i == 0 || i >= n {
            continue;
        }
        let (a, b) = (sorted[i - 1], sorted[i]);
        let c = if a < b {
            mid(a, b)
        } else {
            // Inside a run of equal values: cut just above it.
            let j = sorted.partition_point(|&v| v <= a);
            if j >= n {
                continue;
            }
            mid(a, sorted[j])
        };
        if cuts.last().map_or(true, |&l| c > l) {
            cuts.push(c);
        }
    }
    cuts
}

/// Training rows in the representation the split finder needs.
enum Source<'a> {
    Exact { z: &'a [f32], d: usize },
    Hist(&'a BinnedMatrix),
}

#[derive(Debug, Clone, Copy)]
struct Split {
    feature: usize,
    threshold: f64,
    /// Highest bin sent left (histogram source only).
    bin: usize,
    gain: f64,
}

/// Gradient sums and counts per (feature, bin).
struct Hist {
    g: Vec<f64>,
    c: Vec<u32>,
}

impl Source<'_> {
    fn d(&self) -> usize {
        match self {
            Source::Exact { d, .. } => *d,
            Source::Hist(b) => b.d,
        }
    }

    fn goes_left(&self, s: &Split, i: usize) -> bool {
        match self {
            Source::Exact { z, d } => f64::from(z[i * d + s.feature]) <= s.threshold,
            Source::Hist(b) => (b.bins[s.feature * b.n + i] as usize) <= s.bin,
        }
    }
}

fn build_hist(b: &BinnedMatrix, idx: &[u32], r: &[f64]) -> Hist {
    let w = b.stride;
    let mut h = Hist {
        g: vec![0.0; b.d * w],
        c: vec![0; b.d * w],
    };
    for f in 0..b.d {
        let col = &b.bins[f * b.n..(f + 1) * b.n];
        let g = &mut h.g[f * w..(f + 1) * w];
        let c = &mut h.c[f * w..(f + 1) * w];
        for &i in idx {
            let k = col[i as usize] as usize;
            g[k] += r[i as usize];
            c[k] += 1;
        }
    }
    h
}

fn subtract_hist(parent: &Hist, child: &Hist) -> Hist {
    Hist {
        g: parent.g.iter().zip(&child.g).map(|(a, b)| a - b).collect(),
        c: parent.c.iter().zip(&child.c).map(|(a, b)| a - b).collect(),
    }
}

fn gain_of(gl: f64, nl: usize, g: f64, n: usize) -> f64 {
    let (gr, nr) = (g - gl, n - nl);
    gl * gl / nl as f64 + gr * gr / nr as f64 - g * g / n as f64
}

fn best_split_hist(b: &BinnedMatrix, h: &Hist, g: f64, n: usize, min_leaf: usize) -> Option<Split> {
    let mut best: Option<Split> = None;
    let w = b.stride;
    for f in 0..b.d {
        let nb = b.n_bins(f);
        let (mut gl, mut nl) = (0.0, 0usize);
        for k in 0..nb - 1 {
            gl += h.g[f * w + k];
            nl += h.c[f * w + k] as usize;
            if nl < min_leaf {
                continue;
            }
            if n - nl < min_leaf {
                break;
            }
            if h.c[f * w + k] == 0 && k > 0 {
                // Same partition as the previous cut.
                continue;
            }
            let gain = gain_of(gl, nl, g, n);
            if best.map_or(true, |s| gain > s.gain) {
                best = Some(Split {
                    feature: f,
                    threshold: b.cuts[f][k],
                    bin: k,
                    gain,
                });
            }
        }
    }
    best
}

fn best_split_exact(z: &[f32], d: usize, idx: &[u32], r: &[f64], g: f64, min_leaf: usize) -> Option<Split> {
    let n = idx.len();
    let mut best: Option<Split> = None;
    let mut pairs: Vec<(f32, f64)> = Vec::with_capacity(n);
    for f in 0..d {
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (z[i as usize * d + f], r[i as usize])));
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut gl = 0.0;
        for k in 0..n - 1 {
            gl += pairs[k].1;
            let nl = k + 1;
            if pairs[k].0 == pairs[k + 1].0 || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let gain = gain_of(gl, nl, g, n);
            if best.map_or(true, |s| gain > s.gain) {
                best = Some(Split {
                    feature: f,
                    threshold: (f64::from(pairs[k].0) + f64::from(pairs[k + 1].0)) / 2.0,
                    bin: 0,
                    gain,
                });
            }
        }
    }
    best
}

struct TreeBuilder<'a> {
    src: &'a Source<'a>,
    r: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, idx: Vec<u32>, hist: Option<Hist>, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        let n = idx.len();
        let g: f64 = idx.iter().map(|&i| self.r[i as usize]).sum();
        let mean = g / n as f64;
        self.nodes.push(TreeNode::Leaf { value: mean });
        if depth >= self.max_depth || n < 2 * self.min_leaf {
            return id;
        }
        let sse: f64 = idx.iter().map(|&i| (self.r[i as usize] - mean).powi(2)).sum();
        if sse <= 0.0 {
            return id;
        }
        let split = match (self.src, &hist) {
            (Source::Hist(b), Some(h)) => best_split_hist(b, h, g, n, self.min_leaf),
            (Source::Exact { z, d }, _) => best_split_exact(z, *d, &idx, self.r, g, self.min_leaf),
            (Source::Hist(_), None) => unreachable!("histogram source without histogram"),
        };
        let Some(split) = split.filter(|s| s.gain > 1e-12 * sse) else {
            return id;
        };
        let (left, right): (Vec<u32>, Vec<u32>) = idx.iter().partition(|&&i| self.src.goes_left(&split, i as usize));
        let (hl, hr) = match (self.src, hist) {
            (Source::Hist(b), Some(h)) => {
                let (small, large_is_left) = if left.len() <= right.len() {
                    (&left, false)
                } else {
                    (&right, true)
                };
                let hs = build_hist(b, small, self.r);
                let hl_ = subtract_hist(&h, &hs);
                drop(h);
                if large_is_left {
                    (Some(hl_), Some(hs))
                } else {
                    (Some(hs), Some(hl_))
                }
            }
            _ => (None, None),
        };
        let l = self.grow(left, hl, depth + 1);
        let rgt = self.grow(right, hr, depth + 1);
        self.nodes[id as usize] = TreeNode::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: l,
            right: rgt,
            gain: split.gain,
        };
        id
    }
}

fn route(tree: &Tree, src: &Source, i: usize) -> f64 {
    let mut k = 0;
    loop {
        match tree.nodes[k] {
            TreeNode::Leaf { value } => return value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                let left_side = match src {
                    Source::Exact { z, d } => f64::from(z[i * d + feature as usize]) <= threshold,
                    Source::Hist(b) => {
                        let k = b.cuts[feature as usize].partition_point(|&c| c < threshold);
                        (b.bins[feature as usize * b.n + i] as usize) <= k
                    }
                };
                k = if left_side { left as usize } else { right as usize };
            }
        }
    }
}

fn fit_ensemble(src: &Source, y: &[f64], params: &GbrtParams, seed: Seed) -> Ensemble {
    let n = y.len();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut f = vec![base; n];
    let mut r = vec![0.0; n];
    let m = ((params.subsample * n as f64).round() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut train_mse = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        for i in 0..n {
            r[i] = y[i] - f[i];
        }
        let mut idx: Vec<u32> = if m == n {
            (0..n as u32).collect()
        } else {
            let mut rng = seed.child("stage", t as u64).rng();
            sample(&mut rng, n, m).into_iter().map(|i| i as u32).collect()
        };
        idx.sort_unstable();
        let hist = match src {
            Source::Hist(b) => Some(build_hist(b, &idx, &r)),
            Source::Exact { .. } => None,
        };
        let mut builder = TreeBuilder {
            src,
            r: &r,
            max_depth: params.max_depth,
            min_leaf: params.min_samples_leaf,
            nodes: Vec::new(),
        };
        builder.grow(idx, hist, 0);
        let tree = Tree { nodes: builder.nodes };
        for i in 0..n {
            f[i] += params.learning_rate * route(&tree, src, i);
        }
        train_mse.push(y.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64);
        trees.push(tree);
    }
    Ensemble {
        base,
        learning_rate: params.learning_rate,
        trees,
        train_mse,
    }
}

/// Gradient-boosted regression trees, one ensemble per screen coordinate.
pub fn fit_gbrt(train: &[GazeInstance], params: &GbrtParams) -> Result<ModelArtifact> {
    fit_gbrt_dataset(&Dataset::from_instances(train)?, params)
}

pub fn fit_gbrt_dataset(data: &Dataset, params: &GbrtParams) -> Result<ModelArtifact> {
    params.validate()?;
    if data.n < 2 {
        return Err(Error::EmptyInput("gradient boosting needs at least 2 instances".into()));
    }
    let (n, d) = (data.n, data.dims());
    let norm = Normalization::fit(data);
    let mut z = vec![0.0f32; n * d];
    for i in 0..n {
        norm.apply(data.row(i), &mut z[i * d..(i + 1) * d]);
    }
    let binned;
    let src = match params.split {
        SplitMethod::Exact => Source::Exact { z: &z, d },
        SplitMethod::Histogram { max_bins } => {
            binned = BinnedMatrix::new(&z, n, d, max_bins);
            Source::Hist(&binned)
        }
    };
    debug_assert_eq!(src.d(), d);
    let ensembles = [0, 1].map(|c| {
        let y: Vec<f64> = data.y.iter().map(|v| v[c]).collect();
        fit_ensemble(&src, &y, params, params.seed.child("gbrt-coordinate", c as u64))
    });
    Ok(ModelArtifact {
        layout: data.layout,
        normalization: norm,
        params: ModelParams::Gbrt { ensembles },
        calibration: Calibration::identity(),
    })
}

/// Unscaled squared-error reduction per feature, summed over both ensembles.
pub fn feature_gains(model: &ModelArtifact) -> Result<Vec<f64>> {
    let ModelParams::Gbrt { ensembles } = &model.params else {
        return Err(Error::Unsupported("feature importance needs a tree model".into()));
    };
    let mut gains = vec![0.0; model.dims()];
    for e in ensembles {
        for t in &e.trees {
            for node in &t.nodes {
                if let TreeNode::Split { feature, gain, .. } = node {
                    gains[*feature as usize] += gain;
                }
            }
        }
    }
    Ok(gains)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ChannelImportance {
    pub channel: usize,
    pub mic: u8,
    pub band: u8,
    /// Scaled so the strongest channel is 100.
    pub importance: f64,
}

/// Impurity-based importance aggregated per (mic, band) channel.
pub fn feature_importance(model: &ModelArtifact) -> Result<Vec<ChannelImportance>> {
    let gains = feature_gains(model)?;
    let layout: FeatureLayout = model.layout;
    let mut per = vec![0.0; layout.channels];
    for (j, g) in gains.iter().enumerate() {
        per[layout.channel_of(j)] += g;
    }
    let max = per.iter().cloned().fold(0.0, f64::max);
    Ok(per
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            let id = ChannelId::from_index(c);
            ChannelImportance {
                channel: c,
                mic: id.mic,
                band: id.band,
                importance: if max > 0.0 { 100.0 * v / max } else { 0.0 },
            }
        })
        .collect())
}
