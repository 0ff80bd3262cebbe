//! Gradient-boosted histogram trees with second-order leaf values and a
//! pluggable loss layer, plus an alternating fit for the negative-binomial
//! dispersion.

pub mod loss;
mod tree;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::features::{LagMatrix, PointModel};
pub use loss::{nb_nll, LossKind};
pub use tree::{Tree, TreeNode};

use loss::Link;
use tree::{BinnedDesign, GrowParams};

#[derive(Debug, Clone, PartialEq)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_leaves: usize,
    pub learning_rate: f64,
    pub min_data_in_leaf: usize,
    pub l2_leaf_reg: f64,
    pub row_subsample: f64,
    pub feature_subsample: f64,
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: 100,
            max_leaves: 31,
            learning_rate: 0.1,
            min_data_in_leaf: 20,
            l2_leaf_reg: 0.0,
            row_subsample: 1.0,
            feature_subsample: 1.0,
            max_bins: 255,
            seed: 0,
        }
    }
}

impl GbtParams {
    /// Heavier configuration for the large pooled fits.
    pub fn preset_large(seed: u64) -> Self {
        GbtParams {
            n_trees: 400,
            max_leaves: 255,
            learning_rate: 0.05,
            min_data_in_leaf: 20,
            l2_leaf_reg: 0.0,
            row_subsample: 0.8,
            feature_subsample: 0.8,
            max_bins: 255,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if self.max_leaves == 0 {
            return Err(Error::Config("max_leaves must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.min_data_in_leaf == 0 {
            return Err(Error::Config("min_data_in_leaf must be at least 1".into()));
        }
        if !(self.l2_leaf_reg >= 0.0 && self.l2_leaf_reg.is_finite()) {
            return Err(Error::Config(format!(
                "l2_leaf_reg must be non-negative, got {}",
                self.l2_leaf_reg
            )));
        }
        for (name, v) in [
            ("row_subsample", self.row_subsample),
            ("feature_subsample", self.feature_subsample),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if !(2..=255).contains(&self.max_bins) {
            return Err(Error::Config(format!(
                "max_bins must be between 2 and 255, got {}",
                self.max_bins
            )));
        }
        Ok(())
    }
}

/// Boosted ensemble. Raw score is `base_score + lr * sum(trees)`; the link
/// maps raw scores to the mean scale used by `predict_row`.
#[derive(Debug, Clone, PartialEq)]
pub struct GbtModel {
    pub base_score: f64,
    pub learning_rate: f64,
    pub link: Link,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn predict_raw_row(&self, features: &[f64]) -> f64 {
        let mut f = self.base_score;
        for tree in &self.trees {
            f += self.learning_rate * tree.predict(features);
        }
        f
    }

    /// Raw scores for every row of a design matrix.
    pub fn predict_raw_matrix(&self, matrix: &LagMatrix) -> Vec<f64> {
        (0..matrix.n_rows()).map(|r| self.predict_raw_row(matrix.feature_row(r))).collect()
    }
}

impl PointModel for GbtModel {
    fn predict_row(&self, features: &[f64]) -> f64 {
        let raw = self.predict_raw_row(features);
        match self.link {
            Link::Identity => raw,
            Link::Log => raw.exp(),
        }
    }
}

pub fn fit_gbt(matrix: &LagMatrix, loss: LossKind, params: &GbtParams) -> Result<GbtModel> {
    loss.validate()?;
    params.validate()?;
    let n = matrix.n_rows();
    let p = matrix.n_lags;
    if n == 0 {
        return Err(Error::Data("cannot fit boosted trees on an empty design".into()));
    }
    loss.validate_targets(&matrix.targets)?;

    let design = BinnedDesign::build(matrix, params.max_bins);
    let base_score = loss.base_score(&matrix.targets);
    let mut scores = vec![base_score; n];
    let mut grads = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut rng = StdRng::seed_from_u64(params.seed);
    let grow = GrowParams {
        max_leaves: params.max_leaves,
        min_data_in_leaf: params.min_data_in_leaf,
        l2_leaf_reg: params.l2_leaf_reg,
    };

    let n_sample = if params.row_subsample < 1.0 {
        ((params.row_subsample * n as f64).round() as usize).clamp(1, n)
    } else {
        n
    };
    let p_sample = if params.feature_subsample < 1.0 {
        ((params.feature_subsample * p as f64).round() as usize).clamp(1, p)
    } else {
        p
    };

    let mut trees: Vec<Tree> = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        for r in 0..n {
            let (g, h) = loss.grad_hess(matrix.targets[r], scores[r])?;
            grads[r] = g;
            hess[r] = h;
        }
        let rows: Vec<u32> = if n_sample < n {
            let mut idx = rand::seq::index::sample(&mut rng, n, n_sample).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| i as u32).collect()
        } else {
            (0..n as u32).collect()
        };
        let feats: Vec<usize> = if p_sample < p {
            let mut idx = rand::seq::index::sample(&mut rng, p, p_sample).into_vec();
            idx.sort_unstable();
            idx
        } else {
            (0..p).collect()
        };

        let grown = tree::grow_tree(&design, &grads, &hess, &rows, &feats, grow);
        let tree = grown.tree;
        if tree.nodes.len() == 1
            && (params.learning_rate * tree.nodes[0].weight).abs() < 1e-12
        {
            break;
        }
        for r in 0..n {
            scores[r] += params.learning_rate * tree.predict(matrix.feature_row(r));
        }
        trees.push(tree);
    }

    Ok(GbtModel { base_score, learning_rate: params.learning_rate, link: loss.link(), trees })
}

/// Result of the alternating negative-binomial fit.
#[derive(Debug, Clone, PartialEq)]
pub struct NegBinFit {
    pub model: GbtModel,
    pub r: f64,
    pub converged: bool,
}

const R_MIN: f64 = 0.01;
const R_MAX: f64 = 1e6;

/// Method-of-moments starting dispersion, clipped to the search range.
fn initial_r(targets: &[f64]) -> f64 {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = if targets.len() < 2 {
        0.0
    } else {
        targets.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    };
    if var <= mean || mean <= 0.0 {
        R_MAX
    } else {
        (mean * mean / (var - mean)).clamp(R_MIN, R_MAX)
    }
}

/// Golden-section minimum of `f` on [a, b] to absolute tolerance `tol`.
fn golden_min(mut a: f64, mut b: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Alternate between boosting with the dispersion fixed and profiling the
/// dispersion with the raw scores fixed. Keeps the best likelihood seen, so
/// a non-converged run still returns a usable model.
pub fn fit_gbt_negbin(
    matrix: &LagMatrix,
    params: &GbtParams,
    r_init: Option<f64>,
    max_outer: usize,
) -> Result<NegBinFit> {
    if max_outer == 0 {
        return Err(Error::Config("max_outer must be at least 1".into()));
    }
    if let Some(r) = r_init {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Config(format!("r_init must be positive, got {r}")));
        }
    }
    let mut r = r_init.map_or_else(|| initial_r(&matrix.targets), |r| r.clamp(R_MIN, R_MAX));
    let mut best: Option<(f64, GbtModel, f64)> = None;
    let mut converged = false;

    for _ in 0..max_outer {
        let model = fit_gbt(matrix, LossKind::NegBin(r), params)?;
        let scores = model.predict_raw_matrix(matrix);
        let targets = &matrix.targets;
        let r_new = golden_min(R_MIN.ln(), R_MAX.ln(), 1e-6, |t| {
            nb_nll(targets, &scores, t.exp()).unwrap_or(f64::INFINITY)
        })
        .exp();
        let nll = nb_nll(targets, &scores, r_new)?;
        if best.as_ref().map_or(true, |(b, _, _)| nll < *b) {
            best = Some((nll, model, r_new));
        }
        if (r_new.ln() - r.ln()).abs() < 1e-4 {
            converged = true;
            break;
        }
        r = r_new;
    }

    let (_, model, r) = best.expect("at least one outer iteration runs");
    Ok(NegBinFit { model, r, converged })
}

impl std::fmt::Display for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Link::Identity => write!(f, "identity"),
            Link::Log => write!(f, "log"),
        }
    }
}

pub fn save_gbt(model: &GbtModel, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str("gbt v1\n");
    out.push_str(&format!("link {}\n", model.link));
    out.push_str(&format!("base_score {:.17e}\n", model.base_score));
    out.push_str(&format!("learning_rate {:.17e}\n", model.learning_rate));
    out.push_str(&format!("n_trees {}\n", model.trees.len()));
    for tree in &model.trees {
        out.push_str(&format!("tree {}\n", tree.nodes.len()));
        for n in &tree.nodes {
            out.push_str(&format!(
                "node {} {:.17e} {} {} {:.17e}\n",
                n.feature, n.threshold, n.left, n.right, n.weight
            ));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_gbt(path: &std::path::Path) -> Result<GbtModel> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let bad = |what: &str| Error::Data(format!("malformed tree model file: {what}"));
    if lines.next() != Some("gbt v1") {
        return Err(bad("missing 'gbt v1' header"));
    }
    let mut field = |name: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| bad(&format!("missing {name}")))?;
        line.strip_prefix(name)
            .and_then(|rest| rest.strip_prefix(' '))
            .map(str::to_owned)
            .ok_or_else(|| bad(&format!("expected '{name} ...', got '{line}'")))
    };
    let link = match field("link")?.as_str() {
        "identity" => Link::Identity,
        "log" => Link::Log,
        other => return Err(bad(&format!("unknown link '{other}'"))),
    };
    let base_score: f64 =
        field("base_score")?.parse().map_err(|_| bad("unparseable base_score"))?;
    let learning_rate: f64 =
        field("learning_rate")?.parse().map_err(|_| bad("unparseable learning_rate"))?;
    let n_trees: usize = field("n_trees")?.parse().map_err(|_| bad("unparseable n_trees"))?;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let n_nodes: usize = field("tree")?.parse().map_err(|_| bad("unparseable tree size"))?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let line = field("node")?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 5 {
                return Err(bad(&format!("node line needs 5 fields, got '{line}'")));
            }
            nodes.push(TreeNode {
                feature: parts[0].parse().map_err(|_| bad("unparseable node feature"))?,
                threshold: parts[1].parse().map_err(|_| bad("unparseable node threshold"))?,
                left: parts[2].parse().map_err(|_| bad("unparseable node left"))?,
                right: parts[3].parse().map_err(|_| bad("unparseable node right"))?,
                weight: parts[4].parse().map_err(|_| bad("unparseable node weight"))?,
            });
        }
        if nodes.is_empty() {
            return Err(bad("tree with zero nodes"));
        }
        trees.push(Tree { nodes });
    }
    if lines.next().is_some() {
        return Err(bad("trailing content after last tree"));
    }
    Ok(GbtModel { base_score, learning_rate, link, trees })
}
