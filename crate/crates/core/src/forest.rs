//! Differentiable regression forests.
//!
//! Each tree is a complete binary tree of soft splits. Split node `n` routes a
//! sample left with probability `sigmoid(f[phi(n)])`, where `f` is the feature
//! vector produced by the backbone. Leaves hold Gaussian densities over the
//! target, so a tree's predictive distribution is a Gaussian mixture whose
//! weights are the routing probabilities, and the forest averages its trees.
//!
//! Split nodes are numbered `1..=split_count` in breadth-first (heap) order, so
//! node `n` has children `2n` and `2n + 1`, and leaf `l` sits at heap position
//! `leaf_count + l`.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on leaf variances.
pub const SIGMA2_FLOOR: f64 = 1e-4;

/// Densities below this are floored before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Leaves whose responsibility mass falls below this keep their parameters.
pub const MIN_LEAF_MASS: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gaussian_pdf(t: f64, mu: f64, sigma2: f64) -> f64 {
    gaussian_log_pdf(t, mu, sigma2).exp()
}

pub fn gaussian_log_pdf(t: f64, mu: f64, sigma2: f64) -> f64 {
    let d = t - mu;
    -0.5 * (2.0 * PI * sigma2).ln() - d * d / (2.0 * sigma2)
}

/// Shape of a complete binary tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    depth: usize,
}

impl TreeTopology {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 || depth > 24 {
            return Err(Error::InvalidConfig(format!(
                "tree depth must be in 1..=24, got {depth}"
            )));
        }
        Ok(Self { depth })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn split_count(&self) -> usize {
        (1 << self.depth) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.depth
    }

    /// Leaves owned by the subtree rooted at heap node `node` (1-based; may be
    /// a split node or a leaf position).
    pub fn leaves_under(&self, node: usize) -> Range<usize> {
        debug_assert!(node >= 1 && node < 2 * self.leaf_count());
        let level = usize::BITS as usize - 1 - node.leading_zeros() as usize;
        let span = 1 << (self.depth - level);
        let first = (node << (self.depth - level)) - self.leaf_count();
        first..first + span
    }

    /// Split nodes on the root-to-leaf path of `leaf`, each paired with whether
    /// the path turns left there. Ordered from the root down.
    pub fn path(&self, leaf: usize) -> Vec<(usize, bool)> {
        let mut node = self.leaf_count() + leaf;
        let mut steps = Vec::with_capacity(self.depth);
        while node > 1 {
            let parent = node / 2;
            steps.push((parent, node.is_multiple_of(2)));
            node = parent;
        }
        steps.reverse();
        steps
    }
}

/// Maps each split node to the feature index that drives it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    phi: Vec<usize>,
}

impl SplitAssignment {
    pub fn new(phi: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if let Some(&bad) = phi.iter().find(|&&j| j >= feature_dim) {
            return Err(Error::InvalidConfig(format!(
                "split assignment references feature {bad} but feature_dim is {feature_dim}"
            )));
        }
        Ok(Self { phi })
    }

    pub fn random<R: Rng + ?Sized>(split_count: usize, feature_dim: usize, rng: &mut R) -> Self {
        let phi = (0..split_count)
            .map(|_| rng.gen_range(0..feature_dim))
            .collect();
        Self { phi }
    }

    /// Feature index for split node `node` (1-based).
    pub fn feature_for(&self, node: usize) -> usize {
        self.phi[node - 1]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.phi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl LeafParams {
    pub fn new(mu: f64, sigma2: f64) -> Self {
        Self {
            mu,
            sigma2: sigma2.max(SIGMA2_FLOOR),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub topology: TreeTopology,
    pub assignment: SplitAssignment,
    pub leaves: Vec<LeafParams>,
}

impl Tree {
    pub fn new(
        topology: TreeTopology,
        assignment: SplitAssignment,
        leaves: Vec<LeafParams>,
    ) -> Result<Self> {
        if assignment.phi.len() != topology.split_count() {
            return Err(Error::shape(
                "split assignment",
                topology.split_count(),
                assignment.phi.len(),
            ));
        }
        if leaves.len() != topology.leaf_count() {
            return Err(Error::shape(
                "leaf parameters",
                topology.leaf_count(),
                leaves.len(),
            ));
        }
        Ok(Self {
            topology,
            assignment,
            leaves,
        })
    }
}

/// Shape of a freshly initialized forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestShape {
    pub tree_count: usize,
    pub depth: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    feature_dim: usize,
    trees: Vec<Tree>,
}

impl ForestModel {
    pub fn new(feature_dim: usize, trees: Vec<Tree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidConfig(
                "a forest needs at least one tree".into(),
            ));
        }
        for tree in &trees {
            SplitAssignment::new(tree.assignment.phi.clone(), feature_dim)?;
        }
        Ok(Self { feature_dim, trees })
    }

    /// Random split assignment per tree; leaf means uniform over the observed
    /// target range, leaf variances equal to the target variance.
    pub fn init<R: Rng + ?Sized>(shape: ForestShape, targets: &[f64], rng: &mut R) -> Result<Self> {
        if shape.tree_count == 0 || shape.feature_dim == 0 {
            return Err(Error::InvalidConfig(
                "tree_count and feature_dim must be positive".into(),
            ));
        }
        if targets.is_empty() {
            return Err(Error::EmptyDataset(
                "cannot initialize leaves without targets".into(),
            ));
        }
        let topology = TreeTopology::new(shape.depth)?;
        let (lo, hi) = targets
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
                (lo.min(t), hi.max(t))
            });
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;

        let trees = (0..shape.tree_count)
            .map(|_| {
                let assignment =
                    SplitAssignment::random(topology.split_count(), shape.feature_dim, rng);
                let leaves = (0..topology.leaf_count())
                    .map(|_| {
                        let mu = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                        LeafParams::new(mu, var)
                    })
                    .collect();
                Tree {
                    topology,
                    assignment,
                    leaves,
                }
            })
            .collect();
        Ok(Self {
            feature_dim: shape.feature_dim,
            trees,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn trees_mut(&mut self) -> &mut [Tree] {
        &mut self.trees
    }

    /// Routes one feature vector through every tree.
    pub fn route(&self, features: &[f64]) -> Result<ForestRouting> {
        check_features(features, self.feature_dim)?;
        let trees = self
            .trees
            .iter()
            .map(|tree| {
                let split = split_probs_unchecked(features, tree);
                let omega = route_unchecked(&split, tree.topology);
                TreeRouting { split, omega }
            })
            .collect();
        Ok(ForestRouting { trees })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingResult {
    pub omega: Vec<f64>,
}

/// Split probabilities and leaf routing of one sample through one tree.
#[derive(Debug, Clone)]
pub struct TreeRouting {
    pub split: Vec<f64>,
    pub omega: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForestRouting {
    pub trees: Vec<TreeRouting>,
}

impl ForestRouting {
    /// Unnormalized log terms `ln omega + ln N(t)` for every (tree, leaf),
    /// written into `out` (tree-major), and their maximum.
    fn log_terms(&self, t: f64, model: &ForestModel, out: &mut Vec<f64>) -> f64 {
        out.clear();
        let mut max = f64::NEG_INFINITY;
        for (routing, tree) in self.trees.iter().zip(&model.trees) {
            for (w, leaf) in routing.omega.iter().zip(&tree.leaves) {
                let a = w.ln() + gaussian_log_pdf(t, leaf.mu, leaf.sigma2);
                max = max.max(a);
                out.push(a);
            }
        }
        max
    }

    /// Exact `ln p_F(t | x)`, computed with a log-sum-exp so it stays finite
    /// where the density itself underflows.
    pub fn log_density(&self, t: f64, model: &ForestModel) -> f64 {
        let mut terms = Vec::new();
        let max = self.log_terms(t, model, &mut terms);
        let sum: f64 = terms.iter().map(|a| (a - max).exp()).sum();
        max + sum.ln() - (model.tree_count() as f64).ln()
    }

    pub fn density(&self, t: f64, model: &ForestModel) -> f64 {
        let total: f64 = self
            .trees
            .iter()
            .zip(&model.trees)
            .map(|(r, tree)| tree_density_unchecked(t, &r.omega, &tree.leaves))
            .sum();
        total / model.tree_count() as f64
    }

    pub fn mean(&self, model: &ForestModel) -> f64 {
        let total: f64 = self
            .trees
            .iter()
            .zip(&model.trees)
            .map(|(r, tree)| {
                r.omega
                    .iter()
                    .zip(&tree.leaves)
                    .map(|(w, leaf)| w * leaf.mu)
                    .sum::<f64>()
            })
            .sum();
        total / model.tree_count() as f64
    }

    /// `ln p_F(t | x)` and its gradient with respect to the feature vector.
    pub fn log_density_and_grad(&self, t: f64, model: &ForestModel) -> (f64, Vec<f64>) {
        let mut terms = Vec::new();
        let max = self.log_terms(t, model, &mut terms);
        for a in terms.iter_mut() {
            *a = (*a - max).exp();
        }
        let total: f64 = terms.iter().sum();
        let log_p = max + total.ln() - (model.tree_count() as f64).ln();

        let mut grad = vec![0.0; model.feature_dim];
        let mut heap = Vec::new();
        let mut offset = 0;
        for (routing, tree) in self.trees.iter().zip(&model.trees) {
            let leaf_count = tree.topology.leaf_count();
            let scaled = &terms[offset..offset + leaf_count];
            offset += leaf_count;

            // subtree sums of the scaled leaf terms, heap-indexed
            heap.clear();
            heap.resize(2 * leaf_count, 0.0);
            heap[leaf_count..].copy_from_slice(scaled);
            for node in (1..leaf_count).rev() {
                heap[node] = heap[2 * node] + heap[2 * node + 1];
            }
            for node in 1..leaf_count {
                let s = routing.split[node - 1];
                let d = (1.0 - s) * heap[2 * node] - s * heap[2 * node + 1];
                grad[tree.assignment.feature_for(node)] += d / total;
            }
        }
        (log_p, grad)
    }
}

fn check_features(features: &[f64], feature_dim: usize) -> Result<()> {
    if features.len() != feature_dim {
        return Err(Error::shape("feature vector", feature_dim, features.len()));
    }
    if let Some(j) = features.iter().position(|f| !f.is_finite()) {
        return Err(Error::NonFiniteInput(format!(
            "feature {j} is {}",
            features[j]
        )));
    }
    Ok(())
}

fn split_probs_unchecked(features: &[f64], tree: &Tree) -> Vec<f64> {
    tree.assignment
        .phi
        .iter()
        .map(|&j| sigmoid(features[j]))
        .collect()
}

fn route_unchecked(split: &[f64], topology: TreeTopology) -> Vec<f64> {
    let leaf_count = topology.leaf_count();
    let mut heap = vec![0.0; 2 * leaf_count];
    heap[1] = 1.0;
    for node in 1..leaf_count {
        let s = split[node - 1];
        heap[2 * node] = heap[node] * s;
        heap[2 * node + 1] = heap[node] * (1.0 - s);
    }
    heap.split_off(leaf_count)
}

fn tree_density_unchecked(t: f64, omega: &[f64], leaves: &[LeafParams]) -> f64 {
    omega
        .iter()
        .zip(leaves)
        .map(|(w, leaf)| w * gaussian_pdf(t, leaf.mu, leaf.sigma2))
        .sum()
}

/// Split probabilities `sigmoid(features[phi(n)])` for every split node of `tree`.
pub fn split_probs(features: &[f64], tree: &Tree) -> Result<Vec<f64>> {
    if let Some(j) = features.iter().position(|f| !f.is_finite()) {
        return Err(Error::NonFiniteInput(format!(
            "feature {j} is {}",
            features[j]
        )));
    }
    if let Some(&j) = tree.assignment.phi.iter().find(|&&j| j >= features.len()) {
        return Err(Error::shape("feature vector", j + 1, features.len()));
    }
    Ok(split_probs_unchecked(features, tree))
}

/// Probability of reaching each leaf: the product over the leaf's path of
/// `s_n` on left turns and `1 - s_n` on right turns.
pub fn route(split_probs: &[f64], topology: TreeTopology) -> Result<RoutingResult> {
    if split_probs.len() != topology.split_count() {
        return Err(Error::shape(
            "split probabilities",
            topology.split_count(),
            split_probs.len(),
        ));
    }
    if let Some(p) = split_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::NonFiniteInput(format!(
            "split probability {p} outside [0, 1]"
        )));
    }
    Ok(RoutingResult {
        omega: route_unchecked(split_probs, topology),
    })
}

/// Gaussian mixture density of one tree at `t`.
pub fn tree_density(t: f64, omega: &RoutingResult, leaves: &[LeafParams]) -> Result<f64> {
    if omega.omega.len() != leaves.len() {
        return Err(Error::shape(
            "leaf parameters",
            omega.omega.len(),
            leaves.len(),
        ));
    }
    if !t.is_finite() {
        return Err(Error::NonFiniteInput(format!("target {t}")));
    }
    Ok(tree_density_unchecked(t, &omega.omega, leaves))
}

pub fn forest_density(t: f64, features: &[f64], model: &ForestModel) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::NonFiniteInput(format!("target {t}")));
    }
    Ok(model.route(features)?.density(t, model))
}

/// `ln max(p_F(t | x), DENSITY_FLOOR)`; always finite.
pub fn log_likelihood(t: f64, features: &[f64], model: &ForestModel) -> Result<f64> {
    if !t.is_finite() {
        return Err(Error::NonFiniteInput(format!("target {t}")));
    }
    let log_p = model.route(features)?.log_density(t, model);
    Ok(log_p.max(DENSITY_FLOOR.ln()))
}

/// Mean of the forest's predictive mixture.
pub fn predict_mean(features: &[f64], model: &ForestModel) -> Result<f64> {
    Ok(model.route(features)?.mean(model))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub xi: Vec<f64>,
    /// Set when every numerator vanished and uniform weights were substituted.
    pub degenerate: bool,
}

/// Posterior probability that `t` was generated by each leaf of one tree.
pub fn leaf_responsibilities(
    t: f64,
    omega: &RoutingResult,
    leaves: &[LeafParams],
) -> Result<Responsibilities> {
    if omega.omega.len() != leaves.len() {
        return Err(Error::shape(
            "leaf parameters",
            omega.omega.len(),
            leaves.len(),
        ));
    }
    let logs: Vec<f64> = omega
        .omega
        .iter()
        .zip(leaves)
        .map(|(w, leaf)| w.ln() + gaussian_log_pdf(t, leaf.mu, leaf.sigma2))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let n = leaves.len();
        return Ok(Responsibilities {
            xi: vec![1.0 / n as f64; n],
            degenerate: true,
        });
    }
    let mut xi: Vec<f64> = logs.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = xi.iter().sum();
    xi.iter_mut().for_each(|x| *x /= total);
    Ok(Responsibilities {
        xi,
        degenerate: false,
    })
}

/// Gradient of `ln p_F(t | x)` with respect to the feature vector.
pub fn grad_wrt_features(t: f64, features: &[f64], model: &ForestModel) -> Result<Vec<f64>> {
    if !t.is_finite() {
        return Err(Error::NonFiniteInput(format!("target {t}")));
    }
    Ok(model.route(features)?.log_density_and_grad(t, model).1)
}

#[derive(Debug, Clone)]
pub struct LeafUpdate {
    pub model: ForestModel,
    /// Selected-sample total log-likelihood before the first iteration and
    /// after each iteration.
    pub log_likelihoods: Vec<f64>,
    /// Leaf updates skipped because their responsibility mass was negligible.
    pub skipped_leaves: usize,
}

/// EM fixed-point iterations on the leaf Gaussians with routing held fixed.
///
/// Responsibilities are taken over every (tree, leaf) pair of the forest
/// mixture, i.e. the per-tree responsibilities weighted by each tree's share of
/// `p_F`, so every iteration is an EM step on the selected-sample forest
/// log-likelihood. With one tree this is the plain per-tree update.
pub fn update_leaves(
    targets: &[f64],
    selected: &[bool],
    features: &[Vec<f64>],
    model: &ForestModel,
    iterations: usize,
) -> Result<LeafUpdate> {
    if selected.len() != targets.len() {
        return Err(Error::shape(
            "selection vector",
            targets.len(),
            selected.len(),
        ));
    }
    if features.len() != targets.len() {
        return Err(Error::shape("feature rows", targets.len(), features.len()));
    }
    let chosen: Vec<usize> = (0..targets.len()).filter(|&i| selected[i]).collect();
    if chosen.is_empty() {
        return Err(Error::EmptySelection(
            "no selected samples for the leaf update".into(),
        ));
    }

    let routings = chosen
        .iter()
        .map(|&i| model.route(&features[i]))
        .collect::<Result<Vec<_>>>()?;
    let ts: Vec<f64> = chosen.iter().map(|&i| targets[i]).collect();
    if let Some(t) = ts.iter().find(|t| !t.is_finite()) {
        return Err(Error::NonFiniteInput(format!("target {t}")));
    }

    let n_leaves: usize = model.trees.iter().map(|t| t.topology.leaf_count()).sum();
    let log_k = (model.tree_count() as f64).ln();
    let mut model = model.clone();
    let mut xi = vec![0.0; ts.len() * n_leaves];
    let mut terms = Vec::with_capacity(n_leaves);
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut skipped = 0;

    for _ in 0..iterations {
        // E-step
        let mut total_ll = 0.0;
        for (i, (routing, &t)) in routings.iter().zip(&ts).enumerate() {
            let max = routing.log_terms(t, &model, &mut terms);
            let row = &mut xi[i * n_leaves..(i + 1) * n_leaves];
            let mut sum = 0.0;
            for (x, a) in row.iter_mut().zip(&terms) {
                *x = (a - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
            total_ll += max + sum.ln() - log_k;
        }
        trace.push(total_ll);

        // M-step
        let mut offset = 0;
        for tree in model.trees.iter_mut() {
            for (l, leaf) in tree.leaves.iter_mut().enumerate() {
                let col = offset + l;
                let mut mass = 0.0;
                let mut first = 0.0;
                for (i, &t) in ts.iter().enumerate() {
                    let w = xi[i * n_leaves + col];
                    mass += w;
                    first += w * t;
                }
                if mass < MIN_LEAF_MASS {
                    skipped += 1;
                    continue;
                }
                let mu = first / mass;
                let second: f64 = ts
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| xi[i * n_leaves + col] * (t - mu).powi(2))
                    .sum();
                *leaf = LeafParams::new(mu, second / mass);
            }
            offset += tree.topology.leaf_count();
        }
    }

    let final_ll: f64 = routings
        .iter()
        .zip(&ts)
        .map(|(r, &t)| r.log_density(t, &model))
        .sum();
    trace.push(final_ll);

    Ok(LeafUpdate {
        model,
        log_likelihoods: trace,
        skipped_leaves: skipped,
    })
}
