//! Class ranking and activation-map construction.
//!
//! A class activation map weights the feature maps by one column of the FC
//! weights; the combinational map sums the ranked per-class maps with the
//! coefficients of a combination function. The canonical implementation
//! folds the coefficients into a single weight vector first, which is
//! algebraically identical to summing the per-class maps.

use crate::combine::CombinationFn;
use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Tensor};

/// Classes ordered from highest to lowest predicted probability.
#[derive(Debug, Clone)]
pub struct ClassRanking {
    order: Vec<usize>,
    probs: Vec<f64>,
}

impl ClassRanking {
    /// Class at rank `k` (1-based).
    pub fn class_at(&self, rank: usize) -> usize {
        self.order[rank - 1]
    }

    /// Ranked class indices, best first.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Softmax probabilities aligned with `order` (non-increasing).
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.order.len()
    }

    /// The `n` highest-probability classes with their probabilities.
    pub fn top(&self, n: usize) -> Vec<(usize, f64)> {
        self.order
            .iter()
            .zip(&self.probs)
            .take(n)
            .map(|(&c, &p)| (c, p))
            .collect()
    }
}

fn check_fc(features: usize, fc_w: &Tensor) -> Result<usize> {
    if fc_w.rank() != 2 {
        return Err(Error::shape(format!(
            "FC weights must be N x K, got {:?}",
            fc_w.shape()
        )));
    }
    if fc_w.shape()[0] != features {
        return Err(Error::shape(format!(
            "FC weights expect {} feature channels, got {features}",
            fc_w.shape()[0]
        )));
    }
    Ok(fc_w.shape()[1])
}

/// Rank classes by the FC scores of the pooled features.
///
/// Ties break toward the lower class index, so the ranking is a
/// deterministic permutation.
pub fn rank_classes(pooled: &Tensor, fc_w: &Tensor) -> Result<ClassRanking> {
    if pooled.rank() != 1 {
        return Err(Error::shape(format!(
            "pooled features must be a vector, got {:?}",
            pooled.shape()
        )));
    }
    let n = pooled.shape()[0];
    let k = check_fc(n, fc_w)?;

    let mut scores = vec![0.0; k];
    for (c, score) in scores.iter_mut().enumerate() {
        for i in 0..n {
            *score += fc_w.at2(i, c) * pooled.data()[i];
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let probs_by_class = softmax_slice(&scores);
    let probs = order.iter().map(|&c| probs_by_class[c]).collect();
    Ok(ClassRanking { order, probs })
}

/// Activation map of one class: M^c = Σ_n w[n,c] · f^n.
pub fn class_map(features: &Tensor, fc_w: &Tensor, class: usize) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape(format!(
            "feature maps must be N x H x W, got {:?}",
            features.shape()
        )));
    }
    let (n, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let k = check_fc(n, fc_w)?;
    if class >= k {
        return Err(Error::invalid(format!(
            "class {class} out of range for {k} classes"
        )));
    }
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        weights.push(fc_w.at2(i, class));
    }
    weighted_map(features, &weights, h, w)
}

fn weighted_map(features: &Tensor, weights: &[f64], h: usize, w: usize) -> Result<Tensor> {
    let area = h * w;
    let mut out = vec![0.0; area];
    for (i, &wi) in weights.iter().enumerate() {
        let plane = &features.data()[i * area..(i + 1) * area];
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += wi * v;
        }
    }
    Tensor::new(&[h, w], out)
}

fn ccam_with_order(
    features: &Tensor,
    fc_w: &Tensor,
    order: &[usize],
    combine: &dyn CombinationFn,
) -> Result<Tensor> {
    let (n, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    let k = check_fc(n, fc_w)?;
    if order.len() != k {
        return Err(Error::shape(format!(
            "ranking covers {} classes, FC weights have {k}",
            order.len()
        )));
    }
    // Fold g(k) into one combined weight per feature channel.
    let coeffs = combine.weights_vector(k)?;
    let mut weights = vec![0.0; n];
    for (i, slot) in weights.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (rank_idx, &class) in order.iter().enumerate() {
            acc += coeffs.data()[rank_idx] * fc_w.at2(i, class);
        }
        *slot = acc;
    }
    weighted_map(features, &weights, h, w)
}

/// Combinational map over the predicted ranking: M = Σ_k g(k) · M^{c_k}.
pub fn ccam(
    features: &Tensor,
    fc_w: &Tensor,
    ranking: &ClassRanking,
    combine: &dyn CombinationFn,
) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape(format!(
            "feature maps must be N x H x W, got {:?}",
            features.shape()
        )));
    }
    ccam_with_order(features, fc_w, ranking.order(), combine)
}

/// Combinational map with the ground-truth class forced to rank 1; the
/// remaining classes keep their relative order, so the background end of
/// the ranking is unchanged.
pub fn gt_known_ccam(
    features: &Tensor,
    fc_w: &Tensor,
    gt_class: usize,
    ranking: &ClassRanking,
    combine: &dyn CombinationFn,
) -> Result<Tensor> {
    if features.rank() != 3 {
        return Err(Error::shape(format!(
            "feature maps must be N x H x W, got {:?}",
            features.shape()
        )));
    }
    if gt_class >= ranking.num_classes() {
        return Err(Error::invalid(format!(
            "class {gt_class} out of range for {} classes",
            ranking.num_classes()
        )));
    }
    let mut order = Vec::with_capacity(ranking.num_classes());
    order.push(gt_class);
    order.extend(ranking.order().iter().copied().filter(|&c| c != gt_class));
    ccam_with_order(features, fc_w, &order, combine)
}
