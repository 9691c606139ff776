//! Regression loss, all-pairs hinge ranking loss and their multi-task sum.
//!
//! The ranking loss for a mini-batch of `M` scores is
//!
//! ```text
//! L_rank = Σ_{l_ij = +1} max(0, ŷ_i − ŷ_j + ε)
//! ```
//!
//! where `l_ij = +1` means image `i` has the smaller transform parameter φ
//! (and therefore the smaller true target) within the same ranked group.
//! The loss is a plain sum over comparable pairs, not an average, so `λ`
//! absorbs the scale.
//!
//! [`ranking_loss_efficient`] evaluates every pair at the score level after a
//! single forward pass per image: the pair-coefficient matrix `P` has entries
//! `a_ij = l_ij` when `l_ij (ŷ_i − ŷ_j) + ε > 0` and `0` otherwise, and the
//! gradient with respect to the scores is the row sum `P·1`.
//! [`ranking_loss_naive`] and [`ranking_loss_naive_network`] are the
//! two-branch reference that evaluates each pair independently.

use thiserror::Error;

use crate::nn::Network;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankingError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    Empty,
    #[error("comparability labels: {0}")]
    InvalidLabels(String),
    #[error("invalid ranking config: {0}")]
    InvalidConfig(String),
    #[error("invalid mini-batch: {0}")]
    InvalidBatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = RankingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingConfig {
    /// Hinge margin ε, in score units.
    pub margin: f64,
    /// Weight λ of the ranking term.
    pub tradeoff: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            margin: 0.0,
            tradeoff: 1.0,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(RankingError::InvalidConfig(format!("margin {} must be >= 0", self.margin)));
        }
        if !(self.tradeoff >= 0.0 && self.tradeoff.is_finite()) {
            return Err(RankingError::InvalidConfig(format!(
                "tradeoff {} must be >= 0",
                self.tradeoff
            )));
        }
        Ok(())
    }
}

/// `M×M` matrix with entries in {−1, 0, +1}; antisymmetric with zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparabilityLabels {
    size: usize,
    entries: Vec<i8>,
}

impl ComparabilityLabels {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            entries: vec![0; size * size],
        }
    }

    /// Validates and wraps a row-major matrix.
    pub fn from_matrix(size: usize, entries: Vec<i8>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(RankingError::InvalidLabels(format!(
                "{} entries for a {size}x{size} matrix",
                entries.len()
            )));
        }
        let labels = Self { size, entries };
        labels.validate()?;
        Ok(labels)
    }

    /// Builds labels from per-image group membership and transform parameter.
    /// Images without a group (labeled-only members) are incomparable to all.
    pub fn from_groups(groups: &[Option<usize>], phi: &[f64]) -> Result<Self> {
        if groups.len() != phi.len() {
            return Err(RankingError::LengthMismatch(groups.len(), phi.len()));
        }
        let m = groups.len();
        let mut labels = Self::zeros(m);
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                let (Some(gi), Some(gj)) = (groups[i], groups[j]) else {
                    continue;
                };
                if gi != gj {
                    continue;
                }
                if phi[i] == phi[j] || phi[i].is_nan() || phi[j].is_nan() {
                    return Err(RankingError::InvalidLabels(format!(
                        "images {i} and {j} of group {gi} share transform parameter {}",
                        phi[i]
                    )));
                }
                labels.entries[i * m + j] = if phi[i] < phi[j] { 1 } else { -1 };
            }
        }
        Ok(labels)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.size + j]
    }

    pub fn set_pair(&mut self, i: usize, j: usize, value: i8) {
        self.entries[i * self.size + j] = value;
        self.entries[j * self.size + i] = -value;
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.size;
        for i in 0..m {
            if self.get(i, i) != 0 {
                return Err(RankingError::InvalidLabels(format!("nonzero diagonal at {i}")));
            }
            for j in 0..m {
                let v = self.get(i, j);
                if !(-1..=1).contains(&v) {
                    return Err(RankingError::InvalidLabels(format!("entry ({i},{j}) = {v}")));
                }
                if v != -self.get(j, i) {
                    return Err(RankingError::InvalidLabels(format!(
                        "not antisymmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of comparable unordered pairs (entries equal to +1).
    pub fn comparable_pairs(&self) -> usize {
        self.entries.iter().filter(|&&v| v == 1).count()
    }

    /// True if image `i` takes part in at least one comparable pair.
    pub fn is_ranked(&self, i: usize) -> bool {
        (0..self.size).any(|j| self.get(i, j) != 0)
    }

    /// Ordered index pairs `(i, j)` with `l_ij = +1`, row-major.
    pub fn positive_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m = self.size;
        (0..m * m)
            .filter(move |&k| self.entries[k] == 1)
            .map(move |k| (k / m, k % m))
    }
}

/// Matrix of hinge sub-gradients `a_ij ∈ {−1, 0, +1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairCoefficientMatrix {
    size: usize,
    entries: Vec<i8>,
}

impl PairCoefficientMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.size + j]
    }

    /// `P·1`: the gradient of the ranking loss with respect to each score.
    pub fn row_sums(&self) -> Vec<f64> {
        self.entries
            .chunks_exact(self.size.max(1))
            .map(|row| row.iter().map(|&a| a as f64).sum())
            .take(self.size)
            .collect()
    }
}

/// Result of a ranking loss evaluation at the score level.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingOutput {
    pub loss: f64,
    /// dL/dŷ for every batch member.
    pub grad: Vec<f64>,
    pub coefficients: PairCoefficientMatrix,
    /// Comparable pairs whose hinge is active.
    pub active_pairs: usize,
    /// Network forward passes needed to produce the scores.
    pub forward_passes: usize,
}

/// `max(0, ŷ_i − ŷ_j + ε)` for a pair with `φ_i ≤ φ_j`.
#[inline]
pub fn pairwise_hinge(score_i: f64, score_j: f64, margin: f64) -> f64 {
    (score_i - score_j + margin).max(0.0)
}

fn check_inputs(scores: &[f64], labels: &ComparabilityLabels, margin: f64) -> Result<()> {
    if scores.len() != labels.size() {
        return Err(RankingError::LengthMismatch(scores.len(), labels.size()));
    }
    if !(margin >= 0.0) {
        return Err(RankingError::InvalidConfig(format!("margin {margin} must be >= 0")));
    }
    labels.validate()
}

/// All-pairs hinge loss from one score per image, with gradient `P·1`.
pub fn ranking_loss_efficient(
    scores: &[f64],
    labels: &ComparabilityLabels,
    margin: f64,
) -> Result<RankingOutput> {
    check_inputs(scores, labels, margin)?;
    let m = scores.len();
    let mut entries = vec![0i8; m * m];
    let mut loss = 0.0;
    let mut active_pairs = 0;
    for i in 0..m {
        for j in 0..m {
            let l = labels.get(i, j);
            if l == 0 {
                continue;
            }
            let z = l as f64 * (scores[i] - scores[j]) + margin;
            if z > 0.0 {
                entries[i * m + j] = l;
                if l == 1 {
                    loss += z;
                    active_pairs += 1;
                }
            }
        }
    }
    let coefficients = PairCoefficientMatrix { size: m, entries };
    let grad = coefficients.row_sums();
    Ok(RankingOutput {
        loss,
        grad,
        coefficients,
        active_pairs,
        forward_passes: m,
    })
}

/// Reference evaluation: every comparable pair is scored as its own
/// two-branch sample and each branch gradient is accumulated separately.
/// `forward_passes` reports what a two-branch network would consume: two
/// images per comparable pair.
pub fn ranking_loss_naive(
    scores: &[f64],
    labels: &ComparabilityLabels,
    margin: f64,
) -> Result<(f64, Vec<f64>, usize)> {
    check_inputs(scores, labels, margin)?;
    let mut grad = vec![0.0; scores.len()];
    let mut loss = 0.0;
    let mut passes = 0;
    for (i, j) in labels.positive_pairs() {
        passes += 2;
        let (yi, yj) = (scores[i], scores[j]);
        let g = pairwise_hinge(yi, yj, margin);
        loss += g;
        if yi - yj + margin > 0.0 {
            grad[i] += 1.0;
            grad[j] -= 1.0;
        }
    }
    Ok((loss, grad, passes))
}

/// Two-branch Siamese training step on images: each comparable pair is sent
/// through the shared network as its own two-image batch and backpropagated
/// immediately. Parameter gradients accumulate in `net`; returns the loss and
/// the number of images forwarded.
pub fn ranking_loss_naive_network(
    net: &mut Network,
    images: &Tensor,
    labels: &ComparabilityLabels,
    margin: f64,
) -> Result<(f64, u64)> {
    let m = images.batch_size();
    if m != labels.size() {
        return Err(RankingError::LengthMismatch(m, labels.size()));
    }
    labels.validate()?;
    let item_shape = images.shape()[1..].to_vec();
    let before = net.forward_passes();
    let mut loss = 0.0;
    for (i, j) in labels.positive_pairs() {
        let pair = Tensor::stack(&[images.item(i), images.item(j)], &item_shape)?;
        let out = net.forward(&pair)?;
        let (yi, yj) = (out.ranking[0], out.ranking[1]);
        loss += pairwise_hinge(yi, yj, margin);
        let (di, dj) = if yi - yj + margin > 0.0 { (1.0, -1.0) } else { (0.0, 0.0) };
        net.backward(None, Some(&[di, dj]))?;
    }
    Ok((loss, net.forward_passes() - before))
}

/// Mean squared error `(1/N) Σ (y − ŷ)²` and its gradient `(2/N)(ŷ − y)`.
pub fn regression_loss(predictions: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predictions.len() != targets.len() {
        return Err(RankingError::LengthMismatch(predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        return Err(RankingError::Empty);
    }
    let n = predictions.len() as f64;
    let loss = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| (y - p) * (y - p))
        .sum::<f64>()
        / n;
    let grad = predictions
        .iter()
        .zip(targets)
        .map(|(p, y)| 2.0 * (p - y) / n)
        .collect();
    Ok((loss, grad))
}

/// Supervision for one labeled batch member.
#[derive(Debug, Clone, PartialEq)]
pub enum RegressionTarget {
    /// Applies to the sum-pooled output (the scalar itself for scalar trunks).
    Scalar(f64),
    /// Applies elementwise to the trunk output map.
    Map(Vec<f64>),
}

/// Mixed labeled and ranked images for one multi-task step.
#[derive(Debug, Clone)]
pub struct MiniBatch {
    pub images: Tensor,
    pub targets: Vec<Option<RegressionTarget>>,
    pub labels: ComparabilityLabels,
}

impl MiniBatch {
    pub fn new(
        images: Tensor,
        targets: Vec<Option<RegressionTarget>>,
        labels: ComparabilityLabels,
    ) -> Result<Self> {
        let batch = Self {
            images,
            targets,
            labels,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.images.batch_size();
        if self.targets.len() != m || self.labels.size() != m {
            return Err(RankingError::InvalidBatch(format!(
                "{m} images, {} targets, {}x{} labels",
                self.targets.len(),
                self.labels.size(),
                self.labels.size()
            )));
        }
        self.labels.validate()?;
        for i in 0..m {
            if self.targets[i].is_none() && !self.labels.is_ranked(i) {
                return Err(RankingError::InvalidBatch(format!(
                    "image {i} has neither a target nor a comparable partner"
                )));
            }
        }
        Ok(())
    }
}

/// Loss breakdown of one multi-task evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultitaskOutput {
    pub total: f64,
    pub regression: f64,
    pub ranking: f64,
    pub active_pairs: usize,
}

/// `L = L_reg + λ·L_rank` over one forward pass of the whole batch;
/// gradients of both terms are summed into the network parameters.
///
/// With `λ = 0` the ranking term is skipped entirely, so the update equals
/// regression-only training.
pub fn multitask_loss(batch: &MiniBatch, net: &mut Network, cfg: &RankingConfig) -> Result<MultitaskOutput> {
    cfg.validate()?;
    batch.validate()?;
    let labeled: Vec<usize> = (0..batch.len()).filter(|&i| batch.targets[i].is_some()).collect();
    let use_ranking = cfg.tradeoff > 0.0 && batch.labels.comparable_pairs() > 0;
    if labeled.is_empty() && batch.labels.comparable_pairs() == 0 {
        return Err(RankingError::InvalidBatch(
            "batch has neither targets nor comparable pairs".into(),
        ));
    }

    let out = net.forward(&batch.images)?;
    let m = batch.len();
    let item = out.regression.item_len();
    let mut grad_rank = vec![0.0; m];
    let mut grad_map: Option<Tensor> = None;
    let mut reg_loss = 0.0;
    if !labeled.is_empty() {
        let n = labeled.len() as f64;
        for &i in &labeled {
            match batch.targets[i].as_ref().unwrap() {
                RegressionTarget::Scalar(y) => {
                    let d = out.ranking[i] - y;
                    reg_loss += d * d;
                    grad_rank[i] += 2.0 * d / n;
                }
                RegressionTarget::Map(y) => {
                    if y.len() != item {
                        return Err(RankingError::InvalidBatch(format!(
                            "map target of image {i} has {} values, output has {item}",
                            y.len()
                        )));
                    }
                    let g = grad_map.get_or_insert_with(|| {
                        Tensor::zeros(out.regression.shape().to_vec()).expect("valid shape")
                    });
                    let pred = out.regression.item(i);
                    let gi = &mut g.data_mut()[i * item..(i + 1) * item];
                    let mut sq = 0.0;
                    for k in 0..item {
                        let d = pred[k] - y[k];
                        sq += d * d;
                        gi[k] = 2.0 * d / n;
                    }
                    reg_loss += sq;
                }
            }
        }
        // Summing before dividing keeps this bit-identical to `regression_loss`.
        reg_loss /= n;
    }

    let mut rank_loss = 0.0;
    let mut active_pairs = 0;
    if use_ranking {
        let r = ranking_loss_efficient(&out.ranking, &batch.labels, cfg.margin)?;
        rank_loss = r.loss;
        active_pairs = r.active_pairs;
        for (g, a) in grad_rank.iter_mut().zip(&r.grad) {
            *g += cfg.tradeoff * a;
        }
    }
    net.backward(grad_map.as_ref(), Some(&grad_rank))?;
    Ok(MultitaskOutput {
        total: reg_loss + cfg.tradeoff * rank_loss,
        regression: reg_loss,
        ranking: rank_loss,
        active_pairs,
    })
}

#[cfg(test)]
mod tests;
