//! Scalar training objectives, each returning its value together with the
//! exact derivative with respect to every node score.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::nn::{sigmoid, ModelParams};

/// Scores are clamped this far inside (0, 1) before taking logs.
const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Derivative w.r.t. each score; zero on nodes the loss does not touch.
    pub score_grads: Array1<f64>,
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean binary cross-entropy of `scores` against soft `targets` in [0, 1].
pub fn cross_entropy(scores: &Array1<f64>, targets: &[(NodeId, f64)]) -> Result<LossResult> {
    if targets.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = targets.len() as f64;
    let mut value = 0.0;
    let mut grads = Array1::zeros(scores.len());
    for &(v, y) in targets {
        let p = scores[v.0].clamp(PROB_EPS, 1.0 - PROB_EPS);
        value += -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
        grads[v.0] += (p - y) / (p * (1.0 - p)) / n;
    }
    Ok(LossResult {
        value: value / n,
        score_grads: grads,
    })
}

/// Detection cross-entropy over training reviews (and any synthetic
/// reviews appended to `scores`), each paired with its label.
pub fn detection_loss(scores: &Array1<f64>, train: &[(NodeId, f64)]) -> Result<LossResult> {
    cross_entropy(scores, train)
}

/// Splits labelled reviews into (non-spam, spam).
pub fn partition_by_label(reviews: &[NodeId], labels: &[Option<bool>]) -> (Vec<NodeId>, Vec<NodeId>) {
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for &r in reviews {
        match labels[r.0] {
            Some(true) => pos.push(r),
            Some(false) => neg.push(r),
            None => {}
        }
    }
    (neg, pos)
}

/// Surrogate-NDCG fairness regulariser over the favoured training reviews:
/// `-(1/Z0) * sum over (non-spam i, spam j) of ln(1 + exp(s_j - s_i))`.
pub fn fairness_regularizer(scores: &Array1<f64>, labels: &[Option<bool>], favored_train: &[NodeId]) -> Result<LossResult> {
    let (neg, pos) = partition_by_label(favored_train, labels);
    let z0 = neg.len() * pos.len();
    if z0 == 0 {
        return Err(Error::NoPairs);
    }
    let z0 = z0 as f64;
    let mut value = 0.0;
    let mut grads = Array1::zeros(scores.len());
    for &j in &pos {
        let sj = scores[j.0];
        let mut pull = 0.0;
        for &i in &neg {
            let diff = sj - scores[i.0];
            value += softplus(diff);
            let w = sigmoid(diff) / z0;
            pull += w;
            grads[i.0] += w;
        }
        grads[j.0] -= pull;
    }
    let value = -value / z0;
    debug_assert!(
        value >= -(1.0 + 1f64.exp()).ln() - 1e-12 && value <= -(1.0 + (-1f64).exp()).ln() + 1e-12,
        "regulariser {value} outside its bounds"
    );
    Ok(LossResult {
        value,
        score_grads: grads,
    })
}

/// Value and gradients of the detector objective
/// `L + lambda * R_fair + (weight_decay / 2) * ||params||^2`.
#[derive(Debug, Clone)]
pub struct DetectorObjective {
    pub value: f64,
    pub detection: f64,
    pub fairness: f64,
    pub score_grads: Array1<f64>,
    /// Gradient of the decay term, in parameter space.
    pub decay_grad: ModelParams,
}

pub fn detector_objective(
    scores: &Array1<f64>,
    train: &[(NodeId, f64)],
    labels: &[Option<bool>],
    favored_train: &[NodeId],
    lambda: f64,
    weight_decay: f64,
    params: &ModelParams,
) -> Result<DetectorObjective> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let det = detection_loss(scores, train)?;
    let mut score_grads = det.score_grads;
    let mut fairness = 0.0;
    if lambda > 0.0 {
        let reg = fairness_regularizer(scores, labels, favored_train)?;
        fairness = reg.value;
        score_grads.scaled_add(lambda, &reg.score_grads);
    }
    let (decay, decay_grad) = weight_decay_term(params, weight_decay);
    Ok(DetectorObjective {
        value: det.value + lambda * fairness + decay,
        detection: det.value,
        fairness,
        score_grads,
        decay_grad,
    })
}

/// `(wd / 2) * ||params||^2` and its gradient `wd * params`.
pub fn weight_decay_term(params: &ModelParams, weight_decay: f64) -> (f64, ModelParams) {
    let mut grad = params.zeros_like();
    grad.add_scaled(params, weight_decay);
    (0.5 * weight_decay * params.squared_norm(), grad)
}

/// Cross-entropy of inferred `A'` probabilities against the true `A'` of
/// the training users.
pub fn subgroup_loss(aprime_scores: &Array1<f64>, truth: &[(NodeId, bool)]) -> Result<LossResult> {
    let targets: Vec<(NodeId, f64)> = truth.iter().map(|&(u, a)| (u, if a { 1.0 } else { 0.0 })).collect();
    cross_entropy(aprime_scores, &targets)
}
