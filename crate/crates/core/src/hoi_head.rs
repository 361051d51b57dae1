//! Verb classification, score composition, focal loss and NMS.

use std::collections::BTreeSet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::geometry::{iou, BBox};
use crate::numerics::{sigmoid, Linear};
use crate::pose_graph::{GraphState, Mbf};
use crate::scalar::Scalar;

pub const DEFAULT_NUM_VERBS: usize = 117;
pub const FOCAL_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl ScoreParams {
    pub const TRAINING_LAMBDA: f64 = 1.0;
    pub const INFERENCE_LAMBDA: f64 = 2.8;

    pub fn training() -> Self {
        Self {
            lambda: Self::TRAINING_LAMBDA,
            focal_alpha: 0.5,
            focal_gamma: 0.2,
        }
    }

    pub fn inference() -> Self {
        Self {
            lambda: Self::INFERENCE_LAMBDA,
            ..Self::training()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!("focal alpha {} outside (0, 1)", self.focal_alpha)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma {} is negative", self.focal_gamma)));
        }
        Ok(())
    }
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self::inference()
    }
}

/// Pair representation → per-verb sigmoid scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    /// Appearance is `human ⊕ object`, edge is the pair encoding.
    pub fusion: Mbf<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Classifier<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        node_dim: usize,
        edge_dim: usize,
        branches: usize,
        branch_dim: usize,
        num_verbs: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fusion: Mbf::random(2 * node_dim, edge_dim, branches, branch_dim, node_dim, std, rng),
            head: Linear::random(node_dim, num_verbs, std, rng),
        }
    }

    pub fn num_verbs(&self) -> usize {
        self.head.fan_out()
    }
}

pub fn pair_logits<T: Scalar>(
    state: &GraphState<T>,
    pair: usize,
    classifier: &Classifier<T>,
) -> Result<Vec<T>> {
    let Some(p) = state.pairs.get(pair) else {
        return dim_err(format!("pair {pair} of {}", state.pairs.len()));
    };
    let mut appearance = state.humans[p.human].clone();
    appearance.extend_from_slice(&state.objects[p.object]);
    let rep = classifier.fusion.fuse(&appearance, &p.edge)?;
    Ok(classifier.head.forward_row(&rep)?.into_iter().map(sigmoid).collect())
}

/// Verb scores for every pair of `state`, in pair order.
pub fn all_pair_scores<T: Scalar>(state: &GraphState<T>, classifier: &Classifier<T>) -> Result<Vec<Vec<T>>> {
    (0..state.pairs.len())
        .into_par_iter()
        .map(|k| pair_logits(state, k, classifier))
        .collect()
}

/// `s_h^λ · s_o^λ · ŝ`.
pub fn compose_final_score<T: Scalar>(human_score: T, object_score: T, verb_score: T, lambda: T) -> T {
    let l = lambda.widen();
    let s = human_score.widen().powf(l) * object_score.widen().powf(l) * verb_score.widen();
    T::narrow(s)
}

/// Binary focal loss and its derivative with respect to the prediction.
/// The prediction is clamped to `[ε, 1 − ε]` first.
pub fn focal_loss(prediction: f64, target: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = prediction.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if target {
        let q = 1.0 - p;
        let loss = -alpha * q.powf(gamma) * p.ln();
        let grad = if gamma == 0.0 {
            -alpha / p
        } else {
            alpha * gamma * q.powf(gamma - 1.0) * p.ln() - alpha * q.powf(gamma) / p
        };
        (loss, grad)
    } else {
        let q = 1.0 - p;
        let a = 1.0 - alpha;
        let loss = -a * p.powf(gamma) * q.ln();
        let grad = if gamma == 0.0 {
            a / q
        } else {
            -a * gamma * p.powf(gamma - 1.0) * q.ln() + a * p.powf(gamma) / q
        };
        (loss, grad)
    }
}

/// Focal loss summed over every pair and verb, divided by the number of
/// positive labels (at least one). Returns the loss and the gradient
/// with respect to each prediction.
pub fn focal_loss_batch(
    predictions: &[Vec<f64>],
    targets: &[Vec<bool>],
    params: &ScoreParams,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if predictions.len() != targets.len()
        || predictions.iter().zip(targets).any(|(p, t)| p.len() != t.len())
    {
        return dim_err("prediction and target shapes differ");
    }
    let positives = targets.iter().flatten().filter(|t| **t).count().max(1) as f64;
    let mut total = 0.0;
    let grads = predictions
        .iter()
        .zip(targets)
        .map(|(ps, ts)| {
            ps.iter()
                .zip(ts)
                .map(|(p, t)| {
                    let (l, g) = focal_loss(*p, *t, params.focal_alpha, params.focal_gamma);
                    total += l;
                    g / positives
                })
                .collect()
        })
        .collect();
    Ok((total / positives, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub class_id: usize,
    pub score: T,
}

/// Indices of descending-score order; equal scores keep input order.
pub(crate) fn rank_by_score<T: Scalar>(scores: impl Iterator<Item = T>) -> Vec<usize> {
    let scores: Vec<f64> = scores.map(Scalar::widen).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy per-class NMS. Detections scoring below `score_threshold` are
/// dropped first; a box is suppressed when its IoU with a kept box of the
/// same class exceeds `iou_threshold`. Returns kept indices, highest
/// score first.
pub fn nms<T: Scalar>(detections: &[Detection<T>], iou_threshold: T, score_threshold: T) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_by_score(detections.iter().map(|d| d.score)) {
        let d = &detections[i];
        if d.score < score_threshold {
            continue;
        }
        let suppressed = kept.iter().any(|&k| {
            let other = &detections[k];
            other.class_id == d.class_id && iou(&other.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiTriplet<T> {
    pub human: BBox<T>,
    pub object: BBox<T>,
    pub object_class: usize,
    pub verb: usize,
    pub score: T,
}

/// Allowed (object class, verb) combinations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbMask {
    pub allowed: BTreeSet<(usize, usize)>,
}

impl VerbMask {
    pub fn allows(&self, object_class: usize, verb: usize) -> bool {
        self.allowed.contains(&(object_class, verb))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmitParams<'a> {
    pub lambda: f64,
    /// Triplets scoring below this are dropped.
    pub threshold: f64,
    pub mask: Option<&'a VerbMask>,
}

impl Default for EmitParams<'_> {
    fn default() -> Self {
        Self {
            lambda: ScoreParams::INFERENCE_LAMBDA,
            threshold: 0.0,
            mask: None,
        }
    }
}

/// One triplet per (pair, verb) whose composed score reaches the
/// threshold, sorted by descending score. Ties keep pair-then-verb order.
pub fn emit_triplets<T: Scalar>(
    state: &GraphState<T>,
    verb_scores: &[Vec<T>],
    humans: &[Detection<T>],
    objects: &[Detection<T>],
    params: &EmitParams<'_>,
) -> Result<Vec<HoiTriplet<T>>> {
    if verb_scores.len() != state.pairs.len() {
        return dim_err(format!("{} score rows for {} pairs", verb_scores.len(), state.pairs.len()));
    }
    let lambda = T::narrow(params.lambda);
    let mut out = Vec::new();
    for (p, scores) in state.pairs.iter().zip(verb_scores) {
        let (Some(h), Some(o)) = (humans.get(p.human), objects.get(p.object)) else {
            return dim_err(format!("pair ({}, {}) has no detection", p.human, p.object));
        };
        for (verb, s) in scores.iter().enumerate() {
            if params.mask.is_some_and(|m| !m.allows(o.class_id, verb)) {
                continue;
            }
            let score = compose_final_score(h.score, o.score, *s, lambda);
            if score.widen() >= params.threshold {
                out.push(HoiTriplet {
                    human: h.bbox,
                    object: o.bbox,
                    object_class: o.class_id,
                    verb,
                    score,
                });
            }
        }
    }
    let order = rank_by_score(out.iter().map(|t| t.score));
    Ok(order.into_iter().map(|i| out[i].clone()).collect())
}
