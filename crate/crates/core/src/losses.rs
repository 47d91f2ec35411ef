//! Training objectives.
//!
//! The low-level functions (`*_from_probs`) take probability tensors already
//! on the tape; the `loss_*` functions run the model forward first.
//! One-vs-all probabilities are `[B, K, 2]` with column 0 = inlier.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var, LOG_FLOOR};
use crate::config::{ConsistencyHead, TrainConfig};
use crate::data::{augment_rows, augment_strong, augment_weak, AugmentConfig, Batches, LabeledBatch};
use crate::error::{Error, Result};
use crate::model::{argmax, classify_closed, feature_extract, ova_probs, ModelVars, INLIER, OUTLIER};

/// Scalar values of every term of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_ova: f64,
    pub l_sup: f64,
    pub l_em: f64,
    pub l_oc: f64,
    pub l_fm: f64,
    pub l_all: f64,
    pub fm_mask_count: usize,
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(y) => Err(Error::Validation(format!("label {y} out of range for {k} classes"))),
        None => Ok(()),
    }
}

/// Mean cross-entropy of the true class under closed-set probabilities `[B, K]`.
pub fn cls_from_probs(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape("cls_loss", &shape, &[labels.len()]));
    }
    let k = shape[1];
    check_labels(labels, k)?;
    if labels.is_empty() {
        return Ok(zero(tape));
    }
    let idx = labels.iter().enumerate().map(|(b, &y)| b * k + y).collect();
    let picked = tape.gather(probs, idx)?;
    let logs = tape.log(picked);
    let mean = tape.mean(logs);
    Ok(tape.neg(mean))
}

/// Index of the hardest negative sub-classifier for a sample: the `i != y`
/// with the smallest clamped `log p^i(t=1)`, lowest index on ties.
pub fn hardest_negative(outlier_probs: impl Iterator<Item = f64>, label: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in outlier_probs.enumerate() {
        if i == label {
            continue;
        }
        let lp = p.max(LOG_FLOOR).ln();
        if best.is_none_or(|(_, b)| lp < b) {
            best = Some((i, lp));
        }
    }
    best.map(|(i, _)| i)
}

/// One-vs-all loss with hard-negative sub-classifier sampling.
///
/// Only the selected negative receives gradient.
pub fn ova_from_probs(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 3 || shape[2] != 2 || shape[0] != labels.len() {
        return Err(Error::shape("ova_loss", &shape, &[labels.len(), 0, 2]));
    }
    let k = shape[1];
    if k < 2 {
        return Err(Error::Config(
            "one-vs-all loss needs at least two classes".into(),
        ));
    }
    check_labels(labels, k)?;
    if labels.is_empty() {
        return Ok(zero(tape));
    }
    let data = tape.value(probs).data();
    let at = |b: usize, j: usize, t: usize| (b * k + j) * 2 + t;
    let mut idx = Vec::with_capacity(2 * labels.len());
    for (b, &y) in labels.iter().enumerate() {
        let neg = hardest_negative((0..k).map(|j| data[at(b, j, OUTLIER)]), y).expect("k >= 2");
        idx.push(at(b, y, INLIER));
        idx.push(at(b, neg, OUTLIER));
    }
    let picked = tape.gather(probs, idx)?;
    let logs = tape.log(picked);
    let total = tape.sum(logs);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

/// Mean over samples of the summed binary entropies of all sub-classifiers.
pub fn em_from_probs(tape: &mut Tape, probs: Var) -> Result<Var> {
    let rows = tape.shape(probs)[0];
    if rows == 0 {
        return Ok(zero(tape));
    }
    let logs = tape.log(probs);
    let plogp = tape.mul(probs, logs)?;
    let total = tape.sum(plogp);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// Sum of squared probability differences between two views, averaged over
/// samples. Works on `[B, K, 2]` or `[B, K]` inputs.
pub fn socr_from_probs(tape: &mut Tape, first: Var, second: Var) -> Result<Var> {
    let rows = tape.shape(first)[0];
    if rows == 0 {
        return Ok(zero(tape));
    }
    let diff = tape.sub(first, second)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

/// FixMatch term. Pseudo-labels come from `weak` (plain values, so no
/// gradient flows through them); samples whose top weak probability reaches
/// `tau` contribute `-log strong[b, label]`. The sum is divided by the full
/// batch size. Returns the loss and the number of samples that passed.
pub fn fixmatch_from_probs(tape: &mut Tape, weak: &Tensor, strong: Var, tau: f64) -> Result<(Var, usize)> {
    if weak.shape() != tape.shape(strong) {
        return Err(Error::shape("fixmatch", weak.shape(), tape.shape(strong)));
    }
    let rows = weak.rows();
    if rows == 0 {
        return Ok((zero(tape), 0));
    }
    let k = weak.shape()[1];
    let idx: Vec<usize> = (0..rows)
        .filter_map(|b| {
            let q = weak.row(b);
            let label = argmax(q);
            (q[label] >= tau).then_some(b * k + label)
        })
        .collect();
    let count = idx.len();
    if count == 0 {
        return Ok((zero(tape), 0));
    }
    let picked = tape.gather(strong, idx)?;
    let logs = tape.log(picked);
    let total = tape.sum(logs);
    Ok((tape.scale(total, -1.0 / rows as f64), count))
}

fn forward_closed(tape: &mut Tape, vars: &ModelVars, x: &Tensor) -> Result<Var> {
    let input = tape.constant(x.clone());
    let feats = feature_extract(tape, vars, input)?;
    classify_closed(tape, vars, feats)
}

fn forward_ova(tape: &mut Tape, vars: &ModelVars, x: &Tensor) -> Result<Var> {
    let input = tape.constant(x.clone());
    let feats = feature_extract(tape, vars, input)?;
    ova_probs(tape, vars, feats)
}

fn forward_head(tape: &mut Tape, vars: &ModelVars, x: &Tensor, head: ConsistencyHead) -> Result<Var> {
    match head {
        ConsistencyHead::Ova => forward_ova(tape, vars, x),
        ConsistencyHead::Closed => forward_closed(tape, vars, x),
    }
}

/// Closed-set cross-entropy on a labeled batch.
pub fn loss_cls(tape: &mut Tape, vars: &ModelVars, batch: &LabeledBatch) -> Result<Var> {
    let probs = forward_closed(tape, vars, &batch.x)?;
    cls_from_probs(tape, probs, &batch.labels)
}

/// One-vs-all loss on a labeled batch.
pub fn loss_ova(tape: &mut Tape, vars: &ModelVars, batch: &LabeledBatch) -> Result<Var> {
    let probs = forward_ova(tape, vars, &batch.x)?;
    ova_from_probs(tape, probs, &batch.labels)
}

/// Open-set entropy minimization on clean unlabeled inputs.
pub fn loss_em(tape: &mut Tape, vars: &ModelVars, unlabeled: &Tensor) -> Result<Var> {
    let probs = forward_ova(tape, vars, unlabeled)?;
    em_from_probs(tape, probs)
}

/// Soft consistency between two weak augmentations of every unlabeled
/// sample. All first views are drawn before the second views.
pub fn loss_socr(
    tape: &mut Tape,
    vars: &ModelVars,
    unlabeled: &Tensor,
    augment: &AugmentConfig,
    head: ConsistencyHead,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if unlabeled.rows() == 0 {
        return Ok(zero(tape));
    }
    let view1 = augment_rows(unlabeled, rng, |x, r| augment_weak(x, augment, r));
    let view2 = augment_rows(unlabeled, rng, |x, r| augment_weak(x, augment, r));
    let p1 = forward_head(tape, vars, &view1, head)?;
    let p2 = forward_head(tape, vars, &view2, head)?;
    socr_from_probs(tape, p1, p2)
}

/// FixMatch on a batch of pseudo-inliers: weak views, then strong views.
pub fn loss_fixmatch(
    tape: &mut Tape,
    vars: &ModelVars,
    pseudo: &Tensor,
    augment: &AugmentConfig,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize)> {
    if pseudo.rows() == 0 {
        return Ok((zero(tape), 0));
    }
    let weak = augment_rows(pseudo, rng, |x, r| augment_weak(x, augment, r));
    let strong = augment_rows(pseudo, rng, |x, r| augment_strong(x, augment, r));
    let weak_probs = forward_closed(tape, vars, &weak)?;
    let weak_probs = tape.value(weak_probs).clone();
    let strong_probs = forward_closed(tape, vars, &strong)?;
    fixmatch_from_probs(tape, &weak_probs, strong_probs, tau)
}

/// Full objective for one iteration at (1-based) `epoch`.
///
/// Terms whose weight is zero are skipped entirely: they draw no random
/// numbers and report 0. The FixMatch term is also skipped while
/// `epoch <= e_fix` or when the pseudo-inlier batch is empty.
pub fn loss_all(
    tape: &mut Tape,
    vars: &ModelVars,
    batches: &Batches,
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    let mut out = LossBreakdown::default();

    let x = tape.constant(batches.labeled.x.clone());
    let feats = feature_extract(tape, vars, x)?;
    let closed = classify_closed(tape, vars, feats)?;
    let ova = ova_probs(tape, vars, feats)?;
    let l_cls = cls_from_probs(tape, closed, &batches.labeled.labels)?;
    let l_ova = ova_from_probs(tape, ova, &batches.labeled.labels)?;
    let mut total = tape.add(l_cls, l_ova)?;
    out.l_cls = tape.value(l_cls).item()?;
    out.l_ova = tape.value(l_ova).item()?;
    out.l_sup = tape.value(total).item()?;

    if config.lambda_em > 0.0 {
        let l_em = loss_em(tape, vars, &batches.unlabeled)?;
        out.l_em = tape.value(l_em).item()?;
        let weighted = tape.scale(l_em, config.lambda_em);
        total = tape.add(total, weighted)?;
    }
    if config.lambda_oc > 0.0 {
        let l_oc = loss_socr(
            tape,
            vars,
            &batches.unlabeled,
            &config.augment,
            config.consistency_head,
            rng,
        )?;
        out.l_oc = tape.value(l_oc).item()?;
        let weighted = tape.scale(l_oc, config.lambda_oc);
        total = tape.add(total, weighted)?;
    }
    if epoch > config.e_fix && config.lambda_fm > 0.0 && batches.pseudo.rows() > 0 {
        let (l_fm, count) = loss_fixmatch(tape, vars, &batches.pseudo, &config.augment, config.tau, rng)?;
        out.l_fm = tape.value(l_fm).item()?;
        out.fm_mask_count = count;
        let weighted = tape.scale(l_fm, config.lambda_fm);
        total = tape.add(total, weighted)?;
    }
    out.l_all = tape.value(total).item()?;
    Ok((total, out))
}
