//! Evaluation: anomaly scores, AUROC, closed-set error and histograms.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::{Tag, TaggedSample};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    /// `1 - p^y(t=0 | x)` for the top closed-set class `y`.
    pub anomaly_score: f64,
    pub is_outlier_truth: bool,
    pub closed_pred: usize,
    pub closed_truth: Option<usize>,
}

fn stack(samples: &[&TaggedSample]) -> Result<Tensor> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let rows: Vec<&[f64]> = samples.iter().map(|s| &s.x[..]).collect();
    Tensor::from_rows(&rows, dim)
}

/// Anomaly scores for every row of `x`; higher means more anomalous.
pub fn anomaly_scores(params: &ModelParams, x: &Tensor) -> Result<Vec<f64>> {
    Ok(params
        .predict_open(x)?
        .into_iter()
        .map(|p| 1.0 - p.inlier_prob)
        .collect())
}

pub fn anomaly_score(params: &ModelParams, x: &[f64]) -> Result<f64> {
    let t = Tensor::from_rows(&[x], x.len())?;
    Ok(anomaly_scores(params, &t)?[0])
}

/// Scores a labeled evaluation split in one batched forward pass.
pub fn score_samples(params: &ModelParams, samples: &[TaggedSample]) -> Result<Vec<ScoredSample>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&TaggedSample> = samples.iter().collect();
    let preds = params.predict_open(&stack(&refs)?)?;
    Ok(samples
        .iter()
        .zip(preds)
        .map(|(s, p)| ScoredSample {
            anomaly_score: 1.0 - p.inlier_prob,
            is_outlier_truth: s.tag.is_outlier(),
            closed_pred: p.closed_label,
            closed_truth: s.tag.class(),
        })
        .collect())
}

/// Probability that a random outlier outscores a random inlier, ties
/// counted one half. Computed from mid-ranks in `O(n log n)`.
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({n_pos} outliers, {n_neg} inliers)"
        )));
    }
    if scores.iter().any(|s| s.0.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.total_cmp(&scores[b].0));

    // Sum of 1-based mid-ranks over positives, accumulated in doubled units
    // so tied groups stay integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0.total_cmp(&scores[order[i]].0) == Ordering::Equal {
            j += 1;
        }
        // ranks i+1 ..= j+1, mid-rank doubled = (i+1) + (j+1)
        let mid_x2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| scores[k].1).count() as u128;
        rank_sum_x2 += mid_x2 * pos_in_group;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U * 2 = rank_sum_x2 - p (p + 1)
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * q) as f64)
}

/// Fraction of ground-truth inliers whose closed-set prediction is wrong.
/// Outlier rejection is not applied.
pub fn error_rate_inliers(params: &ModelParams, test: &[TaggedSample]) -> Result<f64> {
    let inliers: Vec<&TaggedSample> = test.iter().filter(|s| !s.tag.is_outlier()).collect();
    if inliers.is_empty() {
        return Err(Error::UndefinedMetric("no inliers in evaluation split".into()));
    }
    let probs = params.closed_probs(&stack(&inliers)?)?;
    let wrong = inliers
        .iter()
        .enumerate()
        .filter(|(b, s)| Some(crate::model::argmax(probs.row(*b))) != s.tag.class())
        .count();
    Ok(wrong as f64 / inliers.len() as f64)
}

fn auroc_against(scored: &[ScoredSample], test: &[TaggedSample], outlier: Tag) -> Result<f64> {
    let pairs: Vec<(f64, bool)> = scored
        .iter()
        .zip(test)
        .filter(|(_, s)| !s.tag.is_outlier() || s.tag == outlier)
        .map(|(sc, s)| (sc.anomaly_score, s.tag == outlier))
        .collect();
    auroc(&pairs)
}

/// AUROC of inliers against outliers that also appear in unlabeled data.
pub fn eval_seen(params: &ModelParams, test: &[TaggedSample]) -> Result<f64> {
    auroc_against(&score_samples(params, test)?, test, Tag::SeenOutlier)
}

/// AUROC of inliers against outliers never present during training.
pub fn eval_unseen(params: &ModelParams, test: &[TaggedSample]) -> Result<f64> {
    auroc_against(&score_samples(params, test)?, test, Tag::UnseenOutlier)
}

/// Closed-set error plus the AUROCs that are defined for `test`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub err_inlier: f64,
    pub auroc_seen: Option<f64>,
    pub auroc_unseen: Option<f64>,
}

impl EvalReport {
    /// Same keyed format as the training metrics; undefined AUROCs omitted.
    pub fn to_line(&self) -> String {
        let mut s = format!("err_inlier={}", self.err_inlier);
        if let Some(a) = self.auroc_seen {
            let _ = write!(s, " auroc_seen={a}");
        }
        if let Some(a) = self.auroc_unseen {
            let _ = write!(s, " auroc_unseen={a}");
        }
        s
    }
}

/// Fraction of samples handled correctly when rejection is applied:
/// inliers must be accepted with the right class, outliers rejected.
pub fn open_set_accuracy(params: &ModelParams, test: &[TaggedSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::UndefinedMetric("empty evaluation split".into()));
    }
    let refs: Vec<&TaggedSample> = test.iter().collect();
    let preds = params.predict_open(&stack(&refs)?)?;
    let correct = test
        .iter()
        .zip(&preds)
        .filter(|(s, p)| match s.tag.class() {
            Some(c) => !p.is_outlier() && p.closed_label == c,
            None => p.is_outlier(),
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub fn evaluate(params: &ModelParams, test: &[TaggedSample]) -> Result<EvalReport> {
    let scored = score_samples(params, test)?;
    let n_inliers = scored.iter().filter(|s| !s.is_outlier_truth).count();
    if n_inliers == 0 {
        return Err(Error::UndefinedMetric("no inliers in evaluation split".into()));
    }
    let wrong = scored
        .iter()
        .filter(|s| s.closed_truth.is_some() && s.closed_truth != Some(s.closed_pred))
        .count();
    let has = |tag| test.iter().any(|s| s.tag == tag);
    let auroc_seen = if has(Tag::SeenOutlier) {
        Some(auroc_against(&scored, test, Tag::SeenOutlier)?)
    } else {
        None
    };
    let auroc_unseen = if has(Tag::UnseenOutlier) {
        Some(auroc_against(&scored, test, Tag::UnseenOutlier)?)
    } else {
        None
    };
    Ok(EvalReport {
        err_inlier: wrong as f64 / n_inliers as f64,
        auroc_seen,
        auroc_unseen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub inliers: usize,
    pub outliers: usize,
}

/// `bins` uniform half-open bins over `[0, 1]`; the last bin also holds 1.
pub fn histogram(scores: &[(f64, bool)], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::Config("histogram needs at least 2 bins".into()));
    }
    let edge = |i: usize| i as f64 / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            low: edge(i),
            high: edge(i + 1),
            inliers: 0,
            outliers: 0,
        })
        .collect();
    for &(score, is_outlier) in scores {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!("score {score} outside [0, 1]")));
        }
        let mut idx = ((score * bins as f64) as usize).min(bins - 1);
        while idx > 0 && score < edge(idx) {
            idx -= 1;
        }
        while idx + 1 < bins && score >= edge(idx + 1) {
            idx += 1;
        }
        if is_outlier {
            out[idx].outliers += 1;
        } else {
            out[idx].inliers += 1;
        }
    }
    Ok(out)
}

pub fn format_histogram(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_low,bin_high,inlier_count,outlier_count\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{},{}", b.low, b.high, b.inliers, b.outliers);
    }
    s
}

/// Writes `bin_low,bin_high,inlier_count,outlier_count` rows.
pub fn export_histogram(scores: &[(f64, bool)], bins: usize, path: &Path) -> Result<()> {
    let h = histogram(scores, bins)?;
    std::fs::write(path, format_histogram(&h))?;
    Ok(())
}

/// One evaluated epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_ova: f64,
    pub l_em: f64,
    pub l_oc: f64,
    pub l_fm: f64,
    pub l_all: f64,
    pub err_inlier: f64,
    pub auroc_seen: Option<f64>,
    pub auroc_unseen: Option<f64>,
    pub k_size: usize,
    /// Mean number of pseudo-inliers per iteration that passed the FixMatch threshold.
    pub fm_mask: f64,
}

impl MetricsRecord {
    /// `key=value` pairs separated by single spaces. Undefined AUROCs are
    /// omitted. Floats print in shortest round-trip form.
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "epoch={} l_cls={} l_ova={} l_em={} l_oc={} l_fm={} err_inlier={}",
            self.epoch, self.l_cls, self.l_ova, self.l_em, self.l_oc, self.l_fm, self.err_inlier
        );
        if let Some(a) = self.auroc_seen {
            let _ = write!(s, " auroc_seen={a}");
        }
        if let Some(a) = self.auroc_unseen {
            let _ = write!(s, " auroc_unseen={a}");
        }
        let _ = write!(s, " k_size={} l_all={} fm_mask={}", self.k_size, self.l_all, self.fm_mask);
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut rec = MetricsRecord {
            epoch: 0,
            l_cls: 0.0,
            l_ova: 0.0,
            l_em: 0.0,
            l_oc: 0.0,
            l_fm: 0.0,
            l_all: 0.0,
            err_inlier: 0.0,
            auroc_seen: None,
            auroc_unseen: None,
            k_size: 0,
            fm_mask: 0.0,
        };
        let bad = |m: String| Error::Validation(format!("metrics line: {m}"));
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("missing '=' in {field:?}")))?;
            let f = || value.parse::<f64>().map_err(|_| bad(format!("bad value for {key}")));
            let u = || value.parse::<usize>().map_err(|_| bad(format!("bad value for {key}")));
            match key {
                "epoch" => rec.epoch = u()?,
                "l_cls" => rec.l_cls = f()?,
                "l_ova" => rec.l_ova = f()?,
                "l_em" => rec.l_em = f()?,
                "l_oc" => rec.l_oc = f()?,
                "l_fm" => rec.l_fm = f()?,
                "l_all" => rec.l_all = f()?,
                "err_inlier" => rec.err_inlier = f()?,
                "auroc_seen" => rec.auroc_seen = Some(f()?),
                "auroc_unseen" => rec.auroc_unseen = Some(f()?),
                "k_size" => rec.k_size = u()?,
                "fm_mask" => rec.fm_mask = f()?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(rec)
    }
}

pub fn format_metrics(records: &[MetricsRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}
