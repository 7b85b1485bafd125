//! Dice scoring, run reports and the Friedman / paired-t comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::datamodel::{argmax_labels, DenseMask, SegmentationMap, VESSEL};
use crate::error::{Error, Result};
use crate::network::Segmentor;
use crate::par;
use crate::stats::{chi2_sf, t_two_sided};

/// 2|P∩T| / (|P|+|T|) on the vessel class; 1 when both are empty.
pub fn dice(pred: &DenseMask, truth: &DenseMask) -> Result<f64> {
    if !pred.labels().same_shape(truth.labels()) {
        return Err(Error::domain(format!(
            "dice of {}x{} against {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().data.iter().zip(&truth.labels().data) {
        let (a, b) = (a == VESSEL, b == VESSEL);
        p += usize::from(a);
        t += usize::from(b);
        inter += usize::from(a && b);
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Per-pixel argmax, ties to the lower class.
pub fn binarize(y: &SegmentationMap) -> DenseMask {
    DenseMask::new(argmax_labels(y.probs()), y.classes()).expect("argmax labels are below C")
}

/// Dice of the segmentor's binarized prediction for one image.
pub fn predict_dice(seg: &Segmentor, sample: &Sample) -> Result<f64> {
    let (y, _) = seg.forward(&sample.image)?;
    dice(&binarize(&y), sample.mask()?)
}

/// Mean Dice over samples; per-image scoring runs data-parallel.
pub fn mean_dice(seg: &Segmentor, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("mean Dice over an empty set"));
    }
    let scores = par::map(samples, |s| predict_dice(seg, s));
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub tag: Option<String>,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagSummary {
    pub count: usize,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub per_image: Vec<ImageScore>,
    pub mean_dice: f64,
    pub by_tag: BTreeMap<String, TagSummary>,
}

/// Scores every sample and summarises overall and per condition tag
/// (untagged samples are grouped under "").
pub fn evaluate_run(seg: &Segmentor, samples: &[&Sample]) -> Result<RunReport> {
    if samples.is_empty() {
        return Err(Error::domain("evaluation over an empty test set"));
    }
    let scores = par::map(samples, |s| predict_dice(seg, s));
    let mut per_image = Vec::with_capacity(samples.len());
    for (s, d) in samples.iter().zip(scores) {
        per_image.push(ImageScore {
            id: s.id.clone(),
            tag: s.tag.clone(),
            dice: d?,
        });
    }
    let mean_dice = per_image.iter().map(|s| s.dice).sum::<f64>() / per_image.len() as f64;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &per_image {
        groups.entry(s.tag.clone().unwrap_or_default()).or_default().push(s.dice);
    }
    let by_tag = groups
        .into_iter()
        .map(|(k, v)| {
            let mean_dice = v.iter().sum::<f64>() / v.len() as f64;
            (k, TagSummary { count: v.len(), mean_dice })
        })
        .collect();
    Ok(RunReport {
        per_image,
        mean_dice,
        by_tag,
    })
}

/// Cross-fold summary: both the mean over folds and the best fold, since
/// either convention may be wanted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold_means: Vec<f64>,
    pub mean_over_folds: f64,
    pub best_fold: usize,
    pub best_fold_mean: f64,
}

pub fn summarize_folds(reports: &[RunReport]) -> Result<FoldSummary> {
    if reports.is_empty() {
        return Err(Error::domain("no fold reports"));
    }
    let fold_means: Vec<f64> = reports.iter().map(|r| r.mean_dice).collect();
    let mut best_fold = 0;
    for (i, &m) in fold_means.iter().enumerate() {
        if m > fold_means[best_fold] {
            best_fold = i;
        }
    }
    Ok(FoldSummary {
        mean_over_folds: fold_means.iter().sum::<f64>() / fold_means.len() as f64,
        best_fold,
        best_fold_mean: fold_means[best_fold],
        fold_means,
    })
}

fn check_matrix(scores: &[Vec<f64>]) -> Result<(usize, usize)> {
    let k = scores.len();
    if k < 2 {
        return Err(Error::domain(format!("need at least 2 methods, got {k}")));
    }
    let n = scores[0].len();
    if n < 2 {
        return Err(Error::domain(format!("need at least 2 datasets, got {n}")));
    }
    for (m, row) in scores.iter().enumerate() {
        if row.len() != n {
            return Err(Error::domain(format!("method {m} has {} scores, expected {n}", row.len())));
        }
        if let Some(d) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("missing score for method {m} on dataset {d}")));
        }
    }
    Ok((k, n))
}

/// Ranks 1..=k with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub dof: usize,
}

/// Friedman chi-square over a method × dataset score matrix, ranking
/// methods within each dataset. The statistic carries the usual tie
/// correction; when every dataset is a complete tie it is 0 with p = 1.
pub fn friedman_test(scores: &[Vec<f64>]) -> Result<FriedmanResult> {
    let (k, n) = check_matrix(scores)?;
    let mut rank_sums = vec![0.0; k];
    let mut tie_term = 0.0;
    for d in 0..n {
        let column: Vec<f64> = scores.iter().map(|row| row[d]).collect();
        let ranks = average_ranks(&column);
        for (s, r) in rank_sums.iter_mut().zip(&ranks) {
            *s += r;
        }
        let mut sorted = column.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < k {
            let mut j = i;
            while j + 1 < k && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let correction = 1.0 - tie_term / (nf * (kf * kf * kf - kf));
    let dof = k - 1;
    if correction <= 0.0 {
        return Ok(FriedmanResult {
            statistic: 0.0,
            p_value: 1.0,
            dof,
        });
    }
    let sum_sq: f64 = rank_sums.iter().map(|r| r * r).sum();
    let raw = 12.0 / (nf * kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
    let statistic = (raw / correction).max(0.0);
    Ok(FriedmanResult {
        statistic,
        p_value: chi2_sf(statistic, dof as f64).clamp(0.0, 1.0),
        dof,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub a: usize,
    pub b: usize,
    pub t: f64,
    pub p_raw: f64,
    pub p_corrected: f64,
    pub significant: bool,
    /// Differences had zero variance; p is reported as 1.
    pub degenerate: bool,
}

/// Paired t-test for every method pair over datasets, Bonferroni corrected
/// over the k(k−1)/2 pairs.
pub fn pairwise_posthoc(scores: &[Vec<f64>], alpha: f64) -> Result<Vec<PairResult>> {
    let (k, n) = check_matrix(scores)?;
    let m = (k * (k - 1) / 2) as f64;
    let nf = n as f64;
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let diffs: Vec<f64> = scores[a].iter().zip(&scores[b]).map(|(x, y)| x - y).collect();
            let mean = diffs.iter().sum::<f64>() / nf;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let (t, p_raw, degenerate) = if var == 0.0 {
                (0.0, 1.0, true)
            } else {
                let t = mean / (var / nf).sqrt();
                (t, t_two_sided(t, nf - 1.0).clamp(0.0, 1.0), false)
            };
            let p_corrected = (p_raw * m).min(1.0);
            out.push(PairResult {
                a,
                b,
                t,
                p_raw,
                p_corrected,
                significant: p_corrected < alpha,
                degenerate,
            });
        }
    }
    Ok(out)
}

pub const POSTHOC_ALPHA: f64 = 0.001;
