//! Classification and segmentation metrics, threshold sweeps, grouped reports and error export.
//!
//! Conventions: a sample is predicted positive when `score >= threshold`; empty denominators
//! make precision/recall/F1 zero; AUC counts ties as one half; AP steps over groups of equal
//! scores; Dice and IoU of two empty masks are 1; standard deviations divide by N.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, Label};
use crate::error::{input_bail, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn from_predictions(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        check_inputs(scores, labels)?;
        let mut c = Self::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        input_bail!("no samples to evaluate");
    }
    if scores.len() != labels.len() {
        input_bail!("{} scores but {} labels", scores.len(), labels.len());
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        input_bail!("labels must be 0 or 1, found {l}");
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        input_bail!("non-finite score {s}");
    }
    Ok(())
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub bona_fide: ClassMetrics,
    pub attack: ClassMetrics,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
}

/// Derived rates for a confusion matrix (attack is the positive class).
pub fn metrics_from_counts(c: ConfusionCounts) -> Result<ClassificationMetrics> {
    let n = c.total();
    if n == 0 {
        input_bail!("no samples to evaluate");
    }
    let class = |tp: u64, fp: u64, fn_: u64| {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassMetrics {
            precision,
            recall,
            f1: f1(precision, recall),
            support: tp + fn_,
        }
    };
    let attack = class(c.tp, c.fp, c.fn_);
    let bona_fide = class(c.tn, c.fn_, c.fp);
    let macro_avg = Averages {
        precision: (attack.precision + bona_fide.precision) / 2.0,
        recall: (attack.recall + bona_fide.recall) / 2.0,
        f1: (attack.f1 + bona_fide.f1) / 2.0,
    };
    let (wa, wb) = (attack.support as f64 / n as f64, bona_fide.support as f64 / n as f64);
    let weighted_avg = Averages {
        precision: wa * attack.precision + wb * bona_fide.precision,
        recall: wa * attack.recall + wb * bona_fide.recall,
        f1: wa * attack.f1 + wb * bona_fide.f1,
    };
    Ok(ClassificationMetrics {
        counts: c,
        accuracy: (c.tp + c.tn) as f64 / n as f64,
        bona_fide,
        attack,
        macro_avg,
        weighted_avg,
    })
}

pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassificationMetrics> {
    metrics_from_counts(ConfusionCounts::from_predictions(scores, labels, threshold)?)
}

/// `(score, positives, negatives)` per distinct score, ascending.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(f64, u64, u64)> = Vec::new();
    for i in order {
        let (s, pos) = (scores[i], labels[i] == 1);
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if pos {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, pos as u64, (!pos) as u64)),
        }
    }
    groups
}

/// Rank-based (Mann-Whitney) area under the ROC curve; ties count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let (p, n): (u64, u64) = groups.iter().fold((0, 0), |a, g| (a.0 + g.1, a.1 + g.2));
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    // Twice the Mann-Whitney U, kept integral so the result depends only on ranks.
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    for &(_, gp, gn) in &groups {
        u2 += 2 * gp as u128 * neg_below + gp as u128 * gn as u128;
        neg_below += gn as u128;
    }
    Ok(u2 as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Step-wise average precision, `Σ (R_k − R_{k−1}) P_k`, with one step per distinct score.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let p: u64 = groups.iter().map(|g| g.1).sum();
    if p == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let (mut tp, mut fp, mut ap, mut prev_recall) = (0u64, 0u64, 0.0, 0.0);
    for &(_, gp, gn) in groups.iter().rev() {
        tp += gp;
        fp += gn;
        let recall = tp as f64 / p as f64;
        ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

/// Threshold grid `{0, step, 2·step, …, 1}` with `k/n` spacing.
pub fn threshold_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        input_bail!("grid step {step} must be in (0, 1]");
    }
    let n = (1.0 / step).round() as u64;
    Ok((0..=n).map(|k| k as f64 / n as f64).collect())
}

/// Threshold on the grid maximizing attack-class F1; ties go to the higher threshold.
pub fn sweep_threshold(scores: &[f64], labels: &[u8], step: f64) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    let mut best = (0.0, -1.0);
    for t in threshold_grid(step)? {
        let f = classification_metrics(scores, labels, t)?.attack.f1;
        if f >= best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

/// `(false positive rate, true positive rate, threshold)` at every distinct score, from the
/// highest threshold down, starting at `(0, 0, +inf)`.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    check_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let (p, n): (u64, u64) = groups.iter().fold((0, 0), |a, g| (a.0 + g.1, a.1 + g.2));
    let mut out = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0, 0);
    for &(s, gp, gn) in groups.iter().rev() {
        tp += gp;
        fp += gn;
        out.push((ratio(fp, n), ratio(tp, p), s));
    }
    Ok(out)
}

/// `(recall, precision, threshold)` at every distinct score, highest threshold first.
pub fn pr_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64, f64)>> {
    check_inputs(scores, labels)?;
    let groups = tie_groups(scores, labels);
    let p: u64 = groups.iter().map(|g| g.1).sum();
    let (mut tp, mut fp) = (0, 0);
    Ok(groups
        .iter()
        .rev()
        .map(|&(s, gp, gn)| {
            tp += gp;
            fp += gn;
            (ratio(tp, p), ratio(tp, tp + fp), s)
        })
        .collect())
}

/// Per-sample Dice and IoU of `pred >= threshold` against `gt > 0.5`.
pub fn mask_overlap(pred: &[f32], gt: &[f32], threshold: f64) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        input_bail!("mask sizes differ: {} vs {}", pred.len(), gt.len());
    }
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        let (pa, gb) = (a as f64 >= threshold, b > 0.5);
        inter += (pa && gb) as u64;
        p += pa as u64;
        g += gb as u64;
    }
    if p + g == 0 {
        return Ok((1.0, 1.0));
    }
    let union = p + g - inter;
    Ok((2.0 * inter as f64 / (p + g) as f64, inter as f64 / union as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub count: usize,
    pub threshold: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    #[serde(skip)]
    pub dice: Vec<f64>,
    #[serde(skip)]
    pub iou: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Dice/IoU means and population standard deviations over the given masks.
pub fn segmentation_metrics(preds: &[Vec<f32>], gts: &[Vec<f32>], threshold: f64) -> Result<SegmentationMetrics> {
    if preds.len() != gts.len() {
        input_bail!("{} predicted masks but {} ground-truth masks", preds.len(), gts.len());
    }
    if preds.is_empty() {
        input_bail!("no masks to evaluate");
    }
    let pairs: Vec<(f64, f64)> = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| mask_overlap(p, g, threshold))
        .collect::<Result<_>>()?;
    let (dice, iou): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (dice_mean, dice_std) = mean_std(&dice);
    let (iou_mean, iou_std) = mean_std(&iou);
    Ok(SegmentationMetrics {
        count: dice.len(),
        threshold,
        dice_mean,
        dice_std,
        iou_mean,
        iou_std,
        dice,
        iou,
    })
}

/// Grid threshold maximizing mean Dice; ties go to the higher threshold.
pub fn sweep_seg_threshold(preds: &[Vec<f32>], gts: &[Vec<f32>], step: f64) -> Result<(f64, f64)> {
    let mut best = (0.0, -1.0);
    for t in threshold_grid(step)? {
        let d = segmentation_metrics(preds, gts, t)?.dice_mean;
        if d >= best.1 {
            best = (t, d);
        }
    }
    Ok(best)
}

/// Model output for one sample, aligned with its manifest record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub score: Option<f64>,
    /// Predicted probabilities at model resolution, row-major.
    pub pred_mask: Option<Vec<f32>>,
    /// Ground truth at model resolution in `{0, 1}`.
    pub gt_mask: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Classification threshold (`score >= threshold` is an attack).
    pub threshold: f64,
    pub seg_threshold: f64,
    pub grid_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.80,
            seg_threshold: 0.10,
            grid_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub threshold: f64,
    /// Absent for models without a detection head.
    pub classification: Option<ClassificationMetrics>,
    /// `None` when undefined (single-class subset).
    pub auc: Option<f64>,
    pub average_precision: Option<f64>,
    pub optimal_threshold: Option<f64>,
    pub optimal_f1: Option<f64>,
    /// Over attack samples only; absent without a segmentation head or attacks.
    pub segmentation: Option<SegmentationMetrics>,
    pub seg_optimal_threshold: Option<f64>,
    pub seg_optimal_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_group: BTreeMap<String, BTreeMap<String, MetricsReport>>,
}

fn undefined_as_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn check_records(samples: &[ImageSample], records: &[EvalRecord]) -> Result<()> {
    if samples.len() != records.len() {
        input_bail!("{} samples but {} predictions", samples.len(), records.len());
    }
    if samples.is_empty() {
        input_bail!("no samples to evaluate");
    }
    Ok(())
}

/// Metrics over all samples, without group breakdowns.
pub fn report(samples: &[ImageSample], records: &[EvalRecord], cfg: &EvalConfig) -> Result<MetricsReport> {
    check_records(samples, records)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label as u8).collect();
    let scores: Option<Vec<f64>> = records.iter().map(|r| r.score).collect();
    let mut out = MetricsReport {
        n_samples: samples.len(),
        threshold: cfg.threshold,
        classification: None,
        auc: None,
        average_precision: None,
        optimal_threshold: None,
        optimal_f1: None,
        segmentation: None,
        seg_optimal_threshold: None,
        seg_optimal_dice: None,
        per_group: BTreeMap::new(),
    };
    if let Some(scores) = &scores {
        out.classification = Some(classification_metrics(scores, &labels, cfg.threshold)?);
        out.auc = undefined_as_none(auc(scores, &labels))?;
        out.average_precision = undefined_as_none(average_precision(scores, &labels))?;
        let (t, f) = sweep_threshold(scores, &labels, cfg.grid_step)?;
        out.optimal_threshold = Some(t);
        out.optimal_f1 = Some(f);
    }
    let attack_masks: Option<Vec<(&Vec<f32>, &Vec<f32>)>> = samples
        .iter()
        .zip(records)
        .filter(|(s, _)| s.label == Label::Attack)
        .map(|(_, r)| r.pred_mask.as_ref().map(|p| (p, &r.gt_mask)))
        .collect();
    if let Some(pairs) = attack_masks.filter(|p| !p.is_empty()) {
        let preds: Vec<Vec<f32>> = pairs.iter().map(|p| p.0.clone()).collect();
        let gts: Vec<Vec<f32>> = pairs.iter().map(|p| p.1.clone()).collect();
        out.segmentation = Some(segmentation_metrics(&preds, &gts, cfg.seg_threshold)?);
        let (t, d) = sweep_seg_threshold(&preds, &gts, cfg.grid_step)?;
        out.seg_optimal_threshold = Some(t);
        out.seg_optimal_dice = Some(d);
    }
    Ok(out)
}

/// One sub-report per value of `key` (`language` or `device`).
pub fn group_breakdown(
    samples: &[ImageSample],
    records: &[EvalRecord],
    key: &str,
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, MetricsReport>> {
    check_records(samples, records)?;
    let mut groups: BTreeMap<String, (Vec<ImageSample>, Vec<EvalRecord>)> = BTreeMap::new();
    for (s, r) in samples.iter().zip(records) {
        let g = groups.entry(s.group_value(key)?.to_string()).or_default();
        g.0.push(s.clone());
        g.1.push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, (s, r))| Ok((k, report(&s, &r, cfg)?)))
        .collect()
}

/// Overall report with `language` and `device` breakdowns.
pub fn evaluate(samples: &[ImageSample], records: &[EvalRecord], cfg: &EvalConfig) -> Result<MetricsReport> {
    let mut out = report(samples, records, cfg)?;
    for key in ["language", "device"] {
        out.per_group.insert(key.to_string(), group_breakdown(samples, records, key, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    #[serde(rename = "type")]
    pub kind: String,
    pub image_path: String,
    pub score: f64,
    pub label: u8,
    pub language: String,
    pub device: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack_type: Option<crate::data::AttackType>,
    /// Mask Dice at the segmentation threshold (attacks with a predicted mask).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
}

/// False positives and false negatives at `cfg.threshold`, in sample order.
pub fn misclassified(samples: &[ImageSample], records: &[EvalRecord], cfg: &EvalConfig) -> Result<Vec<ErrorRecord>> {
    check_records(samples, records)?;
    let mut out = Vec::new();
    for (s, r) in samples.iter().zip(records) {
        let Some(score) = r.score else {
            return Err(Error::Input("error export needs detection scores".into()));
        };
        let kind = match (score >= cfg.threshold, s.label) {
            (true, Label::BonaFide) => "false_positive",
            (false, Label::Attack) => "false_negative",
            _ => continue,
        };
        let dice = match (&r.pred_mask, s.label) {
            (Some(p), Label::Attack) => Some(mask_overlap(p, &r.gt_mask, cfg.seg_threshold)?.0),
            _ => None,
        };
        out.push(ErrorRecord {
            kind: kind.to_string(),
            image_path: s.image_path.display().to_string(),
            score,
            label: s.label as u8,
            language: s.language.clone(),
            device: s.device.clone(),
            attack_type: s.attack_type,
            dice,
        });
    }
    Ok(out)
}

/// Writes [`misclassified`] as line-delimited JSON; returns the record count.
pub fn export_errors(samples: &[ImageSample], records: &[EvalRecord], cfg: &EvalConfig, out_path: &Path) -> Result<usize> {
    let errors = misclassified(samples, records, cfg)?;
    let mut buf = Vec::new();
    for e in &errors {
        serde_json::to_writer(&mut buf, e)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(out_path, e))?;
    Ok(errors.len())
}
