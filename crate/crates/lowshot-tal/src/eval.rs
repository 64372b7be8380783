//! Evaluation: greedy matching, AP/mAP over IoU grids, top-1 accuracy,
//! oracle mAP, and the split/support-set protocol machinery.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, SplitSpec, Subset};
use crate::error::{Error, Result};
use crate::localizer::segment_iou;
use crate::params::derive_seed;
use crate::pipeline::PredictionRecord;

/// One ground-truth instance, flattened across videos.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class: String,
}

/// Extract ground truth from a manifest, optionally restricted by subset
/// and class list.
pub fn gt_instances(
    manifest: &Manifest,
    subset: Option<Subset>,
    classes: Option<&[String]>,
) -> Vec<EvalInstance> {
    let class_set: Option<BTreeSet<&str>> =
        classes.map(|cs| cs.iter().map(|c| c.as_str()).collect());
    let mut out = Vec::new();
    for video in &manifest.videos {
        if let Some(wanted) = subset {
            if video.subset != wanted {
                continue;
            }
        }
        for ann in &video.annotations {
            if let Some(set) = &class_set {
                if !set.contains(ann.class.as_str()) {
                    continue;
                }
            }
            out.push(EvalInstance {
                video_id: video.id.clone(),
                start: ann.start,
                end: ann.end,
                class: ann.class.clone(),
            });
        }
    }
    out
}

fn sorted_prediction_indices(predictions: &[PredictionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = &predictions[a];
        let pb = &predictions[b];
        pb.score
            .partial_cmp(&pa.score)
            .unwrap()
            .then(pa.video_id.cmp(&pb.video_id))
            .then(pa.start.partial_cmp(&pb.start).unwrap())
            .then(pa.end.partial_cmp(&pb.end).unwrap())
    });
    order
}

/// Average precision for one class at one IoU threshold.
///
/// Predictions are sorted by score (ties by video then start) and matched
/// greedily one-to-one: a prediction is a true positive iff an unmatched
/// same-video ground truth of the class overlaps it at or above the
/// threshold, taking the max-IoU candidate. AP integrates the
/// right-envelope (all-point interpolated) precision over recall.
pub fn match_and_ap(
    predictions: &[PredictionRecord],
    gt: &[EvalInstance],
    class: &str,
    iou_threshold: f64,
) -> f64 {
    let gt_idx: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].class == class).collect();
    if gt_idx.is_empty() {
        return 0.0;
    }
    let class_preds: Vec<&PredictionRecord> = {
        let mut v: Vec<&PredictionRecord> =
            predictions.iter().filter(|p| p.class == class).collect();
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| {
            v[b].score
                .partial_cmp(&v[a].score)
                .unwrap()
                .then(v[a].video_id.cmp(&v[b].video_id))
                .then(v[a].start.partial_cmp(&v[b].start).unwrap())
                .then(v[a].end.partial_cmp(&v[b].end).unwrap())
        });
        v = order.into_iter().map(|i| v[i]).collect();
        v
    };
    if class_preds.is_empty() {
        return 0.0;
    }

    let mut matched = vec![false; gt.len()];
    let mut tp_flags = Vec::with_capacity(class_preds.len());
    for pred in &class_preds {
        let mut best: Option<(f64, usize)> = None;
        for &gi in &gt_idx {
            if matched[gi] || gt[gi].video_id != pred.video_id {
                continue;
            }
            let iou = segment_iou((pred.start, pred.end), (gt[gi].start, gt[gi].end));
            if iou >= iou_threshold && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        match best {
            Some((_, gi)) => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // precision/recall points, then the precision envelope from the right
    let n_gt = gt_idx.len() as f64;
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_gt);
    }
    let mut envelope = precisions.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..recalls.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * envelope[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

/// IoU threshold grids from the two standard protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouGrid {
    /// 0.3 to 0.7, step 0.1.
    Thumos,
    /// 0.5 to 0.95, step 0.05.
    Anet,
}

impl IouGrid {
    pub fn thresholds(&self) -> Vec<f64> {
        match self {
            IouGrid::Thumos => (0..5).map(|i| 0.3 + 0.1 * i as f64).collect(),
            IouGrid::Anet => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<IouGrid> {
        match text {
            "thumos" => Ok(IouGrid::Thumos),
            "anet" => Ok(IouGrid::Anet),
            other => Err(Error::validation(format!(
                "unknown IoU grid {other:?}; expected thumos or anet"
            ))),
        }
    }
}

/// Full evaluation result; `oracle` holds the same metrics after replacing
/// predicted classes with those of the max-IoU ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub map_at: Vec<f64>,
    pub avg_map: f64,
    pub top1: f64,
    pub per_class_avg_ap: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Box<EvalReport>>,
}

impl EvalReport {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// mAP across the grid plus top-1 accuracy, without the oracle variant.
pub fn map_suite(
    predictions: &[PredictionRecord],
    gt: &[EvalInstance],
    grid: IouGrid,
) -> Result<EvalReport> {
    if gt.is_empty() {
        return Err(Error::validation("evaluation needs at least one ground-truth instance"));
    }
    let classes: BTreeSet<&str> = gt.iter().map(|g| g.class.as_str()).collect();
    let thresholds = grid.thresholds();
    let mut map_at = Vec::with_capacity(thresholds.len());
    let mut per_class_sum: BTreeMap<String, f64> = BTreeMap::new();
    for &thr in &thresholds {
        let mut sum = 0.0;
        for class in &classes {
            let ap = match_and_ap(predictions, gt, class, thr);
            sum += ap;
            *per_class_sum.entry(class.to_string()).or_insert(0.0) += ap;
        }
        map_at.push(sum / classes.len() as f64);
    }
    let avg_map = map_at.iter().sum::<f64>() / map_at.len() as f64;
    let per_class_avg_ap = per_class_sum
        .into_iter()
        .map(|(c, s)| (c, s / thresholds.len() as f64))
        .collect();
    Ok(EvalReport {
        thresholds,
        map_at,
        avg_map,
        top1: top1_accuracy(predictions, gt, 0.5)?,
        per_class_avg_ap,
        oracle: None,
    })
}

/// Instance-level top-1 accuracy.
///
/// For each ground-truth instance, the highest-scoring prediction of any
/// class in the same video with IoU >= `iou_min` must carry the correct
/// class; instances with no qualifying prediction count as incorrect.
pub fn top1_accuracy(
    predictions: &[PredictionRecord],
    gt: &[EvalInstance],
    iou_min: f64,
) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::validation("top-1 accuracy needs ground truth"));
    }
    let order = sorted_prediction_indices(predictions);
    let mut correct = 0usize;
    for instance in gt {
        let winner = order.iter().map(|&i| &predictions[i]).find(|p| {
            p.video_id == instance.video_id
                && segment_iou((p.start, p.end), (instance.start, instance.end)) >= iou_min
        });
        if let Some(p) = winner {
            if p.class == instance.class {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / gt.len() as f64)
}

/// Replace each prediction's class with that of its max-IoU ground truth in
/// the same video (zero-overlap predictions keep their class).
pub fn relabel_with_gt(
    predictions: &[PredictionRecord],
    gt: &[EvalInstance],
) -> Vec<PredictionRecord> {
    predictions
        .iter()
        .map(|p| {
            let mut best: Option<(f64, &EvalInstance)> = None;
            for instance in gt.iter().filter(|g| g.video_id == p.video_id) {
                let iou = segment_iou((p.start, p.end), (instance.start, instance.end));
                if iou > 0.0 && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, instance));
                }
            }
            let mut relabeled = p.clone();
            if let Some((_, instance)) = best {
                relabeled.class = instance.class.clone();
            }
            relabeled
        })
        .collect()
}

/// mAP with ground-truth classes substituted: pure localization quality.
pub fn oracle_map(
    predictions: &[PredictionRecord],
    gt: &[EvalInstance],
    grid: IouGrid,
) -> Result<EvalReport> {
    map_suite(&relabel_with_gt(predictions, gt), gt, grid)
}

/// Full report: metrics plus the oracle variant.
pub fn evaluate(
    predictions: &[PredictionRecord],
    gt: &[EvalInstance],
    grid: IouGrid,
) -> Result<EvalReport> {
    let mut report = map_suite(predictions, gt, grid)?;
    report.oracle = Some(Box::new(oracle_map(predictions, gt, grid)?));
    Ok(report)
}

/// Aligned-column text rendering of a report (IoU columns, AVG, ACC).
pub fn format_report_table(report: &EvalReport) -> String {
    fn row(label: &str, report: &EvalReport) -> String {
        let cells: Vec<String> = report
            .map_at
            .iter()
            .map(|v| format!("{:>7.4}", v))
            .collect();
        format!(
            "{label:<8}{}  {:>7.4}  {:>7.4}\n",
            cells.join(" "),
            report.avg_map,
            report.top1
        )
    }
    let mut out = String::new();
    let header: Vec<String> = report
        .thresholds
        .iter()
        .map(|t| format!("{:>7}", format!("@{t:.2}")))
        .collect();
    out.push_str(&format!("{:<8}{}  {:>7}  {:>7}\n", "", header.join(" "), "AVG", "ACC"));
    out.push_str(&row("mAP", report));
    if let Some(oracle) = &report.oracle {
        out.push_str(&row("oracle", oracle));
    }
    out
}

/// Base/novel ratio for zero-shot splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRatio {
    /// 75% base, 25% novel.
    Base75,
    /// 50% base, 50% novel.
    Base50,
}

impl SplitRatio {
    pub fn parse(text: &str) -> Result<SplitRatio> {
        match text {
            "75:25" => Ok(SplitRatio::Base75),
            "50:50" => Ok(SplitRatio::Base50),
            other => Err(Error::validation(format!(
                "unknown split ratio {other:?}; expected 75:25 or 50:50"
            ))),
        }
    }

    pub fn base_fraction(&self) -> f64 {
        match self {
            SplitRatio::Base75 => 0.75,
            SplitRatio::Base50 => 0.5,
        }
    }
}

/// Seeded base/novel partitions; the `n_splits` partitions are distinct
/// whenever combinatorially possible.
pub fn make_splits(
    classes: &[String],
    ratio: SplitRatio,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    if classes.len() < 2 {
        return Err(Error::validation(format!(
            "need at least 2 classes to split, got {}",
            classes.len()
        )));
    }
    if n_splits < 1 {
        return Err(Error::validation("n_splits must be >= 1"));
    }
    let c = classes.len();
    let base_count = ((ratio.base_fraction() * c as f64).round() as usize).clamp(1, c - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "splits"));
    let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut splits = Vec::with_capacity(n_splits);
    let mut indices: Vec<usize> = (0..c).collect();
    let max_attempts = n_splits * 64;
    let mut attempts = 0;
    while splits.len() < n_splits {
        indices.shuffle(&mut rng);
        attempts += 1;
        let mut base: Vec<String> = indices[..base_count]
            .iter()
            .map(|&i| classes[i].clone())
            .collect();
        let mut novel: Vec<String> = indices[base_count..]
            .iter()
            .map(|&i| classes[i].clone())
            .collect();
        base.sort();
        novel.sort();
        if !seen.insert(base.clone()) && attempts < max_attempts {
            continue;
        }
        splits.push(SplitSpec {
            seed,
            base,
            novel,
            support: BTreeMap::new(),
        });
    }
    Ok(splits)
}

/// Fill a split's support map with `n_shot` seeded train videos per novel
/// class, sampled without replacement.
pub fn sample_support(
    manifest: &Manifest,
    split: &SplitSpec,
    n_shot: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let mut out = split.clone();
    out.support = BTreeMap::new();
    if n_shot == 0 {
        return Ok(out);
    }
    for class in &split.novel {
        let mut candidates: Vec<&str> = manifest
            .videos
            .iter()
            .filter(|v| {
                v.subset == Subset::Train && v.annotations.iter().any(|a| &a.class == class)
            })
            .map(|v| v.id.as_str())
            .collect();
        if candidates.len() < n_shot {
            return Err(Error::validation(format!(
                "class {class} has only {} training videos, need {n_shot} for support",
                candidates.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("support/{class}")));
        candidates.shuffle(&mut rng);
        out.support.insert(
            class.clone(),
            candidates[..n_shot].iter().map(|s| s.to_string()).collect(),
        );
    }
    Ok(out)
}
