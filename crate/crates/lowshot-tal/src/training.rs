//! The three losses, the joint optimization loop, and few-shot adaptation.
//!
//! Detection uses weighted binary cross-entropy over assigned frames,
//! regression uses the distance-IoU loss on decoded segments, and
//! classification is an InfoNCE objective pulling pooled proposal
//! embeddings toward their class's text embedding in the shared space.
//! Encoders stay frozen throughout (asserted bit-exactly in the tests);
//! only the pyramid, heads, prompt module, aligners, and fusion weights
//! receive updates.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{align_in, pool_proposal};
use crate::classifiers::CachedDescriptions;
use crate::config::{ClassifierMode, Config, GammaMode, Stream, TrainPooling};
use crate::data::{SplitSpec, VideoFeatures};
use crate::encoders::{TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::localizer::{
    assign_targets, decode_proposals, segment_iou, LevelTargets, TargetAssignment,
};
use crate::params::{derive_seed, Adam, Bindings, ParamSet};
use crate::pipeline::{
    bank_in, fused_prediction_values, init_model_params, is_trainable, level_shapes,
    pooled_stream_features, video_forward, BankInputs, ModelDims, TrainedBundle,
};
use crate::pyramid::AttentionMode;

const PROB_EPS: f64 = 1e-7;

/// Per-step loss components; `total` is the exact weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub det: f64,
    pub reg: f64,
    pub cls: f64,
    pub total: f64,
}

/// Combine loss parts, rejecting NaN by name.
pub fn total_loss(det: f64, reg: f64, cls: f64, lambda1: f64, lambda2: f64) -> Result<LossBreakdown> {
    for (name, value) in [("det", det), ("reg", reg), ("cls", cls)] {
        if value.is_nan() {
            return Err(Error::runtime(format!("loss component {name} is NaN")));
        }
    }
    Ok(LossBreakdown {
        det,
        reg,
        cls,
        total: det + lambda1 * reg + lambda2 * cls,
    })
}

/// Negative-weighting mode for the detection loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    /// `|positives| / max(|negatives|, 1)` over the assignment in scope.
    Auto,
    Fixed(f64),
}

impl Gamma {
    pub fn resolve(&self, positives: usize, negatives: usize) -> f64 {
        match self {
            Gamma::Fixed(v) => *v,
            Gamma::Auto => positives as f64 / negatives.max(1) as f64,
        }
    }
}

/// Build the weighted cross-entropy detection loss over assigned frames.
///
/// `per_level` pairs each level's actionness node (`T_i x 1`) with its
/// targets. With no positives in scope the loss is computed over negatives
/// alone at unit weight and a warning goes to stderr.
pub fn loss_det_in(
    g: &mut Graph,
    per_level: &[(NodeId, &LevelTargets)],
    gamma: f64,
    normalize: bool,
) -> NodeId {
    let mut pos_sum: Option<NodeId> = None;
    let mut neg_sum: Option<NodeId> = None;
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    let add_in = |g: &mut Graph, acc: &mut Option<NodeId>, node: NodeId| {
        *acc = Some(match acc.take() {
            Some(prev) => g.add(prev, node),
            None => node,
        });
    };
    for (actionness, targets) in per_level {
        if !targets.positives.is_empty() {
            let rows = g.gather_rows(*actionness, &targets.positives);
            let clamped = g.clamp_eps(rows, PROB_EPS, 1.0 - PROB_EPS);
            let logs = g.ln(clamped);
            let sum = g.sum_all(logs);
            add_in(g, &mut pos_sum, sum);
            n_pos += targets.positives.len();
        }
        if !targets.negatives.is_empty() {
            let rows = g.gather_rows(*actionness, &targets.negatives);
            let neg = g.scale(rows, -1.0);
            let flipped = g.add_scalar(neg, 1.0);
            let clamped = g.clamp_eps(flipped, PROB_EPS, 1.0 - PROB_EPS);
            let logs = g.ln(clamped);
            let sum = g.sum_all(logs);
            add_in(g, &mut neg_sum, sum);
            n_neg += targets.negatives.len();
        }
    }
    let effective_gamma = if n_pos == 0 {
        if n_neg > 0 {
            eprintln!("warning: detection loss has no positive frames; using negatives only");
        }
        1.0
    } else {
        gamma
    };
    let mut terms = Vec::new();
    if let Some(p) = pos_sum {
        terms.push(g.scale(p, -1.0));
    }
    if let Some(n) = neg_sum {
        terms.push(g.scale(n, -effective_gamma));
    }
    let mut out = match terms.len() {
        0 => g.scalar_leaf(0.0),
        1 => terms[0],
        _ => g.add(terms[0], terms[1]),
    };
    if normalize {
        let count = (n_pos + n_neg).max(1) as f64;
        out = g.scale(out, 1.0 / count);
    }
    out
}

/// Distance-IoU terms (`N x 1`, each in `[0, 2]`) between predicted and
/// ground-truth segments given as (start, end) column nodes.
pub fn diou_terms_in(
    g: &mut Graph,
    pred_start: NodeId,
    pred_end: NodeId,
    gt_start: NodeId,
    gt_end: NodeId,
) -> NodeId {
    let min_end = g.min_elem(pred_end, gt_end);
    let max_start = g.max_elem(pred_start, gt_start);
    let overlap = g.sub(min_end, max_start);
    let inter = g.relu(overlap);
    let pred_len = g.sub(pred_end, pred_start);
    let gt_len = g.sub(gt_end, gt_start);
    let len_sum = g.add(pred_len, gt_len);
    let union = g.sub(len_sum, inter);
    let iou = g.div(inter, union);

    let enc_end = g.max_elem(pred_end, gt_end);
    let enc_start = g.min_elem(pred_start, gt_start);
    let enc_len = g.sub(enc_end, enc_start);
    let pred_center_sum = g.add(pred_start, pred_end);
    let pred_center = g.scale(pred_center_sum, 0.5);
    let gt_center_sum = g.add(gt_start, gt_end);
    let gt_center = g.scale(gt_center_sum, 0.5);
    let center_gap = g.sub(pred_center, gt_center);
    let ratio = g.div(center_gap, enc_len);
    let dist = g.mul(ratio, ratio);

    let neg_iou = g.scale(iou, -1.0);
    let one_minus = g.add_scalar(neg_iou, 1.0);
    g.add(one_minus, dist)
}

/// DIoU regression terms for one level's positive frames.
///
/// Predicted segments are decoded from the offset node at the positive
/// frames; ground-truth segments are rebuilt from the stored targets. The
/// caller concatenates levels and takes the mean.
pub fn loss_reg_terms_in(
    g: &mut Graph,
    offsets: NodeId,
    targets: &LevelTargets,
    stride: usize,
) -> Option<NodeId> {
    if targets.positives.is_empty() {
        return None;
    }
    let stride = stride as f64;
    let n = targets.positives.len();
    let rows = g.gather_rows(offsets, &targets.positives);
    let left = g.slice_cols(rows, 0, 1);
    let right = g.slice_cols(rows, 1, 2);
    let centers = Array2::from_shape_vec(
        (n, 1),
        targets
            .positives
            .iter()
            .map(|&f| (f as f64 + 0.5) * stride)
            .collect(),
    )
    .unwrap();
    let centers = g.leaf(centers);
    let left_span = g.scale(left, -stride);
    let pred_start = g.add(centers, left_span);
    let right_span = g.scale(right, stride);
    let pred_end = g.add(centers, right_span);

    let gt_start = Array2::from_shape_vec(
        (n, 1),
        targets
            .positives
            .iter()
            .zip(&targets.offsets)
            .map(|(&f, &(l, _))| (f as f64 + 0.5) * stride - l * stride)
            .collect(),
    )
    .unwrap();
    let gt_end = Array2::from_shape_vec(
        (n, 1),
        targets
            .positives
            .iter()
            .zip(&targets.offsets)
            .map(|(&f, &(_, r))| (f as f64 + 0.5) * stride + r * stride)
            .collect(),
    )
    .unwrap();
    let gt_start = g.leaf(gt_start);
    let gt_end = g.leaf(gt_end);
    Some(diou_terms_in(g, pred_start, pred_end, gt_start, gt_end))
}

/// InfoNCE for one stream: mean cross-entropy of `cosine/tau` logits.
pub fn loss_cls_in(
    g: &mut Graph,
    aligned_rows: NodeId,
    aligned_bank: NodeId,
    labels: &[usize],
    tau: f64,
) -> NodeId {
    let bank_t = g.transpose(aligned_bank);
    let cosines = g.matmul(aligned_rows, bank_t);
    let logits = g.scale(cosines, 1.0 / tau);
    g.cross_entropy_rows(logits, labels)
}

/// Value-level detection loss (see [`loss_det_in`]).
pub fn loss_det(actionness: &[Array2<f64>], targets: &TargetAssignment, gamma: Gamma) -> f64 {
    let g_val = gamma.resolve(targets.positive_count(), targets.negative_count());
    let mut g = Graph::new();
    let nodes: Vec<(NodeId, &LevelTargets)> = actionness
        .iter()
        .zip(&targets.levels)
        .map(|(a, t)| (g.leaf(a.clone()), t))
        .collect();
    let loss = loss_det_in(&mut g, &nodes, g_val, true);
    g.scalar(loss)
}

/// Value-level DIoU loss between explicit segment lists.
pub fn loss_reg(predicted: &[(f64, f64)], ground_truth: &[(f64, f64)]) -> f64 {
    assert_eq!(predicted.len(), ground_truth.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let column = |segs: &[(f64, f64)], pick: fn(&(f64, f64)) -> f64| {
        Array2::from_shape_vec((segs.len(), 1), segs.iter().map(pick).collect()).unwrap()
    };
    let mut g = Graph::new();
    let ps = g.leaf(column(predicted, |s| s.0));
    let pe = g.leaf(column(predicted, |s| s.1));
    let gs = g.leaf(column(ground_truth, |s| s.0));
    let ge = g.leaf(column(ground_truth, |s| s.1));
    let terms = diou_terms_in(&mut g, ps, pe, gs, ge);
    let mean = g.mean_all(terms);
    g.scalar(mean)
}

/// Value-level InfoNCE summed over streams, averaged over proposals.
/// Rows must be L2-normalized.
pub fn loss_cls(per_stream: &[Array2<f64>], bank: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let mut g = Graph::new();
    let bank_node = g.leaf(bank.clone());
    let mut total = 0.0;
    for rows in per_stream {
        let rows_node = g.leaf(rows.clone());
        let loss = loss_cls_in(&mut g, rows_node, bank_node, labels, tau);
        total += g.scalar(loss);
    }
    total
}

/// Pooled, labeled classification examples for one video.
struct ClsExamples {
    /// Per stream: raw pooled feature rows (`P x d_stream`).
    rows: Vec<(Stream, Array2<f64>)>,
    labels: Vec<usize>,
}

/// Pool classification features for a video per the configured strategy.
///
/// GT pooling uses annotated intervals directly. Proposal pooling decodes
/// the current predictions and labels each surviving proposal with its
/// max-IoU ground truth (dropped below the matching threshold).
fn classification_examples(
    g: &Graph,
    video: &VideoFeatures,
    streams: &[crate::pipeline::StreamForward],
    class_to_index: &BTreeMap<&str, usize>,
    config: &Config,
) -> Result<ClsExamples> {
    let mut intervals: Vec<(f64, f64, usize)> = Vec::new();
    match config.train_pooling {
        TrainPooling::Gt => {
            for ann in &video.annotations {
                let label = *class_to_index.get(ann.class_name.as_str()).ok_or_else(|| {
                    Error::validation(format!(
                        "annotation class {} missing from the training bank (split leakage?)",
                        ann.class_name
                    ))
                })?;
                intervals.push((ann.start, ann.end, label));
            }
        }
        TrainPooling::Proposal => {
            let (actionness, offsets) = fused_prediction_values(g, streams);
            let proposals = decode_proposals(
                &actionness,
                &offsets,
                &streams[0].pyramid.masks,
                &streams[0].pyramid.strides,
                config.theta_loc,
                video.valid_len,
            );
            for p in proposals {
                let mut best: Option<(f64, usize)> = None;
                for ann in &video.annotations {
                    let iou = segment_iou(p.segment(), (ann.start, ann.end));
                    if iou >= config.proposal_match_iou
                        && best.map_or(true, |(b, _)| iou > b)
                    {
                        let label =
                            *class_to_index.get(ann.class_name.as_str()).ok_or_else(|| {
                                Error::validation(format!(
                                    "annotation class {} missing from the training bank",
                                    ann.class_name
                                ))
                            })?;
                        best = Some((iou, label));
                    }
                }
                if let Some((_, label)) = best {
                    intervals.push((p.start, p.end, label));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for &stream in config.modality.streams() {
        let features = match stream {
            Stream::Rgb => &video.rgb,
            Stream::Flow => &video.flow,
        };
        let mut matrix = Array2::zeros((intervals.len(), features.ncols()));
        for (i, &(start, end, _)) in intervals.iter().enumerate() {
            matrix.row_mut(i).assign(&pool_proposal(features, start, end));
        }
        rows.push((stream, matrix));
    }
    Ok(ClsExamples {
        rows,
        labels: intervals.iter().map(|&(_, _, l)| l).collect(),
    })
}

fn epoch_lr(config: &Config, epoch: usize) -> f64 {
    if epoch < config.warmup_epochs {
        config.lr * (epoch + 1) as f64 / config.warmup_epochs as f64
    } else {
        config.lr
    }
}

/// Train the full model on the base split of a dataset.
///
/// Returns the trained bundle and the per-epoch mean loss history.
pub fn train(
    videos: &[VideoFeatures],
    split: &SplitSpec,
    config: &Config,
    descriptions: Option<&CachedDescriptions>,
) -> Result<(TrainedBundle, Vec<LossBreakdown>)> {
    config.validate()?;
    split.check()?;
    if split.base.is_empty() {
        return Err(Error::validation("empty base split: nothing to train on"));
    }
    let base_classes: Vec<String> = split.base.clone();
    let base_set: std::collections::BTreeSet<&str> =
        base_classes.iter().map(|s| s.as_str()).collect();

    // Base-only training set: novel annotations are filtered out, videos
    // without any base annotation remain as pure negatives.
    let mut train_videos: Vec<VideoFeatures> = videos
        .iter()
        .filter(|v| v.subset == crate::data::Subset::Train)
        .cloned()
        .collect();
    for video in &mut train_videos {
        video
            .annotations
            .retain(|a| base_set.contains(a.class_name.as_str()));
    }
    if train_videos.is_empty() {
        return Err(Error::validation("no training videos in the dataset"));
    }
    let dims = ModelDims {
        d_rgb: train_videos[0].rgb.ncols(),
        d_flow: train_videos[0].flow.ncols(),
    };

    let encoder = TextEncoder::new(TextEncoderConfig::from_config(config));
    let mut params = init_model_params(config, &dims, &encoder)?;
    let mut adam = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train"));
    let mut history = Vec::new();

    let class_to_index: BTreeMap<&str, usize> = base_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let total_epochs = config.warmup_epochs + config.train_epochs;
    let mut order: Vec<usize> = (0..train_videos.len()).collect();
    for epoch in 0..total_epochs {
        let lr = epoch_lr(config, epoch);
        order.shuffle(&mut rng);
        let mut epoch_losses: Vec<LossBreakdown> = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let breakdown = train_step(
                batch,
                &train_videos,
                &base_classes,
                &class_to_index,
                config,
                &encoder,
                descriptions,
                &mut params,
                &mut adam,
                lr,
            )?;
            epoch_losses.push(breakdown);
        }
        let n = epoch_losses.len().max(1) as f64;
        history.push(LossBreakdown {
            det: epoch_losses.iter().map(|l| l.det).sum::<f64>() / n,
            reg: epoch_losses.iter().map(|l| l.reg).sum::<f64>() / n,
            cls: epoch_losses.iter().map(|l| l.cls).sum::<f64>() / n,
            total: epoch_losses.iter().map(|l| l.total).sum::<f64>() / n,
        });
    }

    let encoder = if config.end_to_end {
        let mut updated = ParamSet::new();
        for (name, value) in params.iter() {
            if name.starts_with("encoder/") {
                updated.insert(name, value.clone());
            }
        }
        let mut enc = TextEncoder::new(TextEncoderConfig::from_config(config));
        enc.set_weights(updated);
        enc
    } else {
        encoder
    };

    Ok((
        TrainedBundle {
            params,
            encoder,
            config: config.clone(),
            dims,
            train_classes: base_classes,
            rng_word_pos: rng.get_word_pos(),
        },
        history,
    ))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    batch: &[usize],
    train_videos: &[VideoFeatures],
    base_classes: &[String],
    class_to_index: &BTreeMap<&str, usize>,
    config: &Config,
    encoder: &TextEncoder,
    descriptions: Option<&CachedDescriptions>,
    params: &mut ParamSet,
    adam: &mut Adam,
    lr: f64,
) -> Result<LossBreakdown> {
    // Assignment is a pure function of the annotations; compute it first so
    // the auto gamma can balance over the whole batch.
    let mut assignments = Vec::with_capacity(batch.len());
    let mut total_pos = 0usize;
    let mut total_neg = 0usize;
    for &idx in batch {
        let video = &train_videos[idx];
        let (lens, strides, masks) =
            level_shapes(video.num_snippets(), video.valid_len, config.levels);
        let assignment =
            assign_targets(&video.annotations, &lens, &strides, &masks, config.range_base);
        total_pos += assignment.positive_count();
        total_neg += assignment.negative_count();
        assignments.push(assignment);
    }
    let gamma = match config.gamma_mode {
        GammaMode::Auto => Gamma::Auto.resolve(total_pos, total_neg),
        GammaMode::Fixed => config.gamma,
    };

    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let bank_inputs = BankInputs {
        encoder,
        config,
        descriptions,
    };

    // Shared bank for video-independent classifier modes.
    let shared_bank = if config.classifier_mode == ClassifierMode::Conditional {
        None
    } else {
        let node = bank_in(
            &mut g,
            params,
            &mut bindings,
            &bank_inputs,
            base_classes,
            None,
            false,
        )?;
        Some(align_in(&mut g, params, &mut bindings, "align_text", node))
    };

    let mut det_pairs: Vec<(NodeId, LevelTargets)> = Vec::new();
    let mut reg_terms: Vec<NodeId> = Vec::new();
    let mut cls_parts: Vec<(NodeId, usize)> = Vec::new(); // (mean-ce node, count)

    for (&idx, assignment) in batch.iter().zip(&assignments) {
        let video = &train_videos[idx];
        let streams = video_forward(&mut g, params, &mut bindings, video, config, AttentionMode::Standard)?;
        for sf in &streams {
            for (level, (&act, &off)) in sf
                .preds
                .actionness
                .iter()
                .zip(&sf.preds.offsets)
                .enumerate()
            {
                det_pairs.push((act, assignment.levels[level].clone()));
                if let Some(terms) =
                    loss_reg_terms_in(&mut g, off, &assignment.levels[level], sf.pyramid.strides[level])
                {
                    reg_terms.push(terms);
                }
            }
        }

        let examples = classification_examples(&g, video, &streams, class_to_index, config)?;
        if !examples.labels.is_empty() {
            let aligned_bank = match shared_bank {
                Some(node) => node,
                None => {
                    let bank = bank_in(
                        &mut g,
                        params,
                        &mut bindings,
                        &bank_inputs,
                        base_classes,
                        Some(video),
                        false,
                    )?;
                    align_in(&mut g, params, &mut bindings, "align_text", bank)
                }
            };
            let mut video_cls: Option<NodeId> = None;
            for (stream, rows) in &examples.rows {
                let rows_node = g.leaf(rows.clone());
                let aligned = align_in(
                    &mut g,
                    params,
                    &mut bindings,
                    &format!("align_{}", stream.name()),
                    rows_node,
                );
                let loss = loss_cls_in(&mut g, aligned, aligned_bank, &examples.labels, config.tau);
                video_cls = Some(match video_cls {
                    Some(prev) => g.add(prev, loss),
                    None => loss,
                });
            }
            cls_parts.push((video_cls.unwrap(), examples.labels.len()));
        }
    }

    let det_refs: Vec<(NodeId, &LevelTargets)> =
        det_pairs.iter().map(|(n, t)| (*n, t)).collect();
    let det = loss_det_in(&mut g, &det_refs, gamma, !config.sum_losses);

    let reg = if reg_terms.is_empty() {
        g.scalar_leaf(0.0)
    } else {
        let all = if reg_terms.len() == 1 {
            reg_terms[0]
        } else {
            g.concat_rows(&reg_terms)
        };
        if config.sum_losses {
            g.sum_all(all)
        } else {
            g.mean_all(all)
        }
    };

    let cls = if cls_parts.is_empty() {
        g.scalar_leaf(0.0)
    } else {
        // weighted mean over videos by example count (exact global mean
        // per stream-sum)
        let total: usize = cls_parts.iter().map(|(_, n)| n).sum();
        let mut acc: Option<NodeId> = None;
        for (node, count) in &cls_parts {
            let weighted = g.scale(*node, *count as f64);
            acc = Some(match acc {
                Some(prev) => g.add(prev, weighted),
                None => weighted,
            });
        }
        let summed = acc.unwrap();
        if config.sum_losses {
            summed
        } else {
            g.scale(summed, 1.0 / total as f64)
        }
    };

    let breakdown = total_loss(
        g.scalar(det),
        g.scalar(reg),
        g.scalar(cls),
        config.lambda1,
        config.lambda2,
    )?;

    let reg_weighted = g.scale(reg, config.lambda1);
    let cls_weighted = g.scale(cls, config.lambda2);
    let partial = g.add(det, reg_weighted);
    let total = g.add(partial, cls_weighted);
    let grads = g.backward(total);

    let mut updates: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (name, node) in bindings.iter() {
        if !is_trainable(config, name) {
            continue;
        }
        if let Some(grad) = grads.get(node) {
            updates.insert(name.to_string(), grad.clone());
        }
    }
    adam.step(params, &updates, lr);
    Ok(breakdown)
}

/// Tune per-class prompt offsets on few-shot support videos.
///
/// Only the offsets (and, when `adapt_prompt_module` is set, the prompt
/// module) receive gradients; detector, regressor, pyramid, aligners, and
/// encoder are untouched. An empty support map returns the bundle as-is.
pub fn few_shot_adapt(
    bundle: &TrainedBundle,
    videos: &[VideoFeatures],
    split: &SplitSpec,
    descriptions: Option<&CachedDescriptions>,
) -> Result<TrainedBundle> {
    let config = &bundle.config;
    if split.support.is_empty() {
        return Ok(bundle.clone());
    }
    if config.classifier_mode != ClassifierMode::Conditional {
        return Err(Error::validation(
            "few-shot adaptation tunes conditional prompt offsets; set classifier_mode=conditional",
        ));
    }
    split.check()?;

    let by_id: BTreeMap<&str, &VideoFeatures> =
        videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut support_clips: Vec<(String, &VideoFeatures)> = Vec::new();
    for (class, ids) in &split.support {
        for id in ids {
            let video = by_id.get(id.as_str()).ok_or_else(|| {
                Error::validation(format!("support video {id} not found in the dataset"))
            })?;
            if !video.annotations.iter().any(|a| &a.class_name == class) {
                return Err(Error::validation(format!(
                    "support video {id} has no annotations of class {class}"
                )));
            }
            support_clips.push((class.clone(), video));
        }
    }

    let mut params = bundle.params.clone();
    for class in split.support.keys() {
        params.init_zeros(
            &format!("offset/{class}"),
            config.prompt_len,
            config.d_text,
        );
    }
    let novel_classes: Vec<String> = split.novel.clone();
    let class_to_index: BTreeMap<&str, usize> = novel_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut adam = Adam::new();
    for _epoch in 0..config.adapt_epochs {
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let bank_inputs = BankInputs {
            encoder: &bundle.encoder,
            config,
            descriptions,
        };
        let mut acc: Option<NodeId> = None;
        let mut count = 0usize;
        for (class, video) in &support_clips {
            let label = class_to_index[class.as_str()];
            let bank = bank_in(
                &mut g,
                &params,
                &mut bindings,
                &bank_inputs,
                &novel_classes,
                Some(video),
                true,
            )?;
            let aligned_bank = align_in(&mut g, &params, &mut bindings, "align_text", bank);
            let intervals: Vec<(f64, f64)> = video
                .annotations
                .iter()
                .filter(|a| &a.class_name == class)
                .map(|a| (a.start, a.end))
                .collect();
            let labels = vec![label; intervals.len()];
            for &stream in config.modality.streams() {
                let features = match stream {
                    Stream::Rgb => &video.rgb,
                    Stream::Flow => &video.flow,
                };
                let mut rows = Array2::zeros((intervals.len(), features.ncols()));
                for (i, &(s, e)) in intervals.iter().enumerate() {
                    rows.row_mut(i).assign(&pool_proposal(features, s, e));
                }
                let rows_node = g.leaf(rows);
                let aligned = align_in(
                    &mut g,
                    &params,
                    &mut bindings,
                    &format!("align_{}", stream.name()),
                    rows_node,
                );
                let loss = loss_cls_in(&mut g, aligned, aligned_bank, &labels, config.tau);
                let weighted = g.scale(loss, labels.len() as f64);
                acc = Some(match acc {
                    Some(prev) => g.add(prev, weighted),
                    None => weighted,
                });
                count += labels.len();
            }
        }
        let Some(summed) = acc else { break };
        let loss = g.scale(summed, 1.0 / count.max(1) as f64);
        if g.scalar(loss).is_nan() {
            return Err(Error::runtime("few-shot adaptation loss is NaN"));
        }
        let grads = g.backward(loss);
        let mut updates: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (name, node) in bindings.iter() {
            let tunable = name.starts_with("offset/")
                || (config.adapt_prompt_module && name.starts_with("prompt_"));
            if !tunable {
                continue;
            }
            if let Some(grad) = grads.get(node) {
                updates.insert(name.to_string(), grad.clone());
            }
        }
        adam.step(&mut params, &updates, config.adapt_lr);
    }

    Ok(TrainedBundle {
        params,
        ..bundle.clone()
    })
}

/// Write the loss history as CSV (epoch, det, reg, cls, total).
pub fn save_history(path: &std::path::Path, history: &[LossBreakdown]) -> Result<()> {
    let mut out = String::from("epoch,det,reg,cls,total\n");
    for (epoch, row) in history.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            epoch, row.det, row.reg, row.cls, row.total
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Pooled-feature helper reexported for tests and diagnostics.
pub fn pooled_features(video: &VideoFeatures, stream: Stream) -> Array1<f64> {
    pooled_stream_features(video, stream)
}
