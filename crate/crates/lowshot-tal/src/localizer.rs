//! Category-agnostic localization: actionness/offset heads over the
//! pyramid, ground-truth assignment, proposal decoding, and soft-NMS.
//!
//! All segment arithmetic is in snippet units with half-open intervals
//! `[start, end)`. Offsets are regressed in units of the level stride.

use ndarray::Array2;

use crate::data::ActionInstance;
use crate::graph::{Graph, NodeId};
use crate::params::{Bindings, ParamSet};
use crate::pyramid::FeaturePyramid;

/// A scored temporal segment, optionally classified.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub class_name: Option<String>,
    pub class_probs: Option<Vec<f64>>,
}

impl Proposal {
    pub fn new(start: f64, end: f64, score: f64) -> Self {
        Proposal {
            start,
            end,
            score,
            class_name: None,
            class_probs: None,
        }
    }

    pub fn segment(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Intersection over union of two half-open 1-D segments.
pub fn segment_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Conv-head parameters: two kernel-3 conv layers, shared across levels.
pub fn init_head_params(params: &mut ParamSet, seed: u64, prefix: &str, dim: usize, out: usize) {
    let std = 1.0 / (3.0 * dim as f64).sqrt();
    params.init_gaussian(seed, &format!("{prefix}/conv1_w"), 3 * dim, dim, std);
    params.init_zeros(&format!("{prefix}/conv1_b"), 1, dim);
    params.init_gaussian(seed, &format!("{prefix}/conv2_w"), 3 * dim, out, std);
    params.init_zeros(&format!("{prefix}/conv2_b"), 1, out);
}

/// Per-level frame predictions: actionness in `[0,1]`, offsets `>= 0`.
#[derive(Debug, Clone)]
pub struct FramePredictions {
    /// Per level: `T_i x 1` sigmoid outputs.
    pub actionness: Vec<NodeId>,
    /// Per level: `T_i x 2` softplus outputs, (left, right) in stride units.
    pub offsets: Vec<NodeId>,
}

fn conv_head(
    g: &mut Graph,
    x: NodeId,
    params: &ParamSet,
    bindings: &mut Bindings,
    prefix: &str,
) -> NodeId {
    let w1 = bindings.bind(g, params, &format!("{prefix}/conv1_w"));
    let b1 = bindings.bind(g, params, &format!("{prefix}/conv1_b"));
    let w2 = bindings.bind(g, params, &format!("{prefix}/conv2_w"));
    let b2 = bindings.bind(g, params, &format!("{prefix}/conv2_b"));
    let h = g.conv1d_same(x, w1, b1, 3);
    let h = g.gelu(h);
    g.conv1d_same(h, w2, b2, 3)
}

/// Run the detector and regressor over every pyramid level.
pub fn predict_heads(
    g: &mut Graph,
    pyramid: &FeaturePyramid,
    params: &ParamSet,
    bindings: &mut Bindings,
    det_prefix: &str,
    reg_prefix: &str,
) -> FramePredictions {
    let mut actionness = Vec::with_capacity(pyramid.levels.len());
    let mut offsets = Vec::with_capacity(pyramid.levels.len());
    for &level in &pyramid.levels {
        let logits = conv_head(g, level, params, bindings, det_prefix);
        actionness.push(g.sigmoid(logits));
        let raw = conv_head(g, level, params, bindings, reg_prefix);
        offsets.push(g.softplus(raw));
    }
    FramePredictions {
        actionness,
        offsets,
    }
}

/// Ground-truth assignment for one level.
#[derive(Debug, Clone, Default)]
pub struct LevelTargets {
    /// Frame indices with a matched instance.
    pub positives: Vec<usize>,
    /// All other valid frame indices.
    pub negatives: Vec<usize>,
    /// Per positive frame: (left, right) regression targets in stride units.
    pub offsets: Vec<(f64, f64)>,
}

/// Assignment across all levels; positives and negatives partition the
/// valid frames of each level.
#[derive(Debug, Clone)]
pub struct TargetAssignment {
    pub levels: Vec<LevelTargets>,
}

impl TargetAssignment {
    pub fn positive_count(&self) -> usize {
        self.levels.iter().map(|l| l.positives.len()).sum()
    }

    pub fn negative_count(&self) -> usize {
        self.levels.iter().map(|l| l.negatives.len()).sum()
    }
}

/// Map each instance to the level whose length range covers it.
///
/// Ranges grow as `(range_base * 2^i, range_base * 2^(i+1)]` with the last
/// level open-ended. Returns a 0-based level index.
pub fn level_for_length(length: f64, levels: usize, range_base: f64) -> usize {
    for idx in 0..levels.saturating_sub(1) {
        if length <= range_base * (1 << (idx + 1)) as f64 {
            return idx;
        }
    }
    levels - 1
}

/// Assign instances to levels and frames.
///
/// A frame is positive when its center lies inside an instance assigned to
/// that level; contested frames go to the instance with the nearest center.
/// An instance whose level has no covered center falls back to the nearest
/// free frame so it is never dropped; fallback regression targets are
/// floored at a small positive value.
pub fn assign_targets(
    annotations: &[ActionInstance],
    level_lens: &[usize],
    strides: &[usize],
    masks: &[Vec<bool>],
    range_base: f64,
) -> TargetAssignment {
    const MIN_TARGET: f64 = 0.05;
    let num_levels = level_lens.len();
    // owner[level][frame] = index into annotations
    let mut owner: Vec<Vec<Option<usize>>> =
        level_lens.iter().map(|&len| vec![None; len]).collect();

    let level_of: Vec<usize> = annotations
        .iter()
        .map(|a| level_for_length(a.length(), num_levels, range_base))
        .collect();

    for (level, owner_row) in owner.iter_mut().enumerate() {
        let stride = strides[level] as f64;
        for (frame, slot) in owner_row.iter_mut().enumerate() {
            if !masks[level][frame] {
                continue;
            }
            let center = (frame as f64 + 0.5) * stride;
            let mut best: Option<(f64, usize)> = None;
            for (idx, ann) in annotations.iter().enumerate() {
                if level_of[idx] != level {
                    continue;
                }
                if center >= ann.start && center < ann.end {
                    let dist = (center - (ann.start + ann.end) / 2.0).abs();
                    if best.map_or(true, |(d, _)| dist < d) {
                        best = Some((dist, idx));
                    }
                }
            }
            *slot = best.map(|(_, idx)| idx);
        }
    }

    // Fallback: instances that cover no frame center claim the nearest
    // free frame on their level.
    for (idx, ann) in annotations.iter().enumerate() {
        let level = level_of[idx];
        if owner[level].iter().any(|o| *o == Some(idx)) {
            continue;
        }
        let stride = strides[level] as f64;
        let ann_center = (ann.start + ann.end) / 2.0;
        let mut candidates: Vec<usize> = (0..level_lens[level])
            .filter(|&f| masks[level][f])
            .collect();
        candidates.sort_by(|&a, &b| {
            let da = ((a as f64 + 0.5) * stride - ann_center).abs();
            let db = ((b as f64 + 0.5) * stride - ann_center).abs();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        if let Some(&frame) = candidates.iter().find(|&&f| owner[level][f].is_none()) {
            owner[level][frame] = Some(idx);
        } else if let Some(&frame) = candidates.first() {
            owner[level][frame] = Some(idx);
        }
    }

    let levels = owner
        .iter()
        .enumerate()
        .map(|(level, owner_row)| {
            let stride = strides[level] as f64;
            let mut targets = LevelTargets::default();
            for (frame, slot) in owner_row.iter().enumerate() {
                if !masks[level][frame] {
                    continue;
                }
                match slot {
                    Some(idx) => {
                        let ann = &annotations[*idx];
                        let center = (frame as f64 + 0.5) * stride;
                        let left = ((center - ann.start) / stride).max(MIN_TARGET);
                        let right = ((ann.end - center) / stride).max(MIN_TARGET);
                        targets.positives.push(frame);
                        targets.offsets.push((left, right));
                    }
                    None => targets.negatives.push(frame),
                }
            }
            targets
        })
        .collect();
    TargetAssignment { levels }
}

/// Threshold, group, and refine frame predictions into proposals.
///
/// Frames with actionness >= `theta_loc` form maximal consecutive runs per
/// level; each run is anchored at its peak frame whose offsets set the
/// boundaries. Proposals from all levels are pooled into one list.
pub fn decode_proposals(
    actionness: &[Array2<f64>],
    offsets: &[Array2<f64>],
    masks: &[Vec<bool>],
    strides: &[usize],
    theta_loc: f64,
    total_snippets: usize,
) -> Vec<Proposal> {
    let t_max = total_snippets as f64;
    let mut proposals = Vec::new();
    for (level, (scores, offs)) in actionness.iter().zip(offsets).enumerate() {
        let stride = strides[level] as f64;
        let len = scores.nrows();
        let passing = |f: usize| masks[level][f] && scores[[f, 0]] >= theta_loc;
        let mut frame = 0;
        while frame < len {
            if !passing(frame) {
                frame += 1;
                continue;
            }
            let run_start = frame;
            while frame < len && passing(frame) {
                frame += 1;
            }
            // anchor at the peak frame of the run (earliest on ties)
            let mut peak = run_start;
            for f in run_start..frame {
                if scores[[f, 0]] > scores[[peak, 0]] {
                    peak = f;
                }
            }
            let center = (peak as f64 + 0.5) * stride;
            let start = (center - offs[[peak, 0]] * stride).max(0.0);
            let end = (center + offs[[peak, 1]] * stride).min(t_max);
            if end > start {
                proposals.push(Proposal::new(start, end, scores[[peak, 0]]));
            }
        }
    }
    proposals
}

/// Soft-NMS decay rule (see [`crate::config::NmsMode`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NmsDecay {
    Linear { iou_threshold: f64 },
    Gaussian { sigma: f64 },
    Hard { iou_threshold: f64 },
}

const NMS_DROP_BELOW: f64 = 1e-4;

/// Iterative soft non-maximum suppression.
///
/// Selects the highest-scoring remaining proposal, decays the rest by
/// overlap, and drops anything whose score falls below 1e-4. Deterministic:
/// score ties break by (start, end, insertion index) and the output is
/// sorted by final score descending with the same tie-break.
pub fn soft_nms(proposals: &[Proposal], decay: NmsDecay) -> Vec<Proposal> {
    #[derive(Clone)]
    struct Entry {
        proposal: Proposal,
        score: f64,
        index: usize,
    }
    let ordering = |a: &Entry, b: &Entry| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.proposal.start.partial_cmp(&b.proposal.start).unwrap())
            .then(a.proposal.end.partial_cmp(&b.proposal.end).unwrap())
            .then(a.index.cmp(&b.index))
    };

    let mut remaining: Vec<Entry> = proposals
        .iter()
        .enumerate()
        .map(|(index, p)| Entry {
            proposal: p.clone(),
            score: p.score,
            index,
        })
        .collect();
    let mut kept: Vec<Entry> = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let best = remaining
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| ordering(a, b))
            .map(|(i, _)| i)
            .unwrap();
        let selected = remaining.swap_remove(best);
        for entry in &mut remaining {
            let iou = segment_iou(selected.proposal.segment(), entry.proposal.segment());
            let factor = match decay {
                NmsDecay::Linear { iou_threshold } => {
                    if iou > iou_threshold {
                        1.0 - iou
                    } else {
                        1.0
                    }
                }
                NmsDecay::Gaussian { sigma } => (-iou * iou / sigma).exp(),
                NmsDecay::Hard { iou_threshold } => {
                    if iou > iou_threshold {
                        0.0
                    } else {
                        1.0
                    }
                }
            };
            entry.score *= factor;
        }
        remaining.retain(|e| e.score >= NMS_DROP_BELOW);
        kept.push(selected);
    }
    kept.sort_by(ordering);
    kept.into_iter()
        .map(|e| Proposal {
            score: e.score,
            ..e.proposal
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iou_basics() {
        assert!((segment_iou((0.0, 10.0), (5.0, 15.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            segment_iou((0.0, 10.0), (5.0, 15.0)),
            segment_iou((5.0, 15.0), (0.0, 10.0))
        );
        assert_eq!(segment_iou((2.0, 4.0), (2.0, 4.0)), 1.0);
        assert_eq!(segment_iou((0.0, 1.0), (5.0, 6.0)), 0.0);
    }

    fn head_setup(levels: usize, t: usize, dim: usize, zero_weights: bool) -> (Graph, FramePredictions) {
        use crate::pyramid::{build_pyramid, AttentionMode, PyramidConfig};
        let config = PyramidConfig::new(levels, dim, 4);
        let mut params = ParamSet::new();
        config.init_params(&mut params, 3, "pyr");
        init_head_params(&mut params, 4, "det", dim, 1);
        init_head_params(&mut params, 5, "reg", dim, 2);
        if zero_weights {
            for name in ["det/conv1_w", "det/conv2_w", "reg/conv1_w", "reg/conv2_w"] {
                let w = params.get_mut(name);
                w.fill(0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let feats = Array2::from_shape_fn((t, dim), |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let input = g.leaf(feats);
        let mut bindings = Bindings::new();
        let pyr = build_pyramid(
            &mut g,
            input,
            &vec![true; t],
            &config,
            &params,
            &mut bindings,
            "pyr",
            AttentionMode::Standard,
        )
        .unwrap();
        let preds = predict_heads(&mut g, &pyr, &params, &mut bindings, "det", "reg");
        (g, preds)
    }

    #[test]
    fn head_outputs_respect_ranges() {
        let (g, preds) = head_setup(2, 16, 8, false);
        for &a in &preds.actionness {
            for &v in g.value(a).iter() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
        for &o in &preds.offsets {
            for &v in g.value(o).iter() {
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn zero_weights_give_half_actionness_and_ln2_offsets() {
        let (g, preds) = head_setup(2, 16, 8, true);
        for &a in &preds.actionness {
            for &v in g.value(a).iter() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
        let ln2 = std::f64::consts::LN_2;
        for &o in &preds.offsets {
            for &v in g.value(o).iter() {
                assert!((v - ln2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn level_assignment_follows_range_table() {
        // lengths fall into (4*2^i, 4*2^(i+1)]; 0-based levels
        assert_eq!(level_for_length(6.0, 6, 4.0), 0); // 6 <= 8
        assert_eq!(level_for_length(8.0, 6, 4.0), 0);
        assert_eq!(level_for_length(9.0, 6, 4.0), 1);
        assert_eq!(level_for_length(100.0, 6, 4.0), 4); // 64 < 100 <= 128
        assert_eq!(level_for_length(1000.0, 6, 4.0), 5); // open-ended last
    }

    fn masks_for(lens: &[usize]) -> Vec<Vec<bool>> {
        lens.iter().map(|&l| vec![true; l]).collect()
    }

    #[test]
    fn hand_traced_assignment_on_level_zero() {
        // instance [10,14), level 0 stride 2: centers 11 and 13 inside
        let anns = vec![ActionInstance::new(10.0, 14.0, "a").unwrap()];
        let lens = vec![16usize, 8];
        let assignment = assign_targets(&anns, &lens, &[2, 4], &masks_for(&lens), 4.0);
        let level0 = &assignment.levels[0];
        assert_eq!(level0.positives, vec![5, 6]);
        assert_eq!(level0.offsets[0], (0.5, 1.5));
        assert_eq!(level0.offsets[1], (1.5, 0.5));
        assert!(assignment.levels[1].positives.is_empty());
    }

    #[test]
    fn assignment_partitions_every_level() {
        let anns = vec![
            ActionInstance::new(2.0, 9.0, "a").unwrap(),
            ActionInstance::new(20.0, 52.0, "b").unwrap(),
        ];
        let lens = vec![32usize, 16, 8];
        let masks = masks_for(&lens);
        let assignment = assign_targets(&anns, &lens, &[2, 4, 8], &masks, 4.0);
        for (level, targets) in assignment.levels.iter().enumerate() {
            let mut seen = vec![false; lens[level]];
            for &f in targets.positives.iter().chain(&targets.negatives) {
                assert!(!seen[f], "frame {f} appears twice on level {level}");
                seen[f] = true;
            }
            assert!(seen.iter().all(|&s| s), "level {level} frames not covered");
        }
        assert!(assignment.positive_count() > 0);
    }

    #[test]
    fn tiny_instance_falls_back_to_nearest_frame() {
        // [0, 0.5) covers no level-0 frame center (0.5 is excluded by the
        // half-open interval), so the fallback must claim frame 0.
        let anns = vec![ActionInstance::new(0.0, 0.5, "a").unwrap()];
        let lens = vec![8usize];
        let assignment = assign_targets(&anns, &lens, &[2], &masks_for(&lens), 4.0);
        assert_eq!(assignment.levels[0].positives, vec![0]);
        let (left, right) = assignment.levels[0].offsets[0];
        assert!(left > 0.0 && right > 0.0);
    }

    #[test]
    fn decode_hand_trace() {
        let actionness = vec![Array2::from_shape_vec((4, 1), vec![0.1, 0.9, 0.95, 0.2]).unwrap()];
        let mut offsets = Array2::zeros((4, 2));
        offsets[[2, 0]] = 1.5;
        offsets[[2, 1]] = 0.5;
        let proposals = decode_proposals(
            &actionness,
            &[offsets],
            &[vec![true; 4]],
            &[2],
            0.5,
            8,
        );
        assert_eq!(proposals.len(), 1);
        let p = &proposals[0];
        // peak at frame 2, center 5: [5-3, 5+1)
        assert!((p.start - 2.0).abs() < 1e-12);
        assert!((p.end - 6.0).abs() < 1e-12);
        assert!((p.score - 0.95).abs() < 1e-12);
    }

    #[test]
    fn decode_below_threshold_is_empty() {
        let actionness = vec![Array2::from_elem((6, 1), 0.3)];
        let offsets = vec![Array2::from_elem((6, 2), 1.0)];
        let proposals =
            decode_proposals(&actionness, &offsets, &[vec![true; 6]], &[2], 0.5, 12);
        assert!(proposals.is_empty());
    }

    #[test]
    fn decode_two_runs_two_proposals() {
        let scores = vec![0.9, 0.1, 0.1, 0.8, 0.85, 0.1];
        let actionness = vec![Array2::from_shape_vec((6, 1), scores).unwrap()];
        let offsets = vec![Array2::from_elem((6, 2), 0.5)];
        let proposals =
            decode_proposals(&actionness, &offsets, &[vec![true; 6]], &[2], 0.5, 12);
        assert_eq!(proposals.len(), 2);
    }

    #[test]
    fn soft_nms_full_overlap_drops_duplicate() {
        let a = Proposal::new(0.0, 10.0, 0.9);
        let b = Proposal::new(0.0, 10.0, 0.8);
        let out = soft_nms(&[a, b], NmsDecay::Linear { iou_threshold: 0.5 });
        assert_eq!(out.len(), 1);
        assert!((out[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn soft_nms_below_threshold_untouched() {
        let a = Proposal::new(0.0, 10.0, 0.9);
        let b = Proposal::new(5.0, 15.0, 0.8); // IoU = 1/3 <= 0.5
        let out = soft_nms(&[a, b], NmsDecay::Linear { iou_threshold: 0.5 });
        assert_eq!(out.len(), 2);
        assert!((out[1].score - 0.8).abs() < 1e-12);
    }

    /// Greedy hard-NMS oracle for the all-or-nothing decay limit.
    fn hard_nms_oracle(proposals: &[Proposal], iou_threshold: f64) -> Vec<(f64, f64)> {
        let mut rest: Vec<&Proposal> = proposals.iter().collect();
        rest.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.start.partial_cmp(&b.start).unwrap())
        });
        let mut kept: Vec<(f64, f64)> = Vec::new();
        'outer: for p in rest {
            for &k in &kept {
                if segment_iou(k, p.segment()) > iou_threshold {
                    continue 'outer;
                }
            }
            kept.push(p.segment());
        }
        kept
    }

    #[test]
    fn hard_decay_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(1..=10);
            let proposals: Vec<Proposal> = (0..n)
                .map(|_| {
                    let start = rng.gen_range(0.0..50.0);
                    let len = rng.gen_range(1.0..20.0);
                    Proposal::new(start, start + len, rng.gen_range(0.01..1.0))
                })
                .collect();
            let thr = rng.gen_range(0.1..0.9);
            let ours: Vec<(f64, f64)> = soft_nms(&proposals, NmsDecay::Hard { iou_threshold: thr })
                .into_iter()
                .map(|p| p.segment())
                .collect();
            let mut ours_sorted = ours.clone();
            ours_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut oracle = hard_nms_oracle(&proposals, thr);
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(ours_sorted, oracle);
        }
    }

    #[test]
    fn soft_nms_ties_break_deterministically() {
        let a = Proposal::new(4.0, 8.0, 0.7);
        let b = Proposal::new(0.0, 3.0, 0.7);
        let out = soft_nms(&[a, b], NmsDecay::Linear { iou_threshold: 0.5 });
        assert!((out[0].start, out[0].end) == (0.0, 3.0));
        assert!((out[1].start, out[1].end) == (4.0, 8.0));
    }

    proptest! {
        #[test]
        fn soft_nms_never_increases_scores(
            segs in proptest::collection::vec((0.0f64..40.0, 1.0f64..15.0, 0.01f64..1.0), 1..10),
            thr in 0.1f64..0.9,
        ) {
            let proposals: Vec<Proposal> = segs
                .iter()
                .map(|&(s, len, score)| Proposal::new(s, s + len, score))
                .collect();
            let out = soft_nms(&proposals, NmsDecay::Linear { iou_threshold: thr });
            prop_assert!(out.len() <= proposals.len());
            // every output is an input segment whose score did not grow
            for p in &out {
                let original = proposals
                    .iter()
                    .find(|q| q.start == p.start && q.end == p.end && q.score >= p.score - 1e-12);
                prop_assert!(original.is_some());
            }
        }

        #[test]
        fn iou_is_symmetric_and_bounded(
            a0 in 0.0f64..50.0, al in 0.5f64..20.0,
            b0 in 0.0f64..50.0, bl in 0.5f64..20.0,
        ) {
            let a = (a0, a0 + al);
            let b = (b0, b0 + bl);
            let ab = segment_iou(a, b);
            prop_assert!((ab - segment_iou(b, a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
