//! Model assembly and inference: parameter initialization, per-video
//! forward passes, classifier-bank dispatch, and proposal classification.
//!
//! Training (in [`crate::training`]) and the CLI both sit on top of these
//! helpers so that every stage shares one definition of the model.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::alignment::{align_values, class_probabilities, pool_proposal, retain_class};
use crate::classifiers::{
    bank_values, conditional_prompts_in, description_bank_in, init_prompt_params, name_bank_in,
    prompt_rows_per_stream, prompted_bank_in, CachedDescriptions, ClassifierBank,
};
use crate::config::{ClassifierMode, Config, FusionKind, Modality, NmsMode, Stream};
use crate::data::VideoFeatures;
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::localizer::{
    decode_proposals, init_head_params, predict_heads, soft_nms, FramePredictions, NmsDecay,
    Proposal,
};
use crate::params::{Bindings, ParamSet};
use crate::pyramid::{build_pyramid, AttentionMode, FeaturePyramid, PyramidConfig};

/// Feature widths of the two visual streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_rgb: usize,
    pub d_flow: usize,
}

impl ModelDims {
    pub fn of(&self, stream: Stream) -> usize {
        match stream {
            Stream::Rgb => self.d_rgb,
            Stream::Flow => self.d_flow,
        }
    }
}

/// Everything produced by training and needed for inference.
#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub params: ParamSet,
    pub encoder: TextEncoder,
    pub config: Config,
    pub dims: ModelDims,
    /// Base classes the run was trained on, in bank order.
    pub train_classes: Vec<String>,
    /// Training RNG stream position at the end of the run.
    pub rng_word_pos: u128,
}

pub fn pyramid_prefix(config: &Config, stream: Stream) -> String {
    if config.shared_pyramid {
        "pyramid_shared".to_string()
    } else {
        format!("pyramid_{}", stream.name())
    }
}

fn pyramid_config(config: &Config, dim: usize) -> PyramidConfig {
    PyramidConfig::new(config.levels, dim, config.pyramid_heads)
}

/// Initialize every parameter group the configuration calls for, including
/// a copy of the frozen encoder weights (updated only in end-to-end mode).
pub fn init_model_params(
    config: &Config,
    dims: &ModelDims,
    encoder: &TextEncoder,
) -> Result<ParamSet> {
    let mut params = ParamSet::new();
    let seed = config.seed;
    let streams = config.modality.streams();

    if config.shared_pyramid {
        if dims.d_rgb != dims.d_flow && config.modality == Modality::Both {
            return Err(Error::validation(format!(
                "shared pyramid requires matching stream dims, got rgb={} flow={}",
                dims.d_rgb, dims.d_flow
            )));
        }
        let dim = dims.of(streams[0]);
        pyramid_config(config, dim).init_params(&mut params, seed, "pyramid_shared");
    } else {
        for &stream in streams {
            let dim = dims.of(stream);
            pyramid_config(config, dim).init_params(
                &mut params,
                seed,
                &format!("pyramid_{}", stream.name()),
            );
        }
    }
    for &stream in streams {
        let dim = dims.of(stream);
        init_head_params(&mut params, seed, &format!("det_{}", stream.name()), dim, 1);
        init_head_params(&mut params, seed, &format!("reg_{}", stream.name()), dim, 2);
        crate::alignment::init_aligner_params(
            &mut params,
            seed,
            &format!("align_{}", stream.name()),
            dim,
            config.align_dim,
        );
    }
    crate::alignment::init_aligner_params(
        &mut params,
        seed,
        "align_text",
        config.d_text,
        config.align_dim,
    );

    match config.classifier_mode {
        ClassifierMode::NameOnly => {}
        ClassifierMode::Description => {
            if config.fusion == FusionKind::Weighted {
                params.init_zeros("fusion/weights", 1, 3);
            }
        }
        ClassifierMode::Conditional => {
            let per = prompt_rows_per_stream(config.prompt_len, streams.len())?;
            for &stream in streams {
                init_prompt_params(&mut params, seed, stream, dims.of(stream), config.d_text, per);
            }
        }
        ClassifierMode::RandomPrompt => {
            params.insert(
                "random_prompt/rows",
                crate::classifiers::random_prompt_baseline(
                    config.prompt_len,
                    config.d_text,
                    crate::params::derive_seed(seed, "random_prompt"),
                ),
            );
        }
    }

    for (name, value) in encoder.weights().iter() {
        params.insert(name, value.clone());
    }
    Ok(params)
}

/// Parameter names updated by the optimizer under this config.
pub fn is_trainable(config: &Config, name: &str) -> bool {
    if name.starts_with("encoder/") {
        config.end_to_end
    } else {
        true
    }
}

/// Level row counts, strides, and masks implied by a video length, without
/// running the model. Must agree with [`build_pyramid`].
pub fn level_shapes(
    total_rows: usize,
    valid_len: usize,
    levels: usize,
) -> (Vec<usize>, Vec<usize>, Vec<Vec<bool>>) {
    let mut lens = Vec::with_capacity(levels);
    let mut strides = Vec::with_capacity(levels);
    let mut masks = Vec::with_capacity(levels);
    let mut mask: Vec<bool> = (0..total_rows).map(|i| i < valid_len).collect();
    let mut len = total_rows;
    for level in 0..levels {
        len /= 2;
        mask = (0..len).map(|k| mask[2 * k] && mask[2 * k + 1]).collect();
        lens.push(len);
        strides.push(1 << (level + 1));
        masks.push(mask.clone());
    }
    (lens, strides, masks)
}

/// One stream's forward state.
pub struct StreamForward {
    pub stream: Stream,
    pub pyramid: FeaturePyramid,
    pub preds: FramePredictions,
}

/// Forward pass of every configured stream for one video.
pub fn video_forward(
    g: &mut Graph,
    params: &ParamSet,
    bindings: &mut Bindings,
    video: &VideoFeatures,
    config: &Config,
    mode: AttentionMode,
) -> Result<Vec<StreamForward>> {
    let valid: Vec<bool> = (0..video.num_snippets())
        .map(|i| i < video.valid_len)
        .collect();
    let mut out = Vec::new();
    for &stream in config.modality.streams() {
        let features = match stream {
            Stream::Rgb => &video.rgb,
            Stream::Flow => &video.flow,
        };
        let input = g.leaf(features.clone());
        let prefix = pyramid_prefix(config, stream);
        let pyr_config = pyramid_config(config, features.ncols());
        let pyramid = build_pyramid(g, input, &valid, &pyr_config, params, bindings, &prefix, mode)
            .map_err(|e| Error::validation(format!("video {}: {e}", video.video_id)))?;
        let preds = predict_heads(
            g,
            &pyramid,
            params,
            bindings,
            &format!("det_{}", stream.name()),
            &format!("reg_{}", stream.name()),
        );
        out.push(StreamForward {
            stream,
            pyramid,
            preds,
        });
    }
    Ok(out)
}

/// Late fusion for inference: average actionness and offsets elementwise
/// across streams, per level.
pub fn fused_prediction_values(
    g: &Graph,
    streams: &[StreamForward],
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let levels = streams[0].preds.actionness.len();
    let mut actionness = Vec::with_capacity(levels);
    let mut offsets = Vec::with_capacity(levels);
    for level in 0..levels {
        let mut act: Array2<f64> = g.value(streams[0].preds.actionness[level]).clone();
        let mut off: Array2<f64> = g.value(streams[0].preds.offsets[level]).clone();
        for sf in &streams[1..] {
            act += g.value(sf.preds.actionness[level]);
            off += g.value(sf.preds.offsets[level]);
        }
        let n = streams.len() as f64;
        actionness.push(act / n);
        offsets.push(off / n);
    }
    (actionness, offsets)
}

/// Mean of the valid feature rows: the prompt module's pooled input.
pub fn pooled_stream_features(video: &VideoFeatures, stream: Stream) -> Array1<f64> {
    let features = match stream {
        Stream::Rgb => &video.rgb,
        Stream::Flow => &video.flow,
    };
    let rows = video.valid_len.max(1);
    let mut acc = Array1::zeros(features.ncols());
    for row in 0..rows {
        acc += &features.row(row);
    }
    acc / rows as f64
}

/// Static inputs for bank construction.
pub struct BankInputs<'a> {
    pub encoder: &'a TextEncoder,
    pub config: &'a Config,
    pub descriptions: Option<&'a CachedDescriptions>,
}

/// Bind the encoder weights as graph leaves (end-to-end mode only).
pub fn encoder_weight_nodes(
    g: &mut Graph,
    params: &ParamSet,
    bindings: &mut Bindings,
    config: &Config,
) -> Option<BTreeMap<String, NodeId>> {
    if !config.end_to_end {
        return None;
    }
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("encoder/"))
        .map(|n| n.to_string())
        .collect();
    let mut map = BTreeMap::new();
    for name in names {
        let node = bindings.bind(g, params, &name);
        map.insert(name, node);
    }
    Some(map)
}

/// Build the classifier bank for `classes` under the configured mode.
///
/// Conditional mode needs the video whose features condition the prompts;
/// `use_offsets` additionally applies any trained per-class prompt offsets
/// (few-shot adaptation).
pub fn bank_in(
    g: &mut Graph,
    params: &ParamSet,
    bindings: &mut Bindings,
    inputs: &BankInputs,
    classes: &[String],
    video: Option<&VideoFeatures>,
    use_offsets: bool,
) -> Result<NodeId> {
    let enc_nodes = encoder_weight_nodes(g, params, bindings, inputs.config);
    let enc_nodes_ref = enc_nodes.as_ref();
    match inputs.config.classifier_mode {
        ClassifierMode::NameOnly => name_bank_in(g, inputs.encoder, classes, enc_nodes_ref),
        ClassifierMode::Description => {
            let source = inputs.descriptions.ok_or_else(|| {
                Error::validation("description classifier mode requires a descriptions file")
            })?;
            let missing = source.missing(classes);
            if !missing.is_empty() && !source.allow_fallback {
                return Err(Error::validation(format!(
                    "descriptions missing for classes: {}",
                    missing.join(", ")
                )));
            }
            let weights = if inputs.config.fusion == FusionKind::Weighted {
                let raw = bindings.bind(g, params, "fusion/weights");
                Some(g.softmax_rows(raw))
            } else {
                None
            };
            description_bank_in(
                g,
                inputs.encoder,
                source,
                classes,
                inputs.config.fusion,
                weights,
                enc_nodes_ref,
            )
        }
        ClassifierMode::Conditional => {
            let video = video.ok_or_else(|| {
                Error::runtime("conditional classifier mode needs a video to condition on")
            })?;
            let streams = inputs.config.modality.streams();
            let mut pooled = Vec::with_capacity(streams.len());
            for &stream in streams {
                let vec = pooled_stream_features(video, stream);
                let node = g.leaf(vec.insert_axis(ndarray::Axis(0)));
                pooled.push((stream, node));
            }
            let prompts = conditional_prompts_in(
                g,
                params,
                bindings,
                &pooled,
                inputs.config.prompt_len,
                inputs.config.d_text,
            )?;
            let offsets = if use_offsets {
                let mut map = BTreeMap::new();
                for class in classes {
                    let name = format!("offset/{class}");
                    if params.contains(&name) {
                        map.insert(class.clone(), bindings.bind(g, params, &name));
                    }
                }
                Some(map)
            } else {
                None
            };
            prompted_bank_in(
                g,
                inputs.encoder,
                classes,
                prompts,
                inputs.config.prompt_position,
                offsets.as_ref(),
                enc_nodes_ref,
            )
        }
        ClassifierMode::RandomPrompt => {
            let prompts = bindings.bind(g, params, "random_prompt/rows");
            prompted_bank_in(
                g,
                inputs.encoder,
                classes,
                prompts,
                inputs.config.prompt_position,
                None,
                enc_nodes_ref,
            )
        }
    }
}

/// Build the bank once when it does not depend on the video.
pub fn build_shared_bank(
    params: &ParamSet,
    inputs: &BankInputs,
    classes: &[String],
) -> Result<Option<ClassifierBank>> {
    if inputs.config.classifier_mode == ClassifierMode::Conditional {
        return Ok(None);
    }
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let node = bank_in(&mut g, params, &mut bindings, inputs, classes, None, false)?;
    Ok(Some(bank_values(
        &g,
        node,
        classes,
        inputs.config.classifier_mode,
    )))
}

pub fn nms_decay(config: &Config) -> NmsDecay {
    match config.nms_mode {
        NmsMode::Linear => NmsDecay::Linear {
            iou_threshold: config.nms_iou,
        },
        NmsMode::Gaussian => NmsDecay::Gaussian {
            sigma: config.nms_sigma,
        },
        NmsMode::Hard => NmsDecay::Hard {
            iou_threshold: config.nms_iou,
        },
    }
}

/// Localize and classify one video.
///
/// Returns proposals that survived soft-NMS and the class-retention
/// threshold, each scored by `actionness * class probability`, sorted by
/// score descending.
pub fn infer_video(
    bundle: &TrainedBundle,
    video: &VideoFeatures,
    classes: &[String],
    descriptions: Option<&CachedDescriptions>,
    shared_bank: Option<&ClassifierBank>,
) -> Result<Vec<Proposal>> {
    let config = &bundle.config;
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let streams = video_forward(
        &mut g,
        &bundle.params,
        &mut bindings,
        video,
        config,
        AttentionMode::Standard,
    )?;
    let (actionness, offsets) = fused_prediction_values(&g, &streams);
    let masks: Vec<Vec<bool>> = streams[0].pyramid.masks.clone();
    let strides = streams[0].pyramid.strides.clone();
    let raw = decode_proposals(
        &actionness,
        &offsets,
        &masks,
        &strides,
        config.theta_loc,
        video.valid_len,
    );
    let survivors = soft_nms(&raw, nms_decay(config));
    if survivors.is_empty() {
        return Ok(Vec::new());
    }

    let bank = match shared_bank {
        Some(bank) => bank.clone(),
        None => {
            let inputs = BankInputs {
                encoder: &bundle.encoder,
                config,
                descriptions,
            };
            let node = bank_in(
                &mut g,
                &bundle.params,
                &mut bindings,
                &inputs,
                classes,
                Some(video),
                true,
            )?;
            bank_values(&g, node, classes, config.classifier_mode)
        }
    };
    let aligned_bank = align_values(&bundle.params, "align_text", &bank.embeddings);

    let mut per_stream = Vec::new();
    for &stream in config.modality.streams() {
        let features = match stream {
            Stream::Rgb => &video.rgb,
            Stream::Flow => &video.flow,
        };
        let mut rows = Array2::zeros((survivors.len(), features.ncols()));
        for (i, p) in survivors.iter().enumerate() {
            rows.row_mut(i)
                .assign(&pool_proposal(features, p.start, p.end));
        }
        per_stream.push(align_values(
            &bundle.params,
            &format!("align_{}", stream.name()),
            &rows,
        ));
    }
    let probs = class_probabilities(&per_stream, &aligned_bank, config.tau);

    let mut classified = Vec::new();
    for (i, proposal) in survivors.iter().enumerate() {
        let row: Vec<f64> = probs.row(i).to_vec();
        if let Some((class_idx, prob)) = retain_class(&row, config.theta_cls) {
            let mut p = proposal.clone();
            p.class_name = Some(classes[class_idx].clone());
            p.class_probs = Some(row);
            p.score = proposal.score * prob;
            classified.push(p);
        }
    }
    classified.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.start.partial_cmp(&b.start).unwrap())
            .then(a.end.partial_cmp(&b.end).unwrap())
    });
    Ok(classified)
}

/// One row of `predictions.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub class: String,
    pub score: f64,
}

/// Run inference over a set of videos against a class list.
pub fn run_inference(
    bundle: &TrainedBundle,
    videos: &[VideoFeatures],
    classes: &[String],
    descriptions: Option<&CachedDescriptions>,
) -> Result<Vec<PredictionRecord>> {
    let inputs = BankInputs {
        encoder: &bundle.encoder,
        config: &bundle.config,
        descriptions,
    };
    let shared_bank = build_shared_bank(&bundle.params, &inputs, classes)?;
    let mut records = Vec::new();
    for video in videos {
        let proposals = infer_video(bundle, video, classes, descriptions, shared_bank.as_ref())?;
        for p in proposals {
            records.push(PredictionRecord {
                video_id: video.video_id.clone(),
                start: p.start,
                end: p.end,
                class: p.class_name.expect("classified proposal has a class"),
                score: p.score,
            });
        }
    }
    Ok(records)
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).expect("predictions serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_shapes_match_pyramid_contract() {
        let (lens, strides, masks) = level_shapes(192, 192, 6);
        assert_eq!(lens, vec![96, 48, 24, 12, 6, 3]);
        assert_eq!(strides, vec![2, 4, 8, 16, 32, 64]);
        assert!(masks.iter().all(|m| m.iter().all(|&v| v)));
    }

    #[test]
    fn level_shapes_mask_padding() {
        // 10 valid rows padded to 16: level 0 has 8 frames, frames 5..8
        // cover padded input rows
        let (lens, _, masks) = level_shapes(16, 10, 2);
        assert_eq!(lens, vec![8, 4]);
        assert_eq!(
            masks[0],
            vec![true, true, true, true, true, false, false, false]
        );
        assert_eq!(masks[1], vec![true, true, false, false]);
    }
}
