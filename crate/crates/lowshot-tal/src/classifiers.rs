//! Open-vocabulary classifier construction.
//!
//! A classifier bank is a CxD_text matrix of per-category text embeddings,
//! produced by one of four recipes: encoding the bare category name,
//! encoding and fusing three attribute descriptions, wrapping the name
//! tokens in vision-conditional prompt vectors, or wrapping them in
//! learnable video-independent prompt vectors. Banks are built inside a
//! [`Graph`] so gradients can reach prompt modules, fusion weights, and
//! few-shot offsets through the frozen text encoder.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::config::{ClassifierMode, FusionKind, PromptPosition, Stream};
use crate::data::ClassDescription;
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{gaussian_matrix, Bindings, ParamSet};

const NORM_EPS: f64 = 1e-12;

/// The three attribute question templates, with `[X]` substituted verbatim.
pub fn render_attribute_prompts(class_name: &str) -> Result<[String; 3]> {
    if class_name.is_empty() {
        return Err(Error::validation("class name is empty"));
    }
    Ok([
        format!("what tools are needed for {class_name}?"),
        format!("where {class_name} usually takes place?"),
        format!("how to decompose steps for {class_name}?"),
    ])
}

/// Attribute axis of a description query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    What,
    Where,
    How,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::What, Attribute::Where, Attribute::How];

    pub fn template(&self, class_name: &str) -> Result<String> {
        let rendered = render_attribute_prompts(class_name)?;
        Ok(match self {
            Attribute::What => rendered[0].clone(),
            Attribute::Where => rendered[1].clone(),
            Attribute::How => rendered[2].clone(),
        })
    }
}

/// Source of attribute answers. Implementations may call a live language
/// model; the shipped one reads a descriptions file.
pub trait DescriptionSource {
    fn describe(&self, class_name: &str, attribute: Attribute) -> Result<String>;
}

/// File-backed description cache with an optional name-based fallback.
#[derive(Debug, Clone, Default)]
pub struct CachedDescriptions {
    entries: BTreeMap<String, ClassDescription>,
    /// When set, missing classes fall back to "a video of {class}".
    pub allow_fallback: bool,
}

impl CachedDescriptions {
    pub fn new(entries: BTreeMap<String, ClassDescription>) -> Self {
        CachedDescriptions {
            entries,
            allow_fallback: false,
        }
    }

    /// Classes from `classes` that have no cache entry.
    pub fn missing<'a>(&self, classes: &'a [String]) -> Vec<&'a str> {
        classes
            .iter()
            .filter(|c| !self.entries.contains_key(*c))
            .map(|c| c.as_str())
            .collect()
    }
}

impl DescriptionSource for CachedDescriptions {
    fn describe(&self, class_name: &str, attribute: Attribute) -> Result<String> {
        match self.entries.get(class_name) {
            Some(entry) => Ok(match attribute {
                Attribute::What => entry.what.clone(),
                Attribute::Where => entry.where_.clone(),
                Attribute::How => entry.how.clone(),
            }),
            None if self.allow_fallback => Ok(format!("a video of {class_name}")),
            None => Err(Error::validation(format!(
                "no description cached for class {class_name}"
            ))),
        }
    }
}

/// A realized classifier bank: unit rows, one per class.
#[derive(Debug, Clone)]
pub struct ClassifierBank {
    pub embeddings: Array2<f64>,
    pub class_names: Vec<String>,
    pub mode: ClassifierMode,
}

impl ClassifierBank {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

/// Snapshot a bank node's values.
pub fn bank_values(
    g: &Graph,
    node: NodeId,
    classes: &[String],
    mode: ClassifierMode,
) -> ClassifierBank {
    ClassifierBank {
        embeddings: g.value(node).clone(),
        class_names: classes.to_vec(),
        mode,
    }
}

fn check_classes(classes: &[String]) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::validation("classifier needs at least one class"));
    }
    for class in classes {
        if class.is_empty() {
            return Err(Error::validation("classifier received an empty class name"));
        }
    }
    Ok(())
}

/// Encode the bare category names: the no-prompt baseline bank.
pub fn name_bank_in(
    g: &mut Graph,
    enc: &TextEncoder,
    classes: &[String],
    encoder_weights: Option<&BTreeMap<String, NodeId>>,
) -> Result<NodeId> {
    check_classes(classes)?;
    let mut rows = Vec::with_capacity(classes.len());
    for class in classes {
        let tokens = enc.tokenize(class);
        rows.push(g.leaf_free(enc, class, &tokens, encoder_weights)?);
    }
    Ok(g.concat_rows(&rows))
}

// Small private helper so name encoding reads uniformly above.
trait NameEncode {
    fn leaf_free(
        &mut self,
        enc: &TextEncoder,
        class: &str,
        tokens: &crate::encoders::TokenSequence,
        encoder_weights: Option<&BTreeMap<String, NodeId>>,
    ) -> Result<NodeId>;
}

impl NameEncode for Graph {
    fn leaf_free(
        &mut self,
        enc: &TextEncoder,
        class: &str,
        tokens: &crate::encoders::TokenSequence,
        encoder_weights: Option<&BTreeMap<String, NodeId>>,
    ) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::validation(format!(
                "class name {class:?} tokenizes to nothing"
            )));
        }
        enc.encode_in(self, tokens, None, None, encoder_weights)
    }
}

/// Build the description-based bank.
///
/// The three attribute answers are encoded separately and fused by the
/// chosen strategy. For weighted fusion the caller supplies a 1x3 node of
/// already-normalized weights (the training loop softmaxes its raw
/// parameter; tests may bypass the softmax).
pub fn description_bank_in(
    g: &mut Graph,
    enc: &TextEncoder,
    source: &dyn DescriptionSource,
    classes: &[String],
    fusion: FusionKind,
    fusion_weights: Option<NodeId>,
    encoder_weights: Option<&BTreeMap<String, NodeId>>,
) -> Result<NodeId> {
    check_classes(classes)?;
    let mut rows = Vec::with_capacity(classes.len());
    for class in classes {
        let answers = [
            source.describe(class, Attribute::What)?,
            source.describe(class, Attribute::Where)?,
            source.describe(class, Attribute::How)?,
        ];
        let row = match fusion {
            FusionKind::Concat => {
                let joined = answers.join(" ");
                let tokens = enc.tokenize(&joined);
                g.leaf_free(enc, class, &tokens, encoder_weights)?
            }
            FusionKind::Average | FusionKind::Weighted => {
                let mut encoded = Vec::with_capacity(3);
                for answer in &answers {
                    let tokens = enc.tokenize(answer);
                    if tokens.is_empty() {
                        return Err(Error::validation(format!(
                            "description for class {class} ({answer:?}) tokenizes to nothing"
                        )));
                    }
                    encoded.push(enc.encode_in(g, &tokens, None, None, encoder_weights)?);
                }
                match fusion {
                    FusionKind::Average => {
                        let stacked = g.concat_rows(&encoded);
                        g.mean_rows(stacked)
                    }
                    FusionKind::Weighted => {
                        let weights = fusion_weights.ok_or_else(|| {
                            Error::runtime("weighted fusion requires a weight node")
                        })?;
                        assert_eq!(g.value(weights).dim(), (1, 3));
                        let mut acc = None;
                        for (i, &enc_row) in encoded.iter().enumerate() {
                            let w_i = g.slice_cols(weights, i, i + 1);
                            let scaled = g.scale_by(enc_row, w_i);
                            acc = Some(match acc {
                                None => scaled,
                                Some(prev) => g.add(prev, scaled),
                            });
                        }
                        acc.unwrap()
                    }
                    FusionKind::Concat => unreachable!(),
                }
            }
        };
        rows.push(row);
    }
    let stacked = g.concat_rows(&rows);
    Ok(g.l2_normalize_rows(stacked, NORM_EPS))
}

/// Validate a description cache against a class list, per-attribute.
pub fn check_descriptions(
    cache: &CachedDescriptions,
    classes: &[String],
) -> std::result::Result<(), Vec<String>> {
    let mut problems = Vec::new();
    for class in classes {
        for attribute in Attribute::ALL {
            match cache.describe(class, attribute) {
                Ok(answer) if answer.trim().is_empty() => {
                    problems.push(format!("class {class}: empty {attribute:?} answer"))
                }
                Ok(_) => {}
                Err(_) => {
                    problems.push(format!("class {class}: missing entry"));
                    break;
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems)
    }
}

/// Hidden width of the prompt-module MLP.
fn prompt_hidden(d_text: usize) -> usize {
    d_text
}

/// Register prompt-module parameters for one stream.
///
/// The output layer starts near zero so that initial prompts perturb the
/// name encoding only slightly.
pub fn init_prompt_params(
    params: &mut ParamSet,
    seed: u64,
    stream: Stream,
    d_in: usize,
    d_text: usize,
    k_out: usize,
) {
    let prefix = format!("prompt_{}", stream.name());
    let hidden = prompt_hidden(d_text);
    params.init_gaussian(
        seed,
        &format!("{prefix}/w1"),
        d_in,
        hidden,
        1.0 / (d_in as f64).sqrt(),
    );
    params.init_zeros(&format!("{prefix}/b1"), 1, hidden);
    params.init_gaussian(
        seed,
        &format!("{prefix}/w2"),
        hidden,
        k_out * d_text,
        0.02 / (hidden as f64).sqrt(),
    );
    params.init_zeros(&format!("{prefix}/b2"), 1, k_out * d_text);
}

/// Number of prompt rows each stream contributes for prompt length `k`.
pub fn prompt_rows_per_stream(k: usize, streams: usize) -> Result<usize> {
    if streams == 2 {
        if k % 2 != 0 {
            return Err(Error::validation(format!(
                "prompt length K={k} must be even with rgb+flow prompts"
            )));
        }
        Ok(k / 2)
    } else {
        Ok(k)
    }
}

/// Map pooled per-stream features to K prompt vectors (KxD_text).
///
/// With both streams, each contributes K/2 rows, rgb first.
pub fn conditional_prompts_in(
    g: &mut Graph,
    params: &ParamSet,
    bindings: &mut Bindings,
    pooled: &[(Stream, NodeId)],
    k: usize,
    d_text: usize,
) -> Result<NodeId> {
    assert!(!pooled.is_empty(), "conditional prompts need pooled features");
    let per_stream = prompt_rows_per_stream(k, pooled.len())?;
    let mut parts = Vec::with_capacity(pooled.len());
    for &(stream, features) in pooled {
        let prefix = format!("prompt_{}", stream.name());
        let w1 = bindings.bind(g, params, &format!("{prefix}/w1"));
        let b1 = bindings.bind(g, params, &format!("{prefix}/b1"));
        let w2 = bindings.bind(g, params, &format!("{prefix}/w2"));
        let b2 = bindings.bind(g, params, &format!("{prefix}/b2"));
        let h = g.matmul(features, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let out = g.matmul(h, w2);
        let out = g.add_row(out, b2);
        parts.push(g.reshape(out, per_stream, d_text));
    }
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)
    })
}

/// Video-independent learnable prompt rows, Gaussian(0, 0.02) at init.
pub fn random_prompt_baseline(k: usize, d_text: usize, seed: u64) -> Array2<f64> {
    gaussian_matrix(seed, "random_prompt", k, d_text, 0.02)
}

/// Build a prompted bank around the class-name tokens.
///
/// `position = Input` splits the prompt rows around the tokens (first half
/// prepended, second half appended). `position = Output` encodes the bare
/// name and adds the mean prompt vector before renormalizing. Per-class
/// additive offsets (few-shot adaptation) apply to the prompt rows of that
/// class only.
pub fn prompted_bank_in(
    g: &mut Graph,
    enc: &TextEncoder,
    classes: &[String],
    prompts: NodeId,
    position: PromptPosition,
    class_offsets: Option<&BTreeMap<String, NodeId>>,
    encoder_weights: Option<&BTreeMap<String, NodeId>>,
) -> Result<NodeId> {
    check_classes(classes)?;
    let k = g.value(prompts).nrows();
    let mut rows = Vec::with_capacity(classes.len());
    for class in classes {
        let prompt_rows = match class_offsets.and_then(|m| m.get(class)) {
            Some(&offset) => {
                assert_eq!(g.value(offset).dim(), g.value(prompts).dim());
                g.add(prompts, offset)
            }
            None => prompts,
        };
        let tokens = enc.tokenize(class);
        if tokens.is_empty() {
            return Err(Error::validation(format!(
                "class name {class:?} tokenizes to nothing"
            )));
        }
        let row = match position {
            PromptPosition::Input => {
                let split = k.div_ceil(2);
                let prepend = g.slice_rows(prompt_rows, 0, split);
                let append = if split < k {
                    Some(g.slice_rows(prompt_rows, split, k))
                } else {
                    None
                };
                enc.encode_in(g, &tokens, Some(prepend), append, encoder_weights)?
            }
            PromptPosition::Output => {
                let name = enc.encode_in(g, &tokens, None, None, encoder_weights)?;
                let mean_prompt = g.mean_rows(prompt_rows);
                let shifted = g.add(name, mean_prompt);
                g.l2_normalize_rows(shifted, NORM_EPS)
            }
        };
        rows.push(row);
    }
    let stacked = g.concat_rows(&rows);
    // Input-position rows are already unit norm; renormalizing is harmless
    // and keeps the invariant in one place.
    Ok(g.l2_normalize_rows(stacked, NORM_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextEncoderConfig;
    use crate::fdcheck::{assert_grads_close, numeric_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> TextEncoder {
        TextEncoder::new(TextEncoderConfig {
            vocab_size: 49408,
            max_tokens: 77,
            dim: 32,
            seed: 21,
        })
    }

    fn cache_with(classes: &[(&str, &str, &str, &str)]) -> CachedDescriptions {
        let entries = classes
            .iter()
            .map(|(class, what, where_, how)| {
                (
                    class.to_string(),
                    ClassDescription {
                        what: what.to_string(),
                        where_: where_.to_string(),
                        how: how.to_string(),
                    },
                )
            })
            .collect();
        CachedDescriptions::new(entries)
    }

    #[test]
    fn templates_render_exactly() {
        let rendered = render_attribute_prompts("skiing").unwrap();
        assert_eq!(rendered[0], "what tools are needed for skiing?");
        assert_eq!(rendered[1], "where skiing usually takes place?");
        assert_eq!(rendered[2], "how to decompose steps for skiing?");
    }

    #[test]
    fn templates_keep_multiword_names() {
        let rendered = render_attribute_prompts("high jump").unwrap();
        assert_eq!(rendered[0], "what tools are needed for high jump?");
    }

    #[test]
    fn empty_name_is_an_error() {
        assert!(render_attribute_prompts("").is_err());
    }

    #[test]
    fn bank_shape_and_norms() {
        let enc = encoder();
        let cache = cache_with(&[
            ("run", "shoes", "track", "stride fast"),
            ("swim", "goggles", "pool", "kick and pull"),
        ]);
        let classes = vec!["run".to_string(), "swim".to_string()];
        let mut g = Graph::new();
        let bank =
            description_bank_in(&mut g, &enc, &cache, &classes, FusionKind::Average, None, None)
                .unwrap();
        let values = g.value(bank);
        assert_eq!(values.dim(), (2, 32));
        for row in values.rows() {
            let norm = row.mapv(|v| v * v).sum().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_answers_average_to_single_encoding() {
        let enc = encoder();
        let cache = cache_with(&[("run", "fast motion", "fast motion", "fast motion")]);
        let classes = vec!["run".to_string()];
        let mut g = Graph::new();
        let bank =
            description_bank_in(&mut g, &enc, &cache, &classes, FusionKind::Average, None, None)
                .unwrap();
        let single = enc.encode_text("fast motion").unwrap();
        for (a, b) in g.value(bank).row(0).iter().zip(single.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_weights_select_one_attribute() {
        let enc = encoder();
        let cache = cache_with(&[("run", "alpha beta", "gamma delta", "epsilon zeta")]);
        let classes = vec!["run".to_string()];
        let mut g = Graph::new();
        let weights = g.leaf(ndarray::array![[1.0, 0.0, 0.0]]);
        let bank = description_bank_in(
            &mut g,
            &enc,
            &cache,
            &classes,
            FusionKind::Weighted,
            Some(weights),
            None,
        )
        .unwrap();
        let what_only = enc.encode_text("alpha beta").unwrap();
        for (a, b) in g.value(bank).row(0).iter().zip(what_only.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_class_without_fallback_lists_names() {
        let cache = cache_with(&[("run", "a", "b", "c")]);
        let classes = vec!["run".to_string(), "swim".to_string()];
        assert_eq!(cache.missing(&classes), vec!["swim"]);
        let enc = encoder();
        let mut g = Graph::new();
        let err =
            description_bank_in(&mut g, &enc, &cache, &classes, FusionKind::Average, None, None)
                .unwrap_err();
        assert!(err.to_string().contains("swim"));
    }

    #[test]
    fn fallback_uses_name_text() {
        let mut cache = cache_with(&[]);
        cache.allow_fallback = true;
        assert_eq!(
            cache.describe("surfing", Attribute::What).unwrap(),
            "a video of surfing"
        );
    }

    fn prompt_setup(k: usize, streams: &[Stream]) -> (ParamSet, usize, usize) {
        let d_in = 8;
        let d_text = 32;
        let mut params = ParamSet::new();
        let per = prompt_rows_per_stream(k, streams.len()).unwrap();
        for &s in streams {
            init_prompt_params(&mut params, 31, s, d_in, d_text, per);
        }
        (params, d_in, d_text)
    }

    #[test]
    fn dual_stream_prompts_split_rows() {
        let streams = [Stream::Rgb, Stream::Flow];
        let (params, d_in, d_text) = prompt_setup(32, &streams);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rgb = Array2::from_shape_fn((1, d_in), |_| rng.gen_range(-1.0..1.0));
        let flow = Array2::from_shape_fn((1, d_in), |_| rng.gen_range(-1.0..1.0));

        let build = |rgb_in: &Array2<f64>, flow_in: &Array2<f64>| {
            let mut g = Graph::new();
            let mut bindings = Bindings::new();
            let r = g.leaf(rgb_in.clone());
            let f = g.leaf(flow_in.clone());
            let prompts = conditional_prompts_in(
                &mut g,
                &params,
                &mut bindings,
                &[(Stream::Rgb, r), (Stream::Flow, f)],
                32,
                d_text,
            )
            .unwrap();
            g.value(prompts).clone()
        };
        let base = build(&rgb, &flow);
        assert_eq!(base.dim(), (32, d_text));
        // changing flow input leaves the first 16 rows (rgb-derived) intact
        let mut flow2 = flow.clone();
        flow2[[0, 0]] += 1.0;
        let changed = build(&rgb, &flow2);
        for row in 0..16 {
            assert_eq!(base.row(row), changed.row(row));
        }
        let tail_diff: f64 = (&base.slice(ndarray::s![16.., ..])
            - &changed.slice(ndarray::s![16.., ..]))
            .mapv(f64::abs)
            .sum();
        assert!(tail_diff > 0.0);
        // identical inputs give identical prompts
        assert_eq!(build(&rgb, &flow), base);
    }

    #[test]
    fn odd_k_with_dual_streams_errors() {
        assert!(prompt_rows_per_stream(31, 2).is_err());
        assert_eq!(prompt_rows_per_stream(31, 1).unwrap(), 31);
    }

    #[test]
    fn zero_mlp_weights_yield_bias_rows() {
        let streams = [Stream::Rgb];
        let (mut params, d_in, d_text) = prompt_setup(4, &streams);
        params.get_mut("prompt_rgb/w1").fill(0.0);
        params.get_mut("prompt_rgb/w2").fill(0.0);
        params.get_mut("prompt_rgb/b2").fill(0.25);
        let mut g = Graph::new();
        let mut bindings = Bindings::new();
        let video_a = g.leaf(Array2::from_elem((1, d_in), 3.0));
        let prompts = conditional_prompts_in(
            &mut g,
            &params,
            &mut bindings,
            &[(Stream::Rgb, video_a)],
            4,
            d_text,
        )
        .unwrap();
        for &v in g.value(prompts).iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_prompts_at_output_equal_name_bank() {
        let enc = encoder();
        let classes = vec!["running".to_string(), "swimming".to_string()];
        let mut g = Graph::new();
        let names = name_bank_in(&mut g, &enc, &classes, None).unwrap();
        let zero_prompts = g.leaf(Array2::zeros((4, 32)));
        let bank = prompted_bank_in(
            &mut g,
            &enc,
            &classes,
            zero_prompts,
            PromptPosition::Output,
            None,
            None,
        )
        .unwrap();
        let diff = (g.value(bank) - g.value(names)).mapv(f64::abs).sum();
        assert!(diff < 1e-9);
    }

    #[test]
    fn prompted_bank_rows_are_unit_norm() {
        let enc = encoder();
        let classes = vec!["running".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let prompts0 = Array2::from_shape_fn((4, 32), |_| rng.gen_range(-0.5..0.5));
        for position in [PromptPosition::Input, PromptPosition::Output] {
            let mut g = Graph::new();
            let prompts = g.leaf(prompts0.clone());
            let bank =
                prompted_bank_in(&mut g, &enc, &classes, prompts, position, None, None).unwrap();
            for row in g.value(bank).rows() {
                let norm = row.mapv(|v| v * v).sum().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn token_overflow_reports_budget() {
        let enc = encoder();
        let classes = vec!["running".to_string()];
        let mut g = Graph::new();
        let prompts = g.leaf(Array2::zeros((100, 32)));
        let err = prompted_bank_in(
            &mut g,
            &enc,
            &classes,
            prompts,
            PromptPosition::Input,
            None,
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("token budget"));
    }

    #[test]
    fn input_position_gradient_matches_finite_differences() {
        let enc = encoder();
        let classes = vec!["running".to_string(), "diving".to_string()];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let prompts0 = Array2::from_shape_fn((4, 32), |_| rng.gen_range(-0.3..0.3));
        let probe = Array2::from_shape_fn((2, 32), |_| rng.gen_range(-1.0..1.0));
        let run = |p: &Array2<f64>| {
            let mut g = Graph::new();
            let prompts = g.leaf(p.clone());
            let bank = prompted_bank_in(
                &mut g,
                &enc,
                &classes,
                prompts,
                PromptPosition::Input,
                None,
                None,
            )
            .unwrap();
            let w = g.leaf(probe.clone());
            let weighted = g.mul(bank, w);
            let loss = g.sum_all(weighted);
            (g, prompts, loss)
        };
        let (g, prompts, loss) = run(&prompts0);
        let grads = g.backward(loss);
        let analytic = grads.get(prompts).unwrap().clone();
        let mut f = |p: &Array2<f64>| {
            let (g, _, loss) = run(p);
            g.scalar(loss)
        };
        let numeric = numeric_grad(&mut f, &prompts0, 1e-5);
        assert_grads_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn random_prompt_baseline_is_seeded() {
        let a = random_prompt_baseline(8, 32, 3);
        let b = random_prompt_baseline(8, 32, 3);
        let c = random_prompt_baseline(8, 32, 4);
        assert_eq!(a, b);
        assert_eq!(a.dim(), (8, 32));
        assert_ne!(a, c);
    }

    #[test]
    fn class_offsets_shift_only_their_class() {
        let enc = encoder();
        let classes = vec!["running".to_string(), "diving".to_string()];
        let mut g = Graph::new();
        let prompts = g.leaf(Array2::zeros((4, 32)));
        let offset = g.leaf(Array2::from_elem((4, 32), 0.3));
        let mut offsets = BTreeMap::new();
        offsets.insert("diving".to_string(), offset);
        let plain = prompted_bank_in(
            &mut g,
            &enc,
            &classes,
            prompts,
            PromptPosition::Output,
            None,
            None,
        )
        .unwrap();
        let shifted = prompted_bank_in(
            &mut g,
            &enc,
            &classes,
            prompts,
            PromptPosition::Output,
            Some(&offsets),
            None,
        )
        .unwrap();
        let plain_v = g.value(plain);
        let shifted_v = g.value(shifted);
        assert_eq!(plain_v.row(0), shifted_v.row(0));
        let diff: f64 = (&plain_v.row(1) - &shifted_v.row(1)).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }
}
