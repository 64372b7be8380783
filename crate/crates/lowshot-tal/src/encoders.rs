//! Frozen encoder stubs for the three modalities.
//!
//! The text encoder is a small 2-layer transformer with weights drawn once
//! from a seed and never updated; gradients flow *through* it to prompt
//! vectors supplied at the input. The tokenizer hashes words instead of
//! running BPE so that token ids are reproducible everywhere without a
//! vocabulary file. Visual "encoders" are stand-ins: features normally
//! arrive pre-extracted through the dataset manifest, and
//! [`stub_visual_features`] synthesizes them for desk-scale experiments.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Stream};
use crate::data::ActionInstance;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{derive_seed, fnv1a64, gaussian_matrix, standard_normal, ParamSet};

/// Token ids produced by [`tokenize`]; every id lies in `[0, vocab_size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Case-insensitive hash tokenizer.
///
/// Words are maximal runs of alphanumeric characters; each token id is the
/// FNV-1a 64-bit hash of the lowercased word modulo `vocab_size`. The
/// sequence is truncated to `max_tokens`.
pub fn tokenize(text: &str, vocab_size: usize, max_tokens: usize) -> TokenSequence {
    let lowered = text.to_lowercase();
    let ids = lowered
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a64(w.as_bytes()) % vocab_size as u64) as u32)
        .take(max_tokens)
        .collect();
    TokenSequence { ids }
}

/// Construction parameters for the frozen text encoder.
#[derive(Debug, Clone)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 49408,
            max_tokens: 77,
            dim: 512,
            seed: 1913,
        }
    }
}

impl TextEncoderConfig {
    pub fn from_config(config: &Config) -> Self {
        TextEncoderConfig {
            vocab_size: config.vocab_size,
            max_tokens: config.max_tokens,
            dim: config.d_text,
            seed: config.encoder_seed,
        }
    }
}

const ENCODER_LAYERS: usize = 2;
const ENCODER_HEADS: usize = 4;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Frozen 2-layer self-attention text encoder with sinusoidal positions.
///
/// Output: mean-pooled, L2-normalized sequence encoding. The weights are a
/// pure function of the seed; [`TextEncoder::weights`] exposes them so the
/// end-to-end ablation can opt in to training them.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    weights: ParamSet,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Self {
        assert!(
            config.dim % ENCODER_HEADS == 0,
            "text dim must be divisible by {ENCODER_HEADS}"
        );
        let mut weights = ParamSet::new();
        let d = config.dim;
        let std = 1.0 / (d as f64).sqrt();
        for layer in 0..ENCODER_LAYERS {
            let p = |name: &str| format!("encoder/l{layer}/{name}");
            weights.init_const(&p("ln1_g"), 1, d, 1.0);
            weights.init_zeros(&p("ln1_b"), 1, d);
            for w in ["wq", "wk", "wv", "wo"] {
                weights.init_gaussian(config.seed, &p(w), d, d, std);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                weights.init_zeros(&p(b), 1, d);
            }
            weights.init_const(&p("ln2_g"), 1, d, 1.0);
            weights.init_zeros(&p("ln2_b"), 1, d);
            weights.init_gaussian(config.seed, &p("mlp_w1"), d, 2 * d, std);
            weights.init_zeros(&p("mlp_b1"), 1, 2 * d);
            weights.init_gaussian(config.seed, &p("mlp_w2"), 2 * d, d, std);
            weights.init_zeros(&p("mlp_b2"), 1, d);
        }
        weights.init_const("encoder/final_ln_g", 1, d, 1.0);
        weights.init_zeros("encoder/final_ln_b", 1, d);
        TextEncoder { config, weights }
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn max_tokens(&self) -> usize {
        self.config.max_tokens
    }

    /// The frozen weight set (readable for checksums and the end-to-end
    /// fine-tuning ablation).
    pub fn weights(&self) -> &ParamSet {
        &self.weights
    }

    /// Replace the weights (used only by the end-to-end ablation).
    pub fn set_weights(&mut self, weights: ParamSet) {
        self.weights = weights;
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        tokenize(text, self.config.vocab_size, self.config.max_tokens)
    }

    /// Deterministic embedding row for a token id (a virtual fixed table).
    fn embedding_row(&self, id: u32) -> Array1<f64> {
        let d = self.config.dim;
        let std = 1.0 / (d as f64).sqrt();
        gaussian_matrix(self.config.seed, &format!("emb/{id}"), 1, d, std).row(0).to_owned()
    }

    fn token_embeddings(&self, tokens: &TokenSequence) -> Array2<f64> {
        let d = self.config.dim;
        let mut out = Array2::zeros((tokens.len(), d));
        for (row, &id) in tokens.ids.iter().enumerate() {
            out.row_mut(row).assign(&self.embedding_row(id));
        }
        out
    }

    /// Unit-norm sinusoidal position rows scaled to not drown token content.
    fn positional_rows(&self, len: usize) -> Array2<f64> {
        let d = self.config.dim;
        let mut pe = Array2::zeros((len, d));
        for pos in 0..len {
            for i in 0..d / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
                pe[[pos, 2 * i]] = (pos as f64 * freq).sin();
                pe[[pos, 2 * i + 1]] = (pos as f64 * freq).cos();
            }
        }
        for mut row in pe.rows_mut() {
            let norm = row.mapv(|v| v * v).sum().sqrt().max(1e-12);
            row.mapv_inplace(|v| 0.5 * v / norm);
        }
        pe
    }

    /// Build the encoder forward pass in `g`, returning the 1xD pooled and
    /// normalized encoding. Gradients reach whatever `prepend`/`append`
    /// nodes are supplied (and the weight leaves when `trainable_weights`
    /// bindings are passed in instead of constants).
    pub fn encode_in(
        &self,
        g: &mut Graph,
        tokens: &TokenSequence,
        prepend: Option<NodeId>,
        append: Option<NodeId>,
        weight_nodes: Option<&std::collections::BTreeMap<String, NodeId>>,
    ) -> Result<NodeId> {
        let d = self.config.dim;
        let prepend_rows = prepend.map_or(0, |p| g.value(p).nrows());
        let append_rows = append.map_or(0, |p| g.value(p).nrows());
        let total = prepend_rows + tokens.len() + append_rows;
        if total > self.config.max_tokens {
            return Err(Error::Runtime(format!(
                "token budget exceeded: {prepend_rows} prepend + {} tokens + {append_rows} append > {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        if total == 0 {
            return Err(Error::Runtime(
                "cannot encode an empty sequence (no tokens, no prompts)".into(),
            ));
        }

        let mut parts = Vec::new();
        if let Some(p) = prepend {
            assert_eq!(g.value(p).ncols(), d, "prepend width must match encoder dim");
            parts.push(p);
        }
        if !tokens.is_empty() {
            let emb = g.leaf(self.token_embeddings(tokens));
            parts.push(emb);
        }
        if let Some(p) = append {
            assert_eq!(g.value(p).ncols(), d, "append width must match encoder dim");
            parts.push(p);
        }
        let stacked = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)
        };
        let pe = g.leaf(self.positional_rows(total));
        let mut hidden = g.add(stacked, pe);

        let mut weight = |g: &mut Graph, name: &str| -> NodeId {
            if let Some(nodes) = weight_nodes {
                if let Some(&id) = nodes.get(name) {
                    return id;
                }
            }
            g.leaf(self.weights.get(name).clone())
        };

        let head_dim = d / ENCODER_HEADS;
        let scale = 1.0 / (head_dim as f64).sqrt();
        for layer in 0..ENCODER_LAYERS {
            let p = |name: &str| format!("encoder/l{layer}/{name}");
            // attention block, pre-norm
            let normed = g.layer_norm_rows(hidden, LN_EPS);
            let ln1_g = weight(g, &p("ln1_g"));
            let ln1_b = weight(g, &p("ln1_b"));
            let normed = g.mul_row(normed, ln1_g);
            let normed = g.add_row(normed, ln1_b);
            let attn = self.attention_in(g, normed, layer, scale, &mut weight);
            hidden = g.add(hidden, attn);
            // mlp block, pre-norm
            let normed = g.layer_norm_rows(hidden, LN_EPS);
            let ln2_g = weight(g, &p("ln2_g"));
            let ln2_b = weight(g, &p("ln2_b"));
            let normed = g.mul_row(normed, ln2_g);
            let normed = g.add_row(normed, ln2_b);
            let w1 = weight(g, &p("mlp_w1"));
            let b1 = weight(g, &p("mlp_b1"));
            let w2 = weight(g, &p("mlp_w2"));
            let b2 = weight(g, &p("mlp_b2"));
            let h = g.matmul(normed, w1);
            let h = g.add_row(h, b1);
            let h = g.gelu(h);
            let h = g.matmul(h, w2);
            let h = g.add_row(h, b2);
            hidden = g.add(hidden, h);
        }
        let normed = g.layer_norm_rows(hidden, LN_EPS);
        let fg = weight(g, "encoder/final_ln_g");
        let fb = weight(g, "encoder/final_ln_b");
        let normed = g.mul_row(normed, fg);
        let normed = g.add_row(normed, fb);
        let pooled = g.mean_rows(normed);
        Ok(g.l2_normalize_rows(pooled, NORM_EPS))
    }

    fn attention_in(
        &self,
        g: &mut Graph,
        x: NodeId,
        layer: usize,
        scale: f64,
        weight: &mut dyn FnMut(&mut Graph, &str) -> NodeId,
    ) -> NodeId {
        let d = self.config.dim;
        let head_dim = d / ENCODER_HEADS;
        let p = |name: &str| format!("encoder/l{layer}/{name}");
        let wq = weight(g, &p("wq"));
        let wk = weight(g, &p("wk"));
        let wv = weight(g, &p("wv"));
        let wo = weight(g, &p("wo"));
        let bq = weight(g, &p("bq"));
        let bk = weight(g, &p("bk"));
        let bv = weight(g, &p("bv"));
        let bo = weight(g, &p("bo"));
        let q = g.matmul(x, wq);
        let q = g.add_row(q, bq);
        let k = g.matmul(x, wk);
        let k = g.add_row(k, bk);
        let v = g.matmul(x, wv);
        let v = g.add_row(v, bv);
        let mut heads = Vec::with_capacity(ENCODER_HEADS);
        for h in 0..ENCODER_HEADS {
            let q_h = g.slice_cols(q, h * head_dim, (h + 1) * head_dim);
            let k_h = g.slice_cols(k, h * head_dim, (h + 1) * head_dim);
            let v_h = g.slice_cols(v, h * head_dim, (h + 1) * head_dim);
            let k_t = g.transpose(k_h);
            let scores = g.matmul(q_h, k_t);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, v_h));
        }
        let merged = g.concat_cols(&heads);
        let out = g.matmul(merged, wo);
        g.add_row(out, bo)
    }

    /// Value-level encoding without prompts.
    pub fn encode_text(&self, text: &str) -> Result<Array1<f64>> {
        let tokens = self.tokenize(text);
        self.encode_tokens(&tokens, None, None)
    }

    /// Value-level encoding with optional prompt matrices.
    pub fn encode_tokens(
        &self,
        tokens: &TokenSequence,
        prepend: Option<&Array2<f64>>,
        append: Option<&Array2<f64>>,
    ) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let prepend = prepend.map(|m| g.leaf(m.clone()));
        let append = append.map(|m| g.leaf(m.clone()));
        let out = self.encode_in(&mut g, tokens, prepend, append, None)?;
        Ok(g.value(out).row(0).to_owned())
    }
}

/// Deterministic synthetic visual features.
///
/// Background rows are Gaussian noise; rows whose center falls inside an
/// annotation additionally carry that class's prototype. The output depends
/// only on `(seed, video_id, kind)` and the arguments.
#[allow(clippy::too_many_arguments)]
pub fn stub_visual_features(
    kind: Stream,
    video_id: &str,
    t: usize,
    class_names: &[String],
    prototypes: &Array2<f64>,
    annotations: &[ActionInstance],
    noise: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let d = prototypes.ncols();
    assert_eq!(
        prototypes.nrows(),
        class_names.len(),
        "one prototype row per class"
    );
    for (row, class) in prototypes.rows().into_iter().zip(class_names) {
        let norm = row.mapv(|v| v * v).sum().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "prototype for {class} is not unit-norm (|p| = {norm})"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &format!("stub/{}/{video_id}", kind.name()),
    ));
    let mut features =
        Array2::from_shape_fn((t, d), |_| standard_normal(&mut rng) * noise);

    // Row ownership: each row belongs to at most one class.
    let mut owner: Vec<Option<usize>> = vec![None; t];
    for ann in annotations {
        let class_idx = class_names
            .iter()
            .position(|c| c == &ann.class_name)
            .ok_or_else(|| {
                Error::validation(format!("annotation class {} has no prototype", ann.class_name))
            })?;
        for (row, slot) in owner.iter_mut().enumerate() {
            let center = row as f64 + 0.5;
            if center >= ann.start && center < ann.end {
                match slot {
                    Some(existing) if *existing != class_idx => {
                        return Err(Error::validation(format!(
                            "video {video_id}: overlapping annotations of different classes at snippet {row}"
                        )));
                    }
                    _ => *slot = Some(class_idx),
                }
            }
        }
    }
    for (row, slot) in owner.iter().enumerate() {
        if let Some(class_idx) = slot {
            let proto = prototypes.row(*class_idx);
            features.row_mut(row).zip_mut_with(&proto, |f, &p| *f += p);
        }
    }
    Ok(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{assert_grads_close, numeric_grad};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn small_encoder() -> TextEncoder {
        TextEncoder::new(TextEncoderConfig {
            vocab_size: 49408,
            max_tokens: 77,
            dim: 32,
            seed: 5,
        })
    }

    #[test]
    fn tokenize_is_case_insensitive() {
        assert_eq!(tokenize("Skiing", 49408, 77), tokenize("skiing", 49408, 77));
    }

    #[test]
    fn tokenize_empty_text() {
        assert!(tokenize("", 49408, 77).is_empty());
        assert!(tokenize("  ,.!  ", 49408, 77).is_empty());
    }

    #[test]
    fn tokenize_matches_reference_hash() {
        // Independent FNV-1a implementation of the id rule.
        fn reference_id(word: &str) -> u32 {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in word.to_lowercase().bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            (h % 49408) as u32
        }
        let seq = tokenize("high jump", 49408, 77);
        assert_eq!(seq.len(), 2);
        assert!(seq.ids.iter().all(|&id| id < 49408));
        assert_eq!(seq.ids, vec![reference_id("high"), reference_id("jump")]);
    }

    #[test]
    fn tokenize_truncates_to_max() {
        let text = (0..100).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        assert_eq!(tokenize(&text, 49408, 7).len(), 7);
    }

    #[test]
    fn encode_is_deterministic_and_normalized() {
        let enc = small_encoder();
        let a = enc.encode_text("high jump practice").unwrap();
        let b = enc.encode_text("high jump practice").unwrap();
        assert_eq!(a, b);
        let norm = a.mapv(|v| v * v).sum().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_is_permutation_sensitive() {
        let enc = small_encoder();
        let words: Vec<String> = (0..10).map(|i| format!("word{i}")).collect();
        let base = enc.encode_text(&words.join(" ")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut differing = 0;
        for _ in 0..100 {
            let mut shuffled = words.clone();
            shuffled.shuffle(&mut rng);
            let out = enc.encode_text(&shuffled.join(" ")).unwrap();
            if (&out - &base).mapv(f64::abs).sum() > 1e-9 {
                differing += 1;
            }
        }
        assert!(differing >= 95, "only {differing}/100 shuffles changed the output");
    }

    #[test]
    fn encode_rejects_token_overflow() {
        let enc = small_encoder();
        let tokens = enc.tokenize("a b c");
        let prompts = Array2::zeros((40, 32));
        let err = enc
            .encode_tokens(&tokens, Some(&prompts), Some(&prompts))
            .unwrap_err();
        let message = err.to_string();
        assert!(message.contains("40 prepend"));
        assert!(message.contains("> 77"));
    }

    #[test]
    fn encode_gradient_through_prepend_matches_finite_differences() {
        let enc = small_encoder();
        let tokens = enc.tokenize("running fast");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prepend0 = Array2::from_shape_fn((2, 32), |_| rng.gen_range(-0.5..0.5));
        let append0 = Array2::from_shape_fn((2, 32), |_| rng.gen_range(-0.5..0.5));
        // probe = weighted sum of the output so the scalar depends on all dims
        let probe_weights = Array2::from_shape_fn((1, 32), |_| rng.gen_range(-1.0..1.0));

        let mut g = Graph::new();
        let prepend = g.leaf(prepend0.clone());
        let append = g.leaf(append0.clone());
        let out = enc
            .encode_in(&mut g, &tokens, Some(prepend), Some(append), None)
            .unwrap();
        let w = g.leaf(probe_weights.clone());
        let weighted = g.mul(out, w);
        let loss = g.sum_all(weighted);
        let grads = g.backward(loss);
        let analytic = grads.get(prepend).unwrap().clone();

        let mut f = |probe: &Array2<f64>| {
            let mut g = Graph::new();
            let prepend = g.leaf(probe.clone());
            let append = g.leaf(append0.clone());
            let out = enc
                .encode_in(&mut g, &tokens, Some(prepend), Some(append), None)
                .unwrap();
            let w = g.leaf(probe_weights.clone());
            let weighted = g.mul(out, w);
            let loss = g.sum_all(weighted);
            g.scalar(loss)
        };
        let numeric = numeric_grad(&mut f, &prepend0, 1e-5);
        assert_grads_close(&analytic, &numeric, 1e-4);
    }

    fn unit_prototypes(c: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut protos = gaussian_matrix(seed, "protos", c, d, 1.0);
        for mut row in protos.rows_mut() {
            let norm = row.mapv(|v| v * v).sum().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        protos
    }

    #[test]
    fn stub_features_zero_noise_equals_prototype() {
        let classes = vec!["a".to_string()];
        let protos = unit_prototypes(1, 8, 1);
        let anns = vec![ActionInstance::new(0.0, 10.0, "a").unwrap()];
        let feats =
            stub_visual_features(Stream::Rgb, "v", 10, &classes, &protos, &anns, 0.0, 7).unwrap();
        for row in feats.rows() {
            for (f, p) in row.iter().zip(protos.row(0).iter()) {
                assert!((f - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stub_features_deterministic() {
        let classes = vec!["a".to_string()];
        let protos = unit_prototypes(1, 8, 1);
        let anns = vec![ActionInstance::new(2.0, 6.0, "a").unwrap()];
        let x =
            stub_visual_features(Stream::Flow, "v9", 16, &classes, &protos, &anns, 0.3, 7).unwrap();
        let y =
            stub_visual_features(Stream::Flow, "v9", 16, &classes, &protos, &anns, 0.3, 7).unwrap();
        assert_eq!(x, y);
        let z =
            stub_visual_features(Stream::Rgb, "v9", 16, &classes, &protos, &anns, 0.3, 7).unwrap();
        assert_ne!(x, z);
    }

    #[test]
    fn stub_features_annotated_rows_align_with_prototype() {
        let classes = vec!["a".to_string()];
        let protos = unit_prototypes(1, 16, 2);
        let anns = vec![ActionInstance::new(0.0, 50.0, "a").unwrap()];
        let mut mean_cos = 0.0;
        for seed in 0..3 {
            let feats =
                stub_visual_features(Stream::Rgb, "v", 100, &classes, &protos, &anns, 0.1, seed)
                    .unwrap();
            let mut total = 0.0;
            for row in feats.rows().into_iter().take(50) {
                let dot: f64 = row.iter().zip(protos.row(0).iter()).map(|(a, b)| a * b).sum();
                let norm = row.mapv(|v| v * v).sum().sqrt();
                total += dot / norm;
            }
            mean_cos += total / 50.0;
        }
        mean_cos /= 3.0;
        assert!(mean_cos > 0.9, "mean cosine {mean_cos} <= 0.9");
    }

    #[test]
    fn stub_features_reject_cross_class_overlap() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let protos = unit_prototypes(2, 8, 3);
        let anns = vec![
            ActionInstance::new(0.0, 6.0, "a").unwrap(),
            ActionInstance::new(4.0, 9.0, "b").unwrap(),
        ];
        let err = stub_visual_features(Stream::Rgb, "v", 10, &classes, &protos, &anns, 0.1, 7)
            .unwrap_err();
        assert!(err.to_string().contains("overlapping"));
    }
}
