//! Multi-scale temporal aggregation.
//!
//! Each level halves the snippet axis with non-overlapping window-2 average
//! pooling and then applies a pre-norm transformer block (multi-head
//! self-attention, layer norm, 2x MLP, residual connections). Level `i`
//! (0-based) therefore has `floor(T / 2^(i+1))` rows and a stride of
//! `2^(i+1)` snippets: deep levels see long actions, shallow levels short
//! ones.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{Bindings, ParamSet};

const LN_EPS: f64 = 1e-5;

/// Attention behavior; the non-standard modes exist for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Standard,
    /// Every query averages the valid keys uniformly.
    Uniform,
    /// Every query attends only to itself.
    Identity,
}

/// Static shape of a pyramid: per-level parameters and naming.
#[derive(Debug, Clone)]
pub struct PyramidConfig {
    pub levels: usize,
    pub dim: usize,
    pub heads: usize,
}

impl PyramidConfig {
    pub fn new(levels: usize, dim: usize, heads: usize) -> Self {
        assert!(dim % heads == 0, "pyramid dim must be divisible by heads");
        PyramidConfig { levels, dim, heads }
    }

    /// Smallest input length the pyramid accepts.
    pub fn min_len(&self) -> usize {
        1 << self.levels
    }

    /// Register freshly initialized parameters under `prefix`.
    pub fn init_params(&self, params: &mut ParamSet, seed: u64, prefix: &str) {
        let d = self.dim;
        let std = 1.0 / (d as f64).sqrt();
        for level in 0..self.levels {
            let p = |name: &str| format!("{prefix}/l{level}/{name}");
            params.init_const(&p("ln1_g"), 1, d, 1.0);
            params.init_zeros(&p("ln1_b"), 1, d);
            for w in ["wq", "wk", "wv", "wo"] {
                params.init_gaussian(seed, &p(w), d, d, std);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                params.init_zeros(&p(b), 1, d);
            }
            params.init_const(&p("ln2_g"), 1, d, 1.0);
            params.init_zeros(&p("ln2_b"), 1, d);
            params.init_gaussian(seed, &p("mlp_w1"), d, 2 * d, std);
            params.init_zeros(&p("mlp_b1"), 1, 2 * d);
            params.init_gaussian(seed, &p("mlp_w2"), 2 * d, d, 1.0 / ((2 * d) as f64).sqrt());
            params.init_zeros(&p("mlp_b2"), 1, d);
        }
    }
}

/// Graph handles for one forward pass of the pyramid.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// Level features, each `floor(T/2^(i+1)) x D`.
    pub levels: Vec<NodeId>,
    /// Per-level validity masks (all-true without padding).
    pub masks: Vec<Vec<bool>>,
    /// Per-level stride in snippets: `2^(i+1)`.
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn level_lens(&self, g: &Graph) -> Vec<usize> {
        self.levels.iter().map(|&id| g.value(id).nrows()).collect()
    }

    /// Snippet position of the center of frame `t` on level `level`.
    pub fn frame_center(&self, level: usize, t: usize) -> f64 {
        (t as f64 + 0.5) * self.strides[level] as f64
    }
}

/// Build the pyramid forward pass in `g`.
///
/// `features` is a TxD node; `valid` marks real rows (shorter-than-T videos
/// arrive zero-padded). Gradients flow to `features` and to every bound
/// parameter.
pub fn build_pyramid(
    g: &mut Graph,
    features: NodeId,
    valid: &[bool],
    config: &PyramidConfig,
    params: &ParamSet,
    bindings: &mut Bindings,
    prefix: &str,
    mode: AttentionMode,
) -> Result<FeaturePyramid> {
    let t = g.value(features).nrows();
    assert_eq!(valid.len(), t, "mask length must match rows");
    if t < config.min_len() {
        return Err(Error::validation(format!(
            "pyramid with {} levels needs at least {} snippets, got {t}",
            config.levels,
            config.min_len()
        )));
    }

    let mut levels = Vec::with_capacity(config.levels);
    let mut masks = Vec::with_capacity(config.levels);
    let mut strides = Vec::with_capacity(config.levels);
    let mut current = features;
    let mut mask = valid.to_vec();
    for level in 0..config.levels {
        let pooled = g.avg_pool2_rows(current);
        mask = pool_mask(&mask);
        let block_out = transformer_block(g, pooled, &mask, config, params, bindings, prefix, level, mode);
        levels.push(block_out);
        masks.push(mask.clone());
        strides.push(1 << (level + 1));
        current = block_out;
    }
    Ok(FeaturePyramid {
        levels,
        masks,
        strides,
    })
}

fn pool_mask(mask: &[bool]) -> Vec<bool> {
    (0..mask.len() / 2)
        .map(|k| mask[2 * k] && mask[2 * k + 1])
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn transformer_block(
    g: &mut Graph,
    x: NodeId,
    mask: &[bool],
    config: &PyramidConfig,
    params: &ParamSet,
    bindings: &mut Bindings,
    prefix: &str,
    level: usize,
    mode: AttentionMode,
) -> NodeId {
    let p = |name: &str| format!("{prefix}/l{level}/{name}");
    let ln1_g = bindings.bind(g, params, &p("ln1_g"));
    let ln1_b = bindings.bind(g, params, &p("ln1_b"));
    let normed = g.layer_norm_rows(x, LN_EPS);
    let normed = g.mul_row(normed, ln1_g);
    let normed = g.add_row(normed, ln1_b);
    let attn = attention(g, normed, mask, config, params, bindings, &p, mode);
    let mut hidden = g.add(x, attn);

    let ln2_g = bindings.bind(g, params, &p("ln2_g"));
    let ln2_b = bindings.bind(g, params, &p("ln2_b"));
    let normed = g.layer_norm_rows(hidden, LN_EPS);
    let normed = g.mul_row(normed, ln2_g);
    let normed = g.add_row(normed, ln2_b);
    let w1 = bindings.bind(g, params, &p("mlp_w1"));
    let b1 = bindings.bind(g, params, &p("mlp_b1"));
    let w2 = bindings.bind(g, params, &p("mlp_w2"));
    let b2 = bindings.bind(g, params, &p("mlp_b2"));
    let h = g.matmul(normed, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    let h = g.add_row(h, b2);
    hidden = g.add(hidden, h);
    hidden
}

#[allow(clippy::too_many_arguments)]
fn attention(
    g: &mut Graph,
    x: NodeId,
    mask: &[bool],
    config: &PyramidConfig,
    params: &ParamSet,
    bindings: &mut Bindings,
    p: &dyn Fn(&str) -> String,
    mode: AttentionMode,
) -> NodeId {
    let t = g.value(x).nrows();
    match mode {
        AttentionMode::Standard => {}
        AttentionMode::Uniform => {
            // Constant row-stochastic attention over valid keys; still mixes
            // values through wv/wo so the block keeps its shape.
            let valid_count = mask.iter().filter(|&&m| m).count().max(1) as f64;
            let weights = Array2::from_shape_fn((t, t), |(_, j)| {
                if mask[j] {
                    1.0 / valid_count
                } else {
                    0.0
                }
            });
            let weights = g.leaf(weights);
            return project_values(g, x, weights, config, params, bindings, p);
        }
        AttentionMode::Identity => {
            let eye = Array2::from_shape_fn((t, t), |(i, j)| if i == j { 1.0 } else { 0.0 });
            let eye = g.leaf(eye);
            return project_values(g, x, eye, config, params, bindings, p);
        }
    }

    let d = config.dim;
    let head_dim = d / config.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let wq = bindings.bind(g, params, &p("wq"));
    let wk = bindings.bind(g, params, &p("wk"));
    let wv = bindings.bind(g, params, &p("wv"));
    let wo = bindings.bind(g, params, &p("wo"));
    let bq = bindings.bind(g, params, &p("bq"));
    let bk = bindings.bind(g, params, &p("bk"));
    let bv = bindings.bind(g, params, &p("bv"));
    let bo = bindings.bind(g, params, &p("bo"));
    let q = g.matmul(x, wq);
    let q = g.add_row(q, bq);
    let k = g.matmul(x, wk);
    let k = g.add_row(k, bk);
    let v = g.matmul(x, wv);
    let v = g.add_row(v, bv);

    let key_mask = if mask.iter().all(|&m| m) {
        None
    } else {
        let penalty = Array2::from_shape_fn((t, t), |(_, j)| if mask[j] { 0.0 } else { -1e30 });
        Some(g.leaf(penalty))
    };

    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let q_h = g.slice_cols(q, h * head_dim, (h + 1) * head_dim);
        let k_h = g.slice_cols(k, h * head_dim, (h + 1) * head_dim);
        let v_h = g.slice_cols(v, h * head_dim, (h + 1) * head_dim);
        let k_t = g.transpose(k_h);
        let scores = g.matmul(q_h, k_t);
        let mut scores = g.scale(scores, scale);
        if let Some(penalty) = key_mask {
            scores = g.add(scores, penalty);
        }
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, v_h));
    }
    let merged = g.concat_cols(&heads);
    let out = g.matmul(merged, wo);
    g.add_row(out, bo)
}

/// Value path with a fixed attention matrix (diagnostic modes).
fn project_values(
    g: &mut Graph,
    x: NodeId,
    attention: NodeId,
    _config: &PyramidConfig,
    params: &ParamSet,
    bindings: &mut Bindings,
    p: &dyn Fn(&str) -> String,
) -> NodeId {
    let wv = bindings.bind(g, params, &p("wv"));
    let wo = bindings.bind(g, params, &p("wo"));
    let bv = bindings.bind(g, params, &p("bv"));
    let bo = bindings.bind(g, params, &p("bo"));
    let v = g.matmul(x, wv);
    let v = g.add_row(v, bv);
    let mixed = g.matmul(attention, v);
    let out = g.matmul(mixed, wo);
    g.add_row(out, bo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::{assert_grads_close, numeric_grad};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn build(
        features: &Array2<f64>,
        config: &PyramidConfig,
        mode: AttentionMode,
    ) -> (Graph, FeaturePyramid, NodeId, ParamSet) {
        let mut params = ParamSet::new();
        config.init_params(&mut params, 11, "pyr");
        let mut g = Graph::new();
        let input = g.leaf(features.clone());
        let valid = vec![true; features.nrows()];
        let mut bindings = Bindings::new();
        let pyr = build_pyramid(&mut g, input, &valid, config, &params, &mut bindings, "pyr", mode)
            .unwrap();
        (g, pyr, input, params)
    }

    #[test]
    fn level_lengths_halve_from_192() {
        let config = PyramidConfig::new(6, 8, 4);
        let features = Array2::zeros((192, 8));
        let (g, pyr, _, _) = build(&features, &config, AttentionMode::Standard);
        assert_eq!(pyr.level_lens(&g), vec![96, 48, 24, 12, 6, 3]);
        assert_eq!(pyr.strides, vec![2, 4, 8, 16, 32, 64]);
    }

    #[test]
    fn too_short_input_reports_minimum() {
        let config = PyramidConfig::new(6, 8, 4);
        let mut params = ParamSet::new();
        config.init_params(&mut params, 1, "pyr");
        let mut g = Graph::new();
        let input = g.leaf(Array2::zeros((48, 8)));
        let mut bindings = Bindings::new();
        let err = build_pyramid(
            &mut g,
            input,
            &[true; 48],
            &config,
            &params,
            &mut bindings,
            "pyr",
            AttentionMode::Standard,
        )
        .unwrap_err();
        assert!(err.to_string().contains("64"));
    }

    #[test]
    fn constant_rows_stay_constant_under_uniform_attention() {
        let config = PyramidConfig::new(3, 8, 4);
        let mut features = Array2::zeros((16, 8));
        for mut row in features.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = 0.3 * j as f64 - 1.0;
            }
        }
        let (g, pyr, _, _) = build(&features, &config, AttentionMode::Uniform);
        for &level in &pyr.levels {
            let v = g.value(level);
            let first = v.row(0).to_owned();
            for row in v.rows() {
                for (a, b) in row.iter().zip(first.iter()) {
                    assert!((a - b).abs() < 1e-9, "rows diverged within a level");
                }
            }
        }
    }

    #[test]
    fn pooling_locality_under_identity_attention() {
        let config = PyramidConfig::new(2, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Array2::from_shape_fn((16, 8), |_| rng.gen_range(-1.0..1.0));
        let (g0, pyr0, _, _) = build(&base, &config, AttentionMode::Identity);
        let mut bumped = base.clone();
        let t = 5usize;
        bumped[[t, 3]] += 1.0;
        let (g1, pyr1, _, _) = build(&bumped, &config, AttentionMode::Identity);
        for (level, (&a, &b)) in pyr0.levels.iter().zip(pyr1.levels.iter()).enumerate() {
            let va = g0.value(a);
            let vb = g1.value(b);
            let ancestor = t / (1 << (level + 1));
            for row in 0..va.nrows() {
                let diff: f64 = (&va.row(row) - &vb.row(row)).mapv(f64::abs).sum();
                if row == ancestor {
                    assert!(diff > 1e-9, "ancestor row unchanged at level {level}");
                } else {
                    assert!(
                        diff < 1e-12,
                        "non-ancestor row {row} changed at level {level}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let config = PyramidConfig::new(2, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let features = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));

        let run = |feats: &Array2<f64>| {
            let mut params = ParamSet::new();
            config.init_params(&mut params, 11, "pyr");
            let mut g = Graph::new();
            let input = g.leaf(feats.clone());
            let mut bindings = Bindings::new();
            let pyr = build_pyramid(
                &mut g,
                input,
                &[true; 8],
                &config,
                &params,
                &mut bindings,
                "pyr",
                AttentionMode::Standard,
            )
            .unwrap();
            let last = *pyr.levels.last().unwrap();
            let w = g.leaf(probe.clone());
            let weighted = g.mul(last, w);
            let loss = g.sum_all(weighted);
            (g, input, loss)
        };

        let (g, input, loss) = run(&features);
        let grads = g.backward(loss);
        let analytic = grads.get(input).unwrap().clone();
        let mut f = |x: &Array2<f64>| {
            let (g, _, loss) = run(x);
            g.scalar(loss)
        };
        let numeric = numeric_grad(&mut f, &features, 1e-5);
        assert_grads_close(&analytic, &numeric, 1e-4);
    }

    proptest! {
        #[test]
        fn shape_law_holds(t in 8usize..96, levels in 1usize..4) {
            prop_assume!(t >= (1 << levels));
            let config = PyramidConfig::new(levels, 8, 4);
            let features = Array2::zeros((t, 8));
            let (g, pyr, _, _) = build(&features, &config, AttentionMode::Standard);
            let lens = pyr.level_lens(&g);
            for (i, len) in lens.iter().enumerate() {
                prop_assert_eq!(*len, t / (1 << (i + 1)));
            }
        }
    }
}
