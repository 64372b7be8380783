//! Tri-modal alignment: proposal pooling, per-modality projection into the
//! shared space, and cosine scoring against a classifier bank.

use ndarray::{Array1, Array2};

use crate::graph::{Graph, NodeId};
use crate::params::{Bindings, ParamSet};

const NORM_EPS: f64 = 1e-12;

/// Mean-pool feature rows whose snippet index falls in
/// `[floor(start), ceil(end))`. Degenerate rounding falls back to the row
/// nearest the segment center so at least one row always contributes.
pub fn pool_proposal(features: &Array2<f64>, start: f64, end: f64) -> Array1<f64> {
    let t = features.nrows();
    let lo = (start.floor().max(0.0) as usize).min(t.saturating_sub(1));
    let hi = (end.ceil() as usize).clamp(lo, t);
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        let center = ((start + end) / 2.0).clamp(0.0, (t - 1) as f64) as usize;
        (center, center + 1)
    };
    let mut acc = Array1::zeros(features.ncols());
    for row in lo..hi {
        acc += &features.row(row);
    }
    acc / (hi - lo) as f64
}

/// Register one modality's aligner: a 2-layer MLP into the shared space.
pub fn init_aligner_params(params: &mut ParamSet, seed: u64, prefix: &str, d_in: usize, d_align: usize) {
    params.init_gaussian(
        seed,
        &format!("{prefix}/w1"),
        d_in,
        d_align,
        1.0 / (d_in as f64).sqrt(),
    );
    params.init_zeros(&format!("{prefix}/b1"), 1, d_align);
    params.init_gaussian(
        seed,
        &format!("{prefix}/w2"),
        d_align,
        d_align,
        1.0 / (d_align as f64).sqrt(),
    );
    params.init_zeros(&format!("{prefix}/b2"), 1, d_align);
}

/// Project rows into the shared space and L2-normalize them.
///
/// Inputs are normalized first so that the overall map is invariant to the
/// scale of the raw pooled features (cosine scoring must be scale-free).
pub fn align_in(
    g: &mut Graph,
    params: &ParamSet,
    bindings: &mut Bindings,
    prefix: &str,
    rows: NodeId,
) -> NodeId {
    let w1 = bindings.bind(g, params, &format!("{prefix}/w1"));
    let b1 = bindings.bind(g, params, &format!("{prefix}/b1"));
    let w2 = bindings.bind(g, params, &format!("{prefix}/w2"));
    let b2 = bindings.bind(g, params, &format!("{prefix}/b2"));
    let rows = g.l2_normalize_rows(rows, NORM_EPS);
    let h = g.matmul(rows, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    let h = g.add_row(h, b2);
    g.l2_normalize_rows(h, NORM_EPS)
}

/// Value-level aligner forward.
pub fn align_values(params: &ParamSet, prefix: &str, rows: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let mut bindings = Bindings::new();
    let input = g.leaf(rows.clone());
    let out = align_in(&mut g, params, &mut bindings, prefix, input);
    g.value(out).clone()
}

/// Class probabilities for aligned proposal embeddings.
///
/// Per stream, probabilities are the row-wise softmax of `cosine / tau`
/// against the bank; with several streams the probability vectors are
/// averaged elementwise. Inputs must be row-normalized so the dot product
/// is the cosine.
pub fn class_probabilities(
    per_stream: &[Array2<f64>],
    aligned_bank: &Array2<f64>,
    tau: f64,
) -> Array2<f64> {
    assert!(!per_stream.is_empty());
    let n = per_stream[0].nrows();
    let c = aligned_bank.nrows();
    let mut probs = Array2::zeros((n, c));
    for stream in per_stream {
        assert_eq!(stream.nrows(), n);
        let logits = stream.dot(&aligned_bank.t());
        for (mut out, row) in probs.rows_mut().into_iter().zip(logits.rows()) {
            let scaled = row.mapv(|v| v / tau);
            let max = scaled.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let exps = scaled.mapv(|v| (v - max).exp());
            let sum = exps.sum();
            out.zip_mut_with(&exps, |o, &e| *o += e / sum);
        }
    }
    probs / per_stream.len() as f64
}

/// Argmax class if its probability clears the retention threshold.
pub fn retain_class(probs: &[f64], theta_cls: f64) -> Option<(usize, f64)> {
    let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
    for (i, &p) in probs.iter().enumerate() {
        if p > best_p {
            best = i;
            best_p = p;
        }
    }
    (best_p >= theta_cls).then_some((best, best_p))
}
