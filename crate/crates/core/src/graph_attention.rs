//! Graph attention over fully connected graphs with self-loops, top-k graph
//! pooling, and affine projection along the node or feature axis.
//!
//! Graphs are batched as `[B, N, d]` (nodes by features); shapes are reported
//! as `(d, N)`.

use crate::nn::{Init, Session};
use crate::tensor::Var;

/// Registers `{name}.att`, `{name}.bn` and `{name}.proj` for a `d -> d_out` layer.
pub fn init_gat(init: &mut Init, name: &str, d: usize, d_out: usize) {
    init.uniform(&format!("{name}.att"), &[d], 1.0 / (d as f64).sqrt());
    init.batch_norm(&format!("{name}.bn"), d);
    init.linear(&format!("{name}.proj"), d, d_out);
}

/// Registers the `{name}.score` projection vector of a pooling layer.
pub fn init_pool(init: &mut Init, name: &str, d: usize) {
    init.uniform(&format!("{name}.score"), &[d], 1.0 / (d as f64).sqrt());
}

/// Pairwise attention `[B, N(u), N(n)]`: `alpha[u, n]` is the softmax over
/// `u` of `w . (h_n * h_u)`, so every column sums to one.
pub fn gat_attention_weights(h: &Var, w: &Var) -> Var {
    let d = w.shape()[0];
    let hw = h.mul(&w.reshape(&[1, 1, d]));
    hw.bmm(&h.permute(&[0, 2, 1])).softmax(1)
}

/// `o = SeLU(BN(alpha^T h + h))` followed by the `d -> d_out` projection.
pub fn gat_forward(s: &Session, name: &str, h: &Var) -> Var {
    let alpha = gat_attention_weights(h, &s.param(&format!("{name}.att")));
    let m = alpha.permute(&[0, 2, 1]).bmm(h);
    let o = s.batch_norm(&m.add(h), &format!("{name}.bn"), 2).selu();
    s.linear(&o, &format!("{name}.proj"))
}

/// `round-half-up(k * n)`, at least one.
pub fn pooled_count(n: usize, k: f64) -> usize {
    ((k * n as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Indices of the `keep` highest scores (ties to the lower index), ascending.
fn top_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Top-k pooling: `score = sigmoid(h . p / |p|)`, keep the best
/// `pooled_count(N, k)` nodes in their original order, gate them by score.
pub fn graph_pool(s: &Session, name: &str, h: &Var, k: f64) -> Var {
    let p = s.param(&format!("{name}.score"));
    let (b, n, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let norm = p.square().sum_all().sqrt().reshape(&[1, 1, 1]);
    let unit = p.reshape(&[1, d, 1]).div(&norm);
    let scores = h.bmm(&Var::concat(&vec![&unit; b], 0)).sigmoid();
    let gated = h.mul(&scores);
    let keep = pooled_count(n, k);
    let rows: Vec<Var> = (0..b)
        .map(|i| {
            let sc: Vec<f64> = scores.value().index_axis(ndarray::Axis(0), i).iter().copied().collect();
            gated.slice_axis(0, i, i + 1).index_select(1, &top_indices(&sc, keep))
        })
        .collect();
    let refs: Vec<&Var> = rows.iter().collect();
    Var::concat(&refs, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectAxis {
    Nodes,
    Features,
}

/// Affine map along one axis: nodes `[B, N, d] -> [B, out, d]`, features
/// `[B, N, d] -> [B, N, out]`. Parameters live under `{name}`.
pub fn project_nodes(s: &Session, name: &str, h: &Var, axis: ProjectAxis) -> Var {
    match axis {
        ProjectAxis::Nodes => s.linear(&h.permute(&[0, 2, 1]), name).permute(&[0, 2, 1]),
        ProjectAxis::Features => s.linear(h, name),
    }
}

/// Records a `[B, N, d]` graph as `(d, N)`.
pub fn record_graph(s: &Session, label: &str, h: &Var) {
    s.record_shape(label, &[h.shape()[2], h.shape()[1]]);
}
