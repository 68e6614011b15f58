//! Residual graph convolution over the attribute/disease graph.
//!
//! The graph is complete over its `n` nodes with one learnable symmetric
//! weight per unordered pair (zero diagonal). A layer modulates its input
//! by channel then node attention, aggregates at node `i` the elementwise
//! maximum over neighbours `j` of `e_ij · W_agg (h_j - h_i)`, runs an
//! update MLP on `[h_i, agg_i]` and adds the unmodulated input back.
//!
//! Neighbours are the nodes with a nonzero edge weight; a node without any
//! aggregates to the zero vector. Ties in the maximum go to the lowest
//! neighbour index.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bn::EvidenceMatrix;
use crate::tape::{ParamStore, Tape, TapeError, Var};

/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum GcnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite feature at node {node}, channel {channel}")]
    NonFinite { node: usize, channel: usize },
    #[error(transparent)]
    Param(#[from] TapeError),
}

/// `(nodes × D_l)` features of one graph at layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatureMap {
    features: Array2<f64>,
    pub layer_index: usize,
}

impl GraphFeatureMap {
    pub fn new(features: Array2<f64>, layer_index: usize) -> Result<Self, GcnError> {
        if let Some(((node, channel), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(GcnError::NonFinite { node, channel });
        }
        Ok(Self {
            features,
            layer_index,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Number of free edge weights for `n` nodes.
pub fn edge_param_len(n: usize) -> usize {
    n * (n - 1) / 2
}

/// Position of unordered pair `(i, j)`, `i != j`, in the edge parameter row.
pub fn edge_param_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = (i.min(j), i.max(j));
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

/// Expands the edge parameter row into a symmetric zero-diagonal matrix.
pub fn edge_matrix(n: usize, params: &Array2<f64>) -> Array2<f64> {
    let mut e = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                e[[i, j]] = params[[0, edge_param_index(n, i, j)]];
            }
        }
    }
    e
}

/// Statistics of one training batch, per `(node slot, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Array2<f64>,
    pub var: Array2<f64>,
}

/// Running normalization statistics used in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl RunningStats {
    pub fn new(nodes: usize, dim: usize) -> Self {
        Self {
            mean: vec![vec![0.0; dim]; nodes],
            var: vec![vec![1.0; dim]; nodes],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for ((m, v), (bm, bv)) in self
            .mean
            .iter_mut()
            .flatten()
            .zip(self.var.iter_mut().flatten())
            .zip(batch.mean.iter().zip(batch.var.iter()))
        {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * bm;
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * bv;
        }
    }

    fn arrays(&self) -> (Array2<f64>, Array2<f64>) {
        let to = |rows: &Vec<Vec<f64>>| {
            let d = rows.first().map_or(0, Vec::len);
            Array2::from_shape_vec((rows.len(), d), rows.iter().flatten().copied().collect())
                .expect("running stats shape")
        };
        (to(&self.mean), to(&self.var))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Batch statistics per `(node slot, channel)` over samples; identity
    /// normalization for a batch of one.
    Train,
    Eval(&'a RunningStats),
}

/// Batch normalization of a `(B·nodes) × D` matrix followed by a per-channel
/// affine map (`gamma`, `beta`: `1 × D`).
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    nodes: usize,
    mode: NormMode<'_>,
) -> (Var, Option<BatchStats>) {
    let xv = tape.value(x).clone();
    let gv = tape.value(gamma).clone();
    let bv = tape.value(beta).clone();
    let (rows, d) = xv.dim();
    let batch = rows / nodes;
    let mut xhat = xv.clone();
    // Per-row scale mapping dx̂ to dx in the affine cases.
    let mut inv_std = Array2::<f64>::ones((nodes, d));
    let mut stats = None;
    let coupled = matches!(mode, NormMode::Train) && batch > 1;
    match mode {
        NormMode::Train if batch > 1 => {
            let mut mean = Array2::zeros((nodes, d));
            let mut var = Array2::zeros((nodes, d));
            for k in 0..nodes {
                let group = xv.slice(s![k..;nodes, ..]);
                let m = group.mean_axis(Axis(0)).expect("nonempty");
                let v = (&group - &m).mapv(|x| x * x).mean_axis(Axis(0)).expect("nonempty");
                mean.row_mut(k).assign(&m);
                var.row_mut(k).assign(&v);
            }
            inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            for r in 0..rows {
                let k = r % nodes;
                let mut row = xhat.row_mut(r);
                row -= &mean.row(k);
                row *= &inv_std.row(k);
            }
            stats = Some(BatchStats { mean, var });
        }
        NormMode::Train => {}
        NormMode::Eval(running) => {
            let (mean, var) = running.arrays();
            inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            for r in 0..rows {
                let k = r % nodes;
                let mut row = xhat.row_mut(r);
                row -= &mean.row(k);
                row *= &inv_std.row(k);
            }
        }
    }
    let out = &xhat * &gv + &bv;
    let var = tape.custom(&[x, gamma, beta], out, move |g| {
        let dgamma = (g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = g * &gv;
        let mut dx = Array2::zeros(dxhat.dim());
        if coupled {
            let bf = batch as f64;
            for k in 0..nodes {
                let gx = dxhat.slice(s![k..;nodes, ..]);
                let xh = xhat.slice(s![k..;nodes, ..]);
                let sum_g = gx.sum_axis(Axis(0));
                let sum_gx = (&gx * &xh).sum_axis(Axis(0));
                let istd = inv_std.row(k);
                for b in 0..batch {
                    let r = b * nodes + k;
                    let v = (&gx.row(b) * bf - &sum_g - &(&xh.row(b) * &sum_gx)) * &istd / bf;
                    dx.row_mut(r).assign(&v);
                }
            }
        } else {
            for r in 0..dxhat.nrows() {
                dx.row_mut(r).assign(&(&dxhat.row(r) * &inv_std.row(r % nodes)));
            }
        }
        vec![dx, dgamma, dbeta]
    });
    (var, stats)
}

/// Edge-weighted max-pool of pairwise differences within each graph of a
/// `(B·nodes) × D` batch. `edges` is the `1 × n(n-1)/2` weight row.
pub fn edge_max_aggregate(tape: &mut Tape, z: Var, edges: Var, nodes: usize) -> Var {
    let zv = tape.value(z).clone();
    let ev = tape.value(edges).clone();
    let (rows, d) = zv.dim();
    let batch = rows / nodes;
    let e = edge_matrix(nodes, &ev);
    let mut out = Array2::zeros((rows, d));
    // argmax neighbour per output cell, usize::MAX when isolated.
    let mut arg = vec![usize::MAX; rows * d];
    for b in 0..batch {
        for i in 0..nodes {
            let ri = b * nodes + i;
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                let mut who = usize::MAX;
                for j in 0..nodes {
                    if j == i || e[[i, j]] == 0.0 {
                        continue;
                    }
                    let val = e[[i, j]] * (zv[[b * nodes + j, c]] - zv[[ri, c]]);
                    if val > best {
                        best = val;
                        who = j;
                    }
                }
                if who != usize::MAX {
                    out[[ri, c]] = best;
                    arg[ri * d + c] = who;
                }
            }
        }
    }
    tape.custom(&[z, edges], out, move |g| {
        let mut dz = Array2::zeros((rows, d));
        let mut de = Array2::zeros(ev.dim());
        for b in 0..batch {
            for i in 0..nodes {
                let ri = b * nodes + i;
                for c in 0..d {
                    let j = arg[ri * d + c];
                    if j == usize::MAX {
                        continue;
                    }
                    let gv = g[[ri, c]];
                    let rj = b * nodes + j;
                    dz[[rj, c]] += gv * e[[i, j]];
                    dz[[ri, c]] -= gv * e[[i, j]];
                    de[[0, edge_param_index(nodes, i, j)]] += gv * (zv[[rj, c]] - zv[[ri, c]]);
                }
            }
        }
        vec![dz, de]
    })
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct GcnLayerVars {
    pub edges: Var,
    pub agg: Var,
    pub update_w1: Var,
    pub update_b1: Var,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub update_w2: Var,
    pub update_b2: Var,
}

/// Segment names of layer `l` in a [`ParamStore`].
pub fn layer_segment_names(l: usize) -> [String; 8] {
    [
        "edges", "agg", "update_w1", "update_b1", "norm_gamma", "norm_beta", "update_w2",
        "update_b2",
    ]
    .map(|s| format!("gcn.{l}.{s}"))
}

impl GcnLayerVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, l: usize) -> Result<Self, TapeError> {
        let n = layer_segment_names(l);
        let mut get = |k: usize| -> Result<Var, TapeError> { Ok(tape.param(store, store.id(&n[k])?)) };
        Ok(Self {
            edges: get(0)?,
            agg: get(1)?,
            update_w1: get(2)?,
            update_b1: get(3)?,
            norm_gamma: get(4)?,
            norm_beta: get(5)?,
            update_w2: get(6)?,
            update_b2: get(7)?,
        })
    }
}

/// One residual graph convolution on a batch. `spatial` is `(B·nodes) × 1`,
/// `channel` is `B × D`; `None` means no modulation.
#[allow(clippy::too_many_arguments)]
pub fn graph_conv(
    tape: &mut Tape,
    layer: &GcnLayerVars,
    h: Var,
    spatial: Option<Var>,
    channel: Option<Var>,
    nodes: usize,
    mode: NormMode<'_>,
) -> (Var, Option<BatchStats>) {
    let mut m = h;
    if let Some(c) = channel {
        let rep = tape.repeat_rows(c, nodes);
        m = tape.mul(m, rep);
    }
    if let Some(sp) = spatial {
        m = tape.mul_col(m, sp);
    }
    let z = tape.matmul(m, layer.agg);
    let agg = edge_max_aggregate(tape, z, layer.edges, nodes);
    let cat = tape.concat_cols(m, agg);
    let u = tape.linear(cat, layer.update_w1, layer.update_b1);
    let (u, stats) = batch_norm(tape, u, layer.norm_gamma, layer.norm_beta, nodes, mode);
    let u = tape.relu(u);
    let u = tape.linear(u, layer.update_w2, layer.update_b2);
    (tape.add(u, h), stats)
}

/// Concrete weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    /// `1 × n(n-1)/2` upper-triangle edge weights.
    pub edges: Array2<f64>,
    /// `D × D`, applied as `h · agg`.
    pub agg: Array2<f64>,
    pub update_w1: Array2<f64>,
    pub update_b1: Array2<f64>,
    pub norm_gamma: Array2<f64>,
    pub norm_beta: Array2<f64>,
    pub update_w2: Array2<f64>,
    pub update_b2: Array2<f64>,
    pub running: RunningStats,
}

impl GcnLayer {
    /// Layer with unit edge weights and unit-scale normalization.
    pub fn new(nodes: usize, dim: usize, init: &mut impl FnMut(usize, usize) -> Array2<f64>) -> Self {
        Self {
            edges: Array2::ones((1, edge_param_len(nodes))),
            agg: init(dim, dim),
            update_w1: init(dim, 2 * dim),
            update_b1: Array2::zeros((1, dim)),
            norm_gamma: Array2::ones((1, dim)),
            norm_beta: Array2::zeros((1, dim)),
            update_w2: init(dim, dim),
            update_b2: Array2::zeros((1, dim)),
            running: RunningStats::new(nodes, dim),
        }
    }

    pub fn register(&self, store: &mut ParamStore, l: usize) {
        let n = layer_segment_names(l);
        for (name, value) in n.iter().zip(self.arrays()) {
            store.add(name.clone(), value.clone());
        }
    }

    fn arrays(&self) -> [&Array2<f64>; 8] {
        [
            &self.edges,
            &self.agg,
            &self.update_w1,
            &self.update_b1,
            &self.norm_gamma,
            &self.norm_beta,
            &self.update_w2,
            &self.update_b2,
        ]
    }

    pub fn from_store(store: &ParamStore, l: usize, running: RunningStats) -> Result<Self, TapeError> {
        let n = layer_segment_names(l);
        let get = |k: usize| -> Result<Array2<f64>, TapeError> { Ok(store.get(store.id(&n[k])?)) };
        Ok(Self {
            edges: get(0)?,
            agg: get(1)?,
            update_w1: get(2)?,
            update_b1: get(3)?,
            norm_gamma: get(4)?,
            norm_beta: get(5)?,
            update_w2: get(6)?,
            update_b2: get(7)?,
            running,
        })
    }

    /// Symmetric `n × n` edge-weight matrix.
    pub fn edge_weights(&self) -> Array2<f64> {
        let n = self.running.mean.len();
        edge_matrix(n, &self.edges)
    }
}

/// Evaluation-mode graph convolution of a single graph.
pub fn graph_conv_layer(
    layer: &GcnLayer,
    h: &GraphFeatureMap,
    spatial_attn: &[f64],
    channel_attn: &[f64],
) -> Result<GraphFeatureMap, GcnError> {
    let (n, d) = h.features.dim();
    if spatial_attn.len() != n || channel_attn.len() != d || layer.agg.dim() != (d, d) {
        return Err(GcnError::Dimension(format!(
            "features {n}×{d}, spatial {}, channel {}, agg {:?}",
            spatial_attn.len(),
            channel_attn.len(),
            layer.agg.dim()
        )));
    }
    if layer.edges.dim() != (1, edge_param_len(n)) {
        return Err(GcnError::Dimension(format!(
            "edge weights {:?} for {n} nodes",
            layer.edges.dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = GcnLayerVars {
        edges: tape.constant(layer.edges.clone()),
        agg: tape.constant(layer.agg.clone()),
        update_w1: tape.constant(layer.update_w1.clone()),
        update_b1: tape.constant(layer.update_b1.clone()),
        norm_gamma: tape.constant(layer.norm_gamma.clone()),
        norm_beta: tape.constant(layer.norm_beta.clone()),
        update_w2: tape.constant(layer.update_w2.clone()),
        update_b2: tape.constant(layer.update_b2.clone()),
    };
    let hv = tape.constant(h.features.clone());
    let sp = tape.constant(Array2::from_shape_vec((n, 1), spatial_attn.to_vec()).expect("n × 1"));
    let ch = tape.constant(Array2::from_shape_vec((1, d), channel_attn.to_vec()).expect("1 × d"));
    let (out, _) = graph_conv(
        &mut tape,
        &vars,
        hv,
        Some(sp),
        Some(ch),
        n,
        NormMode::Eval(&layer.running),
    );
    GraphFeatureMap::new(tape.value(out).clone(), h.layer_index + 1)
}

/// Reshapes `projection · f0 + bias` into the layer-0 node features.
pub fn project_node_features(
    f0: &[f64],
    projection: &Array2<f64>,
    bias: Option<&Array2<f64>>,
    nodes: usize,
) -> Result<GraphFeatureMap, GcnError> {
    if projection.ncols() != f0.len() || projection.nrows() % nodes != 0 {
        return Err(GcnError::Dimension(format!(
            "projection {:?} for input {} and {nodes} nodes",
            projection.dim(),
            f0.len()
        )));
    }
    let d0 = projection.nrows() / nodes;
    let mut flat = projection.dot(&ndarray::Array1::from(f0.to_vec()));
    if let Some(b) = bias {
        flat += &b.row(0);
    }
    GraphFeatureMap::new(
        Array2::from_shape_vec((nodes, d0), flat.to_vec()).expect("nodes × d0"),
        0,
    )
}

/// Per-node affine map then row softmax over grades.
pub fn classify_head(
    h: &GraphFeatureMap,
    head: &Array2<f64>,
    bias: &Array2<f64>,
) -> Result<EvidenceMatrix, GcnError> {
    if head.ncols() != h.dim() || bias.dim() != (1, head.nrows()) {
        return Err(GcnError::Dimension(format!(
            "head {:?} bias {:?} for feature dim {}",
            head.dim(),
            bias.dim(),
            h.dim()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(h.features.clone());
    let w = tape.constant(head.clone());
    let b = tape.constant(bias.clone());
    let logits = tape.linear(x, w, b);
    let p = tape.softmax_rows(logits);
    Ok(EvidenceMatrix::new(tape.value(p).clone()).expect("softmax rows are distributions"))
}
