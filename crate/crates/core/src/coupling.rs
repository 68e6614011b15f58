//! BN-to-GCN attention, residual fusion of the two branches, and belief
//! propagation as a differentiable layer.
//!
//! Row 0 of every evidence/classification matrix is the disease node.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::bn::{BayesianNetwork, EvidenceMatrix};
use crate::bp::{bp_infer, bp_infer_raw, BpError};
use crate::gcn::GraphFeatureMap;
use crate::tape::{sigmoid, ParamStore, Tape, TapeError, Var};

/// Row of the disease node.
pub const DISEASE: usize = 0;
/// Default squeeze reduction ratio of channel attention.
pub const SE_REDUCTION: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum CouplingError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("row {row} is not a distribution")]
    NotStochastic { row: usize },
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Param(#[from] TapeError),
}

/// Attention weights of one GCN layer; matrices are `out × in`, biases `1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub spatial_w0: Array2<f64>,
    pub spatial_b0: Array2<f64>,
    pub spatial_w1: Array2<f64>,
    pub spatial_b1: Array2<f64>,
    pub squeeze_w: Array2<f64>,
    pub squeeze_b: Array2<f64>,
    pub excite_w: Array2<f64>,
    pub excite_b: Array2<f64>,
}

const ATTN_NAMES: [&str; 8] = [
    "spatial_w0", "spatial_b0", "spatial_w1", "spatial_b1", "squeeze_w", "squeeze_b", "excite_w",
    "excite_b",
];

impl LayerAttention {
    /// `nodes·grades → hidden → nodes` spatial map and `dim → dim/r → dim`
    /// channel map.
    pub fn new(
        nodes: usize,
        grades: usize,
        hidden: usize,
        dim: usize,
        reduction: usize,
        init: &mut impl FnMut(usize, usize) -> Array2<f64>,
    ) -> Self {
        let squeezed = (dim / reduction.max(1)).max(1);
        Self {
            spatial_w0: init(hidden, nodes * grades),
            spatial_b0: Array2::zeros((1, hidden)),
            spatial_w1: init(nodes, hidden),
            spatial_b1: Array2::zeros((1, nodes)),
            squeeze_w: init(squeezed, dim),
            squeeze_b: Array2::zeros((1, squeezed)),
            excite_w: init(dim, squeezed),
            excite_b: Array2::zeros((1, dim)),
        }
    }

    fn arrays(&self) -> [&Array2<f64>; 8] {
        [
            &self.spatial_w0,
            &self.spatial_b0,
            &self.spatial_w1,
            &self.spatial_b1,
            &self.squeeze_w,
            &self.squeeze_b,
            &self.excite_w,
            &self.excite_b,
        ]
    }

    pub fn register(&self, store: &mut ParamStore, l: usize) {
        for (name, value) in ATTN_NAMES.iter().zip(self.arrays()) {
            store.add(format!("attn.{l}.{name}"), value.clone());
        }
    }

    pub fn from_store(store: &ParamStore, l: usize) -> Result<Self, TapeError> {
        let get = |k: usize| -> Result<Array2<f64>, TapeError> {
            Ok(store.get(store.id(&format!("attn.{l}.{}", ATTN_NAMES[k]))?))
        };
        Ok(Self {
            spatial_w0: get(0)?,
            spatial_b0: get(1)?,
            spatial_w1: get(2)?,
            spatial_b1: get(3)?,
            squeeze_w: get(4)?,
            squeeze_b: get(5)?,
            excite_w: get(6)?,
            excite_b: get(7)?,
        })
    }
}

/// Per-layer attention modules.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub layers: Vec<LayerAttention>,
    /// Normalize node attention across nodes instead of squashing each score.
    pub spatial_softmax: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub spatial_w0: Var,
    pub spatial_b0: Var,
    pub spatial_w1: Var,
    pub spatial_b1: Var,
    pub squeeze_w: Var,
    pub squeeze_b: Var,
    pub excite_w: Var,
    pub excite_b: Var,
}

impl AttentionVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, l: usize) -> Result<Self, TapeError> {
        let mut get = |k: usize| -> Result<Var, TapeError> {
            Ok(tape.param(store, store.id(&format!("attn.{l}.{}", ATTN_NAMES[k]))?))
        };
        Ok(Self {
            spatial_w0: get(0)?,
            spatial_b0: get(1)?,
            spatial_w1: get(2)?,
            spatial_b1: get(3)?,
            squeeze_w: get(4)?,
            squeeze_b: get(5)?,
            excite_w: get(6)?,
            excite_b: get(7)?,
        })
    }

    fn constants(tape: &mut Tape, p: &LayerAttention) -> Self {
        let [a, b, c, d, e, f, g, h] = p.arrays().map(|m| tape.constant(m.clone()));
        Self {
            spatial_w0: a,
            spatial_b0: b,
            spatial_w1: c,
            spatial_b1: d,
            squeeze_w: e,
            squeeze_b: f,
            excite_w: g,
            excite_b: h,
        }
    }
}

/// Node attention for a batch of `(B·nodes) × C` marginals; returns a
/// `(B·nodes) × 1` column.
pub fn spatial_attention_op(
    tape: &mut Tape,
    vars: &AttentionVars,
    pb: Var,
    nodes: usize,
    softmax: bool,
) -> Var {
    let (rows, c) = tape.value(pb).dim();
    let batch = rows / nodes;
    let flat = tape.reshape(pb, batch, nodes * c);
    let hidden = tape.linear(flat, vars.spatial_w0, vars.spatial_b0);
    let hidden = tape.relu(hidden);
    let scores = tape.linear(hidden, vars.spatial_w1, vars.spatial_b1);
    let attn = if softmax {
        tape.softmax_rows(scores)
    } else {
        tape.sigmoid(scores)
    };
    tape.reshape(attn, rows, 1)
}

/// Squeeze-and-excitation over `(B·nodes) × D` features; returns `B × D`.
pub fn channel_attention_op(tape: &mut Tape, vars: &AttentionVars, h: Var, nodes: usize) -> Var {
    let pooled = tape.block_mean(h, nodes);
    let sq = tape.linear(pooled, vars.squeeze_w, vars.squeeze_b);
    let sq = tape.relu(sq);
    let ex = tape.linear(sq, vars.excite_w, vars.excite_b);
    tape.sigmoid(ex)
}

fn check_layer(params: &AttentionParams, layer: usize) -> Result<&LayerAttention, CouplingError> {
    params
        .layers
        .get(layer)
        .ok_or_else(|| CouplingError::Dimension(format!("no attention for layer {layer}")))
}

/// Node attention vector from BN-1 marginals.
pub fn spatial_attention(
    pb: &EvidenceMatrix,
    params: &AttentionParams,
    layer: usize,
) -> Result<Vec<f64>, CouplingError> {
    let p = check_layer(params, layer)?;
    let (n, c) = (pb.nodes(), pb.grades());
    if p.spatial_w0.ncols() != n * c || p.spatial_w1.nrows() != n {
        return Err(CouplingError::Dimension(format!(
            "spatial maps {:?}/{:?} for {n}×{c} marginals",
            p.spatial_w0.dim(),
            p.spatial_w1.dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = AttentionVars::constants(&mut tape, p);
    let x = tape.constant(pb.view().to_owned());
    let out = spatial_attention_op(&mut tape, &vars, x, n, params.spatial_softmax);
    Ok(tape.value(out).iter().copied().collect())
}

/// Channel attention vector from a layer's input features.
pub fn channel_attention(
    h: &GraphFeatureMap,
    params: &AttentionParams,
    layer: usize,
) -> Result<Vec<f64>, CouplingError> {
    let p = check_layer(params, layer)?;
    if p.squeeze_w.ncols() != h.dim() || p.excite_w.nrows() != h.dim() {
        return Err(CouplingError::Dimension(format!(
            "channel maps {:?}/{:?} for dim {}",
            p.squeeze_w.dim(),
            p.excite_w.dim(),
            h.dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = AttentionVars::constants(&mut tape, p);
    let x = tape.constant(h.features().clone());
    let out = channel_attention_op(&mut tape, &vars, x, h.nodes());
    Ok(tape.value(out).iter().copied().collect())
}

/// Trade-off logits and the two `C × 2C` fusion maps (input is
/// `[P_G row, P_B row]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `w_B = sigmoid(disease_logit)`.
    pub disease_logit: f64,
    /// `w'_B = sigmoid(attribute_logit)`, shared by all attributes.
    pub attribute_logit: f64,
    pub disease_w: Array2<f64>,
    pub disease_b: Array2<f64>,
    pub attribute_w: Array2<f64>,
    pub attribute_b: Array2<f64>,
}

const FUSION_NAMES: [&str; 6] = [
    "disease_logit",
    "attribute_logit",
    "disease_w",
    "disease_b",
    "attribute_w",
    "attribute_b",
];

impl FusionParams {
    /// Trade-offs at 0.5.
    pub fn new(grades: usize, init: &mut impl FnMut(usize, usize) -> Array2<f64>) -> Self {
        Self {
            disease_logit: 0.0,
            attribute_logit: 0.0,
            disease_w: init(grades, 2 * grades),
            disease_b: Array2::zeros((1, grades)),
            attribute_w: init(grades, 2 * grades),
            attribute_b: Array2::zeros((1, grades)),
        }
    }

    /// Logit for a trade-off in `[0, 1]`; the endpoints map to `±inf`.
    pub fn logit(w: f64) -> f64 {
        (w / (1.0 - w)).ln()
    }

    pub fn w_disease(&self) -> f64 {
        sigmoid(self.disease_logit)
    }

    pub fn w_attribute(&self) -> f64 {
        sigmoid(self.attribute_logit)
    }

    fn arrays(&self) -> [Array2<f64>; 6] {
        [
            Array2::from_elem((1, 1), self.disease_logit),
            Array2::from_elem((1, 1), self.attribute_logit),
            self.disease_w.clone(),
            self.disease_b.clone(),
            self.attribute_w.clone(),
            self.attribute_b.clone(),
        ]
    }

    pub fn register(&self, store: &mut ParamStore) {
        for (name, value) in FUSION_NAMES.iter().zip(self.arrays()) {
            store.add(format!("fusion.{name}"), value);
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self, TapeError> {
        let get = |k: usize| -> Result<Array2<f64>, TapeError> {
            Ok(store.get(store.id(&format!("fusion.{}", FUSION_NAMES[k]))?))
        };
        Ok(Self {
            disease_logit: get(0)?[[0, 0]],
            attribute_logit: get(1)?[[0, 0]],
            disease_w: get(2)?,
            disease_b: get(3)?,
            attribute_w: get(4)?,
            attribute_b: get(5)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub disease_logit: Var,
    pub attribute_logit: Var,
    pub disease_w: Var,
    pub disease_b: Var,
    pub attribute_w: Var,
    pub attribute_b: Var,
}

impl FusionVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Result<Self, TapeError> {
        let mut get = |k: usize| -> Result<Var, TapeError> {
            Ok(tape.param(store, store.id(&format!("fusion.{}", FUSION_NAMES[k]))?))
        };
        Ok(Self {
            disease_logit: get(0)?,
            attribute_logit: get(1)?,
            disease_w: get(2)?,
            disease_b: get(3)?,
            attribute_w: get(4)?,
            attribute_b: get(5)?,
        })
    }

    fn constants(tape: &mut Tape, p: &FusionParams) -> Self {
        let [a, b, c, d, e, f] = p.arrays().map(|m| tape.constant(m));
        Self {
            disease_logit: a,
            attribute_logit: b,
            disease_w: c,
            disease_b: d,
            attribute_w: e,
            attribute_b: f,
        }
    }
}

/// Residual fusion over a `(B·nodes) × C` batch.
pub fn fuse_op(tape: &mut Tape, vars: &FusionVars, pb: Var, pg: Var, nodes: usize) -> Var {
    let rows = tape.value(pb).nrows();
    let cat = tape.concat_cols(pg, pb);
    let branch = |tape: &mut Tape, logit: Var, w: Var, b: Var| {
        let logits = tape.linear(cat, w, b);
        let term = tape.softmax_rows(logits);
        let trade = tape.sigmoid(logit);
        let trade = tape.repeat_rows(trade, rows);
        let ones = tape.constant(Array2::ones((rows, 1)));
        let rest = tape.sub(ones, trade);
        let kept = tape.mul_col(pb, trade);
        let learned = tape.mul_col(term, rest);
        tape.add(kept, learned)
    };
    let disease = branch(tape, vars.disease_logit, vars.disease_w, vars.disease_b);
    let attribute = branch(tape, vars.attribute_logit, vars.attribute_w, vars.attribute_b);
    let take_disease = (0..rows).map(|r| r % nodes == DISEASE).collect();
    tape.select_rows(disease, attribute, take_disease)
}

fn check_stochastic(m: &EvidenceMatrix) -> Result<(), CouplingError> {
    for r in 0..m.nodes() {
        let row = m.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > crate::bn::EVIDENCE_SUM_TOL || row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CouplingError::NotStochastic { row: r });
        }
    }
    Ok(())
}

/// Fused distributions: `w·P_B + (1-w)·softmax(W [P_G, P_B] + b)` per row,
/// with the disease trade-off on row 0 and the shared attribute trade-off
/// elsewhere.
pub fn fuse_results(
    pb: &EvidenceMatrix,
    pg: &EvidenceMatrix,
    params: &FusionParams,
) -> Result<EvidenceMatrix, CouplingError> {
    let c = pb.grades();
    if pg.view().dim() != pb.view().dim() || params.disease_w.dim() != (c, 2 * c) || params.attribute_w.dim() != (c, 2 * c)
    {
        return Err(CouplingError::Dimension(format!(
            "P_B {:?}, P_G {:?}, fusion maps {:?}/{:?}",
            pb.view().dim(),
            pg.view().dim(),
            params.disease_w.dim(),
            params.attribute_w.dim()
        )));
    }
    check_stochastic(pb)?;
    check_stochastic(pg)?;
    let mut tape = Tape::new();
    let vars = FusionVars::constants(&mut tape, params);
    let b = tape.constant(pb.view().to_owned());
    let g = tape.constant(pg.view().to_owned());
    let out = fuse_op(&mut tape, &vars, b, g, pb.nodes());
    let mut fused = tape.value(out).clone();
    // Convex combinations can drift by an ulp; clamp into [0, 1].
    fused.mapv_inplace(|v| v.clamp(0.0, 1.0));
    EvidenceMatrix::new(fused).map_err(|_| CouplingError::NotStochastic { row: 0 })
}

/// Disease marginal of BN-2 given the fused evidence.
pub fn final_bn_predict(
    bn2: &BayesianNetwork,
    fused: &EvidenceMatrix,
    max_steps: usize,
    tol: f64,
) -> Result<Array1<f64>, CouplingError> {
    let out = bp_infer(bn2, fused, max_steps, tol)?;
    Ok(out.marginals.view().row(DISEASE).to_owned())
}

/// Belief propagation applied blockwise to `(B·nodes) × C` evidence.
///
/// The backward pass replays each block's recorded trajectory; with
/// `propagate_grad` false it returns zeros, cutting the path.
pub fn belief_layer(
    tape: &mut Tape,
    net: Arc<BayesianNetwork>,
    evidence: Var,
    max_steps: usize,
    tol: f64,
    propagate_grad: bool,
) -> Result<Var, BpError> {
    let ev = tape.value(evidence).clone();
    let (rows, c) = ev.dim();
    let n = net.node_count();
    if rows % n != 0 || c != net.grades() {
        return Err(BpError::Shape {
            expected: (n, net.grades()),
            found: (rows, c),
        });
    }
    let mut outcomes = Vec::with_capacity(rows / n);
    let mut out = Array2::zeros((rows, c));
    for (b, block) in ev.exact_chunks((n, c)).into_iter().enumerate() {
        let o = bp_infer_raw(&net, block, max_steps, tol)?;
        out.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&o.marginals.view());
        outcomes.push(o);
    }
    Ok(tape.custom(&[evidence], out, move |g| {
        let mut d = Array2::zeros((rows, c));
        if propagate_grad {
            for (b, o) in outcomes.iter().enumerate() {
                let gb = g.slice(ndarray::s![b * n..(b + 1) * n, ..]);
                let v = o.vjp(&net, gb).expect("trajectory recorded on this net");
                d.slice_mut(ndarray::s![b * n..(b + 1) * n, ..]).assign(&v);
            }
        }
        vec![d]
    }))
}
