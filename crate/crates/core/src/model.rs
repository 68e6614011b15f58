//! The hybrid network: encoder, BN-1 and GCN branches, attention coupling,
//! residual fusion and BN-2.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bn::{BayesianNetwork, EvidenceMatrix};
use crate::bp::BpError;
use crate::coupling::{
    belief_layer, channel_attention_op, fuse_op, spatial_attention_op, AttentionVars,
    FusionParams, FusionVars, LayerAttention, DISEASE,
};
use crate::gcn::{graph_conv, BatchStats, GcnLayer, GcnLayerVars, NormMode, RunningStats};
use crate::learn::StructureSearchConfig;
use crate::tape::{ParamStore, Tape, TapeError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input has {found} columns, model expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("belief propagation failed: {0}")]
    Bp(#[from] BpError),
    #[error(transparent)]
    Param(#[from] TapeError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Belief-propagation schedule inside the network. `tol = 0` runs exactly
/// `max_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpSettings {
    pub max_steps: usize,
    pub tol: f64,
}

impl Default for BpSettings {
    fn default() -> Self {
        Self {
            max_steps: 60,
            tol: 1e-7,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    /// Width of the encoder output `F_0`.
    pub feature_dim: usize,
    /// Node feature width `D_l`, constant across layers.
    pub node_dim: usize,
    pub layers: usize,
    pub attention_hidden: usize,
    pub se_reduction: usize,
    pub spatial_softmax: bool,
    pub bp: BpSettings,
    pub structure: StructureSearchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 64,
            feature_dim: 64,
            node_dim: 16,
            layers: 3,
            attention_hidden: 16,
            se_reduction: crate::coupling::SE_REDUCTION,
            spatial_softmax: false,
            bp: BpSettings::default(),
            structure: StructureSearchConfig::default(),
        }
    }
}

/// Switches for ablations. Everything on is the full hybrid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    /// BN-1 inference on the initial evidence; off passes `P⁰_B` through.
    pub bn1: bool,
    /// BN-2 on the fused output; off uses the fused disease row directly.
    pub bn2: bool,
    pub spatial_attention: bool,
    pub channel_attention: bool,
    /// Residual fusion with the BN branch; off uses the GCN output alone.
    pub fusion: bool,
    pub grad_through_bn: bool,
    pub alternate_training: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            bn1: true,
            bn2: true,
            spatial_attention: true,
            channel_attention: true,
            fusion: true,
            grad_through_bn: true,
            alternate_training: true,
        }
    }
}

impl Components {
    /// The GCN branch alone (with its own channel attention).
    pub fn gcn_only() -> Self {
        Self {
            bn1: false,
            bn2: false,
            spatial_attention: false,
            channel_attention: true,
            fusion: false,
            grad_through_bn: false,
            alternate_training: false,
        }
    }
}

/// Data-dependent dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    /// `N + 1`, disease first.
    pub nodes: usize,
    pub grades: usize,
    pub input_dim: usize,
}

/// Replaces one attribute's BN-1 evidence and layer-0 GCN feature.
#[derive(Debug, Clone)]
pub struct Deactivation {
    pub node: usize,
    pub evidence: Vec<f64>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles of every stage output for a batch.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `(B·n) × C` initial evidence classifier.
    pub p0_b: Var,
    /// `(B·n) × C` auxiliary classifier on `H_G0`.
    pub p0_g: Var,
    /// `(B·n) × D` layer-0 node features.
    pub h_g0: Var,
    /// `(B·n) × C` BN-1 marginals.
    pub p_b: Var,
    /// `(B·n) × C` GCN classification.
    pub p_g: Var,
    /// `(B·n) × C` fused classification.
    pub fused: Var,
    /// `B × C` final disease distribution.
    pub final_disease: Var,
    pub batch_stats: Vec<Option<BatchStats>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub shape: ModelShape,
    pub config: ModelConfig,
    pub components: Components,
    pub params: ParamStore,
    pub running: Vec<RunningStats>,
    pub bn1: Arc<BayesianNetwork>,
    pub bn2: Arc<BayesianNetwork>,
}

/// Uniform in `±1/sqrt(fan_in)` for an `out × in` matrix.
fn fan_in_init(rng: &mut ChaCha8Rng) -> impl FnMut(usize, usize) -> Array2<f64> + '_ {
    move |r, c| {
        let b = 1.0 / (c as f64).sqrt();
        Array2::from_shape_fn((r, c), |_| rng.random_range(-b..b))
    }
}

impl HybridModel {
    pub fn new(
        shape: ModelShape,
        config: ModelConfig,
        components: Components,
        bn1: BayesianNetwork,
        bn2: BayesianNetwork,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let (n, c, d) = (shape.nodes, shape.grades, config.node_dim);
        for net in [&bn1, &bn2] {
            if (net.node_count(), net.grades()) != (n, c) {
                return Err(ModelError::Config(format!(
                    "network has {}×{} variables, model expects {n}×{c}",
                    net.node_count(),
                    net.grades()
                )));
            }
        }
        if config.layers == 0 || d == 0 || config.feature_dim == 0 || n < 2 {
            return Err(ModelError::Config("empty layer sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = fan_in_init(&mut rng);
        let mut p = ParamStore::new();
        let zeros = |k: usize| Array2::zeros((1, k));
        p.add("encoder.w1", init(config.encoder_hidden, shape.input_dim));
        p.add("encoder.b1", zeros(config.encoder_hidden));
        p.add("encoder.w2", init(config.feature_dim, config.encoder_hidden));
        p.add("encoder.b2", zeros(config.feature_dim));
        p.add("evidence.w", init(n * c, config.feature_dim));
        p.add("evidence.b", zeros(n * c));
        p.add("projection.w", init(n * d, config.feature_dim));
        p.add("projection.b", zeros(n * d));
        p.add("aux_head.w", init(c, d));
        p.add("aux_head.b", zeros(c));
        for l in 0..config.layers {
            GcnLayer::new(n, d, &mut init).register(&mut p, l);
            LayerAttention::new(n, c, config.attention_hidden, d, config.se_reduction, &mut init)
                .register(&mut p, l);
        }
        FusionParams::new(c, &mut init).register(&mut p);
        p.add("head.w", init(c, d));
        p.add("head.b", zeros(c));
        Ok(Self {
            shape,
            config: config.clone(),
            components,
            params: p,
            running: vec![RunningStats::new(n, d); config.layers],
            bn1: Arc::new(bn1),
            bn2: Arc::new(bn2),
        })
    }

    fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var, TapeError> {
        Ok(tape.param(&self.params, self.params.id(name)?))
    }

    /// Records the forward pass of a `B × input_dim` batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: ArrayView2<'_, f64>,
        mode: Mode,
        deactivate: Option<&Deactivation>,
    ) -> Result<ForwardVars, ModelError> {
        if x.ncols() != self.shape.input_dim {
            return Err(ModelError::InputDim {
                expected: self.shape.input_dim,
                found: x.ncols(),
            });
        }
        let (n, c, d) = (self.shape.nodes, self.shape.grades, self.config.node_dim);
        let batch = x.nrows();
        let comp = self.components;
        let xin = tape.constant(x.to_owned());

        let (w, b) = (self.bind(tape, "encoder.w1")?, self.bind(tape, "encoder.b1")?);
        let h = tape.linear(xin, w, b);
        let h = tape.relu(h);
        let (w, b) = (self.bind(tape, "encoder.w2")?, self.bind(tape, "encoder.b2")?);
        let f0 = tape.linear(h, w, b);
        let f0 = tape.relu(f0);

        let (w, b) = (self.bind(tape, "evidence.w")?, self.bind(tape, "evidence.b")?);
        let fb = tape.linear(f0, w, b);
        let fb = tape.reshape(fb, batch * n, c);
        let p0_b = tape.softmax_rows(fb);

        let (w, b) = (self.bind(tape, "projection.w")?, self.bind(tape, "projection.b")?);
        let hg = tape.linear(f0, w, b);
        let h_g0 = tape.reshape(hg, batch * n, d);

        let (w, b) = (self.bind(tape, "aux_head.w")?, self.bind(tape, "aux_head.b")?);
        let aux = tape.linear(h_g0, w, b);
        let p0_g = tape.softmax_rows(aux);

        let (mut evidence, mut h) = (p0_b, h_g0);
        if let Some(deact) = deactivate {
            let mask: Vec<bool> = (0..batch * n).map(|r| r % n != deact.node).collect();
            let ev = Array2::from_shape_fn((batch * n, c), |(_, k)| deact.evidence[k]);
            let ev = tape.constant(ev);
            evidence = tape.select_rows(evidence, ev, mask.clone());
            let ft = Array2::from_shape_fn((batch * n, d), |(_, k)| deact.feature[k]);
            let ft = tape.constant(ft);
            h = tape.select_rows(h, ft, mask);
        }

        let p_b = if comp.bn1 {
            let bp = self.config.bp;
            belief_layer(
                tape,
                self.bn1.clone(),
                evidence,
                bp.max_steps,
                bp.tol,
                comp.grad_through_bn,
            )?
        } else {
            evidence
        };

        let mut batch_stats = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let layer = GcnLayerVars::bind(tape, &self.params, l)?;
            let attn = AttentionVars::bind(tape, &self.params, l)?;
            let spatial = comp
                .spatial_attention
                .then(|| spatial_attention_op(tape, &attn, p_b, n, self.config.spatial_softmax));
            let channel = comp
                .channel_attention
                .then(|| channel_attention_op(tape, &attn, h, n));
            let norm = match mode {
                Mode::Train => NormMode::Train,
                Mode::Eval => NormMode::Eval(&self.running[l]),
            };
            let (out, stats) = graph_conv(tape, &layer, h, spatial, channel, n, norm);
            h = out;
            batch_stats.push(stats);
        }

        let (w, b) = (self.bind(tape, "head.w")?, self.bind(tape, "head.b")?);
        let logits = tape.linear(h, w, b);
        let p_g = tape.softmax_rows(logits);

        let fused = if comp.fusion {
            let fv = FusionVars::bind(tape, &self.params)?;
            fuse_op(tape, &fv, p_b, p_g, n)
        } else {
            p_g
        };

        let out = if comp.bn2 {
            let bp = self.config.bp;
            belief_layer(
                tape,
                self.bn2.clone(),
                fused,
                bp.max_steps,
                bp.tol,
                comp.grad_through_bn,
            )?
        } else {
            fused
        };
        let final_disease = tape.gather_rows(out, (0..batch).map(|b| b * n + DISEASE).collect());

        Ok(ForwardVars {
            p0_b,
            p0_g,
            h_g0,
            p_b,
            p_g,
            fused,
            final_disease,
            batch_stats,
        })
    }

    /// Evaluation-mode outputs for every row of `x`.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Predictions, ModelError> {
        self.predict_with(x, None)
    }

    pub fn predict_with(
        &self,
        x: ArrayView2<'_, f64>,
        deactivate: Option<&Deactivation>,
    ) -> Result<Predictions, ModelError> {
        const CHUNK: usize = 64;
        let (n, c, d) = (self.shape.nodes, self.shape.grades, self.config.node_dim);
        let rows = x.nrows();
        let mut out = Predictions {
            nodes: n,
            final_disease: Array2::zeros((rows, c)),
            p0_b: Array2::zeros((rows * n, c)),
            fused: Array2::zeros((rows * n, c)),
            h_g0: Array2::zeros((rows * n, d)),
        };
        let mut tape = Tape::new();
        for start in (0..rows).step_by(CHUNK) {
            let end = (start + CHUNK).min(rows);
            tape.clear();
            let f = self.forward(&mut tape, x.slice(s![start..end, ..]), Mode::Eval, deactivate)?;
            out.final_disease
                .slice_mut(s![start..end, ..])
                .assign(tape.value(f.final_disease));
            let r = s![start * n..end * n, ..];
            out.p0_b.slice_mut(r).assign(tape.value(f.p0_b));
            out.fused.slice_mut(r).assign(tape.value(f.fused));
            out.h_g0.slice_mut(r).assign(tape.value(f.h_g0));
        }
        Ok(out)
    }

    pub fn fusion(&self) -> Result<FusionParams, TapeError> {
        FusionParams::from_store(&self.params)
    }

    pub fn gcn_layer(&self, l: usize) -> Result<GcnLayer, TapeError> {
        GcnLayer::from_store(&self.params, l, self.running[l].clone())
    }
}

/// Stacked evaluation outputs; per-node matrices are `(rows·nodes) × ·`.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub nodes: usize,
    pub final_disease: Array2<f64>,
    pub p0_b: Array2<f64>,
    pub fused: Array2<f64>,
    pub h_g0: Array2<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.final_disease.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Probability of a positive diagnosis per sample.
    pub fn disease_scores(&self) -> Vec<f64> {
        self.final_disease.outer_iter().map(|r| positive_mass(r.as_slice().expect("row"))).collect()
    }

    fn block(m: &Array2<f64>, nodes: usize, i: usize) -> EvidenceMatrix {
        let mut b = m.slice(s![i * nodes..(i + 1) * nodes, ..]).to_owned();
        for mut row in b.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| (v / s).clamp(0.0, 1.0));
        }
        EvidenceMatrix::new(b).expect("normalized rows")
    }

    pub fn p0_b(&self, i: usize) -> EvidenceMatrix {
        Self::block(&self.p0_b, self.nodes, i)
    }

    pub fn fused(&self, i: usize) -> EvidenceMatrix {
        Self::block(&self.fused, self.nodes, i)
    }
}

/// Mass on the upper half of the grades (`g > C/2`, 1-indexed).
pub fn positive_mass(dist: &[f64]) -> f64 {
    let c = dist.len();
    dist.iter().enumerate().filter(|(g, _)| 2 * (g + 1) > c).map(|(_, p)| p).sum()
}

/// Whether a 1-indexed grade counts as a positive diagnosis.
pub fn is_positive_grade(grade: usize, grades: usize) -> bool {
    2 * grade > grades
}
