//! Deep-supervision losses, Adam, alternating training and attribute
//! importance.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bn::{BayesianNetwork, EvidenceMatrix};
use crate::coupling::DISEASE;
use crate::gcn::RunningStats;
use crate::learn::{learn_structure, LabelDataset, LearnError};
use crate::model::{
    positive_mass, Components, Deactivation, ForwardVars, HybridModel, Mode, ModelConfig,
    ModelError, ModelShape,
};
use crate::tape::{ParamStore, Tape, Var};

/// Version tag written into model bundles.
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// State at the end of the last finite epoch.
        checkpoint: Box<TrainedModel>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("bundle: {0}")]
    Bundle(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weights of `L⁰_G, L⁰_B, L_a, L_d, L_final`.
    pub loss_weights: [f64; 5],
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Phase-two passes before the networks are frozen.
    pub bn_update_cap: usize,
    /// Epochs between phase-two passes.
    pub bn_update_period: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_weights: [0.2; 5],
            learning_rate: 1e-3,
            batch_size: 32,
            bn_update_cap: 20,
            bn_update_period: 1,
            max_epochs: 40,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let sum: f64 = self.loss_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.loss_weights.iter().any(|w| *w < 0.0) {
            return Err(TrainError::Config(format!(
                "loss weights must be nonnegative and sum to 1, got {:?}",
                self.loss_weights
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.bn_update_period == 0 {
            return Err(TrainError::Config(
                "learning rate, batch size and update period must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Step decay ×0.1 at 50% and again at 80% of `max_epochs`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let e = self.max_epochs as f64;
        let mut lr = self.learning_rate;
        if epoch as f64 >= 0.5 * e {
            lr *= 0.1;
        }
        if epoch as f64 >= 0.8 * e {
            lr *= 0.1;
        }
        lr
    }
}

/// The five supervision terms, in the order of [`TrainConfig::loss_weights`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub initial_gcn: f64,
    pub initial_bn: f64,
    pub attributes: f64,
    pub disease: f64,
    pub final_disease: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.initial_gcn,
            self.initial_bn,
            self.attributes,
            self.disease,
            self.final_disease,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub components: [Var; 5],
}

/// Records the weighted loss, averaged over the batch. `targets` holds the
/// `(B·n) × C` one-hot labels.
pub fn loss_op(
    tape: &mut Tape,
    out: &ForwardVars,
    targets: &Array2<f64>,
    nodes: usize,
    weights: &[f64; 5],
) -> LossVars {
    let rows = targets.nrows();
    let batch = rows / nodes;
    let per_batch = 1.0 / batch as f64;
    let all = Arc::new(targets.clone());
    let disease_rows: Vec<usize> = (0..batch).map(|b| b * nodes + DISEASE).collect();
    let attribute_rows: Vec<usize> = (0..rows).filter(|r| r % nodes != DISEASE).collect();
    let disease_targets = Arc::new(targets.select(ndarray::Axis(0), &disease_rows));

    let mean_of = |tape: &mut Tape, v: Var| {
        let s = tape.sum_all(v);
        tape.scale(s, per_batch)
    };
    let ce = tape.symmetric_cross_entropy_rows(out.p0_g, all.clone());
    let l0_g = mean_of(tape, ce);
    let ce = tape.symmetric_cross_entropy_rows(out.p0_b, all.clone());
    let l0_b = mean_of(tape, ce);
    let ce = tape.symmetric_cross_entropy_rows(out.fused, all);
    let attr = tape.gather_rows(ce, attribute_rows);
    let l_a = mean_of(tape, attr);
    let dis = tape.gather_rows(ce, disease_rows);
    let l_d = mean_of(tape, dis);
    let ce = tape.symmetric_cross_entropy_rows(out.final_disease, disease_targets);
    let l_final = mean_of(tape, ce);

    let components = [l0_g, l0_b, l_a, l_d, l_final];
    let mut total = tape.scale(components[0], weights[0]);
    for (c, w) in components.iter().zip(weights).skip(1) {
        let term = tape.scale(*c, *w);
        total = tape.add(total, term);
    }
    LossVars { total, components }
}

/// Stage outputs of one sample, as distributions.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub p0_b: EvidenceMatrix,
    pub p0_g: EvidenceMatrix,
    pub fused: EvidenceMatrix,
    pub final_disease: Vec<f64>,
}

/// Weighted total and its five components for one sample.
pub fn compute_losses(
    outputs: &StageOutputs,
    labels: &EvidenceMatrix,
    weights: &[f64; 5],
) -> (f64, LossComponents) {
    let n = labels.nodes();
    let mut tape = Tape::new();
    let fv = ForwardVars {
        p0_b: tape.constant(outputs.p0_b.view().to_owned()),
        p0_g: tape.constant(outputs.p0_g.view().to_owned()),
        h_g0: tape.constant(Array2::zeros((0, 0))),
        p_b: tape.constant(Array2::zeros((0, 0))),
        p_g: tape.constant(Array2::zeros((0, 0))),
        fused: tape.constant(outputs.fused.view().to_owned()),
        final_disease: tape.constant(
            Array2::from_shape_vec((1, outputs.final_disease.len()), outputs.final_disease.clone())
                .expect("1 × C"),
        ),
        batch_stats: Vec::new(),
    };
    let lv = loss_op(&mut tape, &fv, &labels.view().to_owned(), n, weights);
    let c = lv.components.map(|v| tape.value(v)[[0, 0]]);
    (
        tape.value(lv.total)[[0, 0]],
        LossComponents {
            initial_gcn: c[0],
            initial_bn: c[1],
            attributes: c[2],
            disease: c[3],
            final_disease: c[4],
        },
    )
}

/// Adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Features plus 1-indexed grade labels, disease in column 0.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub features: ArrayView2<'a, f64>,
    pub grades: &'a [Vec<usize>],
    pub nodes: usize,
    pub grades_per_node: usize,
}

impl TrainingData<'_> {
    fn check(&self) -> Result<(), TrainError> {
        if self.grades.is_empty() {
            return Err(TrainError::Data("no training samples".into()));
        }
        if self.features.nrows() != self.grades.len() {
            return Err(TrainError::Data(format!(
                "{} feature rows for {} label rows",
                self.features.nrows(),
                self.grades.len()
            )));
        }
        Ok(())
    }

    fn labels(&self) -> Result<LabelDataset, TrainError> {
        Ok(LabelDataset::from_grades(self.grades, self.nodes, self.grades_per_node)?)
    }

    fn targets(&self, idx: &[usize]) -> Array2<f64> {
        let (n, c) = (self.nodes, self.grades_per_node);
        let mut t = Array2::zeros((idx.len() * n, c));
        for (b, &i) in idx.iter().enumerate() {
            for (node, &g) in self.grades[i].iter().enumerate() {
                t[[b * n + node, g - 1]] = 1.0;
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over batches of the weighted total.
    pub loss: f64,
    pub components: [f64; 5],
    /// Phase-two passes completed after this epoch.
    pub bn_updates: usize,
}

/// A trained network with the data needed for importance analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: HybridModel,
    pub train_config: TrainConfig,
    /// Mean layer-0 feature of each node over training samples at grade 1.
    pub low_grade_features: Vec<Option<Vec<f64>>>,
    pub history: Vec<EpochRecord>,
}

/// Splits a shuffled index list into batches, folding a trailing singleton
/// into the previous batch.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

/// One gradient step. Returns the loss value and its components.
fn train_step(
    model: &mut HybridModel,
    adam: &mut Adam,
    data: &TrainingData<'_>,
    batch: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    tape: &mut Tape,
) -> Result<(f64, [f64; 5]), TrainError> {
    tape.clear();
    let x = data.features.select(ndarray::Axis(0), batch);
    let fwd = model.forward(tape, x.view(), Mode::Train, None)?;
    let lv = loss_op(tape, &fwd, &data.targets(batch), data.nodes, &cfg.loss_weights);
    let loss = tape.value(lv.total)[[0, 0]];
    let comps = lv.components.map(|v| tape.value(v)[[0, 0]]);
    let grad = tape.param_gradient(lv.total, &model.params);
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Ok((f64::NAN, comps));
    }
    adam.step(model.params.flat_mut(), &grad, lr);
    for (running, stats) in model.running.iter_mut().zip(&fwd.batch_stats) {
        if let Some(st) = stats {
            running.update(st);
        }
    }
    Ok((loss, comps))
}

fn soft_labels(m: &Array2<f64>, nodes: usize, grades: usize) -> Result<LabelDataset, TrainError> {
    let samples = (0..m.nrows() / nodes)
        .map(|i| {
            let mut b = m.slice(s![i * nodes..(i + 1) * nodes, ..]).to_owned();
            for mut row in b.outer_iter_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| (v / s).clamp(0.0, 1.0));
            }
            EvidenceMatrix::new(b).map_err(|e| TrainError::Data(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabelDataset::new(nodes, grades, samples)?)
}

/// Refits both networks on the current soft predictions.
fn refit_networks(model: &mut HybridModel, data: &TrainingData<'_>) -> Result<(), TrainError> {
    let (n, c) = (data.nodes, data.grades_per_node);
    let preds = model.predict(data.features)?;
    let structure = model.config.structure;
    if model.components.bn1 {
        let ds = soft_labels(&preds.p0_b, n, c)?;
        model.bn1 = Arc::new(learn_structure(&ds, &structure)?);
    }
    if model.components.bn2 {
        let ds = soft_labels(&preds.fused, n, c)?;
        model.bn2 = Arc::new(learn_structure(&ds, &structure)?);
    }
    Ok(())
}

/// Mean layer-0 feature per node over the samples where that node is at
/// grade 1; `None` when no such sample exists.
pub fn low_grade_features(
    model: &HybridModel,
    data: &TrainingData<'_>,
) -> Result<Vec<Option<Vec<f64>>>, TrainError> {
    let n = data.nodes;
    let preds = model.predict(data.features)?;
    let d = preds.h_g0.ncols();
    Ok((0..n)
        .map(|node| {
            let rows: Vec<usize> = (0..data.grades.len())
                .filter(|&i| data.grades[i][node] == 1)
                .map(|i| i * n + node)
                .collect();
            (!rows.is_empty()).then(|| {
                let mut acc = vec![0.0; d];
                for &r in &rows {
                    for (a, v) in acc.iter_mut().zip(preds.h_g0.row(r)) {
                        *a += v;
                    }
                }
                acc.iter().map(|a| a / rows.len() as f64).collect()
            })
        })
        .collect())
}

/// Alternates gradient epochs (networks frozen) with network refits on the
/// model's own soft predictions, up to `bn_update_cap` refits.
pub fn alternate_train(
    data: &TrainingData<'_>,
    config: &ModelConfig,
    components: Components,
    cfg: &TrainConfig,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    data.check()?;
    let labels = data.labels()?;
    let initial = learn_structure(&labels, &config.structure)?;
    let shape = ModelShape {
        nodes: data.nodes,
        grades: data.grades_per_node,
        input_dim: data.features.ncols(),
    };
    let mut model = HybridModel::new(
        shape,
        config.clone(),
        components,
        initial.clone(),
        initial,
        cfg.seed,
    )?;
    let mut adam = Adam::new(model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut updates = 0;
    let cap = if components.alternate_training { cfg.bn_update_cap } else { 0 };
    let mut order: Vec<usize> = (0..data.grades.len()).collect();
    let mut tape = Tape::new();
    let mut checkpoint = model.clone();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let batches = make_batches(&order, cfg.batch_size);
        let mut loss_sum = 0.0;
        let mut comp_sum = [0.0; 5];
        for batch in &batches {
            let (loss, comps) = train_step(&mut model, &mut adam, data, batch, cfg, lr, &mut tape)
                .or_else(|e| match e {
                    TrainError::Model(ModelError::Bp(_)) => Ok((f64::NAN, [f64::NAN; 5])),
                    other => Err(other),
                })?;
            if !loss.is_finite() {
                let low = low_grade_features(&checkpoint, data)?;
                return Err(TrainError::Diverged {
                    epoch,
                    checkpoint: Box::new(TrainedModel {
                        model: checkpoint,
                        train_config: cfg.clone(),
                        low_grade_features: low,
                        history,
                    }),
                });
            }
            loss_sum += loss;
            for (a, c) in comp_sum.iter_mut().zip(comps) {
                *a += c;
            }
        }
        if updates < cap && (epoch + 1) % cfg.bn_update_period == 0 {
            refit_networks(&mut model, data)?;
            updates += 1;
        }
        let nb = batches.len() as f64;
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss: loss_sum / nb,
            components: comp_sum.map(|c| c / nb),
            bn_updates: updates,
        });
        checkpoint = model.clone();
    }
    let low = low_grade_features(&model, data)?;
    Ok(TrainedModel {
        model,
        train_config: cfg.clone(),
        low_grade_features: low,
        history,
    })
}

/// Importance of one attribute for each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Importance {
    pub scores: Vec<f64>,
    /// The attribute had no grade-1 training sample; a zero feature stood in.
    pub feature_fallback: bool,
}

/// Change in the positive-diagnosis probability when `attribute` is set to
/// its lowest grade in the BN-1 evidence and replaced by its low-grade
/// average feature in the GCN.
pub fn attribute_importance(
    trained: &TrainedModel,
    features: ArrayView2<'_, f64>,
    attribute: usize,
) -> Result<Importance, TrainError> {
    let m = &trained.model;
    let (n, c, d) = (m.shape.nodes, m.shape.grades, m.config.node_dim);
    if attribute == DISEASE || attribute >= n {
        return Err(TrainError::Config(format!(
            "attribute index {attribute} must be in 1..{n}"
        )));
    }
    let stored = trained.low_grade_features.get(attribute).cloned().flatten();
    let feature_fallback = stored.is_none();
    let mut evidence = vec![0.0; c];
    evidence[0] = 1.0;
    let deact = Deactivation {
        node: attribute,
        evidence,
        feature: stored.unwrap_or_else(|| vec![0.0; d]),
    };
    let base = m.predict(features)?.disease_scores();
    let off = m.predict_with(features, Some(&deact))?.disease_scores();
    Ok(Importance {
        scores: base.iter().zip(&off).map(|(a, b)| (a - b).abs()).collect(),
        feature_fallback,
    })
}

/// Serialized form of a [`TrainedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub shape: ModelShape,
    pub model_config: ModelConfig,
    pub components: Components,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub running_stats: Vec<RunningStats>,
    pub bn1: BayesianNetwork,
    pub bn2: BayesianNetwork,
    pub low_grade_features: Vec<Option<Vec<f64>>>,
    pub history: Vec<EpochRecord>,
}

impl From<&TrainedModel> for ModelBundle {
    fn from(t: &TrainedModel) -> Self {
        Self {
            version: BUNDLE_VERSION,
            shape: t.model.shape,
            model_config: t.model.config.clone(),
            components: t.model.components,
            train_config: t.train_config.clone(),
            params: t.model.params.clone(),
            running_stats: t.model.running.clone(),
            bn1: (*t.model.bn1).clone(),
            bn2: (*t.model.bn2).clone(),
            low_grade_features: t.low_grade_features.clone(),
            history: t.history.clone(),
        }
    }
}

impl TryFrom<ModelBundle> for TrainedModel {
    type Error = TrainError;

    fn try_from(b: ModelBundle) -> Result<Self, TrainError> {
        if b.version != BUNDLE_VERSION {
            return Err(TrainError::Bundle(format!(
                "unsupported bundle version {} (expected {BUNDLE_VERSION})",
                b.version
            )));
        }
        let mut model = HybridModel::new(
            b.shape,
            b.model_config,
            b.components,
            b.bn1,
            b.bn2,
            b.train_config.seed,
        )?;
        if model.params.segments() != b.params.segments() {
            return Err(TrainError::Bundle("parameter layout does not match the configuration".into()));
        }
        if b.running_stats.len() != model.running.len() {
            return Err(TrainError::Bundle("wrong number of normalization layers".into()));
        }
        model.params = b.params;
        model.running = b.running_stats;
        Ok(Self {
            model,
            train_config: b.train_config,
            low_grade_features: b.low_grade_features,
            history: b.history,
        })
    }
}

impl TrainedModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelBundle::from(self)).expect("bundle serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let b: ModelBundle = serde_json::from_str(s).map_err(|e| TrainError::Bundle(e.to_string()))?;
        b.try_into()
    }

    /// Positive-diagnosis probability per sample.
    pub fn disease_scores(&self, features: ArrayView2<'_, f64>) -> Result<Vec<f64>, TrainError> {
        Ok(self.model.predict(features)?.disease_scores())
    }

    /// Most probable 1-indexed disease grade per sample.
    pub fn disease_grades(&self, features: ArrayView2<'_, f64>) -> Result<Vec<usize>, TrainError> {
        let p = self.model.predict(features)?;
        Ok(p.final_disease
            .outer_iter()
            .map(|r| {
                let mut best = 0;
                for (g, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = g;
                    }
                }
                best + 1
            })
            .collect())
    }
}

/// `positive_mass` on a disease distribution.
pub fn disease_score(dist: &[f64]) -> f64 {
    positive_mass(dist)
}
