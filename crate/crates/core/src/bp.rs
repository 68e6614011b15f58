//! Synchronous λ/π message passing with analytic gradients.
//!
//! State at step `t` is one flat vector holding, in order, every node's
//! marginal, every λ message (child → parent) and every π message
//! (parent → child). Both messages on an edge are distributions over the
//! parent's grades. Evidence enters each node as a λ message from an
//! auxiliary child and is held fixed across steps.
//!
//! Every quantity at step `t` is a function of step `t - 1` messages only,
//! so one step is a map `s_t = F(s_{t-1}, e)` with a sparse Jacobian
//! `J_t = [∂s_t/∂s_{t-1} | ∂s_t/∂e]`. Appending the evidence to the state
//! with an identity block makes `J_t` square, the product
//! `J_T ⋯ J_1` is the Jacobian of the whole unrolled run, and the
//! marginal-by-evidence block of that product is the gradient of inference.
//!
//! Normalizers are explicit `v / Σv` operations and are differentiated.
//! On networks with undirected cycles messages are damped by one half and
//! the run is treated as a fixed unrolled computation.

use ndarray::{Array2, ArrayView2};
use serde::Serialize;
use thiserror::Error;

use crate::bn::{BayesianNetwork, EvidenceMatrix};

/// Message damping used on networks that are not polytrees.
pub const LOOPY_DAMPING: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum BpError {
    #[error("degenerate evidence: all-zero unnormalized distribution at node {node}")]
    DegenerateEvidence { node: usize },
    #[error("evidence shape {found:?} does not match network shape {expected:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("gradient requested for {requested} steps but the forward pass used {forward}")]
    StepContract { requested: usize, forward: usize },
}

/// Offsets of every variable in the flat state vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariableIndex {
    pub nodes: usize,
    pub grades: usize,
    /// `(parent, child)` per edge; λ and π message `e` live on `edges[e]`.
    pub edges: Vec<(usize, usize)>,
}

impl VariableIndex {
    pub fn new(net: &BayesianNetwork) -> Self {
        Self {
            nodes: net.node_count(),
            grades: net.grades(),
            edges: net.edges(),
        }
    }

    /// Length of the state vector: `(nodes + 2 * edges) * grades`.
    pub fn state_len(&self) -> usize {
        (self.nodes + 2 * self.edges.len()) * self.grades
    }

    pub fn evidence_len(&self) -> usize {
        self.nodes * self.grades
    }

    pub fn marginal(&self, node: usize) -> usize {
        node * self.grades
    }

    pub fn lambda(&self, edge: usize) -> usize {
        (self.nodes + edge) * self.grades
    }

    pub fn pi(&self, edge: usize) -> usize {
        (self.nodes + self.edges.len() + edge) * self.grades
    }

    /// Column of an evidence entry in the augmented Jacobian.
    pub fn evidence(&self, node: usize) -> usize {
        self.state_len() + node * self.grades
    }
}

/// All messages and marginals at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub step: usize,
    values: Vec<f64>,
}

impl MessageState {
    /// Uniform marginals and messages (time 0).
    pub fn initial(index: &VariableIndex) -> Self {
        Self {
            step: 0,
            values: vec![1.0 / index.grades as f64; index.state_len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn slice(&self, offset: usize, grades: usize) -> &[f64] {
        &self.values[offset..offset + grades]
    }

    pub fn marginal<'a>(&'a self, index: &VariableIndex, node: usize) -> &'a [f64] {
        self.slice(index.marginal(node), index.grades)
    }

    pub fn lambda<'a>(&'a self, index: &VariableIndex, edge: usize) -> &'a [f64] {
        self.slice(index.lambda(edge), index.grades)
    }

    pub fn pi<'a>(&'a self, index: &VariableIndex, edge: usize) -> &'a [f64] {
        self.slice(index.pi(edge), index.grades)
    }

    pub fn marginals(&self, index: &VariableIndex) -> Array2<f64> {
        let n = index.nodes * index.grades;
        Array2::from_shape_vec((index.nodes, index.grades), self.values[..n].to_vec())
            .expect("marginal block shape")
    }

    /// Nested-vector view for JSON debug dumps.
    pub fn dump(&self, index: &VariableIndex, evidence: ArrayView2<'_, f64>) -> MessageDump {
        let e = index.edges.len();
        MessageDump {
            step: self.step,
            marginals: (0..index.nodes)
                .map(|v| self.marginal(index, v).to_vec())
                .collect(),
            lambda_msgs: (0..e)
                .map(|k| EdgeMessage {
                    from: index.edges[k].1,
                    to: index.edges[k].0,
                    values: self.lambda(index, k).to_vec(),
                })
                .collect(),
            pi_msgs: (0..e)
                .map(|k| EdgeMessage {
                    from: index.edges[k].0,
                    to: index.edges[k].1,
                    values: self.pi(index, k).to_vec(),
                })
                .collect(),
            evidence_lambdas: evidence.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeMessage {
    pub from: usize,
    pub to: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MessageDump {
    pub step: usize,
    pub marginals: Vec<Vec<f64>>,
    pub lambda_msgs: Vec<EdgeMessage>,
    pub pi_msgs: Vec<EdgeMessage>,
    pub evidence_lambdas: Vec<Vec<f64>>,
}

/// Row-major sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<Vec<(usize, f64)>>,
}

impl SparseMatrix {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![Vec::new(); rows],
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.rows, self.cols));
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, v) in row {
                d[[r, c]] += v;
            }
        }
        d
    }

    /// `vᵀ · self` for a vector over rows.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &vr) in self.entries.iter().zip(v) {
            if vr != 0.0 {
                for &(c, x) in row {
                    out[c] += vr * x;
                }
            }
        }
        out
    }

    /// Column pattern of every row.
    pub fn pattern(&self) -> Vec<Vec<usize>> {
        self.entries
            .iter()
            .map(|row| row.iter().map(|&(c, _)| c).collect())
            .collect()
    }
}

/// Precomputed adjacency in edge-index terms.
struct Topology {
    index: VariableIndex,
    parent_edges: Vec<Vec<usize>>,
    child_edges: Vec<Vec<usize>>,
    damping: f64,
}

impl Topology {
    fn new(net: &BayesianNetwork, damping: f64) -> Self {
        let index = VariableIndex::new(net);
        let n = net.node_count();
        let mut parent_edges = vec![Vec::new(); n];
        let mut child_edges = vec![Vec::new(); n];
        for (e, &(p, c)) in index.edges.iter().enumerate() {
            parent_edges[c].push(e);
            child_edges[p].push(e);
        }
        Self {
            index,
            parent_edges,
            child_edges,
            damping,
        }
    }
}

fn default_damping(net: &BayesianNetwork) -> f64 {
    if net.is_polytree() {
        0.0
    } else {
        LOOPY_DAMPING
    }
}

/// Product of `vectors[k][x]` over all `k` not in `skip`.
fn product_except(vectors: &[&[f64]], x: usize, skip: &[usize]) -> f64 {
    vectors
        .iter()
        .enumerate()
        .filter(|(k, _)| !skip.contains(k))
        .map(|(_, v)| v[x])
        .product()
}

/// Iterates `(row, digits)` over every joint parent assignment.
fn for_each_assignment(arity: usize, grades: usize, mut f: impl FnMut(usize, &[usize])) {
    let rows = grades.pow(arity as u32);
    let mut digits = vec![0usize; arity];
    for row in 0..rows {
        f(row, &digits);
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < grades {
                break;
            }
            *d = 0;
        }
    }
}

/// Normalizes `v` in place and returns the Jacobian `∂(v/Σv)/∂v` applied to
/// each column of `dv` (`dv[b][col]`), i.e. `(δ_ab - o_a) / S`.
fn normalize_with_jacobian(
    v: &mut [f64],
    dv: Option<&mut Vec<Vec<(usize, f64)>>>,
    node: usize,
) -> Result<Vec<Vec<(usize, f64)>>, BpError> {
    let sum: f64 = v.iter().sum();
    if !(sum > 0.0) {
        return Err(BpError::DegenerateEvidence { node });
    }
    v.iter_mut().for_each(|x| *x /= sum);
    let Some(dv) = dv else {
        return Ok(Vec::new());
    };
    // Collect the union of columns then combine.
    let mut cols: Vec<usize> = dv.iter().flatten().map(|&(c, _)| c).collect();
    cols.sort_unstable();
    cols.dedup();
    let mut colsum = vec![0.0; cols.len()];
    let mut dense = vec![vec![0.0; cols.len()]; v.len()];
    for (b, row) in dv.iter().enumerate() {
        for &(c, x) in row {
            let k = cols.binary_search(&c).expect("column present");
            dense[b][k] += x;
            colsum[k] += x;
        }
    }
    Ok((0..v.len())
        .map(|a| {
            cols.iter()
                .enumerate()
                .map(|(k, &c)| (c, (dense[a][k] - v[a] * colsum[k]) / sum))
                .collect()
        })
        .collect())
}

/// Outputs of one node update.
struct NodeUpdate {
    marginal: Vec<f64>,
    to_parents: Vec<Vec<f64>>,
    to_children: Vec<Vec<f64>>,
    /// Jacobian rows (unnormalized-input space already normalized):
    /// `[marginal rows, then each parent message, then each child message]`.
    jac: Vec<Vec<Vec<(usize, f64)>>>,
}

fn update_node(
    net: &BayesianNetwork,
    topo: &Topology,
    node: usize,
    prev: &MessageState,
    evidence: ArrayView2<'_, f64>,
    want_jac: bool,
) -> Result<NodeUpdate, BpError> {
    let idx = &topo.index;
    let c = idx.grades;
    let pe = &topo.parent_edges[node];
    let ce = &topo.child_edges[node];
    let ev: Vec<f64> = evidence.row(node).to_vec();
    let lam_in: Vec<&[f64]> = ce.iter().map(|&e| prev.lambda(idx, e)).collect();
    let pi_in: Vec<&[f64]> = pe.iter().map(|&e| prev.pi(idx, e)).collect();
    let np = pe.len();
    let cpt = net.cpt(node);

    // Causal support and its derivatives.
    let mut pivec = vec![0.0; c];
    // dpi[i][x][w] = Σ_{u: u_i = w} P(x|u) Π_{k≠i} π_k(u_k)
    let mut dpi = vec![vec![vec![0.0; c]; c]; np];
    // d2pi[i][m][x][w][w'] = Σ_{u: u_i=w, u_m=w'} P(x|u) Π_{k≠i,m} π_k(u_k)
    let mut d2pi = if want_jac && np >= 2 {
        vec![vec![vec![vec![vec![0.0; c]; c]; c]; np]; np]
    } else {
        Vec::new()
    };
    for_each_assignment(np, c, |row, u| {
        let probs = &cpt[row];
        let all: f64 = pi_in.iter().zip(u).map(|(p, &g)| p[g]).product();
        for x in 0..c {
            pivec[x] += probs[x] * all;
        }
        for i in 0..np {
            let w: f64 = (0..np)
                .filter(|&k| k != i)
                .map(|k| pi_in[k][u[k]])
                .product();
            for x in 0..c {
                dpi[i][x][u[i]] += probs[x] * w;
            }
            if !d2pi.is_empty() {
                for m in 0..np {
                    if m == i {
                        continue;
                    }
                    let w2: f64 = (0..np)
                        .filter(|&k| k != i && k != m)
                        .map(|k| pi_in[k][u[k]])
                        .product();
                    for x in 0..c {
                        d2pi[i][m][x][u[i]][u[m]] += probs[x] * w2;
                    }
                }
            }
        }
    });

    let lam_all: Vec<f64> = (0..c)
        .map(|x| ev[x] * product_except(&lam_in, x, &[]))
        .collect();

    let ev_col = |x: usize| idx.evidence(node) + x;
    let lam_col = |j: usize, x: usize| idx.lambda(ce[j]) + x;
    let pi_col = |i: usize, w: usize| idx.pi(pe[i]) + w;

    let mut jac = Vec::new();

    // Marginal.
    let mut marginal: Vec<f64> = (0..c).map(|x| lam_all[x] * pivec[x]).collect();
    let mut dm = want_jac.then(|| {
        (0..c)
            .map(|x| {
                let mut row = vec![(ev_col(x), product_except(&lam_in, x, &[]) * pivec[x])];
                for j in 0..lam_in.len() {
                    row.push((lam_col(j, x), ev[x] * product_except(&lam_in, x, &[j]) * pivec[x]));
                }
                for i in 0..np {
                    for w in 0..c {
                        row.push((pi_col(i, w), lam_all[x] * dpi[i][x][w]));
                    }
                }
                row
            })
            .collect::<Vec<_>>()
    });
    jac.push(normalize_with_jacobian(&mut marginal, dm.as_mut(), node)?);

    // Diagnostic messages to each parent.
    let mut to_parents = Vec::with_capacity(np);
    for i in 0..np {
        let mut v: Vec<f64> = (0..c)
            .map(|w| (0..c).map(|x| lam_all[x] * dpi[i][x][w]).sum())
            .collect();
        let mut dv = want_jac.then(|| {
            (0..c)
                .map(|w| {
                    let mut row = Vec::new();
                    for x in 0..c {
                        row.push((ev_col(x), product_except(&lam_in, x, &[]) * dpi[i][x][w]));
                        for j in 0..lam_in.len() {
                            row.push((
                                lam_col(j, x),
                                ev[x] * product_except(&lam_in, x, &[j]) * dpi[i][x][w],
                            ));
                        }
                    }
                    for m in 0..np {
                        if m == i {
                            continue;
                        }
                        for w2 in 0..c {
                            let d: f64 = (0..c).map(|x| lam_all[x] * d2pi[i][m][x][w][w2]).sum();
                            row.push((pi_col(m, w2), d));
                        }
                    }
                    row
                })
                .collect::<Vec<_>>()
        });
        jac.push(normalize_with_jacobian(&mut v, dv.as_mut(), node)?);
        to_parents.push(v);
    }

    // Causal messages to each child.
    let mut to_children = Vec::with_capacity(ce.len());
    for j in 0..ce.len() {
        let mut v: Vec<f64> = (0..c)
            .map(|x| ev[x] * product_except(&lam_in, x, &[j]) * pivec[x])
            .collect();
        let mut dv = want_jac.then(|| {
            (0..c)
                .map(|x| {
                    let rest = product_except(&lam_in, x, &[j]);
                    let mut row = vec![(ev_col(x), rest * pivec[x])];
                    for m in 0..lam_in.len() {
                        if m != j {
                            row.push((
                                lam_col(m, x),
                                ev[x] * product_except(&lam_in, x, &[j, m]) * pivec[x],
                            ));
                        }
                    }
                    for i in 0..np {
                        for w in 0..c {
                            row.push((pi_col(i, w), ev[x] * rest * dpi[i][x][w]));
                        }
                    }
                    row
                })
                .collect::<Vec<_>>()
        });
        jac.push(normalize_with_jacobian(&mut v, dv.as_mut(), node)?);
        to_children.push(v);
    }

    Ok(NodeUpdate {
        marginal,
        to_parents,
        to_children,
        jac,
    })
}

/// One synchronous step; optionally also `J_t` (rows: state, columns:
/// state then evidence).
fn step_impl(
    net: &BayesianNetwork,
    topo: &Topology,
    prev: &MessageState,
    evidence: ArrayView2<'_, f64>,
    want_jac: bool,
) -> Result<(MessageState, Option<SparseMatrix>), BpError> {
    let idx = &topo.index;
    let c = idx.grades;
    let mut next = vec![0.0; idx.state_len()];
    let mut jac =
        want_jac.then(|| SparseMatrix::new(idx.state_len(), idx.state_len() + idx.evidence_len()));
    let d = topo.damping;

    for node in 0..idx.nodes {
        let upd = update_node(net, topo, node, prev, evidence, want_jac)?;
        let mut rows = upd.jac.into_iter();
        let mut place = |offset: usize,
                         values: &[f64],
                         damp: bool,
                         rows: Option<Vec<Vec<(usize, f64)>>>| {
            for x in 0..c {
                let old = prev.values[offset + x];
                next[offset + x] = if damp {
                    (1.0 - d) * values[x] + d * old
                } else {
                    values[x]
                };
            }
            if let (Some(j), Some(rows)) = (jac.as_mut(), rows) {
                for (x, mut row) in rows.into_iter().enumerate() {
                    if damp {
                        row.iter_mut().for_each(|(_, v)| *v *= 1.0 - d);
                        row.push((offset + x, d));
                    }
                    j.entries[offset + x] = row;
                }
            }
        };
        place(idx.marginal(node), &upd.marginal, false, rows.next());
        for (i, &e) in topo.parent_edges[node].iter().enumerate() {
            place(idx.lambda(e), &upd.to_parents[i], d > 0.0, rows.next());
        }
        for (j, &e) in topo.child_edges[node].iter().enumerate() {
            place(idx.pi(e), &upd.to_children[j], d > 0.0, rows.next());
        }
    }
    Ok((
        MessageState {
            step: prev.step + 1,
            values: next,
        },
        jac,
    ))
}

fn check_shape(net: &BayesianNetwork, evidence: ArrayView2<'_, f64>) -> Result<(), BpError> {
    let expected = (net.node_count(), net.grades());
    if evidence.dim() != expected {
        return Err(BpError::Shape {
            expected,
            found: evidence.dim(),
        });
    }
    Ok(())
}

/// Advances every marginal and message by one synchronous step.
pub fn bp_step(
    net: &BayesianNetwork,
    state: &MessageState,
    evidence: &EvidenceMatrix,
) -> Result<MessageState, BpError> {
    check_shape(net, evidence.view())?;
    let topo = Topology::new(net, default_damping(net));
    Ok(step_impl(net, &topo, state, evidence.view(), false)?.0)
}

/// Result of [`bp_infer`]: final marginals plus the trajectory needed to
/// replay gradients.
#[derive(Debug, Clone)]
pub struct BpOutcome {
    pub marginals: EvidenceMatrix,
    pub steps_used: usize,
    /// False when a loopy run hit `max_steps` first; the last iterate is kept.
    pub converged: bool,
    pub damping: f64,
    evidence: Array2<f64>,
    trajectory: Vec<MessageState>,
}

impl BpOutcome {
    pub fn trajectory(&self) -> &[MessageState] {
        &self.trajectory
    }

    pub fn evidence(&self) -> ArrayView2<'_, f64> {
        self.evidence.view()
    }

    /// Jacobian of the unrolled forward pass; `steps` must match it.
    pub fn jacobian(&self, net: &BayesianNetwork, steps: usize) -> Result<BpJacobian, BpError> {
        if steps != self.steps_used {
            return Err(BpError::StepContract {
                requested: steps,
                forward: self.steps_used,
            });
        }
        let topo = Topology::new(net, self.damping);
        jacobian_from_trajectory(net, &topo, &self.trajectory, self.evidence.view())
    }

    /// Gradient w.r.t. evidence of `Σ grad ⊙ marginals` (reverse mode
    /// through the recorded steps).
    pub fn vjp(&self, net: &BayesianNetwork, grad: ArrayView2<'_, f64>) -> Result<Array2<f64>, BpError> {
        let topo = Topology::new(net, self.damping);
        vjp_trajectory(net, &topo, &self.trajectory, self.evidence.view(), grad)
    }
}

/// Runs exactly `steps` synchronous steps from the uniform state and returns
/// every intermediate state (length `steps + 1`).
pub fn run_fixed_steps(
    net: &BayesianNetwork,
    evidence: ArrayView2<'_, f64>,
    steps: usize,
    damping: Option<f64>,
) -> Result<Vec<MessageState>, BpError> {
    check_shape(net, evidence)?;
    let topo = Topology::new(net, damping.unwrap_or_else(|| default_damping(net)));
    let mut traj = vec![MessageState::initial(&topo.index)];
    for _ in 0..steps {
        let (s, _) = step_impl(net, &topo, traj.last().expect("nonempty"), evidence, false)?;
        traj.push(s);
    }
    Ok(traj)
}

/// Iterates steps until no state entry moves by `tol` or more.
///
/// Accepts any nonnegative evidence (rows need not sum to one), which is
/// what finite-difference checks perturb.
pub fn bp_infer_raw(
    net: &BayesianNetwork,
    evidence: ArrayView2<'_, f64>,
    max_steps: usize,
    tol: f64,
) -> Result<BpOutcome, BpError> {
    check_shape(net, evidence)?;
    let damping = default_damping(net);
    let topo = Topology::new(net, damping);
    let mut traj = vec![MessageState::initial(&topo.index)];
    let mut converged = false;
    for _ in 0..max_steps {
        let prev = traj.last().expect("nonempty");
        let (next, _) = step_impl(net, &topo, prev, evidence, false)?;
        let delta = next
            .values
            .iter()
            .zip(&prev.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        traj.push(next);
        if delta < tol {
            converged = true;
            break;
        }
    }
    let last = traj.last().expect("nonempty");
    let marginals = EvidenceMatrix::new(last.marginals(&topo.index))
        .or_else(|_| renormalized(last.marginals(&topo.index)))
        .expect("normalized marginals");
    Ok(BpOutcome {
        marginals,
        steps_used: traj.len() - 1,
        converged,
        damping,
        evidence: evidence.to_owned(),
        trajectory: traj,
    })
}

fn renormalized(mut m: Array2<f64>) -> Result<EvidenceMatrix, crate::bn::BnError> {
    for mut row in m.outer_iter_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| (v / s).clamp(0.0, 1.0));
    }
    EvidenceMatrix::new(m)
}

/// Marginal posteriors from soft evidence.
pub fn bp_infer(
    net: &BayesianNetwork,
    evidence: &EvidenceMatrix,
    max_steps: usize,
    tol: f64,
) -> Result<BpOutcome, BpError> {
    bp_infer_raw(net, evidence.view(), max_steps, tol)
}

/// Per-step Jacobians, their product, and the extracted gradient.
#[derive(Debug, Clone)]
pub struct BpJacobian {
    pub index: VariableIndex,
    /// `J_t` for `t = 1..=T`; rows are state variables, columns are state
    /// then evidence variables.
    pub steps: Vec<SparseMatrix>,
    /// `J_T ⋯ J_1` over the augmented `[state; evidence]` vector.
    pub all: Array2<f64>,
}

impl BpJacobian {
    /// `∂ marginal[node_r][g_r] / ∂ evidence[node_c][g_c]` as an
    /// `(nodes·grades) × (nodes·grades)` matrix.
    pub fn evidence_to_marginals(&self) -> Array2<f64> {
        let n = self.index.evidence_len();
        let off = self.index.state_len();
        self.all
            .slice(ndarray::s![0..n, off..off + n])
            .to_owned()
    }
}

fn jacobian_from_trajectory(
    net: &BayesianNetwork,
    topo: &Topology,
    traj: &[MessageState],
    evidence: ArrayView2<'_, f64>,
) -> Result<BpJacobian, BpError> {
    let idx = &topo.index;
    let ns = idx.state_len();
    let na = ns + idx.evidence_len();
    let mut steps = Vec::with_capacity(traj.len().saturating_sub(1));
    let mut all = Array2::<f64>::eye(na);
    for prev in &traj[..traj.len() - 1] {
        let (_, j) = step_impl(net, topo, prev, evidence, true)?;
        let j = j.expect("jacobian requested");
        // Augmented J_t · all: state rows mix, evidence rows stay identity.
        let mut next = all.clone();
        for (r, row) in j.entries.iter().enumerate() {
            let mut acc = ndarray::Array1::<f64>::zeros(na);
            for &(k, v) in row {
                acc.scaled_add(v, &all.row(k));
            }
            next.row_mut(r).assign(&acc);
        }
        all = next;
        steps.push(j);
    }
    Ok(BpJacobian {
        index: idx.clone(),
        steps,
        all,
    })
}

fn vjp_trajectory(
    net: &BayesianNetwork,
    topo: &Topology,
    traj: &[MessageState],
    evidence: ArrayView2<'_, f64>,
    grad: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, BpError> {
    let idx = &topo.index;
    let ns = idx.state_len();
    let ne = idx.evidence_len();
    let mut v_state = vec![0.0; ns];
    for (k, g) in grad.iter().enumerate() {
        v_state[k] = *g;
    }
    let mut v_ev = vec![0.0; ne];
    for prev in traj[..traj.len() - 1].iter().rev() {
        let (_, j) = step_impl(net, topo, prev, evidence, true)?;
        let out = j.expect("jacobian requested").left_mul(&v_state);
        for (acc, x) in v_ev.iter_mut().zip(&out[ns..]) {
            *acc += x;
        }
        v_state = out[..ns].to_vec();
    }
    Ok(Array2::from_shape_vec((idx.nodes, idx.grades), v_ev).expect("evidence shape"))
}

/// Jacobian of the marginals after exactly `steps` steps w.r.t. evidence.
pub fn bp_gradient(
    net: &BayesianNetwork,
    evidence: ArrayView2<'_, f64>,
    steps: usize,
) -> Result<BpJacobian, BpError> {
    if steps == 0 {
        return Err(BpError::StepContract {
            requested: 0,
            forward: 0,
        });
    }
    let topo = Topology::new(net, default_damping(net));
    let traj = run_fixed_steps(net, evidence, steps, Some(topo.damping))?;
    jacobian_from_trajectory(net, &topo, &traj, evidence)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bn::brute_force_posterior;
    use approx::assert_abs_diff_eq;

    fn two_node() -> BayesianNetwork {
        BayesianNetwork::new(
            2,
            vec![vec![], vec![0]],
            vec![vec![vec![0.6, 0.4]], vec![vec![0.9, 0.1], vec![0.2, 0.8]]],
        )
        .unwrap()
    }

    #[test]
    fn single_node_prior() {
        let net = BayesianNetwork::new(2, vec![vec![]], vec![vec![vec![0.3, 0.7]]]).unwrap();
        let ev = EvidenceMatrix::uniform(1, 2);
        let idx = VariableIndex::new(&net);
        let s1 = bp_step(&net, &MessageState::initial(&idx), &ev).unwrap();
        assert_abs_diff_eq!(s1.marginal(&idx, 0)[0], 0.3, epsilon = 1e-15);
        let s2 = bp_step(&net, &s1, &ev).unwrap();
        assert_eq!(s1.values(), s2.values());
    }

    #[test]
    fn chain_matches_bayes_rule() {
        let net = two_node();
        let ev = EvidenceMatrix::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap();
        let out = bp_infer(&net, &ev, 20, 1e-14).unwrap();
        assert!(out.converged);
        assert_abs_diff_eq!(out.marginals.row(0)[0], 0.06 / 0.38, epsilon = 1e-12);
        assert_abs_diff_eq!(out.marginals.row(0)[1], 0.32 / 0.38, epsilon = 1e-12);
    }

    #[test]
    fn uniform_polytree_stays_uniform() {
        let u = vec![0.5, 0.5];
        let net = BayesianNetwork::new(
            2,
            vec![vec![], vec![], vec![0, 1], vec![2]],
            vec![vec![u.clone()], vec![u.clone()], vec![u.clone(); 4], vec![u.clone(); 2]],
        )
        .unwrap();
        let ev = EvidenceMatrix::uniform(4, 2);
        let idx = VariableIndex::new(&net);
        let mut s = MessageState::initial(&idx);
        for _ in 0..6 {
            s = bp_step(&net, &s, &ev).unwrap();
            for v in 0..4 {
                assert_eq!(s.marginal(&idx, v), &[0.5, 0.5][..]);
            }
        }
    }

    #[test]
    fn hard_evidence_everywhere_is_returned() {
        let net = two_node();
        let ev = EvidenceMatrix::one_hot(&[2, 1], 2).unwrap();
        let out = bp_infer(&net, &ev, 20, 1e-14).unwrap();
        assert_eq!(out.marginals.to_rows(), ev.to_rows());
    }

    #[test]
    fn contradictory_evidence_is_degenerate() {
        let net = BayesianNetwork::new(
            2,
            vec![vec![], vec![0]],
            vec![vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        )
        .unwrap();
        let ev = EvidenceMatrix::one_hot(&[1, 2], 2).unwrap();
        let err = bp_infer(&net, &ev, 20, 1e-12).unwrap_err();
        assert!(matches!(err, BpError::DegenerateEvidence { .. }));
    }

    #[test]
    fn single_node_gradient_closed_form() {
        let prior = [0.3, 0.7];
        let net = BayesianNetwork::new(2, vec![vec![]], vec![vec![prior.to_vec()]]).unwrap();
        let e = ndarray::arr2(&[[0.2, 0.8]]);
        let jac = bp_gradient(&net, e.view(), 2).unwrap().evidence_to_marginals();
        // m = p⊙e / (p·e); ∂m_a/∂e_b = (δ_ab p_a - m_a p_b) / (p·e)
        let z = prior[0] * 0.2 + prior[1] * 0.8;
        let m = [prior[0] * 0.2 / z, prior[1] * 0.8 / z];
        for a in 0..2 {
            for b in 0..2 {
                let delta = if a == b { prior[a] } else { 0.0 };
                let expect = (delta - m[a] * prior[b]) / z;
                assert_abs_diff_eq!(jac[[a, b]], expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn d_separated_block_is_zero() {
        // 0 -> 1 -> 2 with hard evidence on 1: evidence at 2 cannot move node 0.
        let net = BayesianNetwork::new(
            2,
            vec![vec![], vec![0], vec![1]],
            vec![
                vec![vec![0.3, 0.7]],
                vec![vec![0.8, 0.2], vec![0.4, 0.6]],
                vec![vec![0.9, 0.1], vec![0.25, 0.75]],
            ],
        )
        .unwrap();
        let e = ndarray::arr2(&[[0.5, 0.5], [0.0, 1.0], [0.3, 0.7]]);
        let out = bp_infer_raw(&net, e.view(), 30, 1e-14).unwrap();
        let jac = out.jacobian(&net, out.steps_used).unwrap().evidence_to_marginals();
        for a in 0..2 {
            for b in 0..2 {
                assert_abs_diff_eq!(jac[[a, 4 + b]], 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn step_contract_is_enforced() {
        let net = two_node();
        let ev = EvidenceMatrix::uniform(2, 2);
        let out = bp_infer(&net, &ev, 20, 1e-12).unwrap();
        assert!(matches!(
            out.jacobian(&net, out.steps_used + 1),
            Err(BpError::StepContract { .. })
        ));
        assert!(bp_gradient(&net, ev.view(), 0).is_err());
    }

    #[test]
    fn vjp_agrees_with_full_jacobian() {
        let net = BayesianNetwork::new(
            3,
            vec![vec![], vec![0], vec![0], vec![1, 2]],
            vec![
                vec![vec![0.2, 0.5, 0.3]],
                vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]],
                vec![vec![0.5, 0.25, 0.25], vec![0.2, 0.2, 0.6], vec![0.1, 0.6, 0.3]],
                (0..9)
                    .map(|r| {
                        let a = 0.1 + 0.08 * r as f64;
                        vec![a, 0.5 * (1.0 - a), 0.5 * (1.0 - a)]
                    })
                    .collect(),
            ],
        )
        .unwrap();
        assert!(!net.is_polytree());
        let e = ndarray::arr2(&[
            [0.2, 0.3, 0.5],
            [0.6, 0.3, 0.1],
            [0.3, 0.3, 0.4],
            [0.1, 0.1, 0.8],
        ]);
        let out = bp_infer_raw(&net, e.view(), 60, 1e-10).unwrap();
        assert_eq!(out.damping, LOOPY_DAMPING);
        let full = out
            .jacobian(&net, out.steps_used)
            .unwrap()
            .evidence_to_marginals();
        let g = ndarray::Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * (j as f64 + 0.5));
        let vjp = out.vjp(&net, g.view()).unwrap();
        let flat_g = ndarray::Array1::from_iter(g.iter().copied());
        let expect = flat_g.dot(&full);
        for (a, b) in vjp.iter().zip(expect.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobian_pattern_depends_only_on_topology() {
        let net = two_node();
        let a = bp_gradient(&net, ndarray::arr2(&[[0.2, 0.8], [0.6, 0.4]]).view(), 3).unwrap();
        let b = bp_gradient(&net, ndarray::arr2(&[[0.5, 0.5], [0.1, 0.9]]).view(), 3).unwrap();
        for (ja, jb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(ja.pattern(), jb.pattern());
        }
        assert_eq!(a.index.state_len(), (2 + 2) * 2);
    }

    #[test]
    fn polytree_matches_enumeration() {
        let net = BayesianNetwork::new(
            3,
            vec![vec![], vec![], vec![0, 1], vec![2]],
            vec![
                vec![vec![0.2, 0.5, 0.3]],
                vec![vec![0.6, 0.1, 0.3]],
                (0..9)
                    .map(|r| {
                        let a = 0.05 + 0.1 * r as f64;
                        vec![a, 0.3 * (1.0 - a), 0.7 * (1.0 - a)]
                    })
                    .collect(),
                vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]],
            ],
        )
        .unwrap();
        let ev = EvidenceMatrix::from_rows(&[
            vec![0.2, 0.3, 0.5],
            vec![1.0 / 3.0; 3],
            vec![0.3, 0.3, 0.4],
            vec![0.1, 0.1, 0.8],
        ])
        .unwrap();
        let out = bp_infer(&net, &ev, 30, 1e-15).unwrap();
        let exact = brute_force_posterior(&net, &ev).unwrap();
        for (a, b) in out.marginals.view().iter().zip(exact.view().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
