//! Discrete Bayesian networks over graded variables.
//!
//! A [`BayesianNetwork`] is a DAG over `nodes` variables that all take one of
//! `grades` values, with one conditional probability table (CPT) per node.
//! Grades are 1-indexed at every public surface and 0-indexed internally.
//!
//! CPT rows are indexed by the joint parent assignment in mixed radix with
//! the *first* listed parent as the most significant digit: for parents
//! `[p, q]` the row of `(p = a, q = b)` (0-indexed) is `a * C + b`.
//!
//! The exhaustive-enumeration routines here ([`joint_probability`],
//! [`brute_force_posterior`]) are the reference semantics used to check the
//! message-passing code in [`crate::bp`].

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Tolerance on CPT row sums.
pub const CPT_SUM_TOL: f64 = 1e-12;
/// Tolerance on evidence row sums.
pub const EVIDENCE_SUM_TOL: f64 = 1e-9;
/// Largest joint state space [`brute_force_posterior`] will enumerate.
pub const BRUTE_FORCE_CAPACITY: u128 = 10_000_000;

#[derive(Debug, Error)]
pub enum BnError {
    #[error("grade {grade} at position {position} is outside [1, {grades}]")]
    GradeOutOfRange {
        position: usize,
        grade: usize,
        grades: usize,
    },
    #[error("assignment has {found} entries, network has {expected} nodes")]
    AssignmentLength { expected: usize, found: usize },
    #[error("joint state space {states} exceeds brute-force capacity {BRUTE_FORCE_CAPACITY}")]
    Capacity { states: u128 },
    #[error("evidence shape {found:?} does not match network shape {expected:?}")]
    EvidenceShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("evidence row {row} is not a distribution: {reason}")]
    EvidenceRow { row: usize, reason: String },
    #[error("evidence has zero probability under the network")]
    ImpossibleEvidence,
    #[error("invalid network: {0}")]
    Invalid(ValidationReport),
}

/// One violated structural or numeric invariant of a network description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    TooFewGrades { grades: usize },
    ParentListCount { nodes: usize, found: usize },
    CptCount { nodes: usize, found: usize },
    ParentOutOfRange { node: usize, parent: usize },
    SelfLoop { node: usize },
    DuplicateParent { node: usize, parent: usize },
    Cycle { nodes: Vec<usize> },
    CptRowCount { node: usize, expected: usize, found: usize },
    CptRowLength { node: usize, row: usize, expected: usize, found: usize },
    CptEntryRange { node: usize, row: usize, grade: usize, value: f64 },
    CptRowSum { node: usize, row: usize, sum: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewGrades { grades } => write!(f, "grades = {grades} < 2"),
            Violation::ParentListCount { nodes, found } => {
                write!(f, "{found} parent lists for {nodes} nodes")
            }
            Violation::CptCount { nodes, found } => write!(f, "{found} CPTs for {nodes} nodes"),
            Violation::ParentOutOfRange { node, parent } => {
                write!(f, "node {node} lists parent {parent} which does not exist")
            }
            Violation::SelfLoop { node } => write!(f, "node {node} is its own parent"),
            Violation::DuplicateParent { node, parent } => {
                write!(f, "node {node} lists parent {parent} twice")
            }
            Violation::Cycle { nodes } => write!(f, "cycle through nodes {nodes:?}"),
            Violation::CptRowCount {
                node,
                expected,
                found,
            } => write!(f, "node {node} CPT has {found} rows, expected {expected}"),
            Violation::CptRowLength {
                node,
                row,
                expected,
                found,
            } => write!(
                f,
                "node {node} CPT row {row} has length {found}, expected {expected}"
            ),
            Violation::CptEntryRange {
                node,
                row,
                grade,
                value,
            } => write!(
                f,
                "node {node} CPT row {row} entry {grade} = {value} outside [0, 1]"
            ),
            Violation::CptRowSum { node, row, sum } => {
                write!(f, "node {node} CPT row {row} sums to {sum}")
            }
        }
    }
}

/// Every invariant violated by a network description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

/// Unvalidated network description; also the JSON wire form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParts {
    pub nodes: usize,
    pub grades: usize,
    pub parents: Vec<Vec<usize>>,
    pub cpts: Vec<Vec<Vec<f64>>>,
}

/// Checks every invariant of a network description and returns a
/// topological order (smallest index first among ready nodes).
pub fn validate_network(parts: &NetworkParts) -> Result<Vec<usize>, ValidationReport> {
    let mut violations = Vec::new();
    let n = parts.nodes;
    let c = parts.grades;
    if c < 2 {
        violations.push(Violation::TooFewGrades { grades: c });
    }
    if parts.parents.len() != n {
        violations.push(Violation::ParentListCount {
            nodes: n,
            found: parts.parents.len(),
        });
    }
    if parts.cpts.len() != n {
        violations.push(Violation::CptCount {
            nodes: n,
            found: parts.cpts.len(),
        });
    }
    if !violations.is_empty() {
        return Err(ValidationReport { violations });
    }

    let mut edges_ok = true;
    for (node, ps) in parts.parents.iter().enumerate() {
        for (k, &p) in ps.iter().enumerate() {
            if p >= n {
                violations.push(Violation::ParentOutOfRange { node, parent: p });
                edges_ok = false;
            } else if p == node {
                violations.push(Violation::SelfLoop { node });
                edges_ok = false;
            } else if ps[..k].contains(&p) {
                violations.push(Violation::DuplicateParent { node, parent: p });
                edges_ok = false;
            }
        }
    }

    let order = if edges_ok {
        match topological_order(&parts.parents) {
            Ok(order) => Some(order),
            Err(cycle) => {
                violations.push(Violation::Cycle { nodes: cycle });
                None
            }
        }
    } else {
        None
    };

    for (node, table) in parts.cpts.iter().enumerate() {
        let expected_rows = c.checked_pow(parts.parents[node].len() as u32);
        if expected_rows != Some(table.len()) {
            violations.push(Violation::CptRowCount {
                node,
                expected: expected_rows.unwrap_or(usize::MAX),
                found: table.len(),
            });
        }
        for (row, probs) in table.iter().enumerate() {
            if probs.len() != c {
                violations.push(Violation::CptRowLength {
                    node,
                    row,
                    expected: c,
                    found: probs.len(),
                });
                continue;
            }
            for (grade, &value) in probs.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    violations.push(Violation::CptEntryRange {
                        node,
                        row,
                        grade,
                        value,
                    });
                }
            }
            let sum: f64 = probs.iter().sum();
            if !((sum - 1.0).abs() <= CPT_SUM_TOL) {
                violations.push(Violation::CptRowSum { node, row, sum });
            }
        }
    }

    match (violations.is_empty(), order) {
        (true, Some(order)) => Ok(order),
        _ => Err(ValidationReport { violations }),
    }
}

/// Kahn's algorithm; on failure returns the nodes of one directed cycle.
fn topological_order(parents: &[Vec<usize>]) -> Result<Vec<usize>, Vec<usize>> {
    let n = parents.len();
    let mut children = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (node, ps) in parents.iter().enumerate() {
        indegree[node] = ps.len();
        for &p in ps {
            children[p].push(node);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n)
        .filter(|&v| indegree[v] == 0)
        .map(Reverse)
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &ch in &children[v] {
            indegree[ch] -= 1;
            if indegree[ch] == 0 {
                ready.push(Reverse(ch));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every leftover node keeps a leftover parent, so walking parents must
    // revisit a node.
    let leftover: Vec<bool> = (0..n).map(|v| indegree[v] > 0).collect();
    let start = leftover.iter().position(|&l| l).expect("leftover node");
    let mut seen_at = vec![usize::MAX; n];
    let mut path = Vec::new();
    let mut v = start;
    while seen_at[v] == usize::MAX {
        seen_at[v] = path.len();
        path.push(v);
        v = *parents[v]
            .iter()
            .find(|&&p| leftover[p])
            .expect("leftover node has leftover parent");
    }
    let mut cycle = path[seen_at[v]..].to_vec();
    cycle.sort_unstable();
    Err(cycle)
}

/// A validated Bayesian network. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianNetwork {
    grades: usize,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    cpts: Vec<Vec<Vec<f64>>>,
    order: Vec<usize>,
}

impl BayesianNetwork {
    pub fn new(
        grades: usize,
        parents: Vec<Vec<usize>>,
        cpts: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, BnError> {
        Self::try_from(NetworkParts {
            nodes: parents.len(),
            grades,
            parents,
            cpts,
        })
    }

    /// Network with no edges whose every node has a uniform prior.
    pub fn edgeless_uniform(nodes: usize, grades: usize) -> Self {
        Self::new(
            grades,
            vec![Vec::new(); nodes],
            vec![vec![vec![1.0 / grades as f64; grades]]; nodes],
        )
        .expect("uniform network is valid")
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn grades(&self) -> usize {
        self.grades
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn cpt(&self, node: usize) -> &[Vec<f64>] {
        &self.cpts[node]
    }

    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Directed edges `(parent, child)` ordered by child, then parent slot.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .flat_map(|(child, ps)| ps.iter().map(move |&p| (p, child)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    /// True when the undirected skeleton has no cycle.
    pub fn is_polytree(&self) -> bool {
        let n = self.node_count();
        let mut root: Vec<usize> = (0..n).collect();
        fn find(root: &mut [usize], mut v: usize) -> usize {
            while root[v] != v {
                root[v] = root[root[v]];
                v = root[v];
            }
            v
        }
        for (p, c) in self.edges() {
            let (a, b) = (find(&mut root, p), find(&mut root, c));
            if a == b {
                return false;
            }
            root[a] = b;
        }
        true
    }

    /// CPT row index for 0-indexed parent grades listed in parent order.
    pub fn row_index(&self, parent_grades: impl IntoIterator<Item = usize>) -> usize {
        parent_grades
            .into_iter()
            .fold(0, |acc, g| acc * self.grades + g)
    }

    /// `P(node = grade | parents = row)` with 0-indexed grade.
    pub fn conditional(&self, node: usize, row: usize, grade: usize) -> f64 {
        self.cpts[node][row][grade]
    }

    pub fn to_parts(&self) -> NetworkParts {
        NetworkParts {
            nodes: self.node_count(),
            grades: self.grades,
            parents: self.parents.clone(),
            cpts: self.cpts.clone(),
        }
    }

    /// Undirected skeleton as sorted `(min, max)` pairs.
    pub fn skeleton(&self) -> Vec<(usize, usize)> {
        let mut s: Vec<_> = self
            .edges()
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Prior marginal of every node (exhaustive; small networks only).
    pub fn prior_marginals(&self) -> Result<EvidenceMatrix, BnError> {
        brute_force_posterior(
            self,
            &EvidenceMatrix::uniform(self.node_count(), self.grades),
        )
    }
}

impl TryFrom<NetworkParts> for BayesianNetwork {
    type Error = BnError;

    fn try_from(parts: NetworkParts) -> Result<Self, BnError> {
        let order = validate_network(&parts).map_err(BnError::Invalid)?;
        let mut children = vec![Vec::new(); parts.nodes];
        for (child, ps) in parts.parents.iter().enumerate() {
            for &p in ps {
                children[p].push(child);
            }
        }
        Ok(Self {
            grades: parts.grades,
            parents: parts.parents,
            children,
            cpts: parts.cpts,
            order,
        })
    }
}

impl Serialize for BayesianNetwork {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_parts().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BayesianNetwork {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let parts = NetworkParts::deserialize(deserializer)?;
        BayesianNetwork::try_from(parts).map_err(serde::de::Error::custom)
    }
}

/// Dense `(nodes × grades)` row-stochastic matrix of per-node distributions.
///
/// "No evidence" at a node is the uniform row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceMatrix(Array2<f64>);

impl EvidenceMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self, BnError> {
        for (r, row) in rows.outer_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(BnError::EvidenceRow {
                    row: r,
                    reason: format!("entry {v} outside [0, 1]"),
                });
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > EVIDENCE_SUM_TOL {
                return Err(BnError::EvidenceRow {
                    row: r,
                    reason: format!("sums to {sum}"),
                });
            }
        }
        Ok(Self(rows))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, BnError> {
        let grades = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != grades) {
            return Err(BnError::EvidenceRow {
                row: r,
                reason: format!("length {} differs from {grades}", rows[r].len()),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((rows.len(), grades), flat).expect("shape checked"))
    }

    pub fn uniform(nodes: usize, grades: usize) -> Self {
        Self(Array2::from_elem((nodes, grades), 1.0 / grades as f64))
    }

    /// Hard evidence from 1-indexed grades.
    pub fn one_hot(grades_1: &[usize], grades: usize) -> Result<Self, BnError> {
        let mut m = Array2::zeros((grades_1.len(), grades));
        for (i, &g) in grades_1.iter().enumerate() {
            if g == 0 || g > grades {
                return Err(BnError::GradeOutOfRange {
                    position: i,
                    grade: g,
                    grades,
                });
            }
            m[[i, g - 1]] = 1.0;
        }
        Ok(Self(m))
    }

    pub fn nodes(&self) -> usize {
        self.0.nrows()
    }

    pub fn grades(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.grades();
        &self.0.as_slice().expect("standard layout")[i * c..(i + 1) * c]
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.outer_iter().map(|r| r.to_vec()).collect()
    }

    /// 1-indexed argmax grade per row (lowest grade wins ties).
    pub fn argmax_grades(&self) -> Vec<usize> {
        self.0
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (g, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = g;
                    }
                }
                best + 1
            })
            .collect()
    }
}

impl Serialize for EvidenceMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EvidenceMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        EvidenceMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Product of CPT entries for a full 1-indexed assignment.
pub fn joint_probability(net: &BayesianNetwork, assignment: &[usize]) -> Result<f64, BnError> {
    let n = net.node_count();
    if assignment.len() != n {
        return Err(BnError::AssignmentLength {
            expected: n,
            found: assignment.len(),
        });
    }
    let c = net.grades();
    if let Some((position, &grade)) = assignment
        .iter()
        .enumerate()
        .find(|(_, &g)| g == 0 || g > c)
    {
        return Err(BnError::GradeOutOfRange {
            position,
            grade,
            grades: c,
        });
    }
    let zero_based: Vec<usize> = assignment.iter().map(|g| g - 1).collect();
    Ok(joint_zero_based(net, &zero_based))
}

fn joint_zero_based(net: &BayesianNetwork, a: &[usize]) -> f64 {
    (0..net.node_count())
        .map(|v| {
            let row = net.row_index(net.parents(v).iter().map(|&p| a[p]));
            net.conditional(v, row, a[v])
        })
        .product()
}

/// Posterior marginal of every node given soft evidence, by summing the
/// evidence-weighted joint over every full assignment.
pub fn brute_force_posterior(
    net: &BayesianNetwork,
    evidence: &EvidenceMatrix,
) -> Result<EvidenceMatrix, BnError> {
    let n = net.node_count();
    let c = net.grades();
    if (evidence.nodes(), evidence.grades()) != (n, c) {
        return Err(BnError::EvidenceShape {
            expected: (n, c),
            found: (evidence.nodes(), evidence.grades()),
        });
    }
    let states = (c as u128).pow(n as u32);
    if states > BRUTE_FORCE_CAPACITY {
        return Err(BnError::Capacity { states });
    }
    let mut acc = Array2::<f64>::zeros((n, c));
    let mut a = vec![0usize; n];
    for _ in 0..states {
        let mut w = joint_zero_based(net, &a);
        for (v, &g) in a.iter().enumerate() {
            w *= evidence.0[[v, g]];
        }
        if w != 0.0 {
            for (v, &g) in a.iter().enumerate() {
                acc[[v, g]] += w;
            }
        }
        // Odometer increment, last node fastest.
        for v in (0..n).rev() {
            a[v] += 1;
            if a[v] < c {
                break;
            }
            a[v] = 0;
        }
    }
    for mut row in acc.outer_iter_mut() {
        let z = row.sum();
        if z <= 0.0 {
            return Err(BnError::ImpossibleEvidence);
        }
        row.mapv_inplace(|v| v / z);
    }
    Ok(EvidenceMatrix(acc))
}
