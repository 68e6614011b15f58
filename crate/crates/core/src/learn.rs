//! Structure and parameter learning from hard or soft labels.
//!
//! Sufficient statistics are expected (fractional) counts: a sample
//! contributes `q(child = x) * Π q(parent_i = u_i)` to the count of
//! `(x, u)`. One-hot labels reduce this to ordinary counting.
//!
//! Structure search is the exact subset dynamic program over
//! BIC-scored families: best parent set per `(node, candidate set)`, then
//! best sink per node subset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bn::{BayesianNetwork, BnError, EvidenceMatrix};

/// Largest network [`learn_structure`] accepts (the DP is `O(n 2^n)`).
pub const MAX_DP_NODES: usize = 16;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("sample {sample} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        sample: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("structure has {found} nodes, data has {expected}")]
    NodeCountMismatch { expected: usize, found: usize },
    #[error("{nodes} nodes exceed the structure-search capacity of {MAX_DP_NODES}")]
    Capacity { nodes: usize },
    #[error(transparent)]
    Network(#[from] BnError),
}

/// Per-sample `(nodes × grades)` label distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLabels")]
pub struct LabelDataset {
    nodes: usize,
    grades: usize,
    samples: Vec<EvidenceMatrix>,
}

#[derive(Deserialize)]
struct RawLabels {
    nodes: usize,
    grades: usize,
    samples: Vec<EvidenceMatrix>,
}

impl TryFrom<RawLabels> for LabelDataset {
    type Error = LearnError;
    fn try_from(raw: RawLabels) -> Result<Self, LearnError> {
        LabelDataset::new(raw.nodes, raw.grades, raw.samples)
    }
}

impl LabelDataset {
    /// An empty sample list is allowed here; learning routines reject it.
    pub fn new(
        nodes: usize,
        grades: usize,
        samples: Vec<EvidenceMatrix>,
    ) -> Result<Self, LearnError> {
        for (i, s) in samples.iter().enumerate() {
            if (s.nodes(), s.grades()) != (nodes, grades) {
                return Err(LearnError::ShapeMismatch {
                    sample: i,
                    expected: (nodes, grades),
                    found: (s.nodes(), s.grades()),
                });
            }
        }
        Ok(Self {
            nodes,
            grades,
            samples,
        })
    }

    /// One-hot labels from 1-indexed grade vectors.
    pub fn from_grades(rows: &[Vec<usize>], nodes: usize, grades: usize) -> Result<Self, LearnError> {
        let samples = rows
            .iter()
            .map(|r| EvidenceMatrix::one_hot(r, grades))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(nodes, grades, samples)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn grades(&self) -> usize {
        self.grades
    }

    pub fn samples(&self) -> &[EvidenceMatrix] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn require_nonempty(&self) -> Result<(), LearnError> {
        if self.samples.is_empty() {
            Err(LearnError::EmptyDataset)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Among equal-score parent sets prefer the lexicographically smallest
    /// sorted index list; among equal-score sinks prefer the lowest index.
    #[default]
    LexicographicParents,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureSearchConfig {
    pub max_in_degree: usize,
    /// Pseudo-count added to every CPT cell when fitting parameters.
    pub equivalent_sample_size: f64,
    pub tie_break: TieBreak,
}

impl Default for StructureSearchConfig {
    fn default() -> Self {
        Self {
            max_in_degree: 2,
            equivalent_sample_size: 1.0,
            tie_break: TieBreak::LexicographicParents,
        }
    }
}

/// Expected counts for one family, `[parent row][child grade]`.
pub fn family_counts(data: &LabelDataset, child: usize, parents: &[usize]) -> Vec<Vec<f64>> {
    let c = data.grades;
    let rows = c.pow(parents.len() as u32);
    let mut counts = vec![vec![0.0; c]; rows];
    let mut digits = vec![0usize; parents.len()];
    for sample in &data.samples {
        let child_row = sample.row(child);
        digits.iter_mut().for_each(|d| *d = 0);
        for counts_row in counts.iter_mut() {
            let mut q = 1.0;
            for (&p, &g) in parents.iter().zip(&digits) {
                q *= sample.row(p)[g];
            }
            if q != 0.0 {
                for (cell, &px) in counts_row.iter_mut().zip(child_row) {
                    *cell += q * px;
                }
            }
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < c {
                    break;
                }
                *d = 0;
            }
        }
    }
    counts
}

fn check_structure(structure: &[Vec<usize>], data: &LabelDataset) -> Result<(), LearnError> {
    data.require_nonempty()?;
    if structure.len() != data.nodes {
        return Err(LearnError::NodeCountMismatch {
            expected: data.nodes,
            found: structure.len(),
        });
    }
    Ok(())
}

/// Smoothed maximum-likelihood CPTs for a fixed structure.
///
/// A parent row with zero total mass and zero smoothing becomes uniform.
pub fn fit_cpts_mle(
    structure: &[Vec<usize>],
    data: &LabelDataset,
    smoothing: f64,
) -> Result<BayesianNetwork, LearnError> {
    check_structure(structure, data)?;
    let c = data.grades;
    let cpts = structure
        .iter()
        .enumerate()
        .map(|(child, parents)| {
            family_counts(data, child, parents)
                .into_iter()
                .map(|row| {
                    let total: f64 = row.iter().sum::<f64>() + c as f64 * smoothing;
                    if total > 0.0 {
                        row.iter().map(|n| (n + smoothing) / total).collect()
                    } else {
                        vec![1.0 / c as f64; c]
                    }
                })
                .collect()
        })
        .collect();
    Ok(BayesianNetwork::new(c, structure.to_vec(), cpts)?)
}

/// BIC of a structure with its log-likelihood and penalty parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicScore {
    pub log_likelihood: f64,
    pub penalty: f64,
    /// Sum of per-family scores in node-index order.
    pub total: f64,
}

fn family_parts(counts: &[Vec<f64>], grades: usize, samples: usize) -> (f64, f64) {
    let mut ll = 0.0;
    for row in counts {
        let total: f64 = row.iter().sum();
        for &n in row {
            if n > 0.0 {
                ll += n * (n / total).ln();
            }
        }
    }
    let free = (counts.len() * (grades - 1)) as f64;
    (ll, 0.5 * free * (samples as f64).ln())
}

/// BIC contribution of one `(child, parents)` family.
pub fn family_score(data: &LabelDataset, child: usize, parents: &[usize]) -> f64 {
    let (ll, pen) = family_parts(&family_counts(data, child, parents), data.grades, data.len());
    ll - pen
}

/// Expected log-likelihood under the unsmoothed MLE minus `(k/2) ln S`.
pub fn bic_score(structure: &[Vec<usize>], data: &LabelDataset) -> Result<BicScore, LearnError> {
    check_structure(structure, data)?;
    let mut out = BicScore {
        log_likelihood: 0.0,
        penalty: 0.0,
        total: 0.0,
    };
    for (child, parents) in structure.iter().enumerate() {
        let (ll, pen) = family_parts(
            &family_counts(data, child, parents),
            data.grades,
            data.len(),
        );
        out.log_likelihood += ll;
        out.penalty += pen;
        out.total += ll - pen;
    }
    Ok(out)
}

fn mask_members(mask: u32) -> impl Iterator<Item = usize> {
    (0..32).filter(move |b| mask & (1 << b) != 0)
}

/// `a` precedes `b` when its sorted member list is lexicographically smaller.
fn lex_less(a: u32, b: u32) -> bool {
    mask_members(a).lt(mask_members(b))
}

#[derive(Clone, Copy)]
struct Choice {
    score: f64,
    mask: u32,
}

impl Choice {
    fn better_than(&self, other: &Choice) -> bool {
        self.score > other.score || (self.score == other.score && lex_less(self.mask, other.mask))
    }
}

/// BIC-optimal DAG under an in-degree cap, with smoothed MLE CPTs.
pub fn learn_structure(
    data: &LabelDataset,
    cfg: &StructureSearchConfig,
) -> Result<BayesianNetwork, LearnError> {
    data.require_nonempty()?;
    let n = data.nodes;
    if n > MAX_DP_NODES {
        return Err(LearnError::Capacity { nodes: n });
    }
    let full: u32 = (1u32 << n) - 1;
    let cap = cfg.max_in_degree.min(n.saturating_sub(1));

    // best_parents[v][s]: best family for v drawn from candidate set s (bit v clear).
    let mut best_parents: Vec<Vec<Choice>> = Vec::with_capacity(n);
    for v in 0..n {
        let mut table = vec![
            Choice {
                score: f64::NEG_INFINITY,
                mask: 0,
            };
            1 << n
        ];
        for s in 0..=full {
            if s & (1 << v) != 0 {
                continue;
            }
            let mut best = if (s.count_ones() as usize) <= cap {
                let parents: Vec<usize> = mask_members(s).collect();
                Choice {
                    score: family_score(data, v, &parents),
                    mask: s,
                }
            } else {
                Choice {
                    score: f64::NEG_INFINITY,
                    mask: s,
                }
            };
            for u in mask_members(s) {
                let sub = table[(s & !(1 << u)) as usize];
                if sub.better_than(&best) {
                    best = sub;
                }
            }
            table[s as usize] = best;
        }
        best_parents.push(table);
    }

    let mut best_net = vec![0.0f64; 1 << n];
    let mut sink = vec![usize::MAX; 1 << n];
    for w in 1..=full {
        let mut best = f64::NEG_INFINITY;
        for s in mask_members(w) {
            let rest = w & !(1 << s);
            let score = best_parents[s][rest as usize].score + best_net[rest as usize];
            if score > best {
                best = score;
                sink[w as usize] = s;
            }
        }
        best_net[w as usize] = best;
    }

    let mut structure = vec![Vec::new(); n];
    let mut w = full;
    while w != 0 {
        let s = sink[w as usize];
        let rest = w & !(1 << s);
        structure[s] = mask_members(best_parents[s][rest as usize].mask).collect();
        w = rest;
    }
    fit_cpts_mle(&structure, data, cfg.equivalent_sample_size)
}

/// Edit distance between the undirected skeletons of two structures.
pub fn skeleton_distance(a: &BayesianNetwork, b: &BayesianNetwork) -> usize {
    let sa = a.skeleton();
    let sb = b.skeleton();
    sa.iter().filter(|e| !sb.contains(e)).count() + sb.iter().filter(|e| !sa.contains(e)).count()
}
