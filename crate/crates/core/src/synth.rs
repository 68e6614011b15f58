//! Synthetic ground-truth networks and noisy feature datasets.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bn::{BayesianNetwork, BnError};
use crate::model::is_positive_grade;

/// Version written into and required from dataset files.
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Network(#[from] BnError),
    #[error("could not reach {wanted} {kind} samples after {tries} draws")]
    Quota {
        kind: &'static str,
        wanted: usize,
        tries: usize,
    },
    #[error("unsupported dataset version {found} (expected {DATASET_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("dataset parse error: {0}")]
    Parse(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StructureFamily {
    RandomPolytree { max_in_degree: usize },
    RandomDag { max_in_degree: usize },
    Edgeless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub n_attributes: usize,
    pub grades: usize,
    pub structure: StructureFamily,
    /// Symmetric Dirichlet concentration of every CPT row.
    pub cpt_concentration: f64,
    /// Embedding width per node; features have `(N+1)·feature_dim` columns.
    pub feature_dim: usize,
    pub feature_noise_sd: f64,
    /// Noise on the disease node's features when it should differ from
    /// the attributes'.
    pub disease_noise_sd: Option<f64>,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of positive diagnoses forced in every split.
    pub positive_fraction: Option<f64>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_attributes: 8,
            grades: 5,
            structure: StructureFamily::RandomPolytree { max_in_degree: 2 },
            cpt_concentration: 0.5,
            feature_dim: 4,
            feature_noise_sd: 1.0,
            disease_noise_sd: None,
            seed: 0,
            train: 400,
            val: 100,
            test: 500,
            positive_fraction: None,
        }
    }
}

impl GeneratorSpec {
    pub fn nodes(&self) -> usize {
        self.n_attributes + 1
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if self.n_attributes < 1 {
            return bad("need at least one attribute");
        }
        if self.grades < 2 {
            return bad("need at least two grades");
        }
        if !(self.feature_noise_sd >= 0.0) || !self.feature_noise_sd.is_finite() {
            return bad("noise sd must be finite and nonnegative");
        }
        if self.disease_noise_sd.is_some_and(|sd| !(sd >= 0.0) || !sd.is_finite()) {
            return bad("disease noise sd must be finite and nonnegative");
        }
        if !(self.cpt_concentration > 0.0) || !self.cpt_concentration.is_finite() {
            return bad("concentration must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if let Some(f) = self.positive_fraction {
            if !(0.0..=1.0).contains(&f) {
                return bad("positive_fraction must be in [0, 1]");
            }
        }
        match self.structure {
            StructureFamily::RandomPolytree { max_in_degree } | StructureFamily::RandomDag { max_in_degree }
                if max_in_degree == 0 =>
            {
                bad("max_in_degree must be positive")
            }
            _ => Ok(()),
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

fn dirichlet_row(rng: &mut ChaCha8Rng, alpha: f64, c: usize) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let draws: Vec<f64> = (0..c).map(|_| g.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return vec![1.0 / c as f64; c];
    }
    let mut row: Vec<f64> = draws.iter().map(|d| d / s).collect();
    // Push the rounding residue onto the largest entry.
    let resid = 1.0 - row.iter().sum::<f64>();
    let k = (0..c).fold(0, |b, i| if row[i] > row[b] { i } else { b });
    row[k] += resid;
    row
}

/// Random network of the requested family with Dirichlet CPT rows.
pub fn generate_ground_truth(spec: &GeneratorSpec) -> Result<BayesianNetwork, SynthError> {
    spec.validate()?;
    let n = spec.nodes();
    let c = spec.grades;
    let mut rng = spec.rng(1);
    let mut parents = vec![Vec::new(); n];
    match spec.structure {
        StructureFamily::Edgeless => {}
        StructureFamily::RandomPolytree { max_in_degree } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for i in 1..n {
                let new = order[i];
                let old = order[rng.random_range(0..i)];
                // The new node has no parents yet, so one side always fits.
                if rng.random_bool(0.5) && parents[old].len() < max_in_degree {
                    parents[old].push(new);
                } else {
                    parents[new].push(old);
                }
            }
        }
        StructureFamily::RandomDag { max_in_degree } => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for i in 1..n {
                let k = rng.random_range(0..=max_in_degree.min(i));
                let mut earlier: Vec<usize> = order[..i].to_vec();
                earlier.shuffle(&mut rng);
                parents[order[i]] = earlier[..k].to_vec();
            }
        }
    }
    for p in &mut parents {
        p.sort_unstable();
    }
    let cpts = parents
        .iter()
        .map(|p| {
            (0..c.pow(p.len() as u32))
                .map(|_| dirichlet_row(&mut rng, spec.cpt_concentration, c))
                .collect()
        })
        .collect();
    Ok(BayesianNetwork::new(c, parents, cpts)?)
}

/// Labels plus features; row `i` of `features` belongs to `grades[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub nodes: usize,
    pub grades_per_node: usize,
    /// 1-indexed grades, disease first.
    pub grades: Vec<Vec<usize>>,
    pub features: Array2<f64>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        is_positive_grade(self.grades[i][0], self.grades_per_node)
    }

    pub fn positives(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_positive(i)).count()
    }

    pub fn binary_labels(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_positive(i)).collect()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            nodes: self.nodes,
            grades_per_node: self.grades_per_node,
            grades: idx.iter().map(|&i| self.grades[i].clone()).collect(),
            features: self.features.select(ndarray::Axis(0), idx),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&DatasetFile {
            version: DATASET_VERSION,
            nodes: self.nodes,
            grades: self.grades_per_node,
            labels: self.grades.clone(),
            features: self.features.outer_iter().map(|r| r.to_vec()).collect(),
        })
        .expect("dataset serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SynthError> {
        #[derive(Deserialize)]
        struct Probe {
            version: u32,
        }
        let probe: Probe = serde_json::from_str(s).map_err(|e| SynthError::Parse(e.to_string()))?;
        if probe.version != DATASET_VERSION {
            return Err(SynthError::UnsupportedVersion { found: probe.version });
        }
        let f: DatasetFile = serde_json::from_str(s).map_err(|e| SynthError::Parse(e.to_string()))?;
        f.try_into()
    }

    pub fn write(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, SynthError> {
        let s = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&s)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    version: u32,
    nodes: usize,
    grades: usize,
    labels: Vec<Vec<usize>>,
    features: Vec<Vec<f64>>,
}

impl TryFrom<DatasetFile> for SyntheticDataset {
    type Error = SynthError;

    fn try_from(f: DatasetFile) -> Result<Self, SynthError> {
        if f.labels.len() != f.features.len() {
            return Err(SynthError::Invalid(format!(
                "{} label rows but {} feature rows",
                f.labels.len(),
                f.features.len()
            )));
        }
        for (i, row) in f.labels.iter().enumerate() {
            if row.len() != f.nodes || row.iter().any(|&g| g == 0 || g > f.grades) {
                return Err(SynthError::Invalid(format!("labels[{i}] is not a grade vector")));
            }
        }
        let dim = f.features.first().map_or(0, Vec::len);
        if let Some(i) = f.features.iter().position(|r| r.len() != dim) {
            return Err(SynthError::Invalid(format!("features[{i}] has the wrong length")));
        }
        let rows = f.features.len();
        Ok(Self {
            nodes: f.nodes,
            grades_per_node: f.grades,
            grades: f.labels,
            features: Array2::from_shape_vec((rows, dim), f.features.into_iter().flatten().collect())
                .expect("rectangular"),
        })
    }
}

/// Per-(node, grade) embeddings, `[node][grade]` of length `feature_dim`.
pub fn embeddings(spec: &GeneratorSpec) -> Vec<Vec<Vec<f64>>> {
    let mut rng = spec.rng(2);
    (0..spec.nodes())
        .map(|_| {
            (0..spec.grades)
                .map(|_| (0..spec.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        })
        .collect()
}

/// One ancestral sample, 1-indexed.
pub fn ancestral_sample(net: &BayesianNetwork, rng: &mut impl Rng) -> Vec<usize> {
    let mut g = vec![0usize; net.node_count()];
    for &v in net.topological_order() {
        let row = &net.cpt(v)[net.row_index(net.parents(v).iter().map(|&p| g[p]))];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = row.len() - 1;
        for (k, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = k;
                break;
            }
        }
        g[v] = pick;
    }
    g.iter().map(|x| x + 1).collect()
}

fn featurize(
    grades: &[Vec<usize>],
    emb: &[Vec<Vec<f64>>],
    noise_sd: &[f64],
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let n = emb.len();
    let d = emb[0][0].len();
    let mut x = Array2::zeros((grades.len(), n * d));
    for (i, row) in grades.iter().enumerate() {
        for (node, &g) in row.iter().enumerate() {
            for k in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                x[[i, node * d + k]] = emb[node][g - 1][k] + noise_sd[node] * noise;
            }
        }
    }
    x
}

/// `count` ancestral samples with features.
pub fn sample_dataset(
    net: &BayesianNetwork,
    spec: &GeneratorSpec,
    count: usize,
    stream: u64,
) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    if (net.node_count(), net.grades()) != (spec.nodes(), spec.grades) {
        return Err(SynthError::Spec(format!(
            "network is {}×{}, spec wants {}×{}",
            net.node_count(),
            net.grades(),
            spec.nodes(),
            spec.grades
        )));
    }
    let mut rng = spec.rng(16 + 2 * stream);
    let grades = match spec.positive_fraction {
        None => (0..count).map(|_| ancestral_sample(net, &mut rng)).collect(),
        Some(f) => sample_with_quota(net, spec.grades, count, f, &mut rng)?,
    };
    let mut noise_rng = spec.rng(17 + 2 * stream);
    let mut sd = vec![spec.feature_noise_sd; spec.nodes()];
    sd[0] = spec.disease_noise_sd.unwrap_or(spec.feature_noise_sd);
    let features = featurize(&grades, &embeddings(spec), &sd, &mut noise_rng);
    Ok(SyntheticDataset {
        nodes: spec.nodes(),
        grades_per_node: spec.grades,
        grades,
        features,
    })
}

fn sample_with_quota(
    net: &BayesianNetwork,
    c: usize,
    count: usize,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, SynthError> {
    let want_pos = (fraction * count as f64).round() as usize;
    let want_neg = count - want_pos;
    let (mut pos, mut neg) = (0, 0);
    let mut out = Vec::with_capacity(count);
    let max_tries = 1000 * count.max(1);
    let mut tries = 0;
    while pos < want_pos || neg < want_neg {
        if tries == max_tries {
            let (kind, wanted) = if pos < want_pos { ("positive", want_pos) } else { ("negative", want_neg) };
            return Err(SynthError::Quota { kind, wanted, tries });
        }
        tries += 1;
        let s = ancestral_sample(net, rng);
        if is_positive_grade(s[0], c) {
            if pos < want_pos {
                pos += 1;
                out.push(s);
            }
        } else if neg < want_neg {
            neg += 1;
            out.push(s);
        }
    }
    Ok(out)
}

/// Ground truth plus train/val/test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub network: BayesianNetwork,
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub test: SyntheticDataset,
}

pub fn generate_splits(spec: &GeneratorSpec) -> Result<Splits, SynthError> {
    let network = generate_ground_truth(spec)?;
    let train = sample_dataset(&network, spec, spec.train, 0)?;
    let val = sample_dataset(&network, spec, spec.val, 1)?;
    let test = sample_dataset(&network, spec, spec.test, 2)?;
    Ok(Splits {
        network,
        train,
        val,
        test,
    })
}

/// Keeps `round(fraction·k)` samples of each class, chosen at random and
/// returned in their original order.
pub fn stratified_subsample(data: &SyntheticDataset, fraction: f64, seed: u64) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.is_positive(i) == class).collect();
        let k = (fraction * idx.len() as f64).round() as usize;
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    data.subset(&keep)
}

/// Class-balanced fold assignment: fold of each sample.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % folds;
            next += 1;
        }
    }
    fold
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_have_expected_shape() {
        let mut spec = GeneratorSpec {
            structure: StructureFamily::Edgeless,
            ..GeneratorSpec::default()
        };
        let net = generate_ground_truth(&spec).unwrap();
        assert!((0..9).all(|v| net.parents(v).is_empty()));

        for seed in 0..20 {
            spec.seed = seed;
            spec.structure = StructureFamily::RandomPolytree { max_in_degree: 2 };
            let net = generate_ground_truth(&spec).unwrap();
            assert_eq!(net.edge_count(), 8);
            assert!(net.is_polytree());
            assert!((0..9).all(|v| net.parents(v).len() <= 2));
            spec.structure = StructureFamily::RandomDag { max_in_degree: 2 };
            let net = generate_ground_truth(&spec).unwrap();
            assert!((0..9).all(|v| net.parents(v).len() <= 2));
        }
    }

    #[test]
    fn huge_concentration_is_near_uniform() {
        let spec = GeneratorSpec {
            cpt_concentration: 1e6,
            ..GeneratorSpec::default()
        };
        let net = generate_ground_truth(&spec).unwrap();
        for v in 0..net.node_count() {
            for row in net.cpt(v) {
                assert!(row.iter().all(|p| (p - 0.2).abs() < 1e-2));
            }
        }
    }

    #[test]
    fn noiseless_features_decode() {
        let spec = GeneratorSpec {
            feature_noise_sd: 0.0,
            ..GeneratorSpec::default()
        };
        let net = generate_ground_truth(&spec).unwrap();
        let ds = sample_dataset(&net, &spec, 50, 0).unwrap();
        let emb = embeddings(&spec);
        let d = spec.feature_dim;
        for (i, row) in ds.grades.iter().enumerate() {
            for (node, &g) in row.iter().enumerate() {
                let x = ds.features.slice(ndarray::s![i, node * d..(node + 1) * d]);
                let nearest = (0..spec.grades)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&emb[node][a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&emb[node][b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                assert_eq!(nearest + 1, g);
            }
        }
    }

    #[test]
    fn quotas_and_stratification() {
        let spec = GeneratorSpec {
            positive_fraction: Some(0.2),
            train: 80,
            ..GeneratorSpec::default()
        };
        let s = generate_splits(&spec).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.train.positives(), 16);
        let half = stratified_subsample(&s.train, 0.25, 3);
        assert_eq!((half.len(), half.positives()), (20, 4));
        let folds = stratified_folds(&s.train.binary_labels(), 4, 1);
        for f in 0..4 {
            let members: Vec<usize> = (0..80).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 20);
            assert_eq!(members.iter().filter(|&&i| s.train.is_positive(i)).count(), 4);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            GeneratorSpec { n_attributes: 0, ..GeneratorSpec::default() },
            GeneratorSpec { grades: 1, ..GeneratorSpec::default() },
            GeneratorSpec { feature_noise_sd: -1.0, ..GeneratorSpec::default() },
        ] {
            assert!(matches!(generate_ground_truth(&spec), Err(SynthError::Spec(_))));
        }
    }
}
