#![allow(dead_code)]

use hybrid_reason::bn::{BayesianNetwork, EvidenceMatrix};
use hybrid_reason::synth::{generate_ground_truth, GeneratorSpec, StructureFamily};
use rand::Rng;

/// Random polytree with Dirichlet(1) rows.
pub fn polytree(nodes: usize, grades: usize, seed: u64) -> BayesianNetwork {
    network(nodes, grades, seed, StructureFamily::RandomPolytree { max_in_degree: 2 }, 1.0)
}

pub fn network(nodes: usize, grades: usize, seed: u64, structure: StructureFamily, conc: f64) -> BayesianNetwork {
    generate_ground_truth(&GeneratorSpec {
        n_attributes: nodes - 1,
        grades,
        structure,
        cpt_concentration: conc,
        seed,
        ..GeneratorSpec::default()
    })
    .unwrap()
}

/// Strictly positive random evidence rows.
pub fn soft_evidence(nodes: usize, grades: usize, rng: &mut impl Rng) -> EvidenceMatrix {
    let rows: Vec<Vec<f64>> = (0..nodes)
        .map(|_| {
            let v: Vec<f64> = (0..grades).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
        .collect();
    EvidenceMatrix::from_rows(&rows).unwrap()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Hard-label dataset of `samples` ancestral draws.
pub fn sample_labels(
    net: &BayesianNetwork,
    samples: usize,
    seed: u64,
) -> hybrid_reason::learn::LabelDataset {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<usize>> = (0..samples)
        .map(|_| hybrid_reason::synth::ancestral_sample(net, &mut rng))
        .collect();
    hybrid_reason::learn::LabelDataset::from_grades(&rows, net.node_count(), net.grades()).unwrap()
}

fn subsets_up_to(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &x in items {
        let more: Vec<Vec<usize>> = out
            .iter()
            .filter(|s| s.len() < k)
            .map(|s| {
                let mut t = s.clone();
                t.push(x);
                t
            })
            .collect();
        out.extend(more);
    }
    out
}

fn acyclic(parents: &[&Vec<usize>]) -> bool {
    let n = parents.len();
    let mut state = vec![0u8; n];
    fn visit(v: usize, parents: &[&Vec<usize>], state: &mut [u8]) -> bool {
        match state[v] {
            1 => return false,
            2 => return true,
            _ => {}
        }
        state[v] = 1;
        for &p in parents[v].iter() {
            if !visit(p, parents, state) {
                return false;
            }
        }
        state[v] = 2;
        true
    }
    (0..n).all(|v| visit(v, parents, &mut state))
}

/// Best BIC over every DAG with in-degree at most `cap`, by enumeration.
pub fn enumerate_best_bic(data: &hybrid_reason::learn::LabelDataset, cap: usize) -> (f64, Vec<Vec<usize>>) {
    use hybrid_reason::learn::family_score;
    let n = data.nodes();
    let options: Vec<Vec<(Vec<usize>, f64)>> = (0..n)
        .map(|v| {
            let others: Vec<usize> = (0..n).filter(|&u| u != v).collect();
            subsets_up_to(&others, cap)
                .into_iter()
                .map(|mut s| {
                    s.sort_unstable();
                    let score = family_score(data, v, &s);
                    (s, score)
                })
                .collect()
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut pick = vec![0usize; n];
    loop {
        let parents: Vec<&Vec<usize>> = (0..n).map(|v| &options[v][pick[v]].0).collect();
        if acyclic(&parents) {
            let s: f64 = (0..n).map(|v| options[v][pick[v]].1).sum();
            if s > best.0 {
                best = (s, parents.into_iter().cloned().collect());
            }
        }
        let mut v = 0;
        loop {
            if v == n {
                return best;
            }
            pick[v] += 1;
            if pick[v] < options[v].len() {
                break;
            }
            pick[v] = 0;
            v += 1;
        }
    }
}
