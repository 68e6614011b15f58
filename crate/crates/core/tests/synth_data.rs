mod common;

use hybrid_reason::synth::{
    ancestral_sample, generate_splits, sample_dataset, stratified_folds, stratified_subsample, GeneratorSpec,
    StructureFamily, SynthError, SyntheticDataset,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        n_attributes: 4,
        grades: 3,
        train: 40,
        val: 10,
        test: 20,
        seed: 11,
        ..GeneratorSpec::default()
    }
}

#[test]
fn empirical_marginals_match_network() {
    let net = common::polytree(5, 3, 21);
    let prior = net.prior_marginals().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 100_000;
    let mut counts = vec![vec![0usize; 3]; 5];
    for _ in 0..draws {
        for (v, g) in ancestral_sample(&net, &mut rng).into_iter().enumerate() {
            counts[v][g - 1] += 1;
        }
    }
    for v in 0..5 {
        for g in 0..3 {
            let p = counts[v][g] as f64 / draws as f64;
            assert!((p - prior.row(v)[g]).abs() < 0.01, "node {v} grade {g}");
        }
    }
}

#[test]
fn same_seed_same_data() {
    let a = generate_splits(&small_spec()).unwrap();
    let b = generate_splits(&small_spec()).unwrap();
    assert_eq!(a.network, b.network);
    assert_eq!(a.train, b.train);
    assert_eq!(a.test.to_json(), b.test.to_json());
    let c = generate_splits(&GeneratorSpec { seed: 12, ..small_spec() }).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn file_round_trip_is_exact() {
    let d = generate_splits(&small_spec()).unwrap().train;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.json");
    d.write(&path).unwrap();
    assert_eq!(SyntheticDataset::read(&path).unwrap(), d);
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let d = generate_splits(&small_spec()).unwrap().val;
    let json = d.to_json();
    let cut = &json[..json.len() / 2];
    assert!(matches!(SyntheticDataset::from_json(cut), Err(SynthError::Parse(_))));

    let bumped = json.replacen("\"version\":1", "\"version\":2", 1);
    assert!(matches!(
        SyntheticDataset::from_json(&bumped),
        Err(SynthError::UnsupportedVersion { found: 2 })
    ));

    let extra = json.replacen('{', "{\"colour\":1,", 1);
    assert!(matches!(SyntheticDataset::from_json(&extra), Err(SynthError::Parse(_))));

    let bad_grade = json.replacen("\"labels\":[[", "\"labels\":[[9,", 1);
    assert!(SyntheticDataset::from_json(&bad_grade).is_err());
}

#[test]
fn ratios_survive_stratification() {
    let spec = GeneratorSpec {
        positive_fraction: Some(0.125),
        train: 400,
        ..small_spec()
    };
    let s = generate_splits(&spec).unwrap();
    assert_eq!(s.train.positives(), 50);
    let half = stratified_subsample(&s.train, 0.5, 3);
    assert_eq!((half.len(), half.positives()), (200, 25));
    let folds = stratified_folds(&s.train.binary_labels(), 10, 0);
    for k in 0..10 {
        let members: Vec<usize> = (0..400).filter(|&i| folds[i] == k).collect();
        assert_eq!(members.len(), 40);
        assert_eq!(members.iter().filter(|&&i| s.train.is_positive(i)).count(), 5);
    }
}

#[test]
fn edgeless_family_and_feature_layout() {
    let spec = GeneratorSpec {
        structure: StructureFamily::Edgeless,
        feature_dim: 3,
        ..small_spec()
    };
    let s = generate_splits(&spec).unwrap();
    assert_eq!(s.network.edge_count(), 0);
    assert_eq!(s.train.features.ncols(), 5 * 3);
    let again = sample_dataset(&s.network, &spec, 40, 0).unwrap();
    assert_eq!(again, s.train);
}
