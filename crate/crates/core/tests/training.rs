mod common;

use hybrid_reason::bn::BayesianNetwork;
use hybrid_reason::learn::{learn_structure, LabelDataset, StructureSearchConfig};
use hybrid_reason::model::{Components, HybridModel, Mode, ModelConfig, ModelShape};
use hybrid_reason::synth::{generate_splits, sample_dataset, GeneratorSpec, SyntheticDataset};
use hybrid_reason::tape::Tape;
use hybrid_reason::train::{
    alternate_train, attribute_importance, loss_op, TrainConfig, TrainedModel, TrainingData,
};
use ndarray::Array2;

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder_hidden: 16,
        feature_dim: 16,
        node_dim: 8,
        layers: 2,
        attention_hidden: 8,
        ..ModelConfig::default()
    }
}

fn data_of(d: &SyntheticDataset) -> TrainingData<'_> {
    TrainingData {
        features: d.features.view(),
        grades: &d.grades,
        nodes: d.nodes,
        grades_per_node: d.grades_per_node,
    }
}

fn small_splits(seed: u64) -> hybrid_reason::synth::Splits {
    generate_splits(&GeneratorSpec {
        n_attributes: 3,
        grades: 3,
        cpt_concentration: 0.3,
        feature_noise_sd: 0.6,
        train: 120,
        val: 0,
        test: 100,
        seed,
        ..GeneratorSpec::default()
    })
    .unwrap()
}

fn one_hot_targets(d: &SyntheticDataset, idx: &[usize]) -> Array2<f64> {
    let (n, c) = (d.nodes, d.grades_per_node);
    let mut t = Array2::zeros((idx.len() * n, c));
    for (b, &i) in idx.iter().enumerate() {
        for (v, &g) in d.grades[i].iter().enumerate() {
            t[[b * n + v, g - 1]] = 1.0;
        }
    }
    t
}

#[test]
fn loss_goes_down() {
    let mut drops = Vec::new();
    for seed in 0..5 {
        let s = small_splits(seed);
        let cfg = TrainConfig {
            max_epochs: 12,
            learning_rate: 1e-2,
            seed,
            ..TrainConfig::default()
        };
        let t = alternate_train(&data_of(&s.train), &small_config(), Components::default(), &cfg).unwrap();
        drops.push(t.history.last().unwrap().loss - t.history[0].loss);
    }
    assert!(common::median(&drops) < 0.0, "{drops:?}");
}

#[test]
fn refit_cap_is_honoured() {
    let s = small_splits(1);
    let cfg = TrainConfig {
        max_epochs: 23,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let t = alternate_train(&data_of(&s.train), &small_config(), Components::default(), &cfg).unwrap();
    assert_eq!(t.history.last().unwrap().bn_updates, 20);
    assert_eq!(t.history[19].bn_updates, 20);
    assert_eq!(t.history[18].bn_updates, 19);

    // cap 0 keeps the label-fitted networks
    let t = alternate_train(
        &data_of(&s.train),
        &small_config(),
        Components::default(),
        &TrainConfig {
            max_epochs: 3,
            bn_update_cap: 0,
            ..cfg
        },
    )
    .unwrap();
    let labels = LabelDataset::from_grades(&s.train.grades, 4, 3).unwrap();
    let fitted = learn_structure(&labels, &StructureSearchConfig::default()).unwrap();
    assert_eq!(*t.model.bn1, fitted);
    assert_eq!(*t.model.bn2, fitted);
    assert!(t.history.iter().all(|h| h.bn_updates == 0));
}

#[test]
fn training_is_deterministic_and_bundles_round_trip() {
    let s = small_splits(2);
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 7,
        ..TrainConfig::default()
    };
    let a = alternate_train(&data_of(&s.train), &small_config(), Components::default(), &cfg).unwrap();
    let b = alternate_train(&data_of(&s.train), &small_config(), Components::default(), &cfg).unwrap();
    let json = a.to_json();
    assert_eq!(json, b.to_json());
    let back = TrainedModel::from_json(&json).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_json(), json);
    assert_eq!(
        back.disease_scores(s.test.features.view()).unwrap(),
        a.disease_scores(s.test.features.view()).unwrap()
    );

    let bumped = json.replacen("\"version\": 1", "\"version\": 9", 1);
    assert!(TrainedModel::from_json(&bumped).is_err());
}

#[test]
fn doubled_weights_double_gradients() {
    let s = small_splits(3);
    let labels = LabelDataset::from_grades(&s.train.grades, 4, 3).unwrap();
    let net = learn_structure(&labels, &StructureSearchConfig::default()).unwrap();
    let shape = ModelShape {
        nodes: 4,
        grades: 3,
        input_dim: s.train.features.ncols(),
    };
    let model = HybridModel::new(shape, small_config(), Components::default(), net.clone(), net, 4).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let x = s.train.features.select(ndarray::Axis(0), &idx);
    let targets = one_hot_targets(&s.train, &idx);
    let grad = |w: [f64; 5]| {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, x.view(), Mode::Train, None).unwrap();
        let lv = loss_op(&mut tape, &fwd, &targets, 4, &w);
        tape.param_gradient(lv.total, &model.params)
    };
    let g1 = grad([0.2; 5]);
    let g2 = grad([0.4; 5]);
    assert!(g1.iter().any(|g| *g != 0.0));
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }
}

/// Disease copies attribute 1 (noisily); attributes 2..=3 are independent.
fn single_cause_network() -> BayesianNetwork {
    let c = 3;
    let disease = vec![vec![0.9, 0.05, 0.05], vec![0.05, 0.9, 0.05], vec![0.05, 0.05, 0.9]];
    let flat = vec![vec![1.0 / 3.0; c]];
    BayesianNetwork::new(
        c,
        vec![vec![1], vec![], vec![], vec![]],
        vec![disease, flat.clone(), flat.clone(), flat],
    )
    .unwrap()
}

#[test]
fn importance_finds_the_single_cause() {
    let net = single_cause_network();
    let spec = GeneratorSpec {
        n_attributes: 3,
        grades: 3,
        feature_noise_sd: 0.5,
        disease_noise_sd: Some(3.0),
        seed: 5,
        ..GeneratorSpec::default()
    };
    let train = sample_dataset(&net, &spec, 300, 0).unwrap();
    let test = sample_dataset(&net, &spec, 200, 2).unwrap();
    let cfg = TrainConfig {
        max_epochs: 15,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let t = alternate_train(&data_of(&train), &small_config(), Components::default(), &cfg).unwrap();
    let means: Vec<f64> = (1..4)
        .map(|a| {
            let imp = attribute_importance(&t, test.features.view(), a).unwrap();
            assert!(imp.scores.iter().all(|v| *v >= 0.0));
            imp.scores.iter().sum::<f64>() / imp.scores.len() as f64
        })
        .collect();
    assert!(means[0] > means[1] && means[0] > means[2], "{means:?}");
    assert!(attribute_importance(&t, test.features.view(), 0).is_err());
}

#[test]
fn disconnected_attribute_has_no_importance() {
    let s = small_splits(4);
    let data = data_of(&s.train);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let mut t = alternate_train(&data, &small_config(), Components::default(), &cfg).unwrap();
    let m = &mut t.model;
    m.bn1 = std::sync::Arc::new(BayesianNetwork::edgeless_uniform(4, 3));
    m.bn2 = m.bn1.clone();
    let names: Vec<String> = m
        .params
        .segments()
        .iter()
        .map(|seg| seg.name.clone())
        .filter(|n| n.starts_with("attn.") || n.ends_with(".edges"))
        .collect();
    for name in names {
        let id = m.params.id(&name).unwrap();
        let zero = Array2::zeros(m.params.get(id).dim());
        m.params.set(id, &zero).unwrap();
    }
    for a in 1..4 {
        let imp = attribute_importance(&t, s.test.features.view(), a).unwrap();
        assert!(imp.scores.iter().all(|v| *v == 0.0), "attribute {a}");
    }
}
