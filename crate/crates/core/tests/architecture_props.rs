use hybrid_reason::bn::{BayesianNetwork, EvidenceMatrix};
use hybrid_reason::coupling::{
    channel_attention, final_bn_predict, fuse_results, spatial_attention, AttentionParams, FusionParams,
    LayerAttention, DISEASE,
};
use hybrid_reason::gcn::{edge_param_index, edge_param_len, graph_conv_layer, GcnLayer, GraphFeatureMap};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform_init(rng: &mut ChaCha8Rng) -> impl FnMut(usize, usize) -> Array2<f64> + '_ {
    move |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn random_layer(n: usize, d: usize, rng: &mut ChaCha8Rng) -> GcnLayer {
    let mut layer = GcnLayer::new(n, d, &mut uniform_init(rng));
    layer.edges.mapv_inplace(|_| rng.random_range(0.0..1.5));
    for row in layer.running.mean.iter_mut().chain(layer.running.var.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.random_range(0.2..1.2);
        }
    }
    layer
}

fn distributions(rows: usize, c: usize, rng: &mut ChaCha8Rng) -> EvidenceMatrix {
    let r: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
        .collect();
    EvidenceMatrix::from_rows(&r).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn graph_conv_is_permutation_equivariant(n in 2usize..7, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(n, d, &mut rng);
        let h = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let sp: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let ch: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.99)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);

        let mut moved = layer.clone();
        for i in 0..n {
            for j in i + 1..n {
                moved.edges[[0, edge_param_index(n, perm[i], perm[j])]] = layer.edges[[0, edge_param_index(n, i, j)]];
            }
            moved.running.mean[perm[i]] = layer.running.mean[i].clone();
            moved.running.var[perm[i]] = layer.running.var[i].clone();
        }
        let mut h2 = Array2::zeros((n, d));
        let mut sp2 = vec![0.0; n];
        for i in 0..n {
            h2.row_mut(perm[i]).assign(&h.row(i));
            sp2[perm[i]] = sp[i];
        }
        let a = graph_conv_layer(&layer, &GraphFeatureMap::new(h, 0).unwrap(), &sp, &ch).unwrap();
        let b = graph_conv_layer(&moved, &GraphFeatureMap::new(h2, 0).unwrap(), &sp2, &ch).unwrap();
        for i in 0..n {
            for k in 0..d {
                prop_assert!((a.features()[[i, k]] - b.features()[[perm[i], k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_updater_is_identity(n in 2usize..6, d in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = random_layer(n, d, &mut rng);
        layer.update_w2.fill(0.0);
        layer.update_b2.fill(0.0);
        let h = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let sp: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let ch: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.99)).collect();
        let out = graph_conv_layer(&layer, &GraphFeatureMap::new(h.clone(), 0).unwrap(), &sp, &ch).unwrap();
        prop_assert_eq!(out.features(), &h);
        prop_assert_eq!(edge_param_len(n), layer.edges.ncols());
    }

    #[test]
    fn attention_is_strictly_between_zero_and_one(
        n in 2usize..6, c in 2usize..5, d in 1usize..9, softmax in any::<bool>(), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams {
            layers: vec![LayerAttention::new(n, c, 5, d, 4, &mut uniform_init(&mut rng))],
            spatial_softmax: softmax,
        };
        let pb = distributions(n, c, &mut rng);
        let h = Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0));
        let s = spatial_attention(&pb, &params, 0).unwrap();
        let ch = channel_attention(&GraphFeatureMap::new(h, 0).unwrap(), &params, 0).unwrap();
        prop_assert!(s.iter().chain(&ch).all(|&a| a > 0.0 && a < 1.0));
        if softmax {
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_rows_are_stochastic(n in 2usize..6, c in 2usize..6, wd in 0.0f64..1.0, wa in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FusionParams::new(c, &mut |r, k| Array2::from_shape_fn((r, k), |_| rng.random_range(-3.0..3.0)));
        p.disease_logit = FusionParams::logit(wd);
        p.attribute_logit = FusionParams::logit(wa);
        let pb = distributions(n, c, &mut rng);
        let pg = distributions(n, c, &mut rng);
        let f = fuse_results(&pb, &pg, &p).unwrap();
        for r in 0..n {
            prop_assert!((f.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_trade_off_returns_bn_rows(n in 2usize..6, c in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FusionParams::new(c, &mut |r, k| Array2::from_shape_fn((r, k), |_| rng.random_range(-3.0..3.0)));
        p.disease_logit = FusionParams::logit(1.0);
        p.attribute_logit = FusionParams::logit(1.0);
        let pb = distributions(n, c, &mut rng);
        let pg = distributions(n, c, &mut rng);
        let f = fuse_results(&pb, &pg, &p).unwrap();
        prop_assert_eq!(f.view(), pb.view());
    }

    #[test]
    fn edgeless_final_network_passes_disease_row(n in 2usize..6, c in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fused = distributions(n, c, &mut rng);
        let net = BayesianNetwork::edgeless_uniform(n, c);
        let p = final_bn_predict(&net, &fused, 50, 1e-12).unwrap();
        for g in 0..c {
            prop_assert!((p[g] - fused.row(DISEASE)[g]).abs() < 1e-15);
        }
    }
}
