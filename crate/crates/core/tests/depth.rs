use circuitscope::depth::{aggregate_idm, ddb, ddb_training_series, layer_sets, DdbKind, DdbVariant, DependencyMatrix};
use circuitscope::discovery::{CircuitWeights, Method};
use circuitscope::graph::{build_graph, Edge, NodeId};
use circuitscope::nn::{ModelConfig, ViTModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn circuit(weights: Vec<f64>) -> CircuitWeights {
    CircuitWeights {
        model_id: "m".into(),
        dataset_id: "d".into(),
        method: Method::Exact,
        weights,
        signed: None,
    }
}

fn only(graph: &circuitscope::graph::CompGraph, edges: &[(Edge, f64)]) -> CircuitWeights {
    let mut w = vec![0.0; graph.n_edges()];
    for (e, v) in edges {
        w[graph.edge_index(e).unwrap()] = *v;
    }
    circuit(w)
}

#[test]
fn single_input_to_output_edge() {
    let g = build_graph(&ModelConfig::desk());
    let c = only(&g, &[(Edge { src: NodeId::Input, dst: NodeId::Output }, 2.0)]);
    let m = aggregate_idm(&c, &g).unwrap();
    assert_eq!(m.get(0, 5), 2.0);
    assert_eq!(m.total(), 2.0);
}

#[test]
fn heads_and_mlp_share_their_block() {
    let g = build_graph(&ModelConfig::desk());
    let c = only(
        &g,
        &[
            (Edge { src: NodeId::AttnHead { layer: 3, head: 1 }, dst: NodeId::Mlp { layer: 3 } }, 1.0),
            (Edge { src: NodeId::AttnHead { layer: 3, head: 2 }, dst: NodeId::Mlp { layer: 3 } }, 2.0),
        ],
    );
    let m = aggregate_idm(&c, &g).unwrap();
    assert_eq!(m.get(3, 3), 3.0);
    assert_eq!(m.total(), 3.0);
}

#[test]
fn layer_sets_follow_the_formula() {
    for &l in &[4usize, 12] {
        for &tau in &[0.1, 0.2, 0.3, 0.4, 0.5] {
            let (low, high) = layer_sets(tau, l).unwrap();
            let k = ((tau * l as f64).floor() as usize).max(1);
            assert_eq!(low, (1..=k).collect::<Vec<_>>());
            assert_eq!(high, (l - k + 1..=l + 1).collect::<Vec<_>>());
        }
    }
}

fn variants() -> impl Strategy<Value = DdbVariant> {
    (prop_oneof![Just(DdbKind::Global), Just(DdbKind::Deep), Just(DdbKind::Out)], 0.05f64..=0.5)
        .prop_map(|(k, t)| DdbVariant::new(k, t).unwrap())
}

fn positive_weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, n)
}

proptest! {
    #[test]
    fn conservation(w in positive_weights(87)) {
        let g = build_graph(&ModelConfig::desk());
        let m = aggregate_idm(&circuit(w.clone()), &g).unwrap();
        let want: f64 = w.iter().sum();
        prop_assert!((m.total() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn scale_invariance(w in positive_weights(87), v in variants(), a in 1e-3f64..1e3) {
        let g = build_graph(&ModelConfig::desk());
        let m = aggregate_idm(&circuit(w), &g).unwrap();
        let d0 = ddb(&m, v).unwrap();
        let d1 = ddb(&m.scale(a), v).unwrap();
        prop_assert!((d0 - d1).abs() < 1e-10);
    }

    #[test]
    fn monotone_in_deep_and_shallow_mass(w in positive_weights(87), v in variants(), bump in 0.1f64..5.0) {
        let g = build_graph(&ModelConfig::desk());
        let m = aggregate_idm(&circuit(w), &g).unwrap();
        let l = m.n_layers;
        let (low, high) = layer_sets(v.tau, l).unwrap();
        let targets: Vec<usize> = match v.kind {
            DdbKind::Global => (1..=l).collect(),
            DdbKind::Deep => high.clone(),
            DdbKind::Out => vec![l + 1],
        };
        let base = ddb(&m, v).unwrap();
        // cells with a structural edge in both the high and low bands
        for &j in &targets {
            if let Some(&i) = high.iter().find(|&&i| m.get(i, j) > 0.0) {
                let mut up = m.clone();
                up.add(i, j, bump);
                prop_assert!(ddb(&up, v).unwrap() > base);
            }
            if let Some(&i) = low.iter().find(|&&i| m.get(i, j) > 0.0) {
                let mut up = m.clone();
                up.add(i, j, bump);
                prop_assert!(ddb(&up, v).unwrap() < base);
            }
        }
    }
}

#[test]
fn series_over_identical_snapshots_is_constant() {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, ..ModelConfig::tiny() };
    let m = ViTModel::init(cfg.clone(), "m", &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let data = circuitscope::data::Dataset {
        id: "x".into(),
        channels: 1,
        height: 4,
        width: 4,
        pixels: (0..6 * 16).map(|i| ((i * 37 % 11) as f32) / 5.0 - 1.0).collect(),
        labels: vec![0; 6],
        seed: 0,
    };
    let v = DdbVariant::new(DdbKind::Out, 0.5).unwrap();
    let snaps = vec![(0, m.clone()), (10, m.clone()), (20, m)];
    let series = ddb_training_series(&snaps, &data, Method::EapIg { steps: 2 }, v, Some(&data)).unwrap();
    assert_eq!(series.len(), 3);
    assert!(series.iter().all(|p| p.ddb == series[0].ddb && p.ood_perf.is_some()));
    assert_eq!(series[2].step, 20);
    assert!(ddb_training_series(&[], &data, Method::Eap, v, None).unwrap().is_empty());
}

#[test]
fn structural_zeros_in_empty_matrix() {
    let m = DependencyMatrix::zeros(4);
    assert!(ddb(&m, DdbVariant::with_default_tau(DdbKind::Global)).is_err());
}
