//! Edge weights and faithfulness against independent reference computations.

use circuitscope::discovery::{
    self, eap_circuit, eap_ig_circuit, exact_circuit, random_circuit, FaithfulnessEvaluator, FaithfulnessForm,
    Method,
};
use circuitscope::graph::{build_graph, compute_mean_cache};
use circuitscope::nn::{ModelConfig, ViTModel};
use circuitscope::stats::pearson;
use circuitscope::ErrorClass;

mod common;
use common::{model, random_data, reference_exact_weights};

#[test]
fn exact_weights_match_reference_on_six_edge_graph() {
    let cfg = ModelConfig::tiny();
    let m = model(cfg.clone(), 3);
    let data = random_data(&cfg, 12, 4);
    let graph = build_graph(&cfg);
    assert_eq!(graph.n_edges(), 6);
    let cache = compute_mean_cache(&m, &data).unwrap();
    let got = exact_circuit(&m, &data, &graph, &cache).unwrap();
    let want = reference_exact_weights(&m, &data);
    for (e, (w, r)) in got.weights.iter().zip(&want).enumerate() {
        assert!(*r > 1e-8, "edge {e} has no effect");
        assert!((w - r).abs() <= 1e-10 * r.abs().max(1.0), "edge {e}: {w} vs {r}");
    }
}

#[test]
fn gradient_weights_are_exact_on_affine_model() {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        linear: true,
        ..ModelConfig::tiny()
    };
    let m = model(cfg.clone(), 8);
    let data = random_data(&cfg, 10, 9);
    let graph = build_graph(&cfg);
    let cache = compute_mean_cache(&m, &data).unwrap();
    let exact = exact_circuit(&m, &data, &graph, &cache).unwrap();
    let eap = eap_circuit(&m, &data, &graph, &cache).unwrap();
    let ig = eap_ig_circuit(&m, &data, &graph, &cache, 4).unwrap();
    for ((a, b), c) in exact.weights.iter().zip(&eap.weights).zip(&ig.weights) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        assert!((a - c).abs() <= 1e-6, "{a} vs {c}");
    }
}

#[test]
fn single_step_ig_equals_eap_bitwise() {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, ..ModelConfig::tiny() };
    let m = model(cfg.clone(), 21);
    let data = random_data(&cfg, 6, 22);
    let graph = build_graph(&cfg);
    let cache = compute_mean_cache(&m, &data).unwrap();
    let eap = eap_circuit(&m, &data, &graph, &cache).unwrap();
    let ig = eap_ig_circuit(&m, &data, &graph, &cache, 1).unwrap();
    assert_eq!(eap.weights, ig.weights);
    assert_eq!(eap.signed, ig.signed);
    assert_eq!(ig.method, Method::EapIg { steps: 1 });
    assert!(eap_ig_circuit(&m, &data, &graph, &cache, 0).is_err());
}

#[test]
fn gradient_weights_track_exact_weights() {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, ..ModelConfig::tiny() };
    let m = model(cfg.clone(), 31);
    let data = random_data(&cfg, 16, 32);
    let graph = build_graph(&cfg);
    let cache = compute_mean_cache(&m, &data).unwrap();
    let exact = exact_circuit(&m, &data, &graph, &cache).unwrap();
    let eap = eap_circuit(&m, &data, &graph, &cache).unwrap();
    let ig = eap_ig_circuit(&m, &data, &graph, &cache, 5).unwrap();
    assert!(pearson(&exact.weights, &eap.weights).unwrap() >= 0.3);
    assert!(pearson(&exact.weights, &ig.weights).unwrap() >= 0.3);
    assert!(exact.weights.iter().all(|&w| w >= 0.0));
}

#[test]
fn faithfulness_endpoints() {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, ..ModelConfig::tiny() };
    let m = model(cfg.clone(), 41);
    let data = random_data(&cfg, 8, 42);
    let graph = build_graph(&cfg);
    let cache = compute_mean_cache(&m, &data).unwrap();
    let ev = FaithfulnessEvaluator::new(&m, &data, &graph, &cache).unwrap();
    let c = random_circuit(&graph, "m", 1);
    assert!(ev.kl_empty() > 0.0);
    assert_eq!(ev.kept_count(0.0), 0);
    assert_eq!(ev.kept_count(0.1), (graph.n_edges() as f64 * 0.1).ceil() as usize);
    assert_eq!(ev.kept_count(1.0), graph.n_edges());
    for form in [FaithfulnessForm::Verbatim, FaithfulnessForm::Normalized] {
        assert!(ev.faithfulness(&c, 0.0, form).unwrap().abs() < 1e-12);
    }
    // the full circuit reproduces the clean model
    let full = ev.faithfulness(&c, 1.0, FaithfulnessForm::Normalized).unwrap();
    assert!((full - 1.0).abs() < 1e-12);
    let full = ev.faithfulness(&c, 1.0, FaithfulnessForm::Verbatim).unwrap();
    let kl0 = ev.kl_empty();
    assert!((full - (-kl0 / (1.0 - kl0))).abs() < 1e-12);
    assert!(ev.faithfulness(&c, 1.5, FaithfulnessForm::Verbatim).is_err());

    let report = discovery::report_with(&ev, &c, FaithfulnessForm::Normalized, &discovery::DEFAULT_K_GRID).unwrap();
    assert_eq!(report.f_values.len(), 9);
    assert!(report.cpr.is_finite() && report.cmd >= 0.0);
}

#[test]
fn dead_model_is_degenerate() {
    let cfg = ModelConfig::tiny();
    let m = ViTModel::zeroed(cfg.clone(), "dead").unwrap();
    let data = random_data(&cfg, 4, 5);
    let graph = build_graph(&cfg);
    let cache = compute_mean_cache(&m, &data).unwrap();
    let ev = FaithfulnessEvaluator::new(&m, &data, &graph, &cache).unwrap();
    let c = random_circuit(&graph, "dead", 0);
    let err = ev.faithfulness(&c, 0.5, FaithfulnessForm::Normalized).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Degenerate);
    let w = eap_circuit(&m, &data, &graph, &cache).unwrap();
    assert!(w.weights.iter().all(|&v| v == 0.0));
}

#[test]
fn discovery_rejects_mismatched_inputs() {
    let cfg = ModelConfig::tiny();
    let m = model(cfg.clone(), 1);
    let other = ModelConfig { n_heads: 2, d_model: 8, ..cfg.clone() };
    let data = random_data(&cfg, 4, 5);
    let cache = compute_mean_cache(&m, &data).unwrap();
    let err = exact_circuit(&m, &data, &build_graph(&other), &cache).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Argument);
    let empty = data.subset(&[], "empty");
    assert!(eap_circuit(&m, &empty, &build_graph(&cfg), &cache).is_err());
}
