use std::collections::BTreeMap;

use circuitscope::data::Dataset;
use circuitscope::discovery::Method;
use circuitscope::nn::{ModelConfig, TrainConfig};
use circuitscope::synth::corrupt::{corrupt, corrupt_with_strength, CorruptionSpec, Family};
use circuitscope::synth::task::{gen_domain, gen_task, DomainStyle, TaskSpec};
use circuitscope::synth::zoo::{build_zoo, run_pre_deployment, GridPoint, ZooConfig, ZooRecord};

/// Mean RGB of the one-pixel border ring.
fn border_features(d: &Dataset, i: usize) -> [f64; 3] {
    let (s, img) = (d.height, d.image(i));
    let mut f = [0.0; 3];
    let mut count = 0.0;
    for y in 0..s {
        for x in 0..s {
            if y == 0 || x == 0 || y == s - 1 || x == s - 1 {
                for (ch, v) in f.iter_mut().enumerate() {
                    *v += img[ch * s * s + y * s + x] as f64;
                }
                count += 1.0;
            }
        }
    }
    f.map(|v| v / count)
}

/// Multinomial logistic regression on border features, fitted by full-batch
/// gradient descent.
struct Probe {
    w: Vec<[f64; 4]>,
}

impl Probe {
    fn fit(d: &Dataset, n_classes: usize) -> Self {
        let xs: Vec<[f64; 4]> = (0..d.len())
            .map(|i| {
                let f = border_features(d, i);
                [f[0], f[1], f[2], 1.0]
            })
            .collect();
        let mut w = vec![[0.0; 4]; n_classes];
        for _ in 0..2000 {
            let mut g = vec![[0.0; 4]; n_classes];
            for (x, &y) in xs.iter().zip(&d.labels) {
                let z: Vec<f64> = w.iter().map(|wc| wc.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..n_classes {
                    let p = e[c] / s - if c == y as usize { 1.0 } else { 0.0 };
                    for k in 0..4 {
                        g[c][k] += p * x[k];
                    }
                }
            }
            for c in 0..n_classes {
                for k in 0..4 {
                    w[c][k] -= 20.0 * g[c][k] / xs.len() as f64;
                }
            }
        }
        Self { w }
    }

    fn accuracy(&self, d: &Dataset) -> f64 {
        let hits = (0..d.len())
            .filter(|&i| {
                let f = border_features(d, i);
                let x = [f[0], f[1], f[2], 1.0];
                let z: Vec<f64> = self.w.iter().map(|wc| wc.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
                let best = (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
                best == d.labels[i] as usize
            })
            .count();
        hits as f64 / d.len() as f64
    }
}

#[test]
fn cue_only_probe_is_near_perfect_when_the_cue_always_agrees() {
    let spec = TaskSpec {
        rho_id: 1.0,
        rho_ood: 1.0,
        n_train: 512,
        n_id_test: 256,
        n_ood_per_domain: 256,
        ..TaskSpec::default()
    };
    let task = gen_task(&spec).unwrap();
    let probe = Probe::fit(&task.train, spec.n_classes);
    assert!(probe.accuracy(&task.id_test) >= 0.99);
    for d in &task.ood {
        let fit = Probe::fit(&d.head(128), spec.n_classes);
        let held_out = d.subset(&(128..d.len()).collect::<Vec<_>>(), "rest");
        assert!(fit.accuracy(&held_out) >= 0.99, "{}", d.id);
    }
}

#[test]
fn cue_carries_no_label_information_at_chance_agreement() {
    let spec = TaskSpec::default();
    let style = DomainStyle::id_domain(1.0);
    let probe = Probe::fit(&gen_domain(&spec, &style, 512, 1), spec.n_classes);
    let chance = 1.0 / spec.n_classes as f64;
    let d = gen_domain(&spec, &DomainStyle::id_domain(chance), 2048, 2);
    let acc = probe.accuracy(&d);
    assert!((acc - chance).abs() <= 0.05, "cue probe accuracy {acc}");
}

#[test]
fn same_seed_gives_byte_identical_datasets() {
    let spec = TaskSpec {
        n_train: 64,
        n_id_test: 32,
        n_ood_per_domain: 16,
        ..TaskSpec::default()
    };
    let (a, b) = (gen_task(&spec).unwrap(), gen_task(&spec).unwrap());
    assert_eq!(a.train.to_bytes(), b.train.to_bytes());
    for (x, y) in a.ood.iter().zip(&b.ood) {
        assert_eq!(x.to_bytes(), y.to_bytes());
    }
    let c = gen_task(&TaskSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.train.pixels, c.train.pixels);
}

fn msd(a: &Dataset, b: &Dataset) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.pixels.len() as f64
}

#[test]
fn corruption_deviation_grows_with_severity() {
    let spec = TaskSpec::default();
    let base = gen_domain(&spec, &DomainStyle::id_domain(0.8), 64, 3);
    for family in Family::ALL {
        let dev: Vec<f64> = (1..=5)
            .map(|s| msd(&base, &corrupt(&base, CorruptionSpec::new(family, s).unwrap(), 9).unwrap()))
            .collect();
        assert!(dev.windows(2).all(|w| w[1] > w[0]), "{family}: {dev:?}");
        let c = corrupt(&base, CorruptionSpec::new(family, 3).unwrap(), 9).unwrap();
        assert_eq!(c.labels, base.labels);
        assert!(c.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let same = corrupt_with_strength(&base, Family::GaussianNoise, 0.0, 9).unwrap();
    assert_eq!(same.pixels, base.pixels);
    assert!(CorruptionSpec::new(Family::FogLikeHaze, 6).is_err());
}

fn small_zoo_setup() -> (TaskSpec, ModelConfig) {
    let spec = TaskSpec {
        n_train: 512,
        n_id_test: 64,
        n_ood_per_domain: 64,
        n_ood_domains: 2,
        ..TaskSpec::default()
    };
    (spec, ModelConfig::desk())
}

#[test]
fn zoo_records_follow_the_grid_and_cue_reliance() {
    let (spec, model) = small_zoo_setup();
    let task = gen_task(&spec).unwrap();
    let point = |rho_id: f64| GridPoint {
        rho_id,
        train: TrainConfig {
            epochs: 4,
            seed: 5,
            ..TrainConfig::default()
        },
    };
    let cfg = ZooConfig {
        model,
        grid: vec![point(0.5), point(0.5), point(1.0)],
        n_circuit: 8,
        method: Method::Eap,
    };
    let zoo = build_zoo(&spec, &task, &cfg).unwrap();
    assert_eq!(zoo.len(), 3);
    let json = |r: &ZooRecord| serde_json::to_string(r).unwrap();
    assert_eq!(json(&zoo[0].record), json(&zoo[1].record));
    assert!(zoo[0].record.mean_ood_perf > zoo[2].record.mean_ood_perf);
    for m in &zoo {
        let r = &m.record;
        assert!(r.failure.is_none());
        assert!((0.0..=1.0).contains(&r.id_perf));
        assert_eq!(r.ood_perf.len(), 2);
        for k in ["ddb_out", "ddb_deep", "ddb_global", "ac", "ane", "atc"] {
            assert!(r.metrics.contains_key(k), "{k}");
        }
    }
}

fn fake_record(i: usize, perf: f64, metric: f64) -> ZooRecord {
    ZooRecord {
        model_id: format!("m{i}"),
        rho_id: 0.5,
        train: TrainConfig::default(),
        id_perf: 1.0,
        ood_perf: BTreeMap::from([("ood-1".to_string(), perf)]),
        mean_ood_perf: perf,
        metrics: BTreeMap::from([
            ("same".to_string(), metric),
            ("neg".to_string(), -metric),
            ("flat".to_string(), 1.0),
        ]),
        failure: None,
    }
}

#[test]
fn pre_deployment_self_and_anti_correlation() {
    let perf = [0.2, 0.9, 0.5, 0.4, 0.7];
    let records: Vec<ZooRecord> = perf.iter().enumerate().map(|(i, &p)| fake_record(i, p, p)).collect();
    let table = run_pre_deployment(&records, &["same", "neg", "flat"]).unwrap();
    let same = &table[0];
    assert!((same.r2 - 1.0).abs() < 1e-12 && (same.srcc - 1.0).abs() < 1e-12 && (same.krcc - 1.0).abs() < 1e-12);
    let neg = &table[1];
    assert!((neg.r2 - 1.0).abs() < 1e-12 && (neg.srcc + 1.0).abs() < 1e-12 && (neg.krcc + 1.0).abs() < 1e-12);
    let flat = &table[2];
    assert!(flat.degenerate);
    assert_eq!((flat.r2, flat.srcc, flat.krcc), (0.0, 0.0, 0.0));
    assert!(run_pre_deployment(&records[..2], &["same"]).is_err());
}
