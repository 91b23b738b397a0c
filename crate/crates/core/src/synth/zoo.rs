//! Model zoos over a hyperparameter grid, and the label-free model-ranking
//! experiment.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::depth::{aggregate_idm, ddb, DdbKind, DdbVariant, DependencyMatrix};
use crate::discovery::{discover, Method};
use crate::error::{Error, Result};
use crate::graph::{build_graph, compute_mean_cache};
use crate::monitor::{atc_score, avg_confidence, avg_neg_entropy};
use crate::nn::{evaluate_accuracy, predict_logits, train, ModelConfig, TrainConfig, ViTModel};
use crate::par;
use crate::stats::{kendall_tau_b, r2_linear, spearman};
use crate::synth::task::{gen_domain, DomainStyle, TaskData, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub rho_id: f64,
    pub train: TrainConfig,
}

/// `rho_id ∈ {0.5, 0.8, 1.0}` × learning rate `{0.05, 0.02}` × weight decay
/// `{0, 1e-3}`: twelve models.
pub fn default_grid(seed: u64, epochs: usize) -> Vec<GridPoint> {
    let mut grid = Vec::new();
    for rho in [0.5, 0.8, 1.0] {
        for lr in [0.05, 0.02] {
            for wd in [0.0, 1e-3] {
                grid.push(GridPoint {
                    rho_id: rho,
                    train: TrainConfig {
                        learning_rate: lr,
                        weight_decay: wd,
                        batch_size: 32,
                        epochs,
                        seed: seed.wrapping_add(grid.len() as u64),
                    },
                });
            }
        }
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooConfig {
    pub model: ModelConfig,
    pub grid: Vec<GridPoint>,
    /// Unlabeled OOD samples (pooled over domains) used for circuits.
    pub n_circuit: usize,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooRecord {
    pub model_id: String,
    pub rho_id: f64,
    pub train: TrainConfig,
    pub id_perf: f64,
    pub ood_perf: BTreeMap<String, f64>,
    pub mean_ood_perf: f64,
    /// Label-free metrics: `ddb_out`, `ddb_deep`, `ddb_global`, `ac`, `ane`, `atc`.
    pub metrics: BTreeMap<String, f64>,
    /// Set when training diverged; the other fields are then empty.
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ZooMember {
    pub record: ZooRecord,
    pub model: Option<ViTModel>,
    /// Dependency matrix of the circuit used for DDB.
    pub idm: Option<DependencyMatrix>,
}

/// `per_domain` samples from the front of each OOD domain, pooled.
pub fn pooled_ood(ood: &[Dataset], n_total: usize) -> Result<Dataset> {
    if ood.is_empty() {
        return Err(Error::arg("no OOD domains"));
    }
    let per = n_total.div_ceil(ood.len()).max(1);
    let heads: Vec<Dataset> = ood.iter().map(|d| d.head(per.min(d.len()))).collect();
    let refs: Vec<&Dataset> = heads.iter().collect();
    Dataset::concat(&refs, "ood-pool")
}

/// Trains one model per grid point on a training set drawn with that point's
/// `rho_id`, then measures accuracy and the label-free metrics. The OOD
/// domains in `task` are shared by all members.
pub fn build_zoo(spec: &TaskSpec, task: &TaskData, cfg: &ZooConfig) -> Result<Vec<ZooMember>> {
    if cfg.grid.is_empty() {
        return Err(Error::arg("empty zoo grid"));
    }
    let pool = pooled_ood(&task.ood, cfg.n_circuit)?;
    let results = par::map_slice(&cfg.grid, |gp| zoo_member(spec, task, cfg, gp, &pool));
    results.into_iter().collect()
}

fn zoo_member(spec: &TaskSpec, task: &TaskData, cfg: &ZooConfig, gp: &GridPoint, pool: &Dataset) -> Result<ZooMember> {
    let model_id = format!(
        "zoo-rho{}-lr{}-wd{}-s{}",
        gp.rho_id, gp.train.learning_rate, gp.train.weight_decay, gp.train.seed
    );
    let id_style = DomainStyle::id_domain(gp.rho_id);
    let train_set = gen_domain(spec, &id_style, spec.n_train, task.train.seed);
    let id_test = gen_domain(spec, &id_style, spec.n_id_test, task.id_test.seed);
    let init = ViTModel::init(cfg.model.clone(), &model_id, &mut ChaCha8Rng::seed_from_u64(gp.train.seed))?;
    let mut record = ZooRecord {
        model_id: model_id.clone(),
        rho_id: gp.rho_id,
        train: gp.train.clone(),
        id_perf: f64::NAN,
        ood_perf: BTreeMap::new(),
        mean_ood_perf: f64::NAN,
        metrics: BTreeMap::new(),
        failure: None,
    };
    let model = match train(&init, &train_set, &gp.train) {
        Ok((m, _)) => m,
        Err(e @ Error::Diverged { .. }) => {
            record.failure = Some(e.to_string());
            return Ok(ZooMember {
                record,
                model: None,
                idm: None,
            });
        }
        Err(e) => return Err(e),
    };
    record.id_perf = evaluate_accuracy(&model, &id_test)?;
    for d in &task.ood {
        record.ood_perf.insert(d.id.clone(), evaluate_accuracy(&model, d)?);
    }
    record.mean_ood_perf = record.ood_perf.values().sum::<f64>() / record.ood_perf.len() as f64;

    let graph = build_graph(&model.config);
    let cache = compute_mean_cache(&model, pool)?;
    let circuit = discover(&model, pool, &graph, &cache, cfg.method)?;
    let idm = aggregate_idm(&circuit, &graph)?;
    for kind in [DdbKind::Out, DdbKind::Deep, DdbKind::Global] {
        let v = ddb(&idm, DdbVariant::with_default_tau(kind)).unwrap_or(f64::NAN);
        record.metrics.insert(format!("ddb_{kind}"), v);
    }
    let ood_logits = predict_logits(&model, pool)?;
    record.metrics.insert("ac".into(), avg_confidence(&ood_logits)?);
    record.metrics.insert("ane".into(), avg_neg_entropy(&ood_logits)?);
    let id_logits = predict_logits(&model, &id_test)?;
    let labels: Vec<usize> = id_test.labels.iter().map(|&l| l as usize).collect();
    let atc = atc_score(&id_logits, &labels, &ood_logits).unwrap_or(f64::NAN);
    record.metrics.insert("atc".into(), atc);
    Ok(ZooMember {
        record,
        model: Some(model),
        idm: Some(idm),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub metric: String,
    pub n: usize,
    pub r2: f64,
    pub srcc: f64,
    pub krcc: f64,
    /// The metric (or the performance) was constant, or had no valid values.
    pub degenerate: bool,
}

pub const CORRELATION_HEADER: &str = "metric,n,r2,srcc,krcc,degenerate";

impl CorrelationRow {
    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.metric, self.n, self.r2, self.srcc, self.krcc, self.degenerate)
    }
}

pub fn correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut s = format!("{CORRELATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

/// R², SRCC and Kendall tau-b of `metric` against `perf`, over the entries
/// where the metric is finite. Constant inputs give zeros and the flag.
pub fn correlate(name: &str, metric: &[f64], perf: &[f64]) -> Result<CorrelationRow> {
    if metric.len() != perf.len() {
        return Err(Error::arg("metric and performance differ in length"));
    }
    let (m, p): (Vec<f64>, Vec<f64>) = metric
        .iter()
        .zip(perf)
        .filter(|(m, p)| m.is_finite() && p.is_finite())
        .map(|(m, p)| (*m, *p))
        .unzip();
    let all = (|| -> Result<(f64, f64, f64)> {
        Ok((r2_linear(&m, &p)?, spearman(&m, &p)?, kendall_tau_b(&m, &p)?))
    })();
    Ok(match all {
        Ok((r2, srcc, krcc)) => CorrelationRow {
            metric: name.to_string(),
            n: m.len(),
            r2,
            srcc,
            krcc,
            degenerate: false,
        },
        Err(Error::Degenerate(_)) | Err(Error::Argument(_)) => CorrelationRow {
            metric: name.to_string(),
            n: m.len(),
            r2: 0.0,
            srcc: 0.0,
            krcc: 0.0,
            degenerate: true,
        },
        Err(e) => return Err(e),
    })
}

/// One correlation row per metric, against mean OOD accuracy. Diverged
/// members are skipped.
pub fn run_pre_deployment(records: &[ZooRecord], metrics: &[&str]) -> Result<Vec<CorrelationRow>> {
    let ok: Vec<&ZooRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    if ok.len() < 3 {
        return Err(Error::arg("model ranking needs at least three trained models"));
    }
    let perf: Vec<f64> = ok.iter().map(|r| r.mean_ood_perf).collect();
    metrics
        .iter()
        .map(|&name| {
            let vals: Vec<f64> = ok
                .iter()
                .map(|r| r.metrics.get(name).copied().unwrap_or(f64::NAN))
                .collect();
            correlate(name, &vals, &perf)
        })
        .collect()
}

pub const PRE_METRICS: [&str; 6] = ["ddb_out", "ddb_deep", "ddb_global", "ac", "ane", "atc"];
