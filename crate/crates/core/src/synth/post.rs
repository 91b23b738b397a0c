//! Post-deployment monitoring experiment: circuits of one model on many
//! unlabeled domains, compared against its in-distribution circuit.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::discovery::{discover, CircuitWeights, Method};
use crate::error::{Error, Result};
use crate::graph::{build_graph, compute_mean_cache, CompGraph};
use crate::monitor::{
    atc_score, avg_confidence, avg_neg_entropy, evaluate_alarms, AlarmReport, CalibrationPoint, EvalDomain,
    DEFAULT_REPETITIONS, DEFAULT_SUBSET_SIZE,
};
use crate::nn::{evaluate_accuracy, predict_logits, ViTModel};
use crate::shift::{css, Distance, SnapshotRow, DEFAULT_TOP_K};
use crate::stats::spearman;
use crate::synth::corrupt::{corrupt, CorruptionSpec, Family};
use crate::synth::zoo::{correlate, CorrelationRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostConfig {
    pub method: Method,
    /// Samples per domain used for circuits.
    pub n_circuit: usize,
    pub k: usize,
    pub deltas: Vec<f64>,
    pub subset_size: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for PostConfig {
    fn default() -> Self {
        Self {
            method: Method::EapIg { steps: 5 },
            n_circuit: 128,
            k: DEFAULT_TOP_K,
            deltas: vec![0.5, 0.6, 0.7, 0.8],
            subset_size: DEFAULT_SUBSET_SIZE,
            repetitions: DEFAULT_REPETITIONS,
            seed: 0,
        }
    }
}

/// Twenty surrogate corruptions: four families at all five severities.
pub fn default_surrogates() -> Vec<CorruptionSpec> {
    [Family::GaussianNoise, Family::DefocusBlur, Family::Contrast, Family::SnowLikeSpeckle]
        .into_iter()
        .flat_map(|f| (1..=5).map(move |s| CorruptionSpec { family: f, severity: s }))
        .collect()
}

/// Held-out corruptions for evaluation domains, disjoint from the surrogates.
pub fn default_eval_corruptions() -> Vec<CorruptionSpec> {
    vec![
        CorruptionSpec { family: Family::FogLikeHaze, severity: 3 },
        CorruptionSpec { family: Family::FrostLikeOverlay, severity: 4 },
        CorruptionSpec { family: Family::ShotNoise, severity: 5 },
        CorruptionSpec { family: Family::Solarize, severity: 2 },
    ]
}

/// Everything measured on one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain_id: String,
    pub corruption: String,
    pub severity: u8,
    pub perf: f64,
    /// One value per distance, in [`Distance::ALL`] order.
    pub css: Vec<f64>,
    pub ac: f64,
    pub ane: f64,
    pub atc: f64,
}

impl DomainResult {
    pub fn css_of(&self, d: Distance) -> f64 {
        self.css[Distance::ALL.iter().position(|&x| x == d).expect("listed distance")]
    }
}

/// The model's reference circuit and ID logits, shared by every domain.
pub struct Reference<'a> {
    pub model: &'a ViTModel,
    pub graph: CompGraph,
    pub circuit: CircuitWeights,
    id_logits: crate::tensor::Tensor,
    id_labels: Vec<usize>,
    cfg: PostConfig,
}

impl<'a> Reference<'a> {
    /// Reference circuit on the first `n_circuit` samples of `id_data`.
    pub fn new(model: &'a ViTModel, id_data: &Dataset, cfg: &PostConfig) -> Result<Self> {
        let graph = build_graph(&model.config);
        let sample = id_data.head(cfg.n_circuit.min(id_data.len()));
        let cache = compute_mean_cache(model, &sample)?;
        let circuit = discover(model, &sample, &graph, &cache, cfg.method)?;
        Ok(Self {
            model,
            graph,
            circuit,
            id_logits: predict_logits(model, id_data)?,
            id_labels: id_data.labels.iter().map(|&l| l as usize).collect(),
            cfg: cfg.clone(),
        })
    }

    /// Circuit of `data` (means from `data` itself).
    pub fn circuit_of(&self, data: &Dataset) -> Result<CircuitWeights> {
        let sample = data.head(self.cfg.n_circuit.min(data.len()));
        let cache = compute_mean_cache(self.model, &sample)?;
        discover(self.model, &sample, &self.graph, &cache, self.cfg.method)
    }

    pub fn measure(&self, data: &Dataset, corruption: &str, severity: u8) -> Result<DomainResult> {
        let c = self.circuit_of(data)?;
        let css = Distance::ALL
            .iter()
            .map(|&d| css(&self.circuit, &c, &self.graph, d, self.cfg.k).map(|v| v.value))
            .collect::<Result<Vec<_>>>()?;
        let logits = predict_logits(self.model, data)?;
        Ok(DomainResult {
            domain_id: data.id.clone(),
            corruption: corruption.to_string(),
            severity,
            perf: evaluate_accuracy(self.model, data)?,
            css,
            ac: avg_confidence(&logits)?,
            ane: avg_neg_entropy(&logits)?,
            atc: atc_score(&self.id_logits, &self.id_labels, &logits).unwrap_or(f64::NAN),
        })
    }
}

/// CSS_(v,srcc) of each severity 1..=5 of `family` applied to `base`.
pub fn severity_sweep(reference: &Reference<'_>, base: &Dataset, family: Family, seed: u64) -> Result<Vec<f64>> {
    (1..=5)
        .map(|s| {
            let d = corrupt(base, CorruptionSpec::new(family, s)?, seed)?;
            reference.measure(&d, family.name(), s).map(|r| r.css_of(Distance::Srcc))
        })
        .collect()
}

/// Spearman correlation of severity with the sweep values.
pub fn severity_trend(values: &[f64]) -> Result<f64> {
    let sev: Vec<f64> = (1..=values.len()).map(|s| s as f64).collect();
    spearman(&sev, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostReport {
    pub surrogates: Vec<DomainResult>,
    pub domains: Vec<DomainResult>,
    pub correlations: Vec<CorrelationRow>,
    pub alarms: Vec<AlarmReport>,
    pub k_used: usize,
}

impl PostReport {
    /// Calibration curve of one metric, oriented so larger means worse.
    pub fn calibration_curve(&self, metric: &str) -> Result<Vec<CalibrationPoint>> {
        self.surrogates
            .iter()
            .map(|r| {
                Ok(CalibrationPoint {
                    domain_id: r.domain_id.clone(),
                    corruption: r.corruption.clone(),
                    severity: r.severity,
                    perf: r.perf,
                    css: oriented(r, metric)?,
                })
            })
            .collect()
    }

    pub fn snapshot_rows(&self) -> Vec<SnapshotRow> {
        let mut rows = Vec::new();
        for r in self.surrogates.iter().chain(&self.domains) {
            for (i, &d) in Distance::ALL.iter().enumerate() {
                rows.push(SnapshotRow {
                    domain_id: r.domain_id.clone(),
                    repr: d.repr(),
                    distance: d,
                    k: d.uses_k().then_some(self.k_used),
                    css: r.css[i],
                    perf_if_known: Some(r.perf),
                });
            }
        }
        rows
    }

    pub fn alarm(&self, metric: &str) -> Option<&AlarmReport> {
        self.alarms.iter().find(|a| a.metric == metric)
    }
}

/// Metrics scored in the alarm comparison: the six CSS variants and the
/// three confidence baselines.
pub fn alarm_metrics() -> Vec<String> {
    Distance::ALL
        .iter()
        .map(|d| format!("css_{d}"))
        .chain(["ac", "ane", "atc"].map(String::from))
        .collect()
}

/// Value of `metric` with "larger is worse" orientation.
pub fn oriented(r: &DomainResult, metric: &str) -> Result<f64> {
    if let Some(d) = metric.strip_prefix("css_") {
        return Ok(r.css_of(d.parse()?));
    }
    match metric {
        "ac" => Ok(-r.ac),
        "ane" => Ok(-r.ane),
        "atc" => Ok(-r.atc),
        _ => Err(Error::arg(format!("unknown metric {metric:?}"))),
    }
}

/// Circuits on every surrogate and evaluation domain, correlations with
/// accuracy across the evaluation domains, and calibrated alarms.
pub fn run_post_deployment(
    model: &ViTModel,
    id_val: &Dataset,
    eval_domains: &[(Dataset, String, u8)],
    surrogates: &[CorruptionSpec],
    cfg: &PostConfig,
) -> Result<PostReport> {
    if eval_domains.len() < 3 {
        return Err(Error::arg("post-deployment evaluation needs at least three domains"));
    }
    if surrogates.is_empty() {
        return Err(Error::arg("no surrogate corruptions"));
    }
    let reference = Reference::new(model, id_val, cfg)?;
    let surrogate_sets: Vec<Dataset> = surrogates
        .iter()
        .map(|s| corrupt(id_val, *s, cfg.seed))
        .collect::<Result<_>>()?;
    let sur = crate::par::map_range(surrogates.len(), |i| {
        reference.measure(&surrogate_sets[i], surrogates[i].family.name(), surrogates[i].severity)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let dom = crate::par::map_slice(eval_domains, |(d, c, s)| reference.measure(d, c, *s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let perf: Vec<f64> = dom.iter().map(|r| r.perf).collect();
    let mut report = PostReport {
        surrogates: sur,
        domains: dom,
        correlations: Vec::new(),
        alarms: Vec::new(),
        k_used: cfg.k.min(reference.graph.n_edges()),
    };
    for m in alarm_metrics() {
        let vals = report.domains.iter().map(|r| oriented(r, &m)).collect::<Result<Vec<_>>>()?;
        report.correlations.push(correlate(&m, &vals, &perf)?);
        let curve = report.calibration_curve(&m)?;
        if curve.iter().any(|p| !p.css.is_finite()) {
            continue;
        }
        let eval: Vec<EvalDomain> = report
            .domains
            .iter()
            .zip(&vals)
            .map(|(r, &score)| EvalDomain {
                domain_id: r.domain_id.clone(),
                score,
                perf: r.perf,
            })
            .collect();
        report.alarms.push(evaluate_alarms(
            &m,
            &curve,
            &eval,
            &cfg.deltas,
            cfg.subset_size,
            cfg.repetitions,
            cfg.seed,
        )?);
    }
    Ok(report)
}
