//! The end-to-end experiment: data, zoo, model ranking, monitoring and
//! faithfulness benchmarks, written to one run directory with a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::depth::{ddb_training_series, DdbKind, DdbVariant, DependencyMatrix};
use crate::discovery::{
    random_circuit, report_with, save_circuit, FaithfulnessEvaluator, FaithfulnessForm, FaithfulnessReport, Method,
    DEFAULT_K_GRID,
};
use crate::error::{Error, Result};
use crate::graph::{build_graph, compute_mean_cache};
use crate::monitor::save_calibration;
use crate::motif::{cca_direction, motif_entry_report, MotifSidecar, ZooFeatures};
use crate::nn::{save_model, train_with_snapshots, ModelConfig, ViTModel};
use crate::shift::append_snapshot;
use crate::synth::corrupt::{corrupt, CorruptionSpec};
use crate::synth::manifest::{profile_pipeline, ManifestWriter, RunManifest};
use crate::synth::post::{default_eval_corruptions, default_surrogates, run_post_deployment, PostConfig};
use crate::synth::task::{gen_domain, gen_task, DomainStyle, TaskData, TaskSpec};
use crate::synth::zoo::{build_zoo, correlation_csv, default_grid, run_pre_deployment, GridPoint, ZooConfig, ZooMember, ZooRecord, PRE_METRICS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub grid: Vec<GridPoint>,
    pub zoo_circuit_samples: usize,
    pub method: Method,
    /// `rho_id` of the zoo member that is monitored after deployment.
    pub monitored_rho: f64,
    pub n_val: usize,
    pub post: PostConfig,
    pub surrogates: Vec<CorruptionSpec>,
    pub eval_corruptions: Vec<CorruptionSpec>,
    pub bench_samples: usize,
    /// Optimiser steps between snapshots for the training-dynamics stage;
    /// 0 skips the stage.
    pub snapshot_every: usize,
}

impl PipelineConfig {
    /// Full desk-scale run.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            task: TaskSpec {
                seed,
                ..TaskSpec::default()
            },
            model: ModelConfig::desk(),
            grid: default_grid(seed, 8),
            zoo_circuit_samples: 64,
            method: Method::EapIg { steps: 5 },
            monitored_rho: 0.8,
            n_val: 512,
            post: PostConfig {
                seed,
                ..PostConfig::default()
            },
            surrogates: default_surrogates(),
            eval_corruptions: default_eval_corruptions(),
            bench_samples: 64,
            snapshot_every: 64,
        }
    }

    /// A few-minute version with the same stages.
    pub fn quick(seed: u64) -> Self {
        let mut c = Self::desk(seed);
        c.task.n_train = 256;
        c.task.n_id_test = 96;
        c.task.n_ood_per_domain = 48;
        c.grid = default_grid(seed, 2)
            .into_iter()
            .filter(|g| g.train.learning_rate == 0.05 && g.train.weight_decay == 0.0)
            .collect();
        c.zoo_circuit_samples = 16;
        c.n_val = 96;
        c.post.n_circuit = 16;
        c.post.repetitions = 4;
        c.surrogates = c.surrogates.into_iter().step_by(4).collect();
        c.eval_corruptions.truncate(2);
        c.bench_samples = 8;
        c.snapshot_every = 8;
        c
    }
}

const ZOO_HEADER: &str = "model_id,rho_id,learning_rate,weight_decay,seed,id_perf,mean_ood_perf";

fn zoo_csv(records: &[ZooRecord]) -> String {
    let mut s = format!("{ZOO_HEADER},{}\n", PRE_METRICS.join(","));
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}",
            r.model_id, r.rho_id, r.train.learning_rate, r.train.weight_decay, r.train.seed, r.id_perf, r.mean_ood_perf
        ));
        for m in PRE_METRICS {
            s.push_str(&format!(",{}", r.metrics.get(m).copied().unwrap_or(f64::NAN)));
        }
        s.push('\n');
    }
    s
}

fn write(root: &Path, rel: &str, contents: impl AsRef<[u8]>) -> Result<String> {
    let p = root.join(rel);
    if let Some(dir) = p.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(p, contents)?;
    Ok(rel.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub circuit: String,
    pub form: FaithfulnessForm,
    pub cpr: f64,
    pub cmd: f64,
    pub f_values: Vec<f64>,
}

/// CPR/CMD of exact, EAP, EAP-IG and random circuits of `model` on `data`.
pub fn faithfulness_bench(model: &ViTModel, data: &Dataset, ig_steps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let graph = build_graph(&model.config);
    let cache = compute_mean_cache(model, data)?;
    let ev = FaithfulnessEvaluator::new(model, data, &graph, &cache)?;
    let circuits = [
        ("exact", Method::Exact),
        ("eap", Method::Eap),
        ("eap-ig", Method::EapIg { steps: ig_steps }),
    ]
    .into_iter()
    .map(|(n, m)| crate::discovery::discover(model, data, &graph, &cache, m).map(|c| (n.to_string(), c)))
    .chain(std::iter::once(Ok(("random".to_string(), random_circuit(&graph, &model.id, seed)))))
    .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for form in [FaithfulnessForm::Normalized, FaithfulnessForm::Verbatim] {
        for (name, c) in &circuits {
            let r: FaithfulnessReport = match report_with(&ev, c, form, &DEFAULT_K_GRID) {
                Ok(r) => r,
                Err(Error::Degenerate(_)) => FaithfulnessReport {
                    form,
                    k_grid: DEFAULT_K_GRID.to_vec(),
                    f_values: vec![f64::NAN; DEFAULT_K_GRID.len()],
                    cpr: f64::NAN,
                    cmd: f64::NAN,
                },
                Err(e) => return Err(e),
            };
            rows.push(BenchRow {
                circuit: name.clone(),
                form,
                cpr: r.cpr,
                cmd: r.cmd,
                f_values: r.f_values,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("circuit,form,cpr,cmd\n");
    for r in rows {
        let form = match r.form {
            FaithfulnessForm::Normalized => "normalized",
            FaithfulnessForm::Verbatim => "verbatim",
        };
        s.push_str(&format!("{},{form},{},{}\n", r.circuit, r.cpr, r.cmd));
    }
    s
}

/// Held-out ID split used as the monitoring reference.
pub fn validation_split(cfg: &PipelineConfig) -> Dataset {
    let mut v = gen_domain(
        &cfg.task,
        &DomainStyle::id_domain(cfg.monitored_rho),
        cfg.n_val,
        cfg.seed.wrapping_add(0x5EED),
    );
    v.id = "val".into();
    v
}

/// Post-deployment evaluation domains: the held-out shifted domains, then
/// the evaluation corruptions of the ID test split.
pub fn eval_domains(cfg: &PipelineConfig, task: &TaskData) -> Result<Vec<(Dataset, String, u8)>> {
    let mut evals: Vec<(Dataset, String, u8)> = task.ood.iter().map(|d| (d.clone(), "shift".into(), 0)).collect();
    for c in &cfg.eval_corruptions {
        evals.push((corrupt(&task.id_test, *c, cfg.seed.wrapping_add(1))?, c.family.name().into(), c.severity));
    }
    Ok(evals)
}

/// First trained zoo member with the monitored `rho_id`, else the first
/// trained member.
pub fn monitored_model(cfg: &PipelineConfig, zoo: &[ZooMember]) -> Result<ViTModel> {
    zoo.iter()
        .find(|m| m.record.rho_id == cfg.monitored_rho && m.model.is_some())
        .or_else(|| zoo.iter().find(|m| m.model.is_some()))
        .and_then(|m| m.model.clone())
        .ok_or_else(|| Error::arg("no trained model to monitor"))
}

pub fn zoo_config(cfg: &PipelineConfig) -> ZooConfig {
    ZooConfig {
        model: cfg.model.clone(),
        grid: cfg.grid.clone(),
        n_circuit: cfg.zoo_circuit_samples,
        method: cfg.method,
    }
}

/// Runs every stage into `out`, returning the manifest (also written to
/// `manifest.json`, with a timing summary in `report.json`).
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, threads: usize) -> Result<RunManifest> {
    std::fs::create_dir_all(out)?;
    let mut mw = ManifestWriter::new(out, cfg.seed, threads, serde_json::to_value(cfg)?);

    let task = gen_task(&cfg.task)?;
    let val = validation_split(cfg);
    let mut data_files = Vec::new();
    mw.stage("gen-data", &[], || {
        let mut files = Vec::new();
        for d in std::iter::once(&task.train).chain([&task.id_test, &val]).chain(&task.ood) {
            files.push(write(out, &format!("data/{}.cgds", d.id), d.to_bytes())?);
        }
        Ok(files)
    })?;
    data_files.extend(mw.manifest().stages[0].outputs.iter().map(|d| d.path.clone()));

    let zoo_cfg = zoo_config(cfg);
    let mut zoo = Vec::new();
    mw.stage("zoo", &data_files, || {
        zoo = build_zoo(&cfg.task, &task, &zoo_cfg)?;
        let mut files = Vec::new();
        for m in &zoo {
            if let Some(model) = &m.model {
                let rel = format!("models/{}.cgvm", m.record.model_id);
                std::fs::create_dir_all(out.join("models"))?;
                save_model(model, &out.join(&rel))?;
                files.push(rel);
            }
            if let Some(idm) = &m.idm {
                files.push(write(out, &format!("idm/{}.csv", m.record.model_id), idm.to_csv())?);
            }
        }
        let records: Vec<ZooRecord> = zoo.iter().map(|m| m.record.clone()).collect();
        files.push(write(out, "zoo.csv", zoo_csv(&records))?);
        files.push(write(out, "zoo.json", json(&records)?)?);
        Ok(files)
    })?;
    let records: Vec<ZooRecord> = zoo.iter().map(|m| m.record.clone()).collect();

    mw.stage("pre-deployment", &["zoo.json".to_string()], || {
        let table = run_pre_deployment(&records, &PRE_METRICS)?;
        let mut files = vec![
            write(out, "pre_deployment.csv", correlation_csv(&table))?,
            write(out, "pre_deployment.json", json(&table)?)?,
        ];
        let trained: Vec<(&DependencyMatrix, f64)> = zoo
            .iter()
            .filter_map(|m| m.idm.as_ref().map(|i| (i, m.record.mean_ood_perf)))
            .collect();
        let idms: Vec<DependencyMatrix> = trained.iter().map(|(i, _)| (*i).clone()).collect();
        let perf: Vec<f64> = trained.iter().map(|(_, p)| *p).collect();
        let motif = ZooFeatures::from_matrices("synthetic", &idms, perf).and_then(|z| cca_direction(&z, None));
        match motif {
            Ok(m) => {
                files.push(write(out, "motif.csv", motif_entry_report(&m, cfg.model.n_layers)?.to_csv())?);
                files.push(write(out, "motif.json", json(&MotifSidecar::new("synthetic", &m, idms.len()))?)?);
            }
            Err(Error::Degenerate(msg)) | Err(Error::Argument(msg)) => {
                files.push(write(out, "motif.json", json(&BTreeMap::from([("skipped", msg)]))?)?);
            }
            Err(e) => return Err(e),
        }
        Ok(files)
    })?;

    if cfg.snapshot_every > 0 {
        mw.stage("dynamics", &["zoo.json".to_string()], || {
            let ranked: Vec<&ZooRecord> = {
                let mut r: Vec<&ZooRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
                r.sort_by(|a, b| b.mean_ood_perf.total_cmp(&a.mean_ood_perf).then(a.model_id.cmp(&b.model_id)));
                r
            };
            let pool = crate::synth::zoo::pooled_ood(&task.ood, cfg.zoo_circuit_samples)?;
            let mut csv = String::from("model_id,step,ddb_out,ood_perf\n");
            let ends = match (ranked.first(), ranked.last()) {
                (Some(a), Some(b)) if a.model_id != b.model_id => vec![*a, *b],
                (Some(a), _) => vec![*a],
                _ => vec![],
            };
            for r in ends {
                let gp = cfg
                    .grid
                    .iter()
                    .find(|g| g.train == r.train && g.rho_id == r.rho_id)
                    .ok_or_else(|| Error::arg("zoo record without grid point"))?;
                let style = DomainStyle::id_domain(gp.rho_id);
                let train_set = gen_domain(&cfg.task, &style, cfg.task.n_train, task.train.seed);
                let init = ViTModel::init(
                    cfg.model.clone(),
                    &r.model_id,
                    &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(gp.train.seed),
                )?;
                let (_, _, snaps) = train_with_snapshots(&init, &train_set, &gp.train, cfg.snapshot_every)?;
                let series = ddb_training_series(
                    &snaps,
                    &pool,
                    cfg.method,
                    DdbVariant::with_default_tau(DdbKind::Out),
                    Some(&pool),
                );
                match series {
                    Ok(series) => {
                        for p in series {
                            csv.push_str(&format!(
                                "{},{},{},{}\n",
                                r.model_id,
                                p.step,
                                p.ddb,
                                p.ood_perf.unwrap_or(f64::NAN)
                            ));
                        }
                    }
                    Err(Error::Degenerate(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(vec![write(out, "dynamics.csv", csv)?])
        })?;
    }

    let monitored = monitored_model(cfg, &zoo)?;
    let monitored_file = format!("models/{}.cgvm", monitored.id);

    mw.stage("post-deployment", &[monitored_file.clone(), "data/val.cgds".into()], || {
        let evals = eval_domains(cfg, &task)?;
        let report = run_post_deployment(&monitored, &val, &evals, &cfg.surrogates, &cfg.post)?;
        let mut files = Vec::new();
        save_calibration(&out.join("calibration.csv"), &report.calibration_curve("css_srcc")?)?;
        files.push("calibration.csv".to_string());
        let snap = out.join("css_snapshot.csv");
        if snap.exists() {
            std::fs::remove_file(&snap)?;
        }
        append_snapshot(&snap, &report.snapshot_rows())?;
        files.push("css_snapshot.csv".into());
        files.push(write(out, "post_deployment.csv", correlation_csv(&report.correlations))?);
        files.push(write(out, "alarms.json", json(&report.alarms)?)?);
        files.push(write(out, "domains.json", json(&(&report.surrogates, &report.domains))?)?);
        Ok(files)
    })?;

    mw.stage("bench", &[monitored_file.clone(), "data/val.cgds".into()], || {
        let sample = val.head(cfg.bench_samples.min(val.len()));
        let steps = match cfg.method {
            Method::EapIg { steps } => steps,
            _ => crate::discovery::DEFAULT_IG_STEPS,
        };
        let rows = faithfulness_bench(&monitored, &sample, steps, cfg.seed)?;
        let graph = build_graph(&monitored.config);
        let cache = compute_mean_cache(&monitored, &sample)?;
        let c = crate::discovery::discover(&monitored, &sample, &graph, &cache, cfg.method)?;
        std::fs::create_dir_all(out.join("circuits"))?;
        save_circuit(&c, &graph, &out.join("circuits/monitored-val.json"))?;
        Ok(vec![
            write(out, "faithfulness.csv", bench_csv(&rows))?,
            write(out, "faithfulness.json", json(&rows)?)?,
            "circuits/monitored-val.json".into(),
        ])
    })?;

    let manifest = mw.finish("manifest.json")?;
    write(out, "report.json", json(&profile_pipeline(&manifest))?)?;
    Ok(manifest)
}
