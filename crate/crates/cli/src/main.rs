//! `circuitscope` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use circuitscope::data::Dataset;
use circuitscope::depth::{aggregate_idm, ddb, DdbKind, DdbVariant, DependencyMatrix};
use circuitscope::discovery::{
    discover, load_circuit, save_circuit, Method,
};
use circuitscope::graph::{build_graph, compute_mean_cache};
use circuitscope::monitor::{calibrate_threshold, parse_calibration_csv, raise_alarm};
use circuitscope::motif::{cca_direction, motif_entry_report, MotifSidecar, ZooFeatures};
use circuitscope::nn::{evaluate_accuracy, load_model, save_model, train, ModelConfig, TrainConfig, ViTModel};
use circuitscope::par::with_threads;
use circuitscope::shift::{css, Distance, Repr, DEFAULT_TOP_K};
use circuitscope::synth::corrupt::{corrupt, CorruptionSpec, Family};
use circuitscope::synth::manifest::{load_manifest, profile_pipeline, verify_manifest};
use circuitscope::synth::pipeline::{faithfulness_bench, bench_csv, run_pipeline, PipelineConfig};
use circuitscope::synth::task::{gen_task, TaskSpec};
use circuitscope::synth::zoo::{build_zoo, correlation_csv, default_grid, run_pre_deployment, ZooConfig, ZooRecord, PRE_METRICS};
use circuitscope::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "circuitscope", version, about = "Circuit discovery and circuit-based generalization metrics")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task: train, ID test and OOD domains.
    GenData(GenDataArgs),
    /// Apply one corruption to a dataset.
    Corrupt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        family: Family,
        #[arg(long, default_value_t = 3)]
        severity: u8,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "model")]
        id: String,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
    },
    /// Train a model zoo and correlate its label-free metrics with OOD accuracy.
    Zoo {
        #[command(flatten)]
        task: GenDataArgs,
        #[arg(long, default_value_t = 8)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        circuit_samples: usize,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Discover a circuit of a model on a dataset.
    Discover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        method: MethodArgs,
        /// Use only the first N samples.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Aggregate a circuit into an inter-layer dependency matrix.
    Idm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        circuit: PathBuf,
    },
    /// Dependency depth bias of a dependency matrix.
    Ddb {
        #[arg(long)]
        idm: PathBuf,
        #[arg(long, default_value = "out")]
        variant: DdbKind,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// CCA motif direction over a zoo run directory (zoo.json and idm/).
    Motif {
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value = "synthetic")]
        task_id: String,
    },
    /// Circuit shift score between two circuits of one model.
    Css {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum)]
        repr: Option<ReprArg>,
        #[arg(long, default_value = "srcc")]
        distance: Distance,
        #[arg(long, default_value_t = DEFAULT_TOP_K)]
        k: usize,
    },
    /// Alarm threshold from a calibration curve.
    Calibrate {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        delta: f64,
    },
    /// Decide whether a domain's shift score raises an alarm.
    Monitor {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        delta: f64,
        #[arg(long)]
        css: f64,
        #[arg(long, default_value = "domain")]
        domain: String,
    },
    /// Faithfulness (CPR/CMD) of exact, EAP, EAP-IG and random circuits.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Verify a run directory against its manifest and print stage timings.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run every stage end to end.
    Pipeline {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
    },
}

#[derive(Args, Clone)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.8)]
    rho_id: f64,
    #[arg(long, default_value_t = 2048)]
    n_train: usize,
    #[arg(long, default_value_t = 512)]
    n_id_test: usize,
    #[arg(long, default_value_t = 256)]
    n_ood: usize,
    #[arg(long, default_value_t = 4)]
    ood_domains: usize,
}

impl GenDataArgs {
    fn spec(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            seed,
            n_classes: self.classes,
            rho_id: self.rho_id,
            n_train: self.n_train,
            n_id_test: self.n_id_test,
            n_ood_per_domain: self.n_ood,
            n_ood_domains: self.ood_domains,
            ..TaskSpec::default()
        }
    }
}

#[derive(Args, Clone)]
struct MethodArgs {
    #[arg(long, default_value = "eap-ig")]
    method: String,
    #[arg(long, default_value_t = 5)]
    steps: usize,
}

impl MethodArgs {
    fn method(&self) -> Result<Method> {
        Method::parse(&self.method, self.steps)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReprArg {
    Vector,
    Graph,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Quick,
}

fn out_file(out: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    Ok(out.join(name))
}

fn print(v: serde_json::Value) {
    use std::io::Write;
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).expect("json value serializes"));
}

fn model_config_for(data: &Dataset, n_classes: usize) -> ModelConfig {
    ModelConfig {
        image_side: data.height,
        channels: data.channels,
        n_classes,
        ..ModelConfig::desk()
    }
}

fn run(cli: Cli) -> Result<()> {
    let (seed, out) = (cli.seed, cli.out.as_path());
    match cli.cmd {
        Command::GenData(a) => {
            let task = gen_task(&a.spec(seed))?;
            let mut files = Vec::new();
            for d in std::iter::once(&task.train).chain([&task.id_test]).chain(&task.ood) {
                let p = out_file(&out.join("data"), &format!("{}.cgds", d.id))?;
                d.save(&p)?;
                files.push(p.display().to_string());
            }
            print(json!({ "files": files }));
        }
        Command::Corrupt { data, family, severity } => {
            let d = Dataset::load(&data)?;
            let c = corrupt(&d, CorruptionSpec::new(family, severity)?, seed)?;
            let p = out_file(out, &format!("{}.cgds", c.id))?;
            c.save(&p)?;
            print(json!({ "file": p.display().to_string() }));
        }
        Command::Train {
            data,
            id,
            lr,
            weight_decay,
            batch_size,
            epochs,
        } => {
            let d = Dataset::load(&data)?;
            let n_classes = d.labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);
            let cfg = TrainConfig {
                learning_rate: lr,
                weight_decay,
                batch_size,
                epochs,
                seed,
            };
            let init = ViTModel::init(
                model_config_for(&d, n_classes),
                &id,
                &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
            )?;
            let (model, stats) = train(&init, &d, &cfg)?;
            let p = out_file(out, &format!("{id}.cgvm"))?;
            save_model(&model, &p)?;
            print(json!({
                "file": p.display().to_string(),
                "train_accuracy": evaluate_accuracy(&model, &d)?,
                "epochs": stats,
            }));
        }
        Command::Zoo {
            task,
            epochs,
            circuit_samples,
            method,
        } => {
            let spec = task.spec(seed);
            let data = gen_task(&spec)?;
            let cfg = ZooConfig {
                model: ModelConfig {
                    n_classes: spec.n_classes,
                    ..ModelConfig::desk()
                },
                grid: default_grid(seed, epochs),
                n_circuit: circuit_samples,
                method: method.method()?,
            };
            let zoo = build_zoo(&spec, &data, &cfg)?;
            for m in &zoo {
                if let Some(model) = &m.model {
                    save_model(model, &out_file(&out.join("models"), &format!("{}.cgvm", model.id))?)?;
                }
                if let Some(idm) = &m.idm {
                    std::fs::write(out_file(&out.join("idm"), &format!("{}.csv", m.record.model_id))?, idm.to_csv())?;
                }
            }
            let records: Vec<ZooRecord> = zoo.into_iter().map(|m| m.record).collect();
            std::fs::write(out_file(out, "zoo.json")?, serde_json::to_string_pretty(&records)? + "\n")?;
            let table = run_pre_deployment(&records, &PRE_METRICS)?;
            std::fs::write(out_file(out, "pre_deployment.csv")?, correlation_csv(&table))?;
            print(json!({ "models": records.len(), "correlations": table }));
        }
        Command::Discover {
            model,
            data,
            method,
            samples,
        } => {
            let m = load_model(&model)?;
            let mut d = Dataset::load(&data)?;
            if let Some(n) = samples {
                d = d.head(n);
            }
            let graph = build_graph(&m.config);
            let cache = compute_mean_cache(&m, &d)?;
            let c = discover(&m, &d, &graph, &cache, method.method()?)?;
            let p = out_file(out, &format!("{}-{}.circuit.json", m.id, d.id))?;
            save_circuit(&c, &graph, &p)?;
            print(json!({ "file": p.display().to_string(), "edges": c.len() }));
        }
        Command::Idm { model, circuit } => {
            let m = load_model(&model)?;
            let graph = build_graph(&m.config);
            let c = load_circuit(&circuit, &graph)?;
            let idm = aggregate_idm(&c, &graph)?;
            let p = out_file(out, &format!("{}-{}.idm.csv", c.model_id, c.dataset_id))?;
            std::fs::write(&p, idm.to_csv())?;
            print(json!({ "file": p.display().to_string(), "total": idm.total() }));
        }
        Command::Ddb { idm, variant, tau } => {
            let m = DependencyMatrix::from_csv(&std::fs::read_to_string(&idm)?)?;
            let v = match tau {
                Some(t) => DdbVariant::new(variant, t)?,
                None => DdbVariant::with_default_tau(variant),
            };
            print(json!({ "variant": variant.to_string(), "tau": v.tau, "ddb": ddb(&m, v)? }));
        }
        Command::Motif { zoo, lambda, task_id } => {
            let records: Vec<ZooRecord> = serde_json::from_str(&std::fs::read_to_string(zoo.join("zoo.json"))?)?;
            let mut idms = Vec::new();
            let mut perf = Vec::new();
            for r in records.iter().filter(|r| r.failure.is_none()) {
                let text = std::fs::read_to_string(zoo.join("idm").join(format!("{}.csv", r.model_id)))?;
                idms.push(DependencyMatrix::from_csv(&text)?);
                perf.push(r.mean_ood_perf);
            }
            let n_layers = idms.first().map(|m| m.n_layers).ok_or_else(|| Error::Argument("zoo has no trained models".into()))?;
            let m = cca_direction(&ZooFeatures::from_matrices(&task_id, &idms, perf)?, lambda)?;
            std::fs::write(out_file(out, "motif.csv")?, motif_entry_report(&m, n_layers)?.to_csv())?;
            let side = MotifSidecar::new(&task_id, &m, idms.len());
            std::fs::write(out_file(out, "motif.json")?, serde_json::to_string_pretty(&side)? + "\n")?;
            print(serde_json::to_value(side)?);
        }
        Command::Css {
            model,
            reference,
            test,
            repr,
            distance,
            k,
        } => {
            let want = match repr {
                Some(ReprArg::Vector) => Some(Repr::Vector),
                Some(ReprArg::Graph) => Some(Repr::Graph),
                None => None,
            };
            if want.is_some_and(|r| r != distance.repr()) {
                return Err(Error::Argument(format!("distance {distance} does not use that representation")));
            }
            let m = load_model(&model)?;
            let graph = build_graph(&m.config);
            let a = load_circuit(&reference, &graph)?;
            let b = load_circuit(&test, &graph)?;
            print(serde_json::to_value(css(&a, &b, &graph, distance, k)?)?);
        }
        Command::Calibrate { curve, delta } => {
            let c = parse_calibration_csv(&std::fs::read_to_string(&curve)?)?;
            print(json!({ "delta": delta, "threshold": calibrate_threshold(&c, delta)? }));
        }
        Command::Monitor {
            curve,
            delta,
            css,
            domain,
        } => {
            let c = parse_calibration_csv(&std::fs::read_to_string(&curve)?)?;
            let t = calibrate_threshold(&c, delta)?;
            print(serde_json::to_value(raise_alarm(domain, css, t))?);
        }
        Command::Bench {
            model,
            data,
            samples,
            steps,
        } => {
            let m = load_model(&model)?;
            let d = Dataset::load(&data)?.head(samples);
            let rows = faithfulness_bench(&m, &d, steps, seed)?;
            std::fs::write(out_file(out, "faithfulness.csv")?, bench_csv(&rows))?;
            print(serde_json::to_value(rows)?);
        }
        Command::Report { run } => {
            let m = load_manifest(&run.join("manifest.json"))?;
            verify_manifest(&m, &run)?;
            print(serde_json::to_value(profile_pipeline(&m))?);
        }
        Command::Pipeline { preset } => {
            let cfg = match preset {
                Preset::Desk => PipelineConfig::desk(seed),
                Preset::Quick => PipelineConfig::quick(seed),
            };
            let m = run_pipeline(&cfg, out, cli.threads)?;
            print(serde_json::to_value(profile_pipeline(&m))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads;
    match with_threads(threads, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Argument => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Degenerate => 4,
            })
        }
    }
}
