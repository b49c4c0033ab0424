//! `exseg`: dataset generation, synthesis, the two training stages,
//! evaluation, gradient checks and ablations.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 a check
//! (`grad-check`, `ablate` orderings) failed.

mod config;
mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use exemplar_seg::checkpoint::Checkpoint;
use exemplar_seg::esm::build_synthetic_dataset;
use exemplar_seg::gradsuite;
use exemplar_seg::metrics::{evaluate, MetricReport};
use exemplar_seg::numerics::gradcheck::{GradCheckReport, GradCheckTolerance};
use exemplar_seg::phantom::{generate_phantom_dataset, write_json};
use exemplar_seg::pipeline::{
    init_network, module_checks, run_ablation, run_stage, run_stage2, strategy_checks, synthetic_split,
    DataBundle, OrderingCheck, PipelineConfig, VERSION,
};
use exemplar_seg::rng;
use exemplar_seg::trainer::{generate_pseudo_labels, PseudoLabeledSet, Stage, StageData};
use exemplar_seg::DatasetManifest;
use serde::Serialize;

use output::Staging;

#[derive(Parser)]
#[command(name = "exseg", version, about = "Single-exemplar segmentation on procedural phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON or TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `trainer.lambda_c=0.5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    GenPhantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Copy a dataset and add the synthetic split.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-1 network.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict pseudo-labels for the unlabeled split.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory of the stage-1 network.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the stage-2 network on exemplar, synthetic and pseudo-labelled data.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory of the stage-1 network.
        #[arg(long)]
        stage1: PathBuf,
        /// Output directory of `pseudo-label`.
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and both training objectives.
    GradCheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Module and transform-strategy ablations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Skip the transform-strategy rows.
        #[arg(long)]
        modules_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failure that maps to a specific exit code.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<exemplar_seg::Error> for Failure {
    fn from(e: exemplar_seg::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage<T>(r: Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn load_config(c: &Common) -> Result<PipelineConfig, Failure> {
    usage(config::load(c.config.as_deref(), &c.overrides))
}

fn load_data(dir: &Path) -> Result<(DatasetManifest, DataBundle), Failure> {
    let m = DatasetManifest::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    let data = DataBundle::load(&m)?;
    Ok((m, data))
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'static str,
    verb: &'a str,
    config: &'a PipelineConfig,
    config_hash: String,
}

fn record(dir: &Path, verb: &str, cfg: &PipelineConfig) -> Result<(), Failure> {
    let r = RunRecord {
        version: VERSION,
        verb,
        config: cfg,
        config_hash: cfg.hash(),
    };
    Ok(write_json(&dir.join("run.json"), &r)?)
}

fn write_report(dir: &Path, stem: &str, r: &MetricReport) -> Result<(), Failure> {
    write_json(&dir.join(format!("{stem}.json")), r)?;
    output::write(&dir.join(format!("{stem}.txt")), &r.table())?;
    output::write(&dir.join(format!("{stem}.csv")), &r.csv())?;
    Ok(())
}

fn grad_table(reports: &[GradCheckReport]) -> (String, String) {
    let mut t = format!("{:<20}{:>8}{:>8}{:>14}{:>14}{:>6}\n", "check", "probed", "rel_ok", "max_rel", "max_abs_rest", "ok");
    let mut c = String::from("check,probed,rel_ok,max_rel_err,max_abs_err_rest,passed\n");
    for r in reports {
        let _ = writeln!(
            t,
            "{:<20}{:>8}{:>8}{:>14.3e}{:>14.3e}{:>6}",
            r.name,
            r.probed,
            r.rel_ok,
            r.max_rel_err,
            r.max_abs_err_rest,
            if r.passed { "yes" } else { "NO" }
        );
        let _ = writeln!(c, "{},{},{},{},{},{}", r.name, r.probed, r.rel_ok, r.max_rel_err, r.max_abs_err_rest, r.passed);
    }
    (t, c)
}

fn checks_text(checks: &[OrderingCheck]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {:<34} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenPhantom { common, out } => {
            let cfg = load_config(&common)?;
            let stage = Staging::new(&out)?;
            let m = generate_phantom_dataset(cfg.dataset_seed, &cfg.phantom, stage.path())?;
            record(stage.path(), "gen-phantom", &cfg)?;
            stage.commit()?;
            println!(
                "dataset {}: {} classes, {}x{}, {} unlabeled, {} background, {} test",
                out.display(),
                m.num_classes,
                m.height,
                m.width,
                m.unlabeled.len(),
                m.background.len(),
                m.test.len()
            );
        }
        Command::Synth { common, data, out } => {
            let cfg = load_config(&common)?;
            DatasetManifest::load(&data).with_context(|| format!("loading dataset {}", data.display()))?;
            let stage = Staging::new(&out)?;
            output::copy_dir(&data, stage.path())?;
            let mut m = DatasetManifest::load(stage.path())?;
            let seed = rng::derive_seed(cfg.trainer.seed, &[rng::tag("synthesis")]);
            build_synthetic_dataset(&mut m, &cfg.esm, seed)?;
            record(stage.path(), "synth", &cfg)?;
            stage.commit()?;
            println!("synthesized {} samples into {}", m.synthetic.len(), out.display());
        }
        Command::TrainStage1 { common, data, out } => {
            let cfg = load_config(&common)?;
            let (_, bundle) = load_data(&data)?;
            let stage = Staging::new(&out)?;
            record(stage.path(), "train-stage1", &cfg)?;
            let synthetic = synthetic_split(&cfg, &bundle)?;
            let mut net = init_network(&cfg, &bundle, Stage::One)?;
            let sd = StageData {
                exemplar: &bundle.exemplar,
                synthetic: &synthetic,
                pseudo: &[],
            };
            let rows = run_stage(&cfg, &mut net, &sd, Stage::One, Some(stage.path()))?;
            let report = evaluate(&net, &bundle.test, bundle.num_classes)?;
            write_report(stage.path(), "report", &report)?;
            stage.commit()?;
            let last = rows.last().map_or(f64::NAN, |r| r.total);
            println!("stage 1: {} steps, final loss {last:.4}", rows.len());
            print!("{}", report.table());
        }
        Command::PseudoLabel { common, data, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let (_, bundle) = load_data(&data)?;
            let ck = load_checkpoint(&checkpoint)?;
            let hash = ck.manifest.param_hash.clone().unwrap_or_default();
            let stage = Staging::new(&out)?;
            let set = generate_pseudo_labels(ck.segmenter().as_ref(), &bundle.unlabeled, &hash)?;
            set.save(stage.path())?;
            record(stage.path(), "pseudo-label", &cfg)?;
            stage.commit()?;
            println!("{} pseudo-labels from checkpoint {hash}", set.entries.len());
        }
        Command::TrainStage2 { common, data, stage1, pseudo, out } => {
            let cfg = load_config(&common)?;
            let (_, bundle) = load_data(&data)?;
            let ck = load_checkpoint(&stage1)?;
            let ns = ck
                .network
                .as_ref()
                .ok_or_else(|| Failure::Usage(anyhow::anyhow!("{} is not a network checkpoint", stage1.display())))?;
            let set = PseudoLabeledSet::load(&pseudo, bundle.num_classes)
                .with_context(|| format!("loading pseudo-labels {}", pseudo.display()))?;
            let stage = Staging::new(&out)?;
            record(stage.path(), "train-stage2", &cfg)?;
            let synthetic = synthetic_split(&cfg, &bundle)?;
            let (ne, rows) = run_stage2(&cfg, &bundle, &synthetic, &set, ns, Some(stage.path()))?;
            let report = evaluate(&ne, &bundle.test, bundle.num_classes)?;
            write_report(stage.path(), "report", &report)?;
            stage.commit()?;
            let last = rows.last().map_or(f64::NAN, |r| r.total);
            println!("stage 2: {} steps, final loss {last:.4}", rows.len());
            print!("{}", report.table());
        }
        Command::Evaluate { data, checkpoint, out } => {
            let (_, bundle) = load_data(&data)?;
            let ck = load_checkpoint(&checkpoint)?;
            let report = evaluate(ck.segmenter().as_ref(), &bundle.test, bundle.num_classes)?;
            if let Some(o) = &out {
                let stage = Staging::new(o)?;
                write_report(stage.path(), "report", &report)?;
                stage.commit()?;
            }
            println!("DSC.Avg {:.3}  HD95.Avg {:.2}\n", report.dsc_avg, report.hd95_avg);
            print!("{}\n{}", report.table(), report.csv());
        }
        Command::GradCheck { out } => {
            let reports = gradsuite::full_suite(&GradCheckTolerance::default())?;
            let (table, csv) = grad_table(&reports);
            if let Some(o) = &out {
                let stage = Staging::new(o)?;
                output::write(&stage.path().join("gradcheck.txt"), &table)?;
                output::write(&stage.path().join("gradcheck.csv"), &csv)?;
                stage.commit()?;
            }
            print!("{table}");
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Check(format!("gradient checks failed: {}", failed.join(", "))));
            }
        }
        Command::Ablate { common, seeds, modules_only, out } => {
            let cfg = load_config(&common)?;
            if seeds.is_empty() {
                return Err(Failure::Usage(anyhow::anyhow!("--seeds needs at least one seed")));
            }
            let stage = Staging::new(&out)?;
            record(stage.path(), "ablate", &cfg)?;
            let (module, strategy) = run_ablation(&cfg, &seeds, !modules_only)?;
            let mut checks = module_checks(&module)?;
            print!("{}\n", module.table());
            output::write(&stage.path().join("module.txt"), &module.table())?;
            output::write(&stage.path().join("module.csv"), &module.csv())?;
            if let Some(s) = &strategy {
                checks.extend(strategy_checks(s)?);
                print!("{}\n", s.table());
                output::write(&stage.path().join("strategy.txt"), &s.table())?;
                output::write(&stage.path().join("strategy.csv"), &s.csv())?;
            }
            write_json(&stage.path().join("checks.json"), &checks)?;
            stage.commit()?;
            print!("{}", checks_text(&checks));
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} ordering checks failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
