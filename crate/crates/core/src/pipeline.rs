//! End-to-end runs: synthesis, stage 1, pseudo-labels, stage 2, evaluation,
//! and the ablation runners built on top.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::esm::{synthesize_dataset, EsmConfig, TransformStrategy, STRATEGY_ROWS};
use crate::metrics::{evaluate, MetricReport};
use crate::optim::AdamState;
use crate::phantom::{
    config_hash, generate_phantom_samples, write_json, DatasetManifest, PhantomConfig, Sample,
    Split,
};
use crate::rng;
use crate::segnet::{NetConfig, SegNetwork};
use crate::trainer::{
    generate_pseudo_labels, losses_csv, train_stage, HyperParams, LossRow, PseudoLabeledSet, Stage,
    StageData,
};

pub const VERSION: &str = concat!("exseg-v", env!("CARGO_PKG_VERSION"));

/// Architecture knobs; input size and class count come from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetArch {
    pub widths: Vec<usize>,
    pub embed_channels: usize,
    pub convs_per_block: usize,
}

impl Default for NetArch {
    fn default() -> Self {
        let d = NetConfig::default();
        Self {
            widths: d.widths,
            embed_channels: d.embed_channels,
            convs_per_block: d.convs_per_block,
        }
    }
}

impl NetArch {
    pub fn resolve(&self, num_classes: usize, height: usize, width: usize) -> NetConfig {
        NetConfig {
            in_channels: 1,
            num_outputs: num_classes + 1,
            widths: self.widths.clone(),
            embed_channels: self.embed_channels,
            convs_per_block: self.convs_per_block,
            height,
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seed of the phantom generator.
    pub dataset_seed: u64,
    pub phantom: PhantomConfig,
    pub esm: EsmConfig,
    pub net: NetArch,
    pub trainer: HyperParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_seed: 7,
            phantom: PhantomConfig::default(),
            esm: EsmConfig::default(),
            net: NetArch::default(),
            trainer: HyperParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.esm.validate()?;
        self.trainer.validate()?;
        self.net_config(
            self.phantom.num_classes,
            self.phantom.size,
            self.phantom.size,
        )
        .validate()
    }

    pub fn net_config(&self, num_classes: usize, h: usize, w: usize) -> NetConfig {
        self.net.resolve(num_classes, h, w)
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// All splits of one dataset, in memory.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub num_classes: usize,
    pub exemplar: Sample,
    pub unlabeled: Vec<Sample>,
    pub background: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Pre-built synthetic split, used instead of on-the-fly synthesis.
    pub synthetic: Option<Vec<Sample>>,
}

impl DataBundle {
    pub fn generate(seed: u64, cfg: &PhantomConfig) -> Result<Self> {
        let ds = generate_phantom_samples(seed, cfg)?;
        Ok(Self {
            num_classes: cfg.num_classes,
            exemplar: ds.exemplar,
            unlabeled: ds.unlabeled,
            background: ds.background,
            test: ds.test,
            synthetic: None,
        })
    }

    pub fn load(m: &DatasetManifest) -> Result<Self> {
        m.validate()?;
        Ok(Self {
            num_classes: m.num_classes,
            exemplar: m.load_exemplar()?,
            unlabeled: m.load_split(Split::Unlabeled)?,
            background: m.load_split(Split::Background)?,
            test: m.load_split(Split::Test)?,
            synthetic: if m.synthetic.is_empty() {
                None
            } else {
                Some(m.load_split(Split::Synthetic)?)
            },
        })
    }

    pub fn height(&self) -> usize {
        self.exemplar.height()
    }

    pub fn width(&self) -> usize {
        self.exemplar.width()
    }
}

/// Synthetic split for a run: the pre-built one if present, otherwise
/// synthesized from the trainer seed. Empty when ESM is off.
pub fn synthetic_split(cfg: &PipelineConfig, data: &DataBundle) -> Result<Vec<Sample>> {
    if !cfg.trainer.use_esm {
        return Ok(Vec::new());
    }
    if let Some(s) = &data.synthetic {
        return Ok(s.clone());
    }
    let seed = rng::derive_seed(cfg.trainer.seed, &[rng::tag("synthesis")]);
    Ok(
        synthesize_dataset(&data.exemplar, &data.background, &cfg.esm, seed)?
            .into_iter()
            .map(|s| s.sample)
            .collect(),
    )
}

pub fn init_network(
    cfg: &PipelineConfig,
    data: &DataBundle,
    stage: Stage,
) -> Result<SegNetwork<f32>> {
    let seed = rng::derive_seed(cfg.trainer.seed, &[rng::tag("init"), stage.number()]);
    SegNetwork::new(
        cfg.net_config(data.num_classes, data.height(), data.width()),
        seed,
    )
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one stage from `net`, writing losses and checkpoints under `out`.
pub fn run_stage(
    cfg: &PipelineConfig,
    net: &mut SegNetwork<f32>,
    data: &StageData,
    stage: Stage,
    out: Option<&Path>,
) -> Result<Vec<LossRow>> {
    let hp = &cfg.trainer;
    let steps = match stage {
        Stage::One => hp.steps_stage1,
        Stage::Two => hp.steps_stage2,
    };
    let hash = cfg.hash();
    let dir = out.map(|o| o.join(stage.name()));
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut adam = AdamState::new(net.params());
    let rows = train_stage(net, &mut adam, data, hp, stage, steps, |n, a, done| {
        if let Some(d) = &dir {
            let rs = RngState {
                seed: hp.seed,
                step: done,
            };
            Checkpoint::network(n, Some(a), stage.name(), rs, &hash)
                .save(&d.join(format!("step-{done:05}")))?;
        }
        Ok(())
    })?;
    if let Some(d) = &dir {
        write_text(&d.join("losses.csv"), &losses_csv(&rows))?;
        let rs = RngState {
            seed: hp.seed,
            step: steps as u64,
        };
        Checkpoint::network(net, Some(&adam), stage.name(), rs, &hash)
            .save(&d.join("checkpoint"))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stage1: SegNetwork<f32>,
    pub stage2: Option<SegNetwork<f32>>,
    pub losses_stage1: Vec<LossRow>,
    pub losses_stage2: Vec<LossRow>,
    pub report_stage1: MetricReport,
    pub report_stage2: Option<MetricReport>,
}

impl PipelineOutcome {
    /// Report of the last trained network.
    pub fn report(&self) -> &MetricReport {
        self.report_stage2.as_ref().unwrap_or(&self.report_stage1)
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'static str,
    config: &'a PipelineConfig,
    config_hash: String,
}

/// Stage 1, pseudo-labels, stage 2 from a fresh init, and evaluation on
/// the test split. Every stream derives from `cfg.trainer.seed`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    data: &DataBundle,
    out: Option<&Path>,
) -> Result<PipelineOutcome> {
    cfg.trainer.validate()?;
    cfg.esm.validate()?;
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        let rec = RunRecord {
            version: VERSION,
            config: cfg,
            config_hash: cfg.hash(),
        };
        write_json(&o.join("run.json"), &rec)?;
    }
    let synthetic = staged("synthesis", synthetic_split(cfg, data))?;
    let mut ns = init_network(cfg, data, Stage::One)?;
    let s1 = StageData {
        exemplar: &data.exemplar,
        synthetic: &synthetic,
        pseudo: &[],
    };
    let losses_stage1 = staged("stage1", run_stage(cfg, &mut ns, &s1, Stage::One, out))?;
    let report_stage1 = staged("evaluate", evaluate(&ns, &data.test, data.num_classes))?;
    if let Some(o) = out {
        write_json(&o.join("report_stage1.json"), &report_stage1)?;
    }
    let mut outcome = PipelineOutcome {
        stage1: ns,
        stage2: None,
        losses_stage1,
        losses_stage2: Vec::new(),
        report_stage1,
        report_stage2: None,
    };
    if cfg.trainer.stage2_enabled() {
        let ns = &outcome.stage1;
        let pseudo = staged(
            "pseudo-label",
            generate_pseudo_labels(ns, &data.unlabeled, &ns.param_hash()),
        )?;
        if let Some(o) = out {
            pseudo.save(&o.join("pseudo"))?;
        }
        let (ne, rows) = staged(
            "stage2",
            run_stage2(cfg, data, &synthetic, &pseudo, ns, out),
        )?;
        let report = staged("evaluate", evaluate(&ne, &data.test, data.num_classes))?;
        outcome.stage2 = Some(ne);
        outcome.losses_stage2 = rows;
        outcome.report_stage2 = Some(report);
    }
    if let Some(o) = out {
        let r = outcome.report();
        write_json(&o.join("report.json"), r)?;
        write_text(&o.join("report.txt"), &r.table())?;
    }
    Ok(outcome)
}

/// Stage 2 from pseudo-labels; `ns` seeds the weights only with `warm_start`.
pub fn run_stage2(
    cfg: &PipelineConfig,
    data: &DataBundle,
    synthetic: &[Sample],
    pseudo: &PseudoLabeledSet,
    ns: &SegNetwork<f32>,
    out: Option<&Path>,
) -> Result<(SegNetwork<f32>, Vec<LossRow>)> {
    let mut ne = if cfg.trainer.warm_start {
        ns.clone()
    } else {
        init_network(cfg, data, Stage::Two)?
    };
    if !cfg.trainer.warm_start && ne.param_hash() == ns.param_hash() {
        return Err(Error::Contract(
            "stage-2 network shares weights with stage 1".into(),
        ));
    }
    let pseudo_samples = pseudo.samples(&data.unlabeled)?;
    let s2 = StageData {
        exemplar: &data.exemplar,
        synthetic,
        pseudo: &pseudo_samples,
    };
    let rows = run_stage(cfg, &mut ne, &s2, Stage::Two, out)?;
    Ok((ne, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModuleVariant {
    Baseline,
    Esm,
    EsmPcemS1,
    Full,
}

impl ModuleVariant {
    pub const ALL: [ModuleVariant; 4] = [Self::Baseline, Self::Esm, Self::EsmPcemS1, Self::Full];

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "BS",
            Self::Esm => "+ESM",
            Self::EsmPcemS1 => "+ESM+PCEM_S1",
            Self::Full => "+ESM+PCEM_S1&2",
        }
    }
}

fn stage1_only(cfg: &PipelineConfig, esm: bool, pcem: bool) -> PipelineConfig {
    let mut c = cfg.clone();
    c.trainer.use_esm = esm;
    c.trainer.pcem_stage1 = pcem;
    c.trainer.pseudo_labels = false;
    c
}

/// Mean test reports of the four module variants for one seed. The full
/// variant continues from the `+ESM+PCEM_S1` stage-1 network.
pub fn module_ablation(
    cfg: &PipelineConfig,
    data: &DataBundle,
) -> Result<Vec<(ModuleVariant, MetricReport)>> {
    let bs = run_pipeline(&stage1_only(cfg, false, false), data, None)?;
    let esm = run_pipeline(&stage1_only(cfg, true, false), data, None)?;
    let mut full_cfg = cfg.clone();
    full_cfg.trainer.use_esm = true;
    full_cfg.trainer.pcem_stage1 = true;
    full_cfg.trainer.pcem_stage2 = true;
    full_cfg.trainer.pseudo_labels = true;
    let full = run_pipeline(&full_cfg, data, None)?;
    Ok(vec![
        (ModuleVariant::Baseline, bs.report_stage1),
        (ModuleVariant::Esm, esm.report_stage1),
        (ModuleVariant::EsmPcemS1, full.report_stage1.clone()),
        (
            ModuleVariant::Full,
            full.report_stage2
                .ok_or_else(|| Error::Contract("full variant skipped stage 2".into()))?,
        ),
    ])
}

/// Stage-1 ESM-only runs for every transform-strategy row. A report for the
/// all-on row may be passed in to avoid retraining it.
pub fn strategy_ablation(
    cfg: &PipelineConfig,
    data: &DataBundle,
    all_on: Option<&MetricReport>,
) -> Result<Vec<(TransformStrategy, MetricReport)>> {
    STRATEGY_ROWS
        .iter()
        .map(|&row| {
            if row == TransformStrategy::all_on() {
                if let Some(r) = all_on {
                    return Ok((row, r.clone()));
                }
            }
            let mut c = stage1_only(cfg, true, false);
            c.esm.strategy = row;
            Ok((row, run_pipeline(&c, data, None)?.report_stage1))
        })
        .collect()
}

/// Per-label mean over seeds, with deltas against the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dsc: f64,
    pub hd95: f64,
    pub delta_dsc: f64,
    pub delta_hd95: f64,
    pub per_seed_dsc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `reports[s][r]` is row `r` for seed `s`.
    pub fn from_reports(
        title: &str,
        seeds: &[u64],
        labels: &[String],
        reports: &[Vec<MetricReport>],
    ) -> Self {
        let mean = |f: &dyn Fn(&MetricReport) -> f64, r: usize| {
            reports.iter().map(|seed| f(&seed[r])).sum::<f64>() / reports.len().max(1) as f64
        };
        let base_dsc = mean(&|m| m.dsc_avg, 0);
        let base_hd = mean(&|m| m.hd95_avg, 0);
        let rows = labels
            .iter()
            .enumerate()
            .map(|(r, label)| {
                let dsc = mean(&|m| m.dsc_avg, r);
                let hd95 = mean(&|m| m.hd95_avg, r);
                AblationRow {
                    label: label.clone(),
                    dsc,
                    hd95,
                    delta_dsc: dsc - base_dsc,
                    delta_hd95: hd95 - base_hd,
                    per_seed_dsc: reports.iter().map(|s| s[r].dsc_avg).collect(),
                }
            })
            .collect();
        Self {
            title: title.into(),
            seeds: seeds.to_vec(),
            rows,
        }
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{} (seeds {:?})\n", self.title, self.seeds);
        let _ = writeln!(
            s,
            "{:<26}{:>8}{:>9}{:>9}{:>9}",
            "variant", "DSC", "dDSC", "HD95", "dHD95"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<26}{:>8.3}{:>+9.3}{:>9.2}{:>+9.2}",
                r.label, r.dsc, r.delta_dsc, r.hd95, r.delta_hd95
            );
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,dsc,delta_dsc,hd95,delta_hd95\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.label, r.dsc, r.delta_dsc, r.hd95, r.delta_hd95
            );
        }
        s
    }
}

/// Both ablations over `seeds`; each seed drives dataset generation and training.
pub fn run_ablation(
    cfg: &PipelineConfig,
    seeds: &[u64],
    strategies: bool,
) -> Result<(AblationTable, Option<AblationTable>)> {
    let mut module = Vec::new();
    let mut strategy = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.dataset_seed = seed;
        c.trainer.seed = seed;
        let data = DataBundle::generate(seed, &c.phantom)?;
        let m = module_ablation(&c, &data)?;
        if strategies {
            let esm = &m[1].1;
            strategy.push(
                strategy_ablation(&c, &data, Some(esm))?
                    .into_iter()
                    .map(|(_, r)| r)
                    .collect(),
            );
        }
        module.push(m.into_iter().map(|(_, r)| r).collect::<Vec<_>>());
    }
    let labels: Vec<String> = ModuleVariant::ALL
        .iter()
        .map(|v| v.label().to_string())
        .collect();
    let mt = AblationTable::from_reports("module ablation", seeds, &labels, &module);
    let st = strategies.then(|| {
        let labels: Vec<String> = STRATEGY_ROWS.iter().map(|r| r.label()).collect();
        AblationTable::from_reports("transform strategy ablation", seeds, &labels, &strategy)
    });
    Ok((mt, st))
}

/// One ordering requirement over ablation means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn ordering(name: &str, lhs: f64, op: &str, rhs: f64) -> OrderingCheck {
    let passed = match op {
        "<" => lhs < rhs,
        "<=" => lhs <= rhs,
        ">=" => lhs >= rhs,
        _ => unreachable!("unknown comparison {op}"),
    };
    OrderingCheck {
        name: name.into(),
        passed,
        detail: format!("{lhs:.4} {op} {rhs:.4}"),
    }
}

/// Module-ablation requirements: strictly improving means through
/// `+ESM+PCEM_S1`, the full variant no worse, the two margins over the
/// baseline, and stage 2 within 0.01 of its stage-1 network.
pub fn module_checks(t: &AblationTable) -> Result<Vec<OrderingCheck>> {
    let get = |v: ModuleVariant| {
        t.row(v.label())
            .map(|r| r.dsc)
            .ok_or_else(|| Error::Contract(format!("module table lacks {}", v.label())))
    };
    let bs = get(ModuleVariant::Baseline)?;
    let esm = get(ModuleVariant::Esm)?;
    let s1 = get(ModuleVariant::EsmPcemS1)?;
    let full = get(ModuleVariant::Full)?;
    Ok(vec![
        ordering("BS < +ESM", bs, "<", esm),
        ordering("+ESM < +ESM+PCEM_S1", esm, "<", s1),
        ordering("+ESM+PCEM_S1 <= full", s1, "<=", full),
        ordering("+ESM - BS >= 0.05", esm - bs, ">=", 0.05),
        ordering("full - BS >= 0.10", full - bs, ">=", 0.10),
        ordering("full >= +ESM+PCEM_S1 - 0.01", full, ">=", s1 - 0.01),
    ])
}

/// Strategy-ablation requirements: all transforms on at least matches every
/// row with exactly one transform family switched off, and no transforms is
/// the worst row.
pub fn strategy_checks(t: &AblationTable) -> Result<Vec<OrderingCheck>> {
    let all = TransformStrategy::all_on();
    let none = TransformStrategy::all_off();
    let find = |s: TransformStrategy| {
        t.row(&s.label())
            .map(|r| r.dsc)
            .ok_or_else(|| Error::Contract(format!("strategy table lacks {}", s.label())))
    };
    let top = find(all)?;
    let bottom = find(none)?;
    let mut out = Vec::new();
    for s in STRATEGY_ROWS.iter().filter(|s| s.active_axes() == 3) {
        out.push(ordering(&format!("all >= {}", s.label()), top, ">=", find(*s)?));
    }
    for s in STRATEGY_ROWS.iter().filter(|&&s| s != none) {
        out.push(ordering(&format!("none < {}", s.label()), bottom, "<", find(*s)?));
    }
    Ok(out)
}
