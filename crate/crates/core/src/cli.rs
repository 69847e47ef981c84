//! Command-line runs: dataset generation, training, the ablation table and
//! the contamination audit.
//!
//! Every run resolves its flags into a [`RunConfig`], writes it next to the
//! outputs as `config.json`, and can be replayed from that file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, generate_synthetic, violates_separation, write_atomic, Dataset, FeatureOracle, Frame, GeneratorConfig, SourceTag};
use crate::eval::{degradation_report, evaluate, EvalConfig, EvalReport};
use crate::head::{infer_frames, median, train, Head, LossMode, TrainConfig, TrainLog};
use crate::minibatch::{
    assign_targets, balance, sample_proposals, select, ContaminationTally, SelectMode, DEFAULT_CONTAMINATION_IOU,
};
use crate::rng::{derive_seed, stream};
use crate::taxonomy::Taxonomy;

pub const OUT_ENV: &str = "LIGHTSIGN_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Gen,
    Train,
    Ablate,
    Contamination,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::Gen => "gen",
            CommandKind::Train => "train",
            CommandKind::Ablate => "ablate",
            CommandKind::Contamination => "contamination",
        }
    }
}

/// Every effective value of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub seed: u64,
    /// Seeds swept by `ablate` and `contamination`.
    pub seeds: Vec<u64>,
    pub frames: usize,
    pub generator: GeneratorConfig,
    pub dataset: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Fraction of frames held out for evaluation.
    pub test_fraction: f64,
    pub contamination_iou: f64,
    pub from_csv: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn new(command: CommandKind, out: PathBuf) -> Self {
        Self {
            command,
            seed: 0,
            seeds: (0..5).collect(),
            frames: 1000,
            generator: GeneratorConfig::default(),
            dataset: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            test_fraction: 0.2,
            contamination_iou: DEFAULT_CONTAMINATION_IOU,
            from_csv: None,
            out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.train.batch.windows;
        if !(0.0..=1.0).contains(&w.bg_lower) || !(0.0..=1.0).contains(&w.neg_upper) || !(0.0..=1.0).contains(&w.pos_lower) {
            bail!("IoU windows must lie in [0, 1]");
        }
        if w.bg_lower > w.neg_upper {
            bail!("--bg-lower ({}) exceeds --neg-upper ({})", w.bg_lower, w.neg_upper);
        }
        if w.neg_upper >= w.pos_lower {
            bail!("--neg-upper ({}) must be below --pos-lower ({})", w.neg_upper, w.pos_lower);
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            bail!("test fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.eval.iou_match) {
            bail!("--iou-match must lie in [0, 1]");
        }
        if self.train.batch.sampler.cap == 0 {
            bail!("--proposal-cap must be at least 1");
        }
        if self.from_csv.is_some() && self.command != CommandKind::Ablate {
            bail!("--from-csv only applies to ablate");
        }
        if self.dataset.is_some() && self.command == CommandKind::Gen {
            bail!("gen writes a dataset, it does not read one");
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        self.train.validate()?;
        self.generator.validate()?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "lightsign", version, about = "Joint traffic light and sign detection experiments on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(RunArgs),
    /// Train a head and evaluate it on a held-out split.
    Train(RunArgs),
    /// Train the four joint and two single-source configurations over seeds.
    Ablate(RunArgs),
    /// Measure how many selected negatives cover unlabeled objects.
    Contamination(RunArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Re-run from a previous run's config.json; only --out may override it.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of seeds swept by ablate/contamination, starting at --seed.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub violation_prob: Option<f64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long, value_enum)]
    pub select: Option<SelectArg>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pos_fraction: Option<f64>,
    #[arg(long)]
    pub proposal_cap: Option<usize>,
    #[arg(long)]
    pub iou_match: Option<f64>,
    #[arg(long)]
    pub bg_lower: Option<f64>,
    #[arg(long)]
    pub neg_upper: Option<f64>,
    #[arg(long)]
    pub pos_lower: Option<f64>,
    #[arg(long)]
    pub regression_iou: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub operating_score: Option<f64>,
    #[arg(long)]
    pub from_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Flat,
    Hier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    Baseline,
    Threshold,
}

impl RunArgs {
    /// Flags applied over the defaults (or over the replayed config).
    pub fn resolve(&self, command: CommandKind) -> Result<RunConfig> {
        if let Some(path) = &self.replay {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if cfg.command != command {
                bail!("{} records a `{}` run, not `{}`", path.display(), cfg.command.name(), command.name());
            }
            if let Some(out) = &self.out {
                cfg.out = out.clone();
            }
            cfg.validate()?;
            return Ok(cfg);
        }
        let root = self.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
        let out = if self.out.is_some() { root } else { root.join(command.name()) };
        let mut cfg = RunConfig::new(command, out);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.seeds = (0..self.seeds.unwrap_or(5)).map(|i| cfg.seed + i).collect();
        if let Some(v) = self.frames {
            cfg.frames = v;
        }
        if let Some(v) = self.violation_prob {
            cfg.generator.violation_prob = v;
        }
        cfg.dataset = self.dataset.clone();
        cfg.from_csv = self.from_csv.clone();
        let t = &mut cfg.train;
        t.seed = cfg.seed;
        if let Some(v) = self.loss {
            t.loss = match v {
                LossArg::Flat => LossMode::Flat,
                LossArg::Hier => LossMode::Hierarchical,
            };
        }
        if let Some(v) = self.select {
            t.batch.select = match v {
                SelectArg::Baseline => SelectMode::Baseline,
                SelectArg::Threshold => SelectMode::BackgroundThreshold,
            };
        }
        macro_rules! set {
            ($($flag:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $target = v; })*
            };
        }
        set! {
            lambda => t.lambda,
            lr => t.learning_rate,
            momentum => t.momentum,
            epochs => t.epochs,
            batch_size => t.batch.batch_size,
            pos_fraction => t.batch.pos_fraction,
            proposal_cap => t.batch.sampler.cap,
            bg_lower => t.batch.windows.bg_lower,
            neg_upper => t.batch.windows.neg_upper,
            pos_lower => t.batch.windows.pos_lower,
            regression_iou => t.batch.regression_iou,
            iou_match => cfg.eval.iou_match,
            operating_score => cfg.eval.operating_score,
            test_fraction => cfg.test_fraction,
        }
        cfg.eval.infer.sampler.cap = cfg.train.batch.sampler.cap;
        cfg.eval.infer.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hash split on frame id; `true` puts the frame in the test set.
pub fn is_test_frame(id: u64, test_fraction: f64) -> bool {
    let h = derive_seed(0x5EED_5EED, "split", id);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < test_fraction
}

pub fn split_frames(frames: &[Frame], test_fraction: f64) -> (Vec<Frame>, Vec<Frame>) {
    frames.iter().cloned().partition(|f| !is_test_frame(f.id, test_fraction))
}

fn subset(ds: &Dataset, frames: Vec<Frame>) -> Dataset {
    Dataset {
        taxonomy: ds.taxonomy.clone(),
        config: ds.config.clone(),
        frames,
    }
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, contents.as_ref()).with_context(|| format!("writing {}", path.display()))
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write(&cfg.out, "config.json", serde_json::to_string_pretty(cfg)? + "\n")
}

/// The run's dataset: loaded from `--dataset` or generated from `seed`.
pub fn obtain_dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let taxonomy = Taxonomy::traffic_default();
    match &cfg.dataset {
        Some(path) => Ok(dataset::load_expecting(path, &taxonomy).with_context(|| format!("loading {}", path.display()))?),
        None => Ok(generate_synthetic(&cfg.generator, &taxonomy, cfg.frames, seed)?),
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<String> {
    echo_config(cfg)?;
    let ds = obtain_dataset(cfg, cfg.seed)?;
    let path = cfg.out.join("dataset.tsv");
    dataset::save(&ds, &path)?;
    let violating = ds.frames.iter().filter(|f| violates_separation(f, &ds.config)).count();
    Ok(format!(
        "wrote {} frames to {} ({} violating the separation margin)",
        ds.frames.len(),
        path.display(),
        violating
    ))
}

pub struct Trained {
    pub head: Head,
    pub log: TrainLog,
    pub report: EvalReport,
}

/// Trains on the hash-split training frames and evaluates on the rest.
pub fn train_and_evaluate(ds: &Dataset, train_cfg: &TrainConfig, eval_cfg: &EvalConfig, test_fraction: f64) -> Result<Trained> {
    let (train_frames, test_frames) = split_frames(&ds.frames, test_fraction);
    let train_ds = subset(ds, train_frames);
    let (head, log) = train(&train_ds, &ds.taxonomy, train_cfg, None)?;
    let oracle = FeatureOracle::new(&ds.config, &ds.taxonomy);
    let dets = infer_frames(&head, &test_frames, &oracle, &ds.taxonomy, &eval_cfg.infer);
    let report = evaluate(&test_frames, &dets, &ds.taxonomy, eval_cfg);
    Ok(Trained { head, log, report })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    echo_config(cfg)?;
    let ds = obtain_dataset(cfg, cfg.seed)?;
    let t = train_and_evaluate(&ds, &cfg.train, &cfg.eval, cfg.test_fraction)?;
    t.head.save(&cfg.out.join("checkpoint.txt"))?;
    write(&cfg.out, "train_log.csv", t.log.to_csv())?;
    write(&cfg.out, "epochs.csv", t.log.epochs_csv())?;
    write(&cfg.out, "eval.csv", t.report.to_csv())?;
    write(&cfg.out, "pr_curves.csv", t.report.curves_csv())?;
    write(&cfg.out, "eval_summary.json", serde_json::to_string_pretty(&t.report.summary_json())? + "\n")?;
    let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    Ok(format!(
        "{} + {}: light mAP {}, sign mAP {}, total mAP {}",
        cfg.train.loss.name(),
        cfg.train.batch.select.name(),
        fmt(t.report.light_map),
        fmt(t.report.sign_map),
        fmt(t.report.total_map)
    ))
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Joint { loss: LossMode, select: SelectMode },
    Single(SourceTag),
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Single(SourceTag::Lights),
        Variant::Single(SourceTag::Signs),
        Variant::Joint { loss: LossMode::Flat, select: SelectMode::Baseline },
        Variant::Joint { loss: LossMode::Hierarchical, select: SelectMode::Baseline },
        Variant::Joint { loss: LossMode::Flat, select: SelectMode::BackgroundThreshold },
        Variant::Joint { loss: LossMode::Hierarchical, select: SelectMode::BackgroundThreshold },
    ];

    pub fn name(&self) -> String {
        match self {
            Variant::Joint { loss, select } => format!("{}+{}", loss.name(), select.name()),
            Variant::Single(SourceTag::Lights) => "single-lights".to_string(),
            Variant::Single(SourceTag::Signs) => "single-signs".to_string(),
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub variant: Variant,
    pub light_map: Option<f64>,
    pub sign_map: Option<f64>,
    pub total_map: Option<f64>,
}

/// Median and spread (max - min) of one metric over seeds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: Option<f64>,
    pub spread: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            median: Some(median(values)),
            spread: (values.len() > 1).then_some(hi - lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub config: String,
    pub light: Summary,
    pub sign: Summary,
    pub total: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub config: String,
    pub single: (f64, f64),
    pub joint: (f64, f64),
    pub percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<TableRow>,
    pub degradation: Vec<DegradationRow>,
}

impl AblationTable {
    pub fn row(&self, config: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.config == config)
    }

    pub fn from_rows(rows: Vec<TableRow>) -> Result<Self> {
        let mut t = AblationTable {
            runs: Vec::new(),
            rows,
            degradation: Vec::new(),
        };
        t.degradation = t.compute_degradation()?;
        Ok(t)
    }

    fn compute_degradation(&self) -> Result<Vec<DegradationRow>> {
        let single = match (
            self.row("single-lights").and_then(|r| r.light.median),
            self.row("single-signs").and_then(|r| r.sign.median),
        ) {
            (Some(l), Some(s)) if l > 0.0 && s > 0.0 => (l, s),
            // no single-source reference to degrade from
            _ => return Ok(Vec::new()),
        };
        let mut out = Vec::new();
        for r in &self.rows {
            if r.config.starts_with("single-") {
                continue;
            }
            if let (Some(l), Some(s)) = (r.light.median, r.sign.median) {
                out.push(DegradationRow {
                    config: r.config.clone(),
                    single,
                    joint: (l, s),
                    percent: degradation_report(single, (l, s))?,
                });
            }
        }
        Ok(out)
    }

    pub fn table_csv(&self) -> String {
        let o = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("config,light_map,sign_map,total_map,light_spread,sign_spread,total_spread\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.config,
                o(r.light.median),
                o(r.sign.median),
                o(r.total.median),
                o(r.light.spread),
                o(r.sign.spread),
                o(r.total.spread)
            );
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let o = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        let mut out = String::from("seed,config,light_map,sign_map,total_map\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{},{},{},{}", r.seed, r.variant.name(), o(r.light_map), o(r.sign_map), o(r.total_map));
        }
        out
    }

    pub fn degradation_csv(&self) -> String {
        let mut out = String::from("config,single_light,single_sign,joint_light,joint_sign,degradation_pct\n");
        for d in &self.degradation {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.2}",
                d.config, d.single.0, d.single.1, d.joint.0, d.joint.1, d.percent
            );
        }
        out
    }
}

/// Training config for `variant`: joint rows take the loss and selection
/// from the variant, single-source rows run the flat baseline.
pub fn variant_config(base: &TrainConfig, variant: Variant, seed: u64) -> TrainConfig {
    let mut t = base.clone();
    t.seed = seed;
    let (loss, select) = match variant {
        Variant::Joint { loss, select } => (loss, select),
        Variant::Single(_) => (LossMode::Flat, SelectMode::Baseline),
    };
    t.loss = loss;
    t.batch.select = select;
    t
}

/// Epochs giving a subset of `n_subset` frames the step budget that
/// `epochs` passes over `n_full` frames would take.
pub fn matched_epochs(epochs: usize, n_full: usize, n_subset: usize) -> usize {
    if n_subset == 0 {
        return epochs;
    }
    ((epochs * n_full) as f64 / n_subset as f64).round() as usize
}

pub fn run_variant(ds: &Dataset, variant: Variant, cfg: &RunConfig, seed: u64) -> Result<AblationRun> {
    let (train_frames, test_frames) = split_frames(&ds.frames, cfg.test_fraction);
    let keep = |f: &Frame| match variant {
        Variant::Single(s) => f.source == s,
        Variant::Joint { .. } => true,
    };
    let n_joint = train_frames.len();
    let train_ds = subset(ds, train_frames.into_iter().filter(|f| keep(f)).collect());
    let test: Vec<Frame> = test_frames.into_iter().filter(|f| keep(f)).collect();
    let mut tc = variant_config(&cfg.train, variant, seed);
    tc.epochs = matched_epochs(cfg.train.epochs, n_joint, train_ds.frames.len());
    let (head, _) = train(&train_ds, &ds.taxonomy, &tc, None)?;
    let oracle = FeatureOracle::new(&ds.config, &ds.taxonomy);
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.infer.seed = seed;
    let dets = infer_frames(&head, &test, &oracle, &ds.taxonomy, &eval_cfg.infer);
    let r = evaluate(&test, &dets, &ds.taxonomy, &eval_cfg);
    Ok(match variant {
        Variant::Single(SourceTag::Lights) => AblationRun { seed, variant, light_map: r.light_map, sign_map: None, total_map: None },
        Variant::Single(SourceTag::Signs) => AblationRun { seed, variant, light_map: None, sign_map: r.sign_map, total_map: None },
        Variant::Joint { .. } => AblationRun { seed, variant, light_map: r.light_map, sign_map: r.sign_map, total_map: r.total_map },
    })
}

/// Trains every variant for every seed in `cfg.seeds`.
pub fn run_ablation(cfg: &RunConfig) -> Result<AblationTable> {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let ds = obtain_dataset(cfg, seed)?;
        for v in Variant::ALL {
            runs.push(run_variant(&ds, v, cfg, seed)?);
        }
    }
    let rows = Variant::ALL
        .iter()
        .map(|v| {
            let of = |f: fn(&AblationRun) -> Option<f64>| {
                let vals: Vec<f64> = runs.iter().filter(|r| r.variant == *v).filter_map(f).collect();
                Summary::of(&vals)
            };
            TableRow {
                config: v.name(),
                light: of(|r| r.light_map),
                sign: of(|r| r.sign_map),
                total: of(|r| r.total_map),
            }
        })
        .collect();
    let mut table = AblationTable::from_rows(rows)?;
    table.runs = runs;
    Ok(table)
}

/// Reads a table with `config,light_map,sign_map,total_map` columns; the
/// config names follow [`Variant::name`]. Blank cells are missing values.
pub fn read_table_csv(path: &Path) -> Result<AblationTable> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let config_col = col("config").context("table has no `config` column")?;
    let (lc, sc, tc) = (col("light_map"), col("sign_map"), col("total_map"));
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = |c: Option<usize>| -> Result<Option<f64>> {
            match c.and_then(|c| rec.get(c)).map(str::trim) {
                None | Some("") => Ok(None),
                Some(s) => s.parse::<f64>().map(Some).with_context(|| format!("row {}: bad number `{s}`", i + 2)),
            }
        };
        let single = |x: Option<f64>| Summary { median: x, spread: None };
        rows.push(TableRow {
            config: rec.get(config_col).unwrap_or_default().trim().to_string(),
            light: single(cell(lc)?),
            sign: single(cell(sc)?),
            total: single(cell(tc)?),
        });
    }
    AblationTable::from_rows(rows)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    echo_config(cfg)?;
    let table = match &cfg.from_csv {
        Some(path) => read_table_csv(path)?,
        None => run_ablation(cfg)?,
    };
    write(&cfg.out, "ablation.csv", table.table_csv())?;
    write(&cfg.out, "degradation.csv", table.degradation_csv())?;
    if !table.runs.is_empty() {
        write(&cfg.out, "ablation_runs.csv", table.runs_csv())?;
    }
    let mut msg = table.table_csv();
    for d in &table.degradation {
        let _ = writeln!(msg, "degradation {}: {:.0}%", d.config, d.percent);
    }
    if table.degradation.is_empty() {
        msg.push_str("degradation undefined: a single-source mAP is missing or zero\n");
    }
    Ok(msg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAudit {
    pub seed: u64,
    pub mode: SelectMode,
    pub frame: u64,
    pub source: SourceTag,
    pub violating: bool,
    pub tally: ContaminationTally,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContaminationAudit {
    pub frames: Vec<FrameAudit>,
}

impl ContaminationAudit {
    pub fn tally(&self, seed: Option<u64>, mode: SelectMode, source: Option<SourceTag>) -> ContaminationTally {
        let mut t = ContaminationTally::default();
        for f in &self.frames {
            if f.mode == mode && seed.is_none_or(|s| s == f.seed) && source.is_none_or(|s| s == f.source) {
                t.merge(&f.tally);
            }
        }
        t
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.frames.iter().map(|f| f.seed).collect();
        s.dedup();
        s
    }

    /// Median over seeds of the pooled rate under `mode`; seeds without
    /// negatives are skipped.
    pub fn median_rate(&self, mode: SelectMode) -> Option<f64> {
        let rates: Vec<f64> = self.seeds().into_iter().filter_map(|s| self.tally(Some(s), mode, None).rate().ok()).collect();
        (!rates.is_empty()).then(|| median(&rates))
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("seed,mode,source,negatives,contaminated,rate\n");
        for seed in self.seeds() {
            for mode in [SelectMode::Baseline, SelectMode::BackgroundThreshold] {
                for (label, source) in [("all", None), ("LIGHTS_SET", Some(SourceTag::Lights)), ("SIGNS_SET", Some(SourceTag::Signs))] {
                    let t = self.tally(Some(seed), mode, source);
                    let rate = t.rate().map_or(String::new(), |r| r.to_string());
                    let _ = writeln!(out, "{seed},{},{label},{},{},{rate}", mode.name(), t.negatives, t.contaminated);
                }
            }
        }
        out
    }

    pub fn frames_csv(&self) -> String {
        let mut out = String::from("seed,mode,frame,source,violating,negatives,contaminated\n");
        for f in &self.frames {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                f.seed,
                f.mode.name(),
                f.frame,
                f.source.name(),
                f.violating,
                f.tally.negatives,
                f.tally.contaminated
            );
        }
        out
    }
}

/// Contamination of both selection rules on `frames`.
///
/// Each frame's proposals are drawn once per seed and shared by the two
/// rules, so the comparison is paired; balancing uses the same sub-stream
/// under both rules.
pub fn audit_frames(
    frames: &[Frame],
    ds_config: &GeneratorConfig,
    taxonomy: &Taxonomy,
    train: &TrainConfig,
    threshold: f64,
    seed: u64,
) -> Result<Vec<FrameAudit>> {
    let oracle = FeatureOracle::new(ds_config, taxonomy);
    let bc = &train.batch;
    let mut out = Vec::with_capacity(2 * frames.len());
    for frame in frames {
        let proposals = sample_proposals(frame, &oracle, &bc.sampler, &mut stream(seed, "audit-proposals", frame.id));
        let visible = frame.visible_gt();
        let violating = violates_separation(frame, ds_config);
        for mode in [SelectMode::Baseline, SelectMode::BackgroundThreshold] {
            let sel = select(&proposals, &bc.windows, mode);
            let balanced = balance(&sel, bc.batch_size, bc.pos_fraction, &mut stream(seed, "audit-balance", frame.id));
            let batch = assign_targets(&proposals, &balanced, &visible, taxonomy, bc.regression_iou)?;
            let mut tally = ContaminationTally::default();
            tally.add_frame(frame, batch.negatives.iter().map(|n| &n.proposal.bbox), threshold);
            out.push(FrameAudit {
                seed,
                mode,
                frame: frame.id,
                source: frame.source,
                violating,
                tally,
            });
        }
    }
    Ok(out)
}

pub fn run_contamination(cfg: &RunConfig) -> Result<ContaminationAudit> {
    let mut audit = ContaminationAudit::default();
    for &seed in &cfg.seeds {
        let ds = obtain_dataset(cfg, seed)?;
        audit.frames.extend(audit_frames(&ds.frames, &ds.config, &ds.taxonomy, &cfg.train, cfg.contamination_iou, seed)?);
    }
    Ok(audit)
}

pub fn cmd_contamination(cfg: &RunConfig) -> Result<String> {
    echo_config(cfg)?;
    let audit = run_contamination(cfg)?;
    write(&cfg.out, "contamination.csv", audit.summary_csv())?;
    write(&cfg.out, "contamination_frames.csv", audit.frames_csv())?;
    let mut by_mode = BTreeMap::new();
    for mode in [SelectMode::Baseline, SelectMode::BackgroundThreshold] {
        by_mode.insert(mode.name(), audit.median_rate(mode));
    }
    write(&cfg.out, "contamination_summary.json", serde_json::to_string_pretty(&by_mode)? + "\n")?;
    let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.5}"));
    Ok(format!(
        "median contamination over {} seeds: baseline {}, threshold {}",
        cfg.seeds.len(),
        fmt(by_mode["baseline"]),
        fmt(by_mode["threshold"])
    ))
}

pub fn run(cli: Cli) -> Result<String> {
    let (kind, args) = match &cli.command {
        Command::Gen(a) => (CommandKind::Gen, a),
        Command::Train(a) => (CommandKind::Train, a),
        Command::Ablate(a) => (CommandKind::Ablate, a),
        Command::Contamination(a) => (CommandKind::Contamination, a),
    };
    let cfg = args.resolve(kind)?;
    run_config(&cfg)
}

pub fn run_config(cfg: &RunConfig) -> Result<String> {
    match cfg.command {
        CommandKind::Gen => cmd_gen(cfg),
        CommandKind::Train => cmd_train(cfg),
        CommandKind::Ablate => cmd_ablate(cfg),
        CommandKind::Contamination => cmd_contamination(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("lightsign").chain(args.iter().copied())).unwrap()
    }

    fn resolve(args: &[&str]) -> Result<RunConfig> {
        let cli = parse(args);
        match &cli.command {
            Command::Train(a) => a.resolve(CommandKind::Train),
            Command::Gen(a) => a.resolve(CommandKind::Gen),
            Command::Ablate(a) => a.resolve(CommandKind::Ablate),
            Command::Contamination(a) => a.resolve(CommandKind::Contamination),
        }
    }

    #[test]
    fn defaults_and_overrides() {
        let c = resolve(&["train", "--out", "x", "--loss", "flat", "--select", "baseline", "--lr", "0.01", "--bg-lower", "0.02"]).unwrap();
        assert_eq!(c.train.loss, LossMode::Flat);
        assert_eq!(c.train.batch.select, SelectMode::Baseline);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.batch.windows.bg_lower, 0.02);
        assert_eq!(c.train.batch.sampler.cap, 50);
        assert_eq!(c.eval.iou_match, 0.5);
        assert_eq!(c.out, PathBuf::from("x"));

        let d = resolve(&["train", "--out", "x"]).unwrap();
        assert_eq!(d.train.loss, LossMode::Hierarchical);
        assert_eq!(d.train.batch.select, SelectMode::BackgroundThreshold);
        assert_eq!(d.train.batch.windows.neg_upper, 0.3);
        assert_eq!(d.train.batch.windows.pos_lower, 0.7);
    }

    #[test]
    fn conflicts_rejected() {
        assert!(resolve(&["train", "--out", "x", "--bg-lower", "0.4"]).is_err());
        assert!(resolve(&["train", "--out", "x", "--neg-upper", "0.8"]).is_err());
        assert!(resolve(&["train", "--out", "x", "--from-csv", "t.csv"]).is_err());
        assert!(resolve(&["train", "--out", "x", "--lr", "0"]).is_err());
        assert!(resolve(&["gen", "--out", "x", "--violation-prob", "1.5"]).is_err());
    }

    #[test]
    fn split_is_stable_and_near_ratio() {
        let n = 10_000;
        let test = (0..n).filter(|&i| is_test_frame(i, 0.2)).count();
        assert!((test as f64 / n as f64 - 0.2).abs() < 0.02);
        assert_eq!(is_test_frame(17, 0.2), is_test_frame(17, 0.2));
    }

    #[test]
    fn single_seed_has_empty_spread() {
        let s = Summary::of(&[0.4]);
        assert_eq!(s.median, Some(0.4));
        assert_eq!(s.spread, None);
        let s = Summary::of(&[0.4, 0.1, 0.3]);
        assert_eq!(s.median, Some(0.3));
        assert!((s.spread.unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(&v.name()), Some(v));
        }
        assert_eq!(Variant::ALL[5].name(), "hier+threshold");
    }
}
