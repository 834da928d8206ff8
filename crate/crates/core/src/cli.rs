//! Command-line surface: `gen-data`, `train`, `eval` and `report`.
//!
//! Every subcommand starts from an [`ExperimentConfig`] (defaults, or a TOML
//! file given with `--config`), applies its flags on top, and writes the
//! resolved config as `config.toml` into its output directory. The output
//! directory itself is not recorded, so rerunning from a resolved config into
//! another directory reproduces every file byte for byte.
//!
//! Exit codes: 0 success, 1 unexpected runtime failure, 2 usage or
//! configuration error, 3 numerical abort.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{generate_corpus, ClassCatalog, CorpusBundle, GeneratorConfig, SplitSizes};
use crate::evaluation::{
    compare_reports, evaluate, read_report_json, write_plot_csv, write_report_csv,
    write_report_json, Candidates, EvalConfig, EvalError, EvalReport, OracleScorer,
};
use crate::model::{check_dims, load_checkpoint, save_checkpoint, CheckpointMeta, ModelDims, Task};
use crate::trainer::{run, CheckpointSink, Strategy, TrainConfig, TrainCorpus, TrainError};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PLOT_CSV: &str = "plot.csv";
pub const COMPARISON_MD: &str = "comparison.md";
pub const COMPARISON_CSV: &str = "comparison.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical abort during {phase}; diagnostic checkpoint written to {}", .checkpoint.display())]
    NumericalAbort { phase: String, checkpoint: PathBuf },
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::NumericalAbort { .. } => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub entities: usize,
    pub predicates: usize,
    pub zipf_entity: f64,
    pub zipf_predicate: f64,
    /// Training scenes.
    pub scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let catalog = ClassCatalog::desk();
        let sizes = SplitSizes::default();
        Self {
            entities: catalog.entity_classes,
            predicates: catalog.predicate_classes,
            zipf_entity: catalog.entity_exponent,
            zipf_predicate: catalog.predicate_exponent,
            scenes: sizes.train,
            val_scenes: sizes.val,
            test_scenes: sizes.test,
        }
    }
}

impl GeneratorSection {
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig::new(ClassCatalog {
            entity_classes: self.entities,
            predicate_classes: self.predicates,
            entity_exponent: self.zipf_entity,
            predicate_exponent: self.zipf_predicate,
        })
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.scenes,
            val: self.val_scenes,
            test: self.test_scenes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[default]
    Desk,
    FullSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub appearance: bool,
    /// Explicit dimensions; filled in from the preset and the corpus when
    /// absent.
    pub dims: Option<ModelDims>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            appearance: true,
            dims: None,
        }
    }
}

impl ModelSection {
    /// Dimensions for a corpus with the given class counts.
    pub fn resolve(
        &self,
        entity_classes: usize,
        predicate_classes: usize,
    ) -> Result<ModelDims, CliError> {
        let dims = match self.dims {
            Some(d) => d,
            None => {
                let d = match self.preset {
                    Preset::Desk => ModelDims::desk(entity_classes, predicate_classes),
                    Preset::FullSize => ModelDims::full_size(entity_classes, predicate_classes),
                };
                if self.appearance {
                    d
                } else {
                    d.without_appearance()
                }
            }
        };
        if dims.entity_classes != entity_classes || dims.predicate_classes != predicate_classes {
            return Err(usage(format!(
                "model dims declare {}/{} classes but the corpus has {entity_classes}/{predicate_classes}",
                dims.entity_classes, dims.predicate_classes
            )));
        }
        dims.validate().map_err(usage)?;
        Ok(dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerKind {
    #[default]
    Model,
    /// Ground-truth oracle; needs no checkpoint.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub task: Task,
    pub ks: Vec<usize>,
    pub candidates: Candidates,
    pub scorer: ScorerKind,
    pub split: Split,
    pub checkpoint: Option<PathBuf>,
    pub label: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            task: Task::SgCls,
            ks: vec![20, 50, 100],
            candidates: Candidates::Annotated,
            scorer: ScorerKind::Model,
            split: Split::Test,
            checkpoint: None,
            label: None,
        }
    }
}

/// Everything a run depends on. `train.seed` is always overwritten with the
/// master `seed`, which also seeds corpus generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Corpus directory read by `train` and `eval`.
    pub data: Option<PathBuf>,
    /// Output directory; not written to resolved configs.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub generator: GeneratorSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(e.into()))
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.out
            .clone()
            .ok_or_else(|| usage("an output directory is required (--out)"))
    }

    fn data_dir(&self) -> Result<PathBuf, CliError> {
        self.data
            .clone()
            .ok_or_else(|| usage("a corpus directory is required (--data)"))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dt2",
    version,
    about = "Decoupled long-tailed training for visual relations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tailed scene-graph corpus.
    GenData(GenDataArgs),
    /// Train a model with one of the sampling strategies.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the oracle) on a corpus split.
    Eval(EvalArgs),
    /// Merge evaluation reports into a comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub entities: Option<usize>,
    #[arg(long)]
    pub predicates: Option<usize>,
    #[arg(long)]
    pub zipf_entity: Option<f64>,
    #[arg(long)]
    pub zipf_predicate: Option<f64>,
    /// Training scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub val_scenes: Option<usize>,
    #[arg(long)]
    pub test_scenes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Corpus directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau_s: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_alternations: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Remove the appearance branch.
    #[arg(long)]
    pub no_appearance: bool,
    /// Debug: train the teacher in the entity-balanced step.
    #[arg(long)]
    pub e_step_teacher: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    /// Comma-separated K list.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub scorer: Option<ScorerKind>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    /// Rank every ordered entity pair instead of annotated pairs only.
    #[arg(long)]
    pub all_pairs: bool,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub no_appearance: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files written by `eval`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Directory for the merged Markdown and CSV tables.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

fn base_config(common: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.out.is_some() {
        config.out = common.out.clone();
    }
    config.train.seed = config.seed;
    Ok(config)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn resolve_gen_data(args: &GenDataArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = base_config(&args.common)?;
    let g = &mut config.generator;
    set(&mut g.entities, args.entities);
    set(&mut g.predicates, args.predicates);
    set(&mut g.zipf_entity, args.zipf_entity);
    set(&mut g.zipf_predicate, args.zipf_predicate);
    set(&mut g.scenes, args.scenes);
    set(&mut g.val_scenes, args.val_scenes);
    set(&mut g.test_scenes, args.test_scenes);
    g.generator_config().validate().map_err(usage)?;
    if g.scenes == 0 || g.val_scenes == 0 || g.test_scenes == 0 {
        return Err(usage("scene counts must be positive"));
    }
    Ok(config)
}

pub fn resolve_train(args: &TrainArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = base_config(&args.common)?;
    if args.data.is_some() {
        config.data = args.data.clone();
    }
    let t = &mut config.train;
    set(&mut t.strategy, args.strategy);
    set(&mut t.task, args.task);
    set(&mut t.alpha, args.alpha);
    set(&mut t.beta, args.beta);
    set(&mut t.tau_s, args.tau_s);
    set(&mut t.adam.lr, args.lr);
    set(&mut t.stage1_epochs, args.epochs);
    set(&mut t.max_alternations, args.max_alternations);
    set(&mut t.patience, args.patience);
    t.e_step_teacher |= args.e_step_teacher;
    t.validate().map_err(usage)?;
    set(&mut config.model.preset, args.preset);
    if args.no_appearance {
        config.model.appearance = false;
    }
    Ok(config)
}

pub fn resolve_eval(args: &EvalArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = base_config(&args.common)?;
    if args.data.is_some() {
        config.data = args.data.clone();
    }
    let e = &mut config.eval;
    if args.checkpoint.is_some() {
        e.checkpoint = args.checkpoint.clone();
    }
    set(&mut e.task, args.task);
    set(&mut e.ks, args.k.clone());
    set(&mut e.scorer, args.scorer);
    set(&mut e.split, args.split);
    if args.all_pairs {
        e.candidates = Candidates::AllPairs;
    }
    if args.label.is_some() {
        e.label = args.label.clone();
    }
    set(&mut config.model.preset, args.preset);
    if args.no_appearance {
        config.model.appearance = false;
    }
    if e.ks.is_empty() || e.ks.contains(&0) {
        return Err(usage("--k must list positive integers"));
    }
    Ok(config)
}

fn load_corpus(config: &ExperimentConfig) -> Result<CorpusBundle, CliError> {
    let dir = config.data_dir()?;
    if !dir.is_dir() {
        return Err(usage(format!(
            "corpus directory {} does not exist",
            dir.display()
        )));
    }
    CorpusBundle::read_dir(&dir)
        .map_err(|e| usage(format!("cannot read corpus {}: {e}", dir.display())))
}

pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<(), CliError> {
    let out = config.out_dir()?;
    let g = &config.generator;
    let bundle =
        generate_corpus(&g.generator_config(), config.seed, g.split_sizes()).map_err(usage)?;
    bundle
        .write_dir(&out)
        .with_context(|| format!("writing corpus to {}", out.display()))?;
    config.write(&out)?;
    log::info!(
        "wrote {} train / {} val / {} test scenes to {}",
        bundle.train.len(),
        bundle.val.len(),
        bundle.test.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<(), CliError> {
    let out = config.out_dir()?;
    let bundle = load_corpus(config)?;
    let dims = config.model.resolve(
        bundle.manifest.entity_classes,
        bundle.manifest.predicate_classes,
    )?;
    let mut resolved = config.clone();
    resolved.model.dims = Some(dims);
    resolved.write(&out)?;
    let checkpoints = out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&checkpoints)
        .with_context(|| format!("creating {}", checkpoints.display()))?;
    let sink = CheckpointSink {
        dir: checkpoints.clone(),
    };
    let corpus = TrainCorpus::from(&bundle);
    match run(&config.train, dims, &corpus, Some(&sink)) {
        Ok(outcome) => {
            outcome
                .log
                .write_csv(&out.join(TRAIN_LOG_FILE))
                .context("writing training log")?;
            log::info!(
                "best validation mR@{} {:.4} at index {}",
                config.train.validation_k,
                outcome.best_validation,
                outcome.best_index
            );
            Ok(())
        }
        Err(TrainError::NonFinite { phase, params }) => {
            let path = checkpoints.join(DIAGNOSTIC_CHECKPOINT);
            let meta = CheckpointMeta {
                strategy: config.train.strategy.to_string(),
                stage: phase.clone(),
                ..CheckpointMeta::default()
            };
            save_checkpoint(&params, &meta, &path).context("writing diagnostic checkpoint")?;
            Err(CliError::NumericalAbort {
                phase,
                checkpoint: path,
            })
        }
        Err(TrainError::Config(msg)) => Err(usage(msg)),
        Err(e) => Err(CliError::Runtime(e.into())),
    }
}

pub fn cmd_eval(config: &ExperimentConfig) -> Result<EvalReport, CliError> {
    let out = config.out_dir()?;
    let bundle = load_corpus(config)?;
    let (c, p) = (
        bundle.manifest.entity_classes,
        bundle.manifest.predicate_classes,
    );
    let e = &config.eval;
    let eval_config = EvalConfig {
        task: e.task,
        ks: e.ks.clone(),
        candidates: e.candidates,
    };
    let scenes = match e.split {
        Split::Val => &bundle.val,
        Split::Test => &bundle.test,
    };
    let frequency = TrainCorpus::from(&bundle).predicate_frequency();
    let report = match e.scorer {
        ScorerKind::Oracle => {
            let scorer = OracleScorer {
                entity_classes: c,
                predicate_classes: p,
            };
            evaluate(
                &scorer,
                scenes,
                &eval_config,
                &frequency,
                e.label.as_deref().unwrap_or("oracle"),
            )
        }
        ScorerKind::Model => {
            let path = e
                .checkpoint
                .clone()
                .ok_or_else(|| usage("--checkpoint is required for the model scorer"))?;
            if !path.is_file() {
                return Err(usage(format!(
                    "checkpoint {} does not exist",
                    path.display()
                )));
            }
            let (params, manifest) = load_checkpoint(&path)
                .map_err(|err| usage(format!("cannot load {}: {err}", path.display())))?;
            check_dims(&manifest, &config.model.resolve(c, p)?).map_err(usage)?;
            let label = e
                .label
                .clone()
                .unwrap_or_else(|| manifest.meta.strategy.clone());
            evaluate(&params, scenes, &eval_config, &frequency, &label)
        }
    };
    let report = report.map_err(|err| match err {
        EvalError::InvalidParameter(_) | EvalError::EmptyTestSet => usage(err),
        other => CliError::Runtime(other.into()),
    })?;
    config.write(&out)?;
    write_report_json(&report, &out.join(REPORT_JSON)).context("writing report")?;
    write_report_csv(&report, &out.join(REPORT_CSV)).context("writing report CSV")?;
    write_plot_csv(&report, &out.join(PLOT_CSV)).context("writing plot data")?;
    for m in &report.metrics {
        println!(
            "{} {} R@{} {:.4} mR@{} {:.4}",
            report.label, report.task, m.k, m.recall, m.k, m.mean_recall
        );
    }
    Ok(report)
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let report = read_report_json(path).map_err(usage)?;
        reports.push((path.display().to_string(), report));
    }
    let table = compare_reports(&reports).map_err(usage)?;
    let markdown = table.to_markdown();
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        std::fs::write(out.join(COMPARISON_MD), &markdown).context("writing comparison table")?;
        table
            .write_csv(&out.join(COMPARISON_CSV))
            .context("writing comparison CSV")?;
    }
    print!("{markdown}");
    Ok(markdown)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&resolve_gen_data(&args)?),
        Command::Train(args) => cmd_train(&resolve_train(&args)?),
        Command::Eval(args) => cmd_eval(&resolve_eval(&args)?).map(|_| ()),
        Command::Report(args) => cmd_report(&args).map(|_| ()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}
