//! Config-driven experiment commands behind the `pimt` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pimt::analysis::{
    ablate_bands, ablate_objectives, ablate_patch, band_table_csv, objective_table_csv, patch_table_csv, saliency,
    saliency_csv, saliency_svg, scale_study, scale_table_csv, BandPreset, SaliencyMap, StudySettings,
};
use pimt::checkpoint::Checkpoint;
use pimt::config::ExperimentConfig;
use pimt::datagen::{make_splits, synth_dataset, DatasetManifest, Split, SplitMode};
use pimt::dataset::{LabeledWindows, RawDataset, TaskKind, WindowSet};
use pimt::heads::{run_finetune_seeds, MetricsReport, SeedSummary};
use pimt::pretrain::{curves_csv, run_pretrain};
use pimt::tokenization::TokenIndex;
use pimt::{Error, Result};

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const CHECKPOINT: &str = "checkpoint.pimt";
pub const CURVES: &str = "curves.csv";

#[derive(Debug, Parser)]
#[command(
    name = "pimt",
    version,
    about = "Multi-band ExG tokenization, pre-training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Experiment configuration (JSON). Defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the document.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of fine-tuning seeds; overrides the document.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Output directory; overrides the document and the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WithCheckpoint {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct OptionalCheckpoint {
    #[command(flatten)]
    pub common: Common,
    /// Pre-trained checkpoint whose backbone initializes the model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic pre-training corpus and labeled task.
    Synth(Common),
    /// Pre-train encoder and decoders on the pre-training manifest.
    Pretrain(Common),
    /// Fine-tune a task head, optionally from a pre-trained checkpoint.
    Finetune(OptionalCheckpoint),
    /// Score a fine-tuned checkpoint on the test split.
    Eval(WithCheckpoint),
    AblateBands(Common),
    AblateObjectives(Common),
    AblatePatch(Common),
    ScaleStudy(Common),
    /// Per-band saliency of a fine-tuned checkpoint over test windows.
    Saliency(WithCheckpoint),
    /// Print the default configuration document.
    DefaultConfig,
}

/// Load the document, apply flag overrides and validate.
pub fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = c.seeds {
        cfg.finetune.seeds = n;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Snapshot<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
}

/// Output directory of one command run, with the config snapshot written.
struct Run {
    dir: PathBuf,
    hash: String,
}

impl Run {
    fn start(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let dir = cfg.output_dir_for(command);
        fs::create_dir_all(&dir)?;
        let hash = cfg.hash();
        let snapshot = Snapshot {
            config_hash: hash.clone(),
            config: cfg,
        };
        fs::write(dir.join(CONFIG_SNAPSHOT), serde_json::to_string_pretty(&snapshot)?)?;
        Ok(Self { dir, hash })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// CSV with a leading `# config_hash=` comment line.
    fn write_csv(&self, name: &str, body: &str) -> Result<()> {
        fs::write(self.path(name), format!("# config_hash={}\n{body}", self.hash))?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

fn load_raw(path: &Path) -> Result<RawDataset> {
    DatasetManifest::read(path)?.load(path)
}

fn task_data(cfg: &ExperimentConfig) -> Result<(LabeledWindows, TaskKind)> {
    let raw = load_raw(cfg.task_manifest()?)?;
    let kind = raw
        .task
        .ok_or_else(|| Error::Config("task manifest carries no task kind".into()))?;
    Ok((raw.labeled_windows(&cfg.sigproc.preprocess, &cfg.filter_bank()?)?, kind))
}

fn task_split(cfg: &ExperimentConfig, task: &LabeledWindows) -> Result<Split> {
    make_splits(&task.windows.meta, &cfg.split)
}

/// Subjects withheld from pre-training under leave-one-subject-out.
fn pretrain_exclusions(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    match &cfg.split.mode {
        SplitMode::Loso { target } => match (&cfg.data.task_manifest, target) {
            (Some(_), _) => {
                let (task, _) = task_data(cfg)?;
                Ok(task_split(cfg, &task)?.pretrain_exclude)
            }
            (None, Some(t)) => Ok(vec![t.clone()]),
            (None, None) => Err(Error::Config(
                "leave-one-subject-out pre-training needs a target subject or a task manifest".into(),
            )),
        },
        _ => Ok(Vec::new()),
    }
}

fn pretrain_corpus(cfg: &ExperimentConfig) -> Result<WindowSet> {
    let mut raw = load_raw(cfg.pretrain_manifest()?)?;
    let exclude = pretrain_exclusions(cfg)?;
    if !exclude.is_empty() {
        let keep: Vec<usize> = (0..raw.recordings.len())
            .filter(|&i| !exclude.contains(&raw.recordings[i].subject_id))
            .collect();
        raw.labels = keep.iter().map(|&i| raw.labels[i].clone()).collect();
        raw.recordings = keep.iter().map(|&i| raw.recordings[i].clone()).collect();
    }
    let (set, _) = raw.windows(&cfg.sigproc.preprocess, &cfg.filter_bank()?)?;
    if set.is_empty() {
        return Err(Error::EmptyOutput("pre-training corpus has no windows".into()));
    }
    Ok(set)
}

fn settings<'a>(cfg: &'a ExperimentConfig, template: &'a pimt::model::ModelConfig) -> StudySettings<'a> {
    StudySettings {
        preprocess: &cfg.sigproc.preprocess,
        model: template,
        finetune: &cfg.finetune,
        split: &cfg.split,
    }
}

fn template(cfg: &ExperimentConfig) -> pimt::model::ModelConfig {
    cfg.model_config(TokenIndex::new(1, 1, 1))
}

fn metric_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Classification => "macro_f1",
        TaskKind::Gaze => "angular_error_deg",
    }
}

fn seeds_csv(summary: &SeedSummary, kind: TaskKind) -> String {
    let mut out = format!("seed,{},n_samples\n", metric_name(kind));
    for r in &summary.reports {
        out.push_str(&format!("{},{},{}\n", r.seed, r.primary(), r.n_samples));
    }
    out
}

fn summary_csv(summary: &SeedSummary, kind: TaskKind) -> String {
    format!(
        "metric,seeds,mean,std\n{},{},{},{}\n",
        metric_name(kind),
        summary.seeds.len(),
        summary.mean,
        summary.std
    )
}

fn report_csv(r: &MetricsReport) -> String {
    format!(
        "seed,{},n_samples\n{},{},{}\n",
        metric_name(r.task),
        r.seed,
        r.primary(),
        r.n_samples
    )
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
            Ok(())
        }
        Command::Synth(c) => cmd_synth(&resolve_config(&c)?),
        Command::Pretrain(c) => cmd_pretrain(&resolve_config(&c)?),
        Command::Finetune(a) => cmd_finetune(&resolve_config(&a.common)?, a.checkpoint.as_deref()),
        Command::Eval(a) => cmd_eval(&resolve_config(&a.common)?, &a.checkpoint),
        Command::AblateBands(c) => cmd_ablate_bands(&resolve_config(&c)?),
        Command::AblateObjectives(c) => cmd_ablate_objectives(&resolve_config(&c)?),
        Command::AblatePatch(c) => cmd_ablate_patch(&resolve_config(&c)?),
        Command::ScaleStudy(c) => cmd_scale_study(&resolve_config(&c)?),
        Command::Saliency(a) => cmd_saliency(&resolve_config(&a.common)?, &a.checkpoint),
    }
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let run = Run::start(cfg, "synth")?;
    let (pretrain, task) = synth_dataset(&cfg.synth, &run.dir, cfg.seed)?;
    println!(
        "synthesized {} subjects x {} sessions of free-living data and {} x {} task recordings",
        cfg.synth.subjects, cfg.synth.sessions, cfg.synth.task_subjects, cfg.synth.task_sessions
    );
    println!("pretrain manifest: {}", pretrain.display());
    println!("task manifest: {}", task.display());
    Ok(())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = pretrain_corpus(cfg)?;
    let model_cfg = cfg.model_config(corpus.token_index(cfg.tokenization.patch_len)?);
    let run = Run::start(cfg, "pretrain")?;
    let out = run_pretrain(&corpus, &model_cfg, &cfg.pretrain)?;
    Checkpoint::from_pretrain(&out.model, corpus.fs, corpus.bank.bands.clone(), &run.hash)
        .save(&run.path(CHECKPOINT))?;
    run.write_csv(CURVES, &curves_csv(&out.curves, &cfg.pretrain.objectives))?;
    println!(
        "pre-trained on {} windows; held-out total {:.6} -> {:.6}",
        out.train.len(),
        out.initial_heldout().total,
        out.final_heldout().total
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<()> {
    let (task, kind) = task_data(cfg)?;
    let model_cfg = cfg.model_config(task.windows.token_index(cfg.tokenization.patch_len)?);
    let pretrained = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.check_compatible(&model_cfg, &task.windows.bank.bands)?;
            Some(ck.params)
        }
        None => None,
    };
    let split = task_split(cfg, &task)?;
    let run = Run::start(cfg, "finetune")?;
    let (mut summary, outcomes) = run_finetune_seeds(
        pretrained.as_ref(),
        &model_cfg,
        &task,
        kind,
        &split.train,
        &split.test,
        &cfg.finetune,
    )?;
    for r in &mut summary.reports {
        r.config_hash = run.hash.clone();
    }
    for (o, seed) in outcomes.iter().zip(&summary.seeds) {
        Checkpoint::from_finetune(
            &o.model,
            *seed,
            task.windows.fs,
            task.windows.bank.bands.clone(),
            &run.hash,
        )
        .save(&run.path(&format!("head_seed{seed}.pimt")))?;
    }
    run.write_json("split.json", &split)?;
    run.write_json("metrics.json", &summary)?;
    run.write_csv("metrics.csv", &seeds_csv(&summary, kind))?;
    run.write_csv("summary.csv", &summary_csv(&summary, kind))?;
    println!(
        "{} over {} seeds: {:.6} ± {:.6}",
        metric_name(kind),
        summary.seeds.len(),
        summary.mean,
        summary.std
    );
    Ok(())
}

fn load_head(cfg: &ExperimentConfig, path: &Path) -> Result<(Checkpoint, pimt::heads::FinetuneModel)> {
    let ck = Checkpoint::load(path)?;
    ck.check_hash(&cfg.hash())?;
    let model = ck.finetune_model()?;
    Ok((ck, model))
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let (ck, model) = load_head(cfg, checkpoint)?;
    let (task, _) = task_data(cfg)?;
    let split = task_split(cfg, &task)?;
    let (mut report, _) = model.evaluate(&task, &split.test, ck.header.seed.unwrap_or(cfg.seed))?;
    report.config_hash = ck.header.config_hash.clone();
    let run = Run::start(cfg, "eval")?;
    run.write_json("eval.json", &report)?;
    run.write_csv("eval.csv", &report_csv(&report))?;
    println!(
        "{}: {:.6} on {} test windows",
        metric_name(report.task),
        report.primary(),
        report.n_samples
    );
    Ok(())
}

pub fn cmd_ablate_bands(cfg: &ExperimentConfig) -> Result<()> {
    let raw = load_raw(cfg.task_manifest()?)?;
    let presets = cfg
        .analysis
        .band_presets
        .iter()
        .map(|n| BandPreset::by_name(n))
        .collect::<Result<Vec<_>>>()?;
    let t = template(cfg);
    let run = Run::start(cfg, "ablate-bands")?;
    let rows = ablate_bands(&presets, &raw, &settings(cfg, &t))?;
    run.write_json("bands.json", &rows)?;
    run.write_csv("bands.csv", &band_table_csv(&rows))?;
    for r in &rows {
        println!("{:>8}: {:.6} ± {:.6}", r.preset, r.summary.mean, r.summary.std);
    }
    Ok(())
}

pub fn cmd_ablate_objectives(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = pretrain_corpus(cfg)?;
    let (task, _) = task_data(cfg)?;
    let t = template(cfg);
    let run = Run::start(cfg, "ablate-objectives")?;
    let rows = ablate_objectives(&corpus, &task, &cfg.pretrain, &settings(cfg, &t))?;
    run.write_json("objectives.json", &rows)?;
    run.write_csv("objectives.csv", &objective_table_csv(&rows))?;
    for r in &rows {
        println!(
            "{:>5}: held-out {:.6}, downstream {:.6} ± {:.6}",
            r.name, r.heldout.total, r.downstream.mean, r.downstream.std
        );
    }
    Ok(())
}

pub fn cmd_ablate_patch(cfg: &ExperimentConfig) -> Result<()> {
    let raw = load_raw(cfg.task_manifest()?)?;
    let t = template(cfg);
    let run = Run::start(cfg, "ablate-patch")?;
    let rows = ablate_patch(
        &cfg.analysis.patch_sizes_s,
        &raw,
        &cfg.filter_bank()?,
        &settings(cfg, &t),
    )?;
    run.write_json("patch.json", &rows)?;
    run.write_csv("patch.csv", &patch_table_csv(&rows))?;
    for r in &rows {
        println!(
            "{:>5} s (L={}): {:.6} ± {:.6}",
            r.size_s, r.patches, r.summary.mean, r.summary.std
        );
    }
    Ok(())
}

pub fn cmd_scale_study(cfg: &ExperimentConfig) -> Result<()> {
    let corpus = pretrain_corpus(cfg)?;
    let task = match cfg.data.task_manifest {
        Some(_) => Some(task_data(cfg)?.0),
        None => None,
    };
    let t = template(cfg);
    let run = Run::start(cfg, "scale-study")?;
    let rows = scale_study(
        &corpus,
        &cfg.analysis.scale_fractions,
        task.as_ref(),
        &cfg.pretrain,
        &settings(cfg, &t),
    )?;
    run.write_json("scale.json", &rows)?;
    run.write_csv("scale.csv", &scale_table_csv(&rows))?;
    let mut curves = String::new();
    for (i, r) in rows.iter().enumerate() {
        let body = curves_csv(&r.curves, &cfg.pretrain.objectives);
        let mut lines = body.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            curves.push_str(&format!("fraction,{header}\n"));
        }
        for line in lines {
            curves.push_str(&format!("{},{line}\n", r.fraction));
        }
    }
    run.write_csv("scale_curves.csv", &curves)?;
    for r in &rows {
        println!(
            "fraction {:>5}: {} windows, final held-out {:.6}",
            r.fraction, r.train_windows, r.final_heldout
        );
    }
    Ok(())
}

pub fn cmd_saliency(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let (_, model) = load_head(cfg, checkpoint)?;
    let (task, _) = task_data(cfg)?;
    let split = task_split(cfg, &task)?;
    let patch_len = model.model.cfg.patch_len;
    let maps = split
        .test
        .iter()
        .take(cfg.analysis.saliency_windows)
        .map(|&i| saliency(&model, &task.windows.tokens(i, patch_len)?))
        .collect::<Result<Vec<SaliencyMap>>>()?;
    let map = SaliencyMap::mean(&maps)?;
    let run = Run::start(cfg, "saliency")?;
    run.write_csv("saliency.csv", &saliency_csv(&map, &task.windows.bank))?;
    if cfg.analysis.render_svg {
        fs::write(run.path("saliency.svg"), saliency_svg(&map, &task.windows.bank))?;
    }
    for (band, mass) in task.windows.bank.bands.iter().zip(&map.band_mass) {
        println!("{:>10}: {mass:.4}", band.name);
    }
    Ok(())
}
