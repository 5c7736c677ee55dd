//! File-level stages: each reads a dataset directory and a resolved
//! [`RunConfig`], writes its outputs plus `<stage>_config.json` into the
//! output directory, and returns what it wrote.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{epoch_refresh, AdaptDiagnostics, PseudoLabelEntry, PseudoLabelTable};
use crate::corpus::{
    load_source_gallery, load_target_gallery, load_target_truth, DatasetLayout, Domain, Gallery, GalleryPaths,
    RelevanceSets, TargetTruth, View, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, write_embeddings_csv, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::synth::{generate_to, SynthSpec};
use crate::train::{
    adapt, label_accuracy_history, pretrain, EpochLabels, EpochLog, OptimizerState, TrainConfig, TrainOutcome,
    Validation,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gen,
    Pretrain,
    Adapt,
    Eval,
    Export,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Eval => "eval",
            Stage::Export => "export",
        }
    }
}

/// Everything one stage needs. Unset paths fall back to the dataset layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub stage: Option<Stage>,
    /// Dataset directory.
    pub data: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Input checkpoint: required for adapt, eval and export; resumes pretraining.
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory whose target videos and captions pick the best epoch.
    pub validation: Option<PathBuf>,
    /// Training-time target inputs; default to the dataset's target files.
    pub target_video: Option<PathBuf>,
    pub target_metadata: Option<PathBuf>,
    /// Always rejected: target captions are never training input.
    pub target_text: Option<PathBuf>,
    /// Evaluation-only truth; defaults to the dataset's truth files.
    pub truth_metadata: Option<PathBuf>,
    pub truth_text: Option<PathBuf>,
    /// Pseudo-label log of an adaptation run, scored during eval.
    pub pseudo_labels: Option<PathBuf>,
    /// Generator settings for `gen`.
    pub synth: SynthSpec,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stage: None,
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            checkpoint: None,
            validation: None,
            target_video: None,
            target_metadata: None,
            target_text: None,
            truth_metadata: None,
            truth_text: None,
            pseudo_labels: None,
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// SHA-256 over the canonical JSON of the hyperparameters and generator
    /// settings. Paths are left out so relocated runs hash alike.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_vec(&(&self.train, &self.synth)).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    fn layout(&self) -> DatasetLayout {
        DatasetLayout::new(&self.data)
    }

    fn target_paths(&self) -> GalleryPaths {
        let d = self.layout().target();
        GalleryPaths {
            video: self.target_video.clone().unwrap_or(d.video),
            metadata: self.target_metadata.clone().unwrap_or(d.metadata),
            text: self.target_text.clone(),
        }
    }

    fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("this stage needs an input checkpoint".into()))
    }
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved(config: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let mut c = config.clone();
    c.stage = Some(stage);
    let path = config.out.join(format!("{}_config.json", stage.name()));
    write_text(&path, &(serde_json::to_string_pretty(&c)? + "\n"))?;
    Ok(path)
}

fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for l in log {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    write_text(path, &s)
}

fn write_diagnostics(path: &Path, rows: &[AdaptDiagnostics]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{}", AdaptDiagnostics::CSV_HEADER).map_err(io)?;
    for r in rows {
        r.write_csv_row(&mut w).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn save_trained(out: &TrainOutcome, path: &Path) -> Result<()> {
    save_checkpoint(&out.checkpoint, path)?;
    out.optimizer.save(&OptimizerState::sidecar(path))
}

/// Checkpoint plus its optimizer sidecar, when one exists.
pub fn load_trained(path: &Path) -> Result<(Checkpoint, Option<OptimizerState>)> {
    let ckpt = load_checkpoint(path)?;
    let sidecar = OptimizerState::sidecar(path);
    let state = if sidecar.exists() {
        Some(OptimizerState::load(&sidecar)?)
    } else {
        log::warn!(
            "no optimizer state beside {}; momentum starts from zero",
            path.display()
        );
        None
    };
    Ok((ckpt, state))
}

fn load_source(config: &RunConfig) -> Result<(Vocabulary, Gallery)> {
    let layout = config.layout();
    let vocab = Vocabulary::load(&layout.vocab())?;
    let source = load_source_gallery(&layout.source(), &vocab)?;
    Ok((vocab, source))
}

fn load_truth(config: &RunConfig, vocab: &Vocabulary) -> Result<TargetTruth> {
    let layout = config.layout();
    load_target_truth(
        config.truth_metadata.as_deref().unwrap_or(&layout.truth_metadata()),
        config.truth_text.as_deref().unwrap_or(&layout.truth_text()),
        vocab,
    )
}

fn load_validation(config: &RunConfig) -> Result<Option<Validation>> {
    let Some(dir) = &config.validation else {
        return Ok(None);
    };
    let layout = DatasetLayout::new(dir);
    let vocab = Vocabulary::load(&layout.vocab())?;
    let gallery = load_target_gallery(&layout.target())?;
    let truth = load_target_truth(&layout.truth_metadata(), &layout.truth_text(), &vocab)?;
    Ok(Some(Validation {
        labels: truth.labels_for(&gallery)?,
        queries: truth.captions().clone(),
        gallery,
    }))
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    pub layout: DatasetLayout,
    pub config: PathBuf,
}

/// Writes a synthetic dataset into `config.out`.
pub fn run_gen(config: &RunConfig) -> Result<GenOutput> {
    create_out(&config.out)?;
    let layout = generate_to(&config.synth, &config.out)?;
    let resolved = write_resolved(config, Stage::Gen)?;
    Ok(GenOutput {
        layout,
        config: resolved,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
    pub outcome: TrainOutcome,
}

pub fn run_pretrain(config: &RunConfig) -> Result<TrainOutput> {
    let (_, source) = load_source(config)?;
    let target = load_target_gallery(&config.target_paths())?;
    let validation = load_validation(config)?;
    let resume = match &config.checkpoint {
        Some(p) => match load_trained(p)? {
            (c, Some(o)) => Some((c, o)),
            (_, None) => return Err(Error::Config("resuming needs the checkpoint's optimizer state".into())),
        },
        None => None,
    };
    let outcome = pretrain(&config.train, &source, Some(&target), resume, validation.as_ref())?;
    create_out(&config.out)?;
    let checkpoint = config.out.join("pretrained.xmck");
    save_trained(&outcome, &checkpoint)?;
    let log = config.out.join("pretrain_log.csv");
    write_epoch_log(&log, &outcome.log)?;
    Ok(TrainOutput {
        checkpoint,
        log,
        config: write_resolved(config, Stage::Pretrain)?,
        outcome,
    })
}

/// One line of the pseudo-label log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub epoch: usize,
    pub view: View,
    pub num_groups: usize,
    #[serde(flatten)]
    pub entry: PseudoLabelEntry,
}

pub fn write_pseudo_labels(path: &Path, labels: &[EpochLabels]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for epoch in labels {
        for t in &epoch.tables {
            for e in &t.entries {
                let rec = PseudoLabelRecord {
                    epoch: epoch.epoch,
                    view: t.view,
                    num_groups: t.num_groups,
                    entry: e.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                writeln!(w).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<EpochLabels>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<EpochLabels> = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PseudoLabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format("pseudo-label log", path, format!("line {}: {e}", n + 1)))?;
        if out.last().is_none_or(|e| e.epoch != rec.epoch) {
            out.push(EpochLabels {
                epoch: rec.epoch,
                tables: Vec::new(),
            });
        }
        let epoch = out.last_mut().expect("pushed");
        if epoch.tables.last().is_none_or(|t| t.view != rec.view) {
            epoch.tables.push(PseudoLabelTable {
                view: rec.view,
                entries: Vec::new(),
                num_groups: rec.num_groups,
                distance_evaluations: 0,
            });
        }
        epoch.tables.last_mut().expect("pushed").entries.push(rec.entry);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub diagnostics: PathBuf,
    pub pseudo_labels: PathBuf,
    pub config: PathBuf,
    pub outcome: crate::train::AdaptOutcome,
}

/// Adaptation reads the source gallery and the uncaptioned target videos
/// only; the truth files are never opened here.
pub fn run_adapt(config: &RunConfig) -> Result<AdaptOutput> {
    let (init, optimizer) = load_trained(config.require_checkpoint()?)?;
    let (_, source) = load_source(config)?;
    let target = load_target_gallery(&config.target_paths())?;
    let validation = load_validation(config)?;
    let outcome = adapt(&config.train, &source, &target, init, optimizer, validation.as_ref())?;
    create_out(&config.out)?;
    let checkpoint = config.out.join("adapted.xmck");
    save_trained(&outcome.train, &checkpoint)?;
    let log = config.out.join("adapt_log.csv");
    write_epoch_log(&log, &outcome.train.log)?;
    let diagnostics = config.out.join("adapt_diagnostics.csv");
    write_diagnostics(&diagnostics, &outcome.diagnostics)?;
    let pseudo_labels = config.out.join("pseudo_labels.jsonl");
    write_pseudo_labels(&pseudo_labels, &outcome.labels)?;
    Ok(AdaptOutput {
        checkpoint,
        log,
        diagnostics,
        pseudo_labels,
        config: write_resolved(config, Stage::Adapt)?,
        outcome,
    })
}

/// Scores a checkpoint on the target gallery with held-out captions.
pub fn evaluate_checkpoint(
    config: &TrainConfig,
    checkpoint: &Checkpoint,
    source: &Gallery,
    target: &Gallery,
    truth: &TargetTruth,
    config_hash: String,
) -> Result<EvalReport> {
    let labels = truth.labels_for(target)?;
    let pp = &checkpoint.preprocess;
    let tgt = target.with_video(pp.apply(target.video(), Domain::Target)?)?;
    let metrics = evaluate_model(&checkpoint.model, &tgt, &labels, truth.captions())?;
    let src = source.with_video(pp.apply(source.video(), Domain::Source)?)?;
    let relevance = RelevanceSets::build(source)?;
    let refresh = epoch_refresh(&checkpoint.model, &src, &tgt, &relevance, &config.adapt)?;
    let per_view = View::ALL
        .iter()
        .map(|&v| AdaptDiagnostics::from_table(&refresh.view(v).table, 0, Some(&labels), config.adapt.sample_percent))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(metrics, per_view, config_hash, config.seed))
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report_path: PathBuf,
    pub label_accuracy: Option<PathBuf>,
    pub config: PathBuf,
    pub report: EvalReport,
}

/// Never writes a checkpoint.
pub fn run_eval(config: &RunConfig) -> Result<EvalOutput> {
    let checkpoint = load_checkpoint(config.require_checkpoint()?)?;
    let (vocab, source) = load_source(config)?;
    let target = load_target_gallery(&config.target_paths())?;
    let truth = load_truth(config, &vocab)?;
    let report = evaluate_checkpoint(
        &config.train,
        &checkpoint,
        &source,
        &target,
        &truth,
        config.config_hash(),
    )?;
    create_out(&config.out)?;
    let report_path = config.out.join("report.json");
    write_text(&report_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let label_accuracy = match &config.pseudo_labels {
        Some(p) => {
            let history = read_pseudo_labels(p)?;
            let rows =
                label_accuracy_history(&history, &truth.labels_for(&target)?, config.train.adapt.sample_percent)?;
            let path = config.out.join("label_accuracy.csv");
            write_diagnostics(&path, &rows)?;
            Some(path)
        }
        None => None,
    };
    Ok(EvalOutput {
        report_path,
        label_accuracy,
        config: write_resolved(config, Stage::Eval)?,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct ExportOutput {
    pub csv: PathBuf,
    pub rows: usize,
    pub config: PathBuf,
}

/// Video embeddings of both galleries in every view.
pub fn run_export(config: &RunConfig) -> Result<ExportOutput> {
    let checkpoint = load_checkpoint(config.require_checkpoint()?)?;
    let (_, source) = load_source(config)?;
    let target = load_target_gallery(&config.target_paths())?;
    let pp = &checkpoint.preprocess;
    let src = source.with_video(pp.apply(source.video(), Domain::Source)?)?;
    let tgt = target.with_video(pp.apply(target.video(), Domain::Target)?)?;
    create_out(&config.out)?;
    let csv = config.out.join("embeddings.csv");
    let file = File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    let mut w = BufWriter::new(file);
    let rows = write_embeddings_csv(&mut w, &checkpoint.model, &[&src, &tgt])?;
    w.flush().map_err(|e| Error::io(&csv, e))?;
    Ok(ExportOutput {
        csv,
        rows,
        config: write_resolved(config, Stage::Export)?,
    })
}
