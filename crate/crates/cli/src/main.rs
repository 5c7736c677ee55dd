use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use xdomain::adapt::{ConfidenceVariant, LabellingVariant, SamplingVariant};
use xdomain::baselines::BaselineKind;
use xdomain::run::{run_adapt, run_eval, run_export, run_gen, run_pretrain, RunConfig};
use xdomain::train::ModelSpec;
use xdomain::Result;

#[derive(Parser)]
#[command(name = "xdomain", version, about = "Cross-domain text-to-video retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-domain dataset into --out.
    Gen(Common),
    /// Train on labelled source pairs; resumes from --checkpoint.
    Pretrain(Common),
    /// Adapt a pretrained --checkpoint to the unlabelled target videos.
    Adapt(Common),
    /// Score --checkpoint on the held-out target captions.
    Eval(Common),
    /// Dump per-view video embeddings of both domains as CSV.
    Export(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    None,
    Pds,
    Coral,
}

#[derive(Clone, Copy, ValueEnum)]
enum Labelling {
    NearestSource,
    NearestPrototype,
}

#[derive(Clone, Copy, ValueEnum)]
enum Confidence {
    Prototype,
    Neighbour,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    PerPrototype,
    Uniform,
}

/// Flags override the JSON config, which overrides the defaults.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    target_video: Option<PathBuf>,
    #[arg(long)]
    target_metadata: Option<PathBuf>,
    #[arg(long)]
    target_text: Option<PathBuf>,
    #[arg(long)]
    truth_metadata: Option<PathBuf>,
    #[arg(long)]
    truth_text: Option<PathBuf>,
    #[arg(long)]
    pseudo_labels: Option<PathBuf>,
    /// Seeds both training and, for gen, the generator.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    model: Option<Preset>,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Weight of both cross-domain terms.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    hard_negative_fraction: Option<f64>,
    #[arg(long)]
    sample_percent: Option<f64>,
    #[arg(long, value_enum)]
    labelling: Option<Labelling>,
    #[arg(long, value_enum)]
    confidence: Option<Confidence>,
    #[arg(long, value_enum)]
    sampling: Option<Sampling>,
}

impl Common {
    fn resolve(&self, adapting: bool) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = &self.$flag { $field = v.clone().into(); })*
            };
        }
        set!(
            data => c.data,
            out => c.out,
            validation => c.validation,
            checkpoint => c.checkpoint,
            target_video => c.target_video,
            target_metadata => c.target_metadata,
            target_text => c.target_text,
            truth_metadata => c.truth_metadata,
            truth_text => c.truth_text,
            pseudo_labels => c.pseudo_labels,
            batch_size => c.train.batch_size,
            lr => c.train.learning_rate,
            margin => c.train.margin,
            hard_negative_fraction => c.train.hard_negative_fraction,
            sample_percent => c.train.adapt.sample_percent,
        );
        if let Some(s) = self.seed {
            c.train.seed = s;
            c.synth.seed = s;
        }
        if let Some(e) = self.epochs {
            if adapting {
                c.train.adapt_epochs = e;
            } else {
                c.train.pretrain_epochs = e;
            }
        }
        if let Some(l) = self.lambda {
            c.train.lambda_src_to_tgt = l;
            c.train.lambda_tgt_to_src = l;
        }
        if let Some(m) = self.model {
            c.train.model = match m {
                Preset::Paper => ModelSpec::default(),
                Preset::Desk => ModelSpec::desk(),
            };
        }
        if let Some(b) = self.baseline {
            c.train.baseline = match b {
                Baseline::None => BaselineKind::None,
                Baseline::Pds => BaselineKind::Pds,
                Baseline::Coral => BaselineKind::Coral,
            };
        }
        if let Some(l) = self.labelling {
            c.train.adapt.labelling = match l {
                Labelling::NearestSource => LabellingVariant::NearestSource,
                Labelling::NearestPrototype => LabellingVariant::NearestPrototype,
            };
        }
        if let Some(v) = self.confidence {
            c.train.adapt.confidence = match v {
                Confidence::Prototype => ConfidenceVariant::Prototype,
                Confidence::Neighbour => ConfidenceVariant::Neighbour,
            };
        }
        if let Some(s) = self.sampling {
            c.train.adapt.sampling = match s {
                Sampling::PerPrototype => SamplingVariant::PerPrototypeTopX,
                Sampling::Uniform => SamplingVariant::UniformTopX,
            };
        }
        c.train.validate()?;
        c.synth.validate()?;
        Ok(c)
    }
}

fn path(p: &std::path::Path) -> String {
    p.display().to_string()
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    Ok(match cli.command {
        Command::Gen(a) => {
            let out = run_gen(&a.resolve(false)?)?;
            json!({ "dataset": path(&out.layout.root), "config": path(&out.config) })
        }
        Command::Pretrain(a) => {
            let out = run_pretrain(&a.resolve(false)?)?;
            json!({
                "checkpoint": path(&out.checkpoint),
                "log": path(&out.log),
                "config": path(&out.config),
                "epochs": out.outcome.log.len(),
                "best_epoch": out.outcome.best_epoch,
                "warnings": out.outcome.warnings,
            })
        }
        Command::Adapt(a) => {
            let out = run_adapt(&a.resolve(true)?)?;
            json!({
                "checkpoint": path(&out.checkpoint),
                "log": path(&out.log),
                "diagnostics": path(&out.diagnostics),
                "pseudo_labels": path(&out.pseudo_labels),
                "config": path(&out.config),
                "best_epoch": out.outcome.train.best_epoch,
                "warnings": out.outcome.train.warnings,
            })
        }
        Command::Eval(a) => {
            let out = run_eval(&a.resolve(false)?)?;
            json!({
                "report": path(&out.report_path),
                "ndcg": out.report.ndcg,
                "map": out.report.map,
                "label_accuracy": out.label_accuracy.as_deref().map(path),
                "config": path(&out.config),
            })
        }
        Command::Export(a) => {
            let out = run_export(&a.resolve(false)?)?;
            json!({ "embeddings": path(&out.csv), "rows": out.rows, "config": path(&out.config) })
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
