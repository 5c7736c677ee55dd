//! Training loops for the two stages.
//!
//! Pretraining minimises the source ranking terms only. Adaptation starts
//! from a pretrained checkpoint and, at the start of every epoch, refreshes
//! prototypes and pseudo-labels from the frozen model before taking
//! minibatch steps on the source plus cross-domain terms.
//!
//! Randomness is keyed by `(seed, epoch)` with separate streams for source
//! sampling, cross-domain sampling and shuffling, so a run resumed from a
//! checkpoint and its optimizer state continues bit-exactly, and adaptation
//! with both lambdas at zero follows the pretraining trajectory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{epoch_refresh, source_prototypes, AdaptConfig, AdaptDiagnostics, PseudoLabelTable};
use crate::baselines::{BaselineKind, Preprocess};
use crate::corpus::{ActionLabel, Captions, Domain, Gallery, RelevanceSets, View};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::model::{Checkpoint, ModelConfig, ModelSgd, MultiViewModel};
use crate::ranking::{
    sample_cross_domain_term, sample_source_terms, total_loss, HardNegativePools, LossInputs, LossKind, LossWeights,
    Reduction, TargetAssignment, TermBatch,
};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_CROSS: u64 = 3;

fn stream_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 4) | stream);
    rng
}

/// Hidden widths and output size of every view network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub video_hidden: Vec<usize>,
    pub text_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub action_head: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let r = ModelConfig::reference(1, 1);
        ModelSpec {
            video_hidden: r.video_hidden,
            text_hidden: r.text_hidden,
            embed_dim: r.embed_dim,
            action_head: r.action_head,
        }
    }
}

impl ModelSpec {
    /// Widths used for the synthetic benchmark on a single core.
    pub fn desk() -> Self {
        ModelSpec {
            video_hidden: vec![64],
            text_hidden: vec![64],
            embed_dim: 32,
            action_head: false,
        }
    }

    pub fn config(&self, video_dim: usize, text_dim: usize) -> ModelConfig {
        ModelConfig {
            video_dim,
            text_dim,
            video_hidden: self.video_hidden.clone(),
            text_hidden: self.text_hidden.clone(),
            embed_dim: self.embed_dim,
            action_head: self.action_head,
        }
    }
}

/// Hyperparameters shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub baseline: BaselineKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub margin: f64,
    pub lambda_src_to_tgt: f64,
    pub lambda_tgt_to_src: f64,
    /// Source-loss weight of the verb, noun and action views.
    pub view_weights: [f64; 3],
    pub hard_negative_fraction: f64,
    pub adapt: AdaptConfig,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            model: ModelSpec::default(),
            baseline: BaselineKind::Pds,
            learning_rate: 0.01,
            momentum: 0.9,
            margin: w.margin,
            lambda_src_to_tgt: w.lambda_src_to_tgt,
            lambda_tgt_to_src: w.lambda_tgt_to_src,
            view_weights: w.view_weights,
            hard_negative_fraction: 0.3,
            adapt: AdaptConfig::default(),
            pretrain_epochs: 30,
            adapt_epochs: 30,
            batch_size: 16,
            reduction: Reduction::Mean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_src_to_tgt: self.lambda_src_to_tgt,
            lambda_tgt_to_src: self.lambda_tgt_to_src,
            margin: self.margin,
            view_weights: self.view_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        self.adapt.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.hard_negative_fraction > 0.0 && self.hard_negative_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "hard negative fraction must lie in (0, 1], got {}",
                self.hard_negative_fraction
            )));
        }
        if self.model.embed_dim == 0 || self.model.video_hidden.contains(&0) || self.model.text_hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum buffers and the global epoch counter, saved beside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub epochs_done: usize,
    pub velocities: Vec<Vec<f64>>,
}

pub const OPTIMIZER_MAGIC: &[u8; 4] = b"XMSG";
pub const OPTIMIZER_VERSION: u32 = 1;

impl OptimizerState {
    /// Sidecar path used for the optimizer state of `checkpoint`.
    pub fn sidecar(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("xmsg")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        (|| -> std::io::Result<()> {
            w.write_all(OPTIMIZER_MAGIC)?;
            w.write_u32::<LittleEndian>(OPTIMIZER_VERSION)?;
            w.write_u64::<LittleEndian>(self.epochs_done as u64)?;
            w.write_u32::<LittleEndian>(self.velocities.len() as u32)?;
            for v in &self.velocities {
                w.write_u64::<LittleEndian>(v.len() as u64)?;
                v.iter().try_for_each(|x| w.write_f64::<LittleEndian>(*x))?;
            }
            w.flush()
        })()
        .map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let corrupt = |e: std::io::Error| Error::format("optimizer state", path, format!("corrupt or truncated: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != OPTIMIZER_MAGIC {
            return Err(Error::format("optimizer state", path, "bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        if version != OPTIMIZER_VERSION {
            return Err(Error::Version {
                kind: "optimizer state",
                found: version,
                supported: OPTIMIZER_VERSION,
            });
        }
        let epochs_done = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
        let nets = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        if nets > 16 {
            return Err(Error::format(
                "optimizer state",
                path,
                format!("implausible network count {nets}"),
            ));
        }
        let mut velocities = Vec::with_capacity(nets);
        for _ in 0..nets {
            let n = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
            let mut v = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                v.push(r.read_f64::<LittleEndian>().map_err(corrupt)?);
            }
            velocities.push(v);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(corrupt)? != 0 {
            return Err(Error::format("optimizer state", path, "trailing bytes"));
        }
        Ok(OptimizerState {
            epochs_done,
            velocities,
        })
    }
}

/// Caption queries and labelled videos used for best-epoch selection.
#[derive(Debug, Clone)]
pub struct Validation {
    /// Raw (untransformed) video features of the validation gallery.
    pub gallery: Gallery,
    pub labels: Vec<ActionLabel>,
    pub queries: Captions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Global epoch index, 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Mean weighted loss over the epoch's steps.
    pub loss: f64,
    pub skipped: usize,
    pub validation_ndcg: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,steps,loss,skipped,validation_ndcg";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.12},{},{}",
            self.epoch,
            self.steps,
            self.loss,
            self.skipped,
            self.validation_ndcg.map(|v| format!("{v:.6}")).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub optimizer: OptimizerState,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were kept, when validation picked one.
    pub best_epoch: Option<usize>,
    pub warnings: Vec<String>,
}

/// Pseudo-labels of all three views at the start of one adaptation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLabels {
    /// 1-based index within the adaptation stage.
    pub epoch: usize,
    pub tables: Vec<PseudoLabelTable>,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub train: TrainOutcome,
    /// One row per epoch and view; label accuracy columns are empty.
    pub diagnostics: Vec<AdaptDiagnostics>,
    pub labels: Vec<EpochLabels>,
}

/// Model-ready copies of the galleries and the source relevance sets.
struct Prepared {
    source: Gallery,
    target: Option<Gallery>,
    relevance: RelevanceSets,
}

fn prepare(preprocess: &Preprocess, source: &Gallery, target: Option<&Gallery>) -> Result<Prepared> {
    let relevance = RelevanceSets::build(source)?;
    let source = source.with_video(preprocess.apply(source.video(), Domain::Source)?)?;
    let target = target
        .map(|t| {
            if t.captions().is_some() {
                return Err(Error::Protocol("training received a captioned target gallery".into()));
            }
            t.with_video(preprocess.apply(t.video(), Domain::Target)?)
        })
        .transpose()?;
    Ok(Prepared {
        source,
        target,
        relevance,
    })
}

fn validation_ndcg(model: &MultiViewModel, preprocess: &Preprocess, v: &Validation) -> Result<f64> {
    let g = v
        .gallery
        .with_video(preprocess.apply(v.gallery.video(), Domain::Target)?)?;
    Ok(evaluate_model(model, &g, &v.labels, &v.queries)?.ndcg)
}

struct Trainer<'a> {
    config: &'a TrainConfig,
    weights: LossWeights,
    data: &'a Prepared,
    model: MultiViewModel,
    sgd: ModelSgd,
    preprocess: Preprocess,
    epochs_done: usize,
    log: Vec<EpochLog>,
    best: Option<(f64, usize, MultiViewModel)>,
}

impl<'a> Trainer<'a> {
    fn new(
        config: &'a TrainConfig,
        weights: LossWeights,
        data: &'a Prepared,
        checkpoint: Checkpoint,
        optimizer: Option<OptimizerState>,
    ) -> Result<Self> {
        let mut sgd = ModelSgd::new(&checkpoint.model, config.learning_rate, config.momentum)?;
        let epochs_done = match optimizer {
            Some(state) => {
                sgd.restore_velocities(&state.velocities)?;
                state.epochs_done
            }
            None => 0,
        };
        Ok(Trainer {
            config,
            weights,
            data,
            model: checkpoint.model,
            sgd,
            preprocess: checkpoint.preprocess,
            epochs_done,
            log: Vec::new(),
            best: None,
        })
    }

    fn run_epoch(&mut self, pools: &HardNegativePools, assignments: Option<&[TargetAssignment]>) -> Result<()> {
        let epoch = self.epochs_done;
        let seed = self.config.seed;
        let n = self.data.source.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, epoch, STREAM_SHUFFLE));
        let mut src_rng = stream_rng(seed, epoch, STREAM_SOURCE);
        let mut cross_rng = stream_rng(seed, epoch, STREAM_CROSS);
        let captions = self.data.source.require_captions()?;
        let inputs = LossInputs {
            source_video: self.data.source.video(),
            source_text: captions.text.view(),
            target_video: self.data.target.as_ref().map(|t| t.video()),
        };

        let (mut loss_sum, mut steps, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(self.config.batch_size) {
            let mut terms: Vec<TermBatch> = Vec::new();
            for view in View::ALL {
                terms.extend(sample_source_terms(
                    &mut src_rng,
                    view,
                    chunk,
                    &self.data.relevance,
                    pools,
                ));
                if let Some(assignments) = assignments {
                    let groups = self.data.relevance.view(view);
                    let a = &assignments[view as usize];
                    if self.weights.term_weight(LossKind::SourceToTarget, view) > 0.0 {
                        terms.push(sample_cross_domain_term(
                            &mut cross_rng,
                            LossKind::SourceToTarget,
                            a,
                            groups,
                            chunk,
                            0,
                        )?);
                    }
                    if self.weights.term_weight(LossKind::TargetToSource, view) > 0.0 {
                        terms.push(sample_cross_domain_term(
                            &mut cross_rng,
                            LossKind::TargetToSource,
                            a,
                            groups,
                            &[],
                            chunk.len(),
                        )?);
                    }
                }
            }
            let out = total_loss(&self.model, inputs, &terms, &self.weights, self.config.reduction)?;
            if !out.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            self.sgd.step(&mut self.model, &out.grads)?;
            loss_sum += out.total;
            skipped += out.skipped();
            steps += 1;
        }
        self.epochs_done += 1;
        self.log.push(EpochLog {
            epoch: self.epochs_done,
            steps,
            loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            skipped,
            validation_ndcg: None,
        });
        Ok(())
    }

    fn validate(&mut self, validation: Option<&Validation>) -> Result<()> {
        if let Some(v) = validation {
            let score = validation_ndcg(&self.model, &self.preprocess, v)?;
            self.log.last_mut().expect("epoch logged").validation_ndcg = Some(score);
            if self.best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                self.best = Some((score, self.epochs_done, self.model.clone()));
            }
        }
        Ok(())
    }

    fn finish(self, warnings: Vec<String>) -> TrainOutcome {
        let (model, best_epoch) = match self.best {
            Some((_, epoch, model)) => (model, Some(epoch)),
            None => (self.model, None),
        };
        TrainOutcome {
            checkpoint: Checkpoint {
                model,
                preprocess: self.preprocess,
            },
            optimizer: OptimizerState {
                epochs_done: self.epochs_done,
                velocities: self.sgd.velocities(),
            },
            log: self.log,
            best_epoch,
            warnings,
        }
    }
}

fn hard_negative_pools(config: &TrainConfig, model: &MultiViewModel, data: &Prepared) -> Result<HardNegativePools> {
    if config.hard_negative_fraction >= 1.0 {
        return Ok(HardNegativePools::uniform());
    }
    let (_, protos) = source_prototypes(model, &data.source, &data.relevance)?;
    HardNegativePools::from_prototypes(
        &protos[View::Action as usize],
        &data.relevance,
        config.hard_negative_fraction,
    )
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    log::warn!("{msg}");
    warnings.push(msg);
}

/// Fresh model plus preprocessing fitted on the source and (for PDS/CORAL)
/// the uncaptioned target videos.
pub fn initial_checkpoint(config: &TrainConfig, source: &Gallery, target: Option<&Gallery>) -> Result<Checkpoint> {
    let captions = source.require_captions()?;
    let preprocess = match (config.baseline, target) {
        (BaselineKind::None, _) => Preprocess::None,
        (kind, Some(t)) => Preprocess::fit(kind, source.video(), t.video())?,
        (kind, None) => {
            return Err(Error::Config(format!(
                "baseline {kind:?} needs the target gallery to fit its statistics"
            )))
        }
    };
    let mut rng = stream_rng(config.seed, 0, STREAM_INIT);
    let model = MultiViewModel::new(config.model.config(source.video_dim(), captions.text_dim()), &mut rng)?;
    Ok(Checkpoint { model, preprocess })
}

/// Source-only training. `resume` continues a previous run up to
/// `pretrain_epochs` total epochs.
pub fn pretrain(
    config: &TrainConfig,
    source: &Gallery,
    target: Option<&Gallery>,
    resume: Option<(Checkpoint, OptimizerState)>,
    validation: Option<&Validation>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut warnings = Vec::new();
    if config.lambda_src_to_tgt != 0.0 || config.lambda_tgt_to_src != 0.0 {
        // expected with a shared config, so not worth a warning on stderr
        log::info!("pretraining ignores the cross-domain lambdas");
        warnings.push("pretraining ignores the cross-domain lambdas".into());
    }
    let weights = LossWeights {
        lambda_src_to_tgt: 0.0,
        lambda_tgt_to_src: 0.0,
        ..config.loss_weights()
    };
    let resuming = resume.is_some();
    let (checkpoint, optimizer) = match resume {
        Some((c, o)) => (c, Some(o)),
        None => (initial_checkpoint(config, source, target)?, None),
    };
    let data = prepare(&checkpoint.preprocess, source, target)?;
    let mut trainer = Trainer::new(config, weights, &data, checkpoint, optimizer)?;
    if resuming && trainer.epochs_done >= config.pretrain_epochs {
        warn(
            &mut warnings,
            format!("checkpoint already has {} epochs; nothing to do", trainer.epochs_done),
        );
    }
    while trainer.epochs_done < config.pretrain_epochs {
        let pools = hard_negative_pools(config, &trainer.model, &data)?;
        trainer.run_epoch(&pools, None)?;
        trainer.validate(validation)?;
        log::info!(
            "pretrain epoch {}: loss {:.6}",
            trainer.epochs_done,
            trainer.log.last().unwrap().loss
        );
    }
    Ok(trainer.finish(warnings))
}

/// Adaptation for `adapt_epochs` epochs from `init`. `optimizer` carries
/// momentum and the epoch counter over from pretraining when available.
pub fn adapt(
    config: &TrainConfig,
    source: &Gallery,
    target: &Gallery,
    init: Checkpoint,
    optimizer: Option<OptimizerState>,
    validation: Option<&Validation>,
) -> Result<AdaptOutcome> {
    config.validate()?;
    let mut warnings = Vec::new();
    if init.preprocess.kind() != config.baseline {
        warn(
            &mut warnings,
            format!(
                "checkpoint was trained with baseline {:?}; keeping it instead of {:?}",
                init.preprocess.kind(),
                config.baseline
            ),
        );
    }
    let data = prepare(&init.preprocess, source, Some(target))?;
    let prepared_target = data.target.as_ref().expect("target prepared");
    let mut trainer = Trainer::new(config, config.loss_weights(), &data, init, optimizer)?;
    let mut diagnostics = Vec::new();
    let mut labels = Vec::new();
    for e in 1..=config.adapt_epochs {
        let refresh = epoch_refresh(
            &trainer.model,
            &data.source,
            prepared_target,
            &data.relevance,
            &config.adapt,
        )?;
        let tables: Vec<PseudoLabelTable> = View::ALL.iter().map(|&v| refresh.view(v).table.clone()).collect();
        for t in &tables {
            diagnostics.push(AdaptDiagnostics::from_table(t, e, None, config.adapt.sample_percent)?);
        }
        let assignments: Vec<TargetAssignment> = tables.iter().map(TargetAssignment::from_table).collect();
        let pools = if config.hard_negative_fraction >= 1.0 {
            HardNegativePools::uniform()
        } else {
            HardNegativePools::from_prototypes(
                &refresh.view(View::Action).prototypes,
                &data.relevance,
                config.hard_negative_fraction,
            )?
        };
        labels.push(EpochLabels { epoch: e, tables });
        trainer.run_epoch(&pools, Some(&assignments))?;
        trainer.validate(validation)?;
        log::info!("adapt epoch {e}: loss {:.6}", trainer.log.last().unwrap().loss);
    }
    Ok(AdaptOutcome {
        train: trainer.finish(warnings),
        diagnostics,
        labels,
    })
}

/// Fills the accuracy columns of adaptation diagnostics from held-out
/// target labels aligned with target rows.
pub fn label_accuracy_history(
    labels: &[EpochLabels],
    truth: &[ActionLabel],
    sample_percent: f64,
) -> Result<Vec<AdaptDiagnostics>> {
    let mut out = Vec::new();
    for epoch in labels {
        for t in &epoch.tables {
            out.push(AdaptDiagnostics::from_table(
                t,
                epoch.epoch,
                Some(truth),
                sample_percent,
            )?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, Shift, SynthSpec};

    fn tiny() -> (SynthSpec, TrainConfig) {
        let spec = SynthSpec {
            num_verbs: 3,
            num_nouns: 3,
            items_per_action: 4,
            feature_dim: 8,
            text_dim: 6,
            ..SynthSpec::default()
        };
        let config = TrainConfig {
            model: ModelSpec {
                video_hidden: vec![12],
                text_hidden: vec![10],
                embed_dim: 6,
                action_head: false,
            },
            pretrain_epochs: 2,
            adapt_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        (spec, config)
    }

    #[test]
    fn resume_reproduces_next_epoch_bit_exactly() {
        let (spec, config) = tiny();
        let data = generate(&spec).unwrap();
        let full = pretrain(&config, &data.source, Some(&data.target), None, None).unwrap();
        let one = TrainConfig {
            pretrain_epochs: 1,
            ..config.clone()
        };
        let first = pretrain(&one, &data.source, Some(&data.target), None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.xmsg");
        first.optimizer.save(&path).unwrap();
        let state = OptimizerState::load(&path).unwrap();
        assert_eq!(state, first.optimizer);
        let resumed = pretrain(
            &config,
            &data.source,
            Some(&data.target),
            Some((first.checkpoint, state)),
            None,
        )
        .unwrap();
        assert_eq!(resumed.log.len(), 1);
        assert_eq!(resumed.log[0].loss.to_bits(), full.log[1].loss.to_bits());
        assert_eq!(resumed.checkpoint, full.checkpoint);
    }

    #[test]
    fn zero_lambda_adaptation_follows_pretraining() {
        let (spec, config) = tiny();
        let data = generate(&spec).unwrap();
        let one = TrainConfig {
            pretrain_epochs: 1,
            ..config.clone()
        };
        let first = pretrain(&one, &data.source, Some(&data.target), None, None).unwrap();
        let continued = pretrain(&config, &data.source, Some(&data.target), None, None).unwrap();
        let zero = TrainConfig {
            lambda_src_to_tgt: 0.0,
            lambda_tgt_to_src: 0.0,
            adapt_epochs: 1,
            ..config.clone()
        };
        let adapted = adapt(
            &zero,
            &data.source,
            &data.target,
            first.checkpoint.clone(),
            Some(first.optimizer.clone()),
            None,
        )
        .unwrap();
        assert_eq!(adapted.train.checkpoint, continued.checkpoint);
        assert_eq!(adapted.train.log[0].loss.to_bits(), continued.log[1].loss.to_bits());
        // labels were still computed
        assert_eq!(adapted.labels.len(), 1);
        assert_eq!(adapted.diagnostics.len(), 3);

        let with_lambda = adapt(
            &config,
            &data.source,
            &data.target,
            first.checkpoint,
            Some(first.optimizer),
            None,
        )
        .unwrap();
        assert_ne!(with_lambda.train.checkpoint, continued.checkpoint);
    }

    #[test]
    fn pretrain_warns_about_lambdas() {
        let (spec, config) = tiny();
        let data = generate(&spec).unwrap();
        let out = pretrain(&config, &data.source, Some(&data.target), None, None).unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("lambdas")));
        let quiet = TrainConfig {
            lambda_src_to_tgt: 0.0,
            lambda_tgt_to_src: 0.0,
            ..config
        };
        assert!(pretrain(&quiet, &data.source, Some(&data.target), None, None)
            .unwrap()
            .warnings
            .is_empty());
    }

    #[test]
    fn pds_needs_target_and_captioned_target_is_refused() {
        let (spec, config) = tiny();
        let data = generate(&spec).unwrap();
        assert!(matches!(
            pretrain(&config, &data.source, None, None, None),
            Err(Error::Config(_))
        ));
        let err = pretrain(&config, &data.source, Some(&data.source), None, None).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let none = TrainConfig {
            baseline: BaselineKind::None,
            ..config
        };
        assert!(pretrain(&none, &data.source, None, None, None).is_ok());
    }

    #[test]
    fn validation_keeps_best_epoch() {
        let (spec, config) = tiny();
        let data = generate(&spec).unwrap();
        let val_data = generate(&SynthSpec { seed: 9, ..spec }).unwrap();
        let validation = Validation {
            labels: val_data.truth.labels_for(&val_data.target).unwrap(),
            queries: val_data.truth.captions().clone(),
            gallery: val_data.target,
        };
        let out = pretrain(&config, &data.source, Some(&data.target), None, Some(&validation)).unwrap();
        let scores: Vec<f64> = out.log.iter().map(|l| l.validation_ndcg.unwrap()).collect();
        let best = out.best_epoch.unwrap();
        assert!(scores.iter().all(|&s| s <= scores[best - 1]));
        assert_eq!(out.optimizer.epochs_done, 2);
    }

    #[test]
    fn identity_shift_labels_mostly_right_after_pretraining() {
        let (spec, config) = tiny();
        let spec = SynthSpec {
            shift: Shift::Identity,
            ..spec
        };
        let config = TrainConfig {
            pretrain_epochs: 5,
            adapt_epochs: 1,
            ..config
        };
        let data = generate(&spec).unwrap();
        let pre = pretrain(&config, &data.source, Some(&data.target), None, None).unwrap();
        let out = adapt(
            &config,
            &data.source,
            &data.target,
            pre.checkpoint,
            Some(pre.optimizer),
            None,
        )
        .unwrap();
        let truth = data.truth.labels_for(&data.target).unwrap();
        let hist = label_accuracy_history(&out.labels, &truth, config.adapt.sample_percent).unwrap();
        let verb = hist.iter().find(|d| d.view == View::Verb).unwrap();
        assert!(verb.label_accuracy_all.unwrap() > 1.0 / 3.0, "{verb:?}");
    }
}
