//! Triplet ranking objectives.
//!
//! Every objective is a weighted sum of hinge terms
//! `max(γ + d(a, p) - d(a, n), 0)` over triplets drawn from relevance sets.
//! Source terms pair a video or caption anchor with relevant/irrelevant
//! videos or captions of the source gallery; cross-domain terms are
//! video-only and pair source anchors with pseudo-labelled target videos or
//! the reverse.
//!
//! Embeddings are unit-norm, so the cosine distance reduces to `1 - a·b`;
//! that form is used for the loss and its gradient.

mod sampling;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, View};
use crate::error::{Error, Result};
use crate::model::{Modality, ModelGrads, MultiViewForward, MultiViewModel};

pub use sampling::{
    enumerate_cross_domain_triplets, enumerate_source_triplets, sample_cross_domain_term, sample_source_terms,
    HardNegativePools, TargetAssignment,
};

/// `max(γ + d⁺ - d⁻, 0)`.
#[inline]
pub fn hinge(d_pos: f64, d_neg: f64, gamma: f64) -> f64 {
    (gamma + d_pos - d_neg).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Video anchor, caption positive/negative.
    VideoToText,
    /// Video anchor, video positive/negative.
    VideoToVideo,
    /// Caption anchor, video positive/negative.
    TextToVideo,
    /// Caption anchor, caption positive/negative.
    TextToText,
    /// Source video anchor, pseudo-labelled target positive/negative.
    SourceToTarget,
    /// Selected target video anchor, source positive/negative.
    TargetToSource,
}

impl LossKind {
    pub const SOURCE: [LossKind; 4] = [
        LossKind::VideoToText,
        LossKind::VideoToVideo,
        LossKind::TextToVideo,
        LossKind::TextToText,
    ];

    pub fn is_cross_domain(self) -> bool {
        matches!(self, LossKind::SourceToTarget | LossKind::TargetToSource)
    }

    /// Modalities of (anchor, positive/negative) and the domains involved.
    fn endpoints(self) -> ((Domain, Modality), (Domain, Modality)) {
        use Domain::*;
        use Modality::*;
        match self {
            LossKind::VideoToText => ((Source, Video), (Source, Text)),
            LossKind::VideoToVideo => ((Source, Video), (Source, Video)),
            LossKind::TextToVideo => ((Source, Text), (Source, Video)),
            LossKind::TextToText => ((Source, Text), (Source, Text)),
            LossKind::SourceToTarget => ((Source, Video), (Target, Video)),
            LossKind::TargetToSource => ((Target, Video), (Source, Video)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::VideoToText => "video_to_text",
            LossKind::VideoToVideo => "video_to_video",
            LossKind::TextToVideo => "text_to_video",
            LossKind::TextToText => "text_to_text",
            LossKind::SourceToTarget => "source_to_target",
            LossKind::TargetToSource => "target_to_source",
        }
    }
}

/// One side of a triplet: a gallery row seen through one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub domain: Domain,
    pub modality: Modality,
    /// Row in that domain's gallery.
    pub row: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: Endpoint,
    pub positive: Endpoint,
    pub negative: Endpoint,
    pub view: View,
}

impl Triplet {
    pub(crate) fn of_kind(kind: LossKind, view: View, anchor: usize, positive: usize, negative: usize) -> Self {
        let ((ad, am), (od, om)) = kind.endpoints();
        Triplet {
            anchor: Endpoint {
                domain: ad,
                modality: am,
                row: anchor,
            },
            positive: Endpoint {
                domain: od,
                modality: om,
                row: positive,
            },
            negative: Endpoint {
                domain: od,
                modality: om,
                row: negative,
            },
            view,
        }
    }
}

/// Triplets of one loss kind in one view, with the anchors that had to be
/// skipped for lack of a positive or a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct TermBatch {
    pub kind: LossKind,
    pub view: View,
    pub weight: f64,
    pub triplets: Vec<Triplet>,
    pub skipped: usize,
}

impl TermBatch {
    pub fn new(kind: LossKind, view: View) -> Self {
        TermBatch {
            kind,
            view,
            weight: 1.0,
            triplets: Vec::new(),
            skipped: 0,
        }
    }

    pub fn weighted(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Plain sum of hinge terms.
    Sum,
    /// Each term averaged over its triplets.
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_src_to_tgt: f64,
    pub lambda_tgt_to_src: f64,
    pub margin: f64,
    /// Source-loss weight of the verb, noun and action views.
    pub view_weights: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_src_to_tgt: 0.1,
            lambda_tgt_to_src: 0.1,
            margin: 0.1,
            view_weights: [1.0; 3],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_src_to_tgt, self.lambda_tgt_to_src, self.margin]
            .into_iter()
            .chain(self.view_weights);
        if all.clone().any(|w| !w.is_finite() || w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }

    pub fn view_weight(&self, view: View) -> f64 {
        match view {
            View::Verb => self.view_weights[0],
            View::Noun => self.view_weights[1],
            View::Action => self.view_weights[2],
        }
    }

    /// Overall multiplier of a term of `kind` in `view`.
    pub fn term_weight(&self, kind: LossKind, view: View) -> f64 {
        let w = self.view_weight(view);
        match kind {
            LossKind::SourceToTarget => w * self.lambda_src_to_tgt,
            LossKind::TargetToSource => w * self.lambda_tgt_to_src,
            _ => w,
        }
    }
}

/// Raw (pre-transform) features the loss may touch.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub source_video: ArrayView2<'a, f64>,
    pub source_text: ArrayView2<'a, f64>,
    pub target_video: Option<ArrayView2<'a, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStat {
    pub kind: LossKind,
    pub view: View,
    pub weight: f64,
    pub triplets: usize,
    pub skipped: usize,
    /// Triplets violating the margin.
    pub active: usize,
    /// Reduced, unweighted loss of this term.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// `Σ weight · reduced term loss`.
    pub total: f64,
    pub grads: ModelGrads,
    pub terms: Vec<TermStat>,
}

impl LossOutput {
    pub fn skipped(&self) -> usize {
        self.terms.iter().map(|t| t.skipped).sum()
    }
}

struct Gathered {
    rows: Vec<usize>,
    index: HashMap<usize, usize>,
    forward: Option<MultiViewForward>,
}

impl Gathered {
    fn new() -> Self {
        Gathered {
            rows: Vec::new(),
            index: HashMap::new(),
            forward: None,
        }
    }

    fn add(&mut self, row: usize) {
        let next = self.rows.len();
        self.index.entry(row).or_insert_with(|| {
            self.rows.push(row);
            next
        });
    }
}

fn slot(domain: Domain, modality: Modality) -> usize {
    match (domain, modality) {
        (Domain::Source, Modality::Video) => 0,
        (Domain::Source, Modality::Text) => 1,
        (Domain::Target, Modality::Video) => 2,
        (Domain::Target, Modality::Text) => 3,
    }
}

/// Evaluates weighted triplet terms and their parameter gradients on a
/// snapshot of `model`. Each referenced row is embedded once.
pub fn evaluate_terms(
    model: &MultiViewModel,
    inputs: LossInputs<'_>,
    terms: &[TermBatch],
    margin: f64,
    reduction: Reduction,
) -> Result<LossOutput> {
    let mut sets: [Gathered; 4] = std::array::from_fn(|_| Gathered::new());
    for term in terms {
        for t in &term.triplets {
            for e in [t.anchor, t.positive, t.negative] {
                sets[slot(e.domain, e.modality)].add(e.row);
            }
        }
    }
    for (s, set) in sets.iter_mut().enumerate() {
        if set.rows.is_empty() {
            continue;
        }
        let (features, modality) = match s {
            0 => (inputs.source_video, Modality::Video),
            1 => (inputs.source_text, Modality::Text),
            2 => (
                inputs
                    .target_video
                    .ok_or_else(|| Error::Config("cross-domain term without target features".into()))?,
                Modality::Video,
            ),
            _ => {
                return Err(Error::Protocol(
                    "target captions are never used in training losses".into(),
                ))
            }
        };
        if let Some(&bad) = set.rows.iter().find(|&&r| r >= features.nrows()) {
            return Err(Error::DimMismatch {
                context: "triplet row",
                expected: features.nrows(),
                actual: bad,
            });
        }
        let batch = features.select(Axis(0), &set.rows);
        set.forward = Some(model.forward(batch.view(), modality)?);
    }

    let mut upstream: Vec<_> = sets
        .iter()
        .map(|s| s.forward.as_ref().map(|f| f.zero_upstream()))
        .collect();
    let mut total = 0.0;
    let mut stats = Vec::with_capacity(terms.len());
    for term in terms {
        let n = term.triplets.len();
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if n > 0 => 1.0 / n as f64,
            Reduction::Mean => 0.0,
        };
        let coeff = term.weight * scale;
        let mut raw = 0.0;
        let mut active = 0;
        for t in &term.triplets {
            let locate = |e: Endpoint| {
                let s = slot(e.domain, e.modality);
                (s, sets[s].index[&e.row])
            };
            let (sa, ra) = locate(t.anchor);
            let (sp, rp) = locate(t.positive);
            let (sn, rn) = locate(t.negative);
            let emb = |s: usize| sets[s].forward.as_ref().expect("gathered").embeddings(t.view);
            let (ea, ep, en) = (emb(sa), emb(sp), emb(sn));
            let (a, p, q) = (ea.row(ra), ep.row(rp), en.row(rn));
            let d_pos = 1.0 - a.dot(&p);
            let d_neg = 1.0 - a.dot(&q);
            let h = hinge(d_pos, d_neg, margin);
            if h <= 0.0 {
                continue;
            }
            raw += h;
            active += 1;
            if coeff == 0.0 {
                continue;
            }
            // ∂h/∂a = n - p, ∂h/∂p = -a, ∂h/∂n = a
            let a = a.to_owned();
            let (p, q) = (p.to_owned(), q.to_owned());
            {
                let g = upstream[sa].as_mut().expect("gathered").get_mut(t.view);
                let mut row = g.row_mut(ra);
                row.scaled_add(coeff, &q);
                row.scaled_add(-coeff, &p);
            }
            upstream[sp]
                .as_mut()
                .expect("gathered")
                .get_mut(t.view)
                .row_mut(rp)
                .scaled_add(-coeff, &a);
            upstream[sn]
                .as_mut()
                .expect("gathered")
                .get_mut(t.view)
                .row_mut(rn)
                .scaled_add(coeff, &a);
        }
        let reduced = raw * scale;
        total += term.weight * reduced;
        stats.push(TermStat {
            kind: term.kind,
            view: term.view,
            weight: term.weight,
            triplets: n,
            skipped: term.skipped,
            active,
            loss: reduced,
        });
    }

    let mut grads = ModelGrads::zeros(model);
    for (set, up) in sets.iter().zip(&upstream) {
        if let (Some(fwd), Some(up)) = (&set.forward, up) {
            model.backward(fwd, up, &mut grads)?;
        }
    }
    Ok(LossOutput {
        total,
        grads,
        terms: stats,
    })
}

/// Source cross-modal and within-modal terms of one view.
pub fn source_loss(
    model: &MultiViewModel,
    source_video: ArrayView2<'_, f64>,
    source_text: ArrayView2<'_, f64>,
    terms: &[TermBatch],
    margin: f64,
    reduction: Reduction,
) -> Result<LossOutput> {
    if let Some(t) = terms.iter().find(|t| t.kind.is_cross_domain()) {
        return Err(Error::Config(format!("{} is not a source term", t.kind.name())));
    }
    evaluate_terms(
        model,
        LossInputs {
            source_video,
            source_text,
            target_video: None,
        },
        terms,
        margin,
        reduction,
    )
}

/// Video-only cross-domain terms; text networks receive no gradient.
pub fn cross_domain_loss(
    model: &MultiViewModel,
    source_video: ArrayView2<'_, f64>,
    target_video: ArrayView2<'_, f64>,
    terms: &[TermBatch],
    margin: f64,
    reduction: Reduction,
) -> Result<LossOutput> {
    if let Some(t) = terms.iter().find(|t| !t.kind.is_cross_domain()) {
        return Err(Error::Config(format!("{} is not a cross-domain term", t.kind.name())));
    }
    let no_text = Array2::<f64>::zeros((0, model.config().text_dim));
    evaluate_terms(
        model,
        LossInputs {
            source_video,
            source_text: no_text.view(),
            target_video: Some(target_video),
        },
        terms,
        margin,
        reduction,
    )
}

/// Weighted sum of all source and cross-domain terms across views.
/// Each term's weight is replaced by `weights.term_weight(kind, view)`.
pub fn total_loss(
    model: &MultiViewModel,
    inputs: LossInputs<'_>,
    terms: &[TermBatch],
    weights: &LossWeights,
    reduction: Reduction,
) -> Result<LossOutput> {
    weights.validate()?;
    let weighted: Vec<TermBatch> = terms
        .iter()
        .filter(|t| weights.term_weight(t.kind, t.view) > 0.0 || !t.kind.is_cross_domain())
        .map(|t| t.clone().weighted(weights.term_weight(t.kind, t.view)))
        .collect();
    evaluate_terms(model, inputs, &weighted, weights.margin, reduction)
}
