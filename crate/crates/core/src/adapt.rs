//! Pseudo-labelling of target videos.
//!
//! Each epoch, in every view's video embedding space:
//!
//! 1. a prototype (barycentre) is computed for every source relevance group;
//! 2. each target video inherits the group of its nearest source video
//!    (or of its nearest prototype, in the `NearestPrototype` variant);
//! 3. its confidence is `exp(-d(f(t), μ))` for the inherited group's
//!    prototype `μ` (or for the nearest source video, `Neighbour` variant);
//! 4. the top `x%` most confident targets are selected, per prototype by
//!    default, so every group that received targets keeps at least one.
//!
//! Distances are cosine distances. Ties between equally near source videos
//! or prototypes go to the lowest index.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::{ActionLabel, Gallery, Label, RelevanceGroups, RelevanceSets, View};
use crate::error::{Error, Result};
use crate::linalg::{DenseVector, NORM_EPS};
use crate::model::{Modality, MultiViewModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabellingVariant {
    #[default]
    NearestSource,
    NearestPrototype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceVariant {
    #[default]
    Prototype,
    Neighbour,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingVariant {
    #[default]
    PerPrototypeTopX,
    UniformTopX,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Percentage of targets kept, in `(0, 100]`.
    pub sample_percent: f64,
    pub labelling: LabellingVariant,
    pub confidence: ConfidenceVariant,
    pub sampling: SamplingVariant,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            sample_percent: 60.0,
            labelling: LabellingVariant::default(),
            confidence: ConfidenceVariant::default(),
            sampling: SamplingVariant::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_percent > 0.0 && self.sample_percent <= 100.0) {
            return Err(Error::Config(format!(
                "sample percent must lie in (0, 100], got {}",
                self.sample_percent
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub view: View,
    pub label: Label,
    pub centroid: DenseVector,
    pub member_count: usize,
    /// Centroid norm below threshold (e.g. members cancel out).
    pub degenerate: bool,
}

/// Mean embedding of each relevance group; `embeddings` rows are source rows.
pub fn compute_prototypes(embeddings: ArrayView2<'_, f64>, groups: &RelevanceGroups) -> Result<Vec<Prototype>> {
    if embeddings.nrows() != groups.num_items() {
        return Err(Error::CountMismatch {
            left_name: "source embeddings",
            left: embeddings.nrows(),
            right_name: "relevance items",
            right: groups.num_items(),
        });
    }
    let mut protos = Vec::with_capacity(groups.num_groups());
    for g in 0..groups.num_groups() {
        let members = groups.members(g);
        if members.is_empty() {
            log::warn!("{} group {} has no members; skipped", groups.view(), groups.label(g));
            continue;
        }
        let mean = embeddings
            .select(Axis(0), members)
            .mean_axis(Axis(0))
            .expect("non-empty group");
        let norm = mean.dot(&mean).sqrt();
        let degenerate = norm < NORM_EPS;
        if degenerate {
            log::warn!(
                "{} prototype {} is degenerate (norm {norm:e})",
                groups.view(),
                groups.label(g)
            );
        }
        protos.push(Prototype {
            view: groups.view(),
            label: groups.label(g),
            centroid: DenseVector::new(mean.to_vec())?,
            member_count: members.len(),
            degenerate,
        });
    }
    Ok(protos)
}

pub fn confidence_from_distance(d: f64) -> f64 {
    (-d).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelEntry {
    /// Row in the target gallery.
    pub target: usize,
    /// Row of the nearest source video.
    pub nearest_source: usize,
    pub source_distance: f64,
    /// Inherited group index into the view's [`RelevanceGroups`].
    pub group: usize,
    pub label: Label,
    /// Distance to the inherited group's prototype (`None` if degenerate).
    pub prototype_distance: Option<f64>,
    pub confidence: f64,
    pub selected: bool,
}

/// Pseudo-labels of every target video in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelTable {
    pub view: View,
    pub entries: Vec<PseudoLabelEntry>,
    pub num_groups: usize,
    pub distance_evaluations: u64,
}

fn unit_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n >= NORM_EPS {
            row /= n;
        }
    }
    out
}

/// Cosine distances between all rows of `a` and `b`; zero rows get distance 1.
pub fn cosine_distance_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let sims = unit_rows(a).dot(&unit_rows(b).t());
    sims.mapv(|s| 1.0 - s.clamp(-1.0, 1.0))
}

fn argmin(row: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in row.enumerate() {
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

/// Labels every target by its nearest source video or prototype and scores
/// its confidence. Nothing is selected yet.
pub fn pseudo_label(
    target_embeddings: ArrayView2<'_, f64>,
    source_embeddings: ArrayView2<'_, f64>,
    prototypes: &[Prototype],
    groups: &RelevanceGroups,
    labelling: LabellingVariant,
    confidence: ConfidenceVariant,
) -> Result<PseudoLabelTable> {
    if source_embeddings.nrows() == 0 {
        return Err(Error::Empty("source gallery"));
    }
    if source_embeddings.nrows() != groups.num_items() {
        return Err(Error::CountMismatch {
            left_name: "source embeddings",
            left: source_embeddings.nrows(),
            right_name: "relevance items",
            right: groups.num_items(),
        });
    }
    if prototypes.len() != groups.num_groups() {
        return Err(Error::CountMismatch {
            left_name: "prototypes",
            left: prototypes.len(),
            right_name: "relevance groups",
            right: groups.num_groups(),
        });
    }
    let to_source = cosine_distance_matrix(target_embeddings, source_embeddings);
    let centroids = Array2::from_shape_fn((prototypes.len(), source_embeddings.ncols()), |(p, j)| {
        prototypes[p].centroid.as_slice()[j]
    });
    let to_proto = cosine_distance_matrix(target_embeddings, centroids.view());
    let evaluations = (to_source.len() + to_proto.len()) as u64;

    let mut entries = Vec::with_capacity(target_embeddings.nrows());
    for t in 0..target_embeddings.nrows() {
        let (nearest_source, source_distance) = argmin(to_source.row(t).iter().copied()).expect("non-empty source");
        let group = match labelling {
            LabellingVariant::NearestSource => groups.group_of(nearest_source),
            LabellingVariant::NearestPrototype => {
                argmin(
                    to_proto
                        .row(t)
                        .iter()
                        .zip(prototypes)
                        .map(|(&d, p)| if p.degenerate { f64::INFINITY } else { d }),
                )
                .map(|(g, _)| g)
                .expect("non-empty prototypes")
            }
        };
        let prototype_distance = (!prototypes[group].degenerate).then(|| to_proto[[t, group]]);
        let conf = match confidence {
            ConfidenceVariant::Prototype => match prototype_distance {
                Some(d) => confidence_from_distance(d),
                None => {
                    log::warn!("target {t}: inherited prototype is degenerate; confidence 0");
                    0.0
                }
            },
            ConfidenceVariant::Neighbour => confidence_from_distance(source_distance),
        };
        entries.push(PseudoLabelEntry {
            target: t,
            nearest_source,
            source_distance,
            group,
            label: groups.label(group),
            prototype_distance,
            confidence: conf,
            selected: false,
        });
    }
    Ok(PseudoLabelTable {
        view: groups.view(),
        entries,
        num_groups: groups.num_groups(),
        distance_evaluations: evaluations,
    })
}

/// Number kept out of `n` at `percent`: `max(1, floor(percent·n/100))` for `n > 0`.
pub fn kept_count(n: usize, percent: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // the epsilon absorbs representation error such as 0.3 * 10 = 2.9999...
    let k = (percent * n as f64 / 100.0 + 1e-9).floor() as usize;
    k.clamp(1, n)
}

fn select_top(entries: &mut [PseudoLabelEntry], candidates: &mut [usize], percent: f64) {
    candidates.sort_by(|&a, &b| {
        entries[b]
            .confidence
            .total_cmp(&entries[a].confidence)
            .then(entries[a].target.cmp(&entries[b].target))
    });
    for &i in &candidates[..kept_count(candidates.len(), percent)] {
        entries[i].selected = true;
    }
}

/// Sets the `selected` flags. Ranking is by confidence, descending; ties go
/// to the lower target row.
pub fn select_targets(table: &mut PseudoLabelTable, percent: f64, sampling: SamplingVariant) -> Result<()> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!(
            "sample percent must lie in (0, 100], got {percent}"
        )));
    }
    for e in &mut table.entries {
        e.selected = false;
    }
    match sampling {
        SamplingVariant::PerPrototypeTopX => {
            let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); table.num_groups];
            for (i, e) in table.entries.iter().enumerate() {
                by_group[e.group].push(i);
            }
            for mut members in by_group {
                if !members.is_empty() {
                    select_top(&mut table.entries, &mut members, percent);
                }
            }
        }
        SamplingVariant::UniformTopX => {
            let mut all: Vec<usize> = (0..table.entries.len()).collect();
            if !all.is_empty() {
                select_top(&mut table.entries, &mut all, percent);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelAccuracy {
    pub all: f64,
    /// `None` when nothing is selected.
    pub selected: Option<f64>,
}

/// Fraction of targets whose inherited label matches the held-out truth.
/// `truth` is aligned with target rows.
pub fn label_accuracy(table: &PseudoLabelTable, truth: &[ActionLabel]) -> Result<LabelAccuracy> {
    if truth.len() != table.entries.len() {
        return Err(Error::MissingTruth(format!(
            "{} truth labels for {} targets",
            truth.len(),
            table.entries.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Empty("pseudo-label table"));
    }
    let (mut correct, mut sel, mut sel_correct) = (0usize, 0usize, 0usize);
    for e in &table.entries {
        let ok = table.view.label(truth[e.target]) == e.label;
        correct += ok as usize;
        if e.selected {
            sel += 1;
            sel_correct += ok as usize;
        }
    }
    Ok(LabelAccuracy {
        all: correct as f64 / truth.len() as f64,
        selected: (sel > 0).then(|| sel_correct as f64 / sel as f64),
    })
}

/// Share of prototypes with at least one selected target.
pub fn label_diversity(table: &PseudoLabelTable) -> f64 {
    if table.num_groups == 0 {
        return 0.0;
    }
    let mut hit = vec![false; table.num_groups];
    for e in table.entries.iter().filter(|e| e.selected) {
        hit[e.group] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / table.num_groups as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRefresh {
    pub prototypes: Vec<Prototype>,
    pub table: PseudoLabelTable,
}

/// Prototypes and pseudo-labels of all views for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Refresh {
    views: Vec<ViewRefresh>,
}

impl Refresh {
    pub fn view(&self, view: View) -> &ViewRefresh {
        &self.views[view as usize]
    }

    pub fn distance_evaluations(&self) -> u64 {
        self.views.iter().map(|v| v.table.distance_evaluations).sum()
    }
}

/// Source video embeddings of every view plus their prototypes.
pub fn source_prototypes(
    model: &MultiViewModel,
    source: &Gallery,
    relevance: &RelevanceSets,
) -> Result<(crate::model::MultiViewForward, Vec<Vec<Prototype>>)> {
    let fwd = model.forward(source.video(), Modality::Video)?;
    let protos = View::ALL
        .iter()
        .map(|&v| compute_prototypes(fwd.embeddings(v), relevance.view(v)))
        .collect::<Result<Vec<_>>>()?;
    Ok((fwd, protos))
}

/// Recomputes embeddings, prototypes, labels, confidences and selections for
/// every view from a frozen model. `source` and `target` hold the features
/// the model consumes (after any preprocessing).
pub fn epoch_refresh(
    model: &MultiViewModel,
    source: &Gallery,
    target: &Gallery,
    relevance: &RelevanceSets,
    config: &AdaptConfig,
) -> Result<Refresh> {
    config.validate()?;
    if target.captions().is_some() {
        return Err(Error::Protocol(
            "pseudo-labelling received a captioned target gallery".into(),
        ));
    }
    let (source_fwd, protos) = source_prototypes(model, source, relevance)?;
    let target_fwd = model.forward(target.video(), Modality::Video)?;
    let mut views = Vec::with_capacity(3);
    for (view, prototypes) in View::ALL.into_iter().zip(protos) {
        let mut table = pseudo_label(
            target_fwd.embeddings(view),
            source_fwd.embeddings(view),
            &prototypes,
            relevance.view(view),
            config.labelling,
            config.confidence,
        )?;
        select_targets(&mut table, config.sample_percent, config.sampling)?;
        views.push(ViewRefresh { prototypes, table });
    }
    Ok(Refresh { views })
}

/// One row of the per-epoch diagnostics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptDiagnostics {
    pub view: View,
    pub epoch: usize,
    pub label_accuracy_all: Option<f64>,
    pub label_accuracy_selected: Option<f64>,
    pub label_diversity: f64,
    /// Diversity the same labels would give under `UniformTopX`.
    pub label_diversity_uniform: f64,
    pub mean_confidence: f64,
    pub selected_count: usize,
}

impl AdaptDiagnostics {
    pub const CSV_HEADER: &'static str =
        "view,epoch,label_accuracy_all,label_accuracy_selected,label_diversity,label_diversity_uniform,mean_confidence,selected_count";

    /// `sample_percent` is the rate the table was selected at.
    pub fn from_table(
        table: &PseudoLabelTable,
        epoch: usize,
        truth: Option<&[ActionLabel]>,
        sample_percent: f64,
    ) -> Result<Self> {
        let acc = truth.map(|t| label_accuracy(table, t)).transpose()?;
        let mut uniform = table.clone();
        select_targets(&mut uniform, sample_percent, SamplingVariant::UniformTopX)?;
        let n = table.entries.len().max(1) as f64;
        Ok(AdaptDiagnostics {
            view: table.view,
            epoch,
            label_accuracy_all: acc.map(|a| a.all),
            label_accuracy_selected: acc.and_then(|a| a.selected),
            label_diversity: label_diversity(table),
            label_diversity_uniform: label_diversity(&uniform),
            mean_confidence: table.entries.iter().map(|e| e.confidence).sum::<f64>() / n,
            selected_count: table.entries.iter().filter(|e| e.selected).count(),
        })
    }

    pub fn write_csv_row<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            self.view,
            self.epoch,
            opt(self.label_accuracy_all),
            opt(self.label_accuracy_selected),
            self.label_diversity,
            self.label_diversity_uniform,
            self.mean_confidence,
            self.selected_count
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn labels(pairs: &[(u32, u32)]) -> Vec<ActionLabel> {
        pairs.iter().map(|&(verb, noun)| ActionLabel { verb, noun }).collect()
    }

    fn entry(target: usize, group: usize, confidence: f64) -> PseudoLabelEntry {
        PseudoLabelEntry {
            target,
            nearest_source: 0,
            source_distance: 0.0,
            group,
            label: Label::Verb(group as u32),
            prototype_distance: Some(-confidence.ln()),
            confidence,
            selected: false,
        }
    }

    fn table(entries: Vec<PseudoLabelEntry>, num_groups: usize) -> PseudoLabelTable {
        PseudoLabelTable {
            view: View::Verb,
            entries,
            num_groups,
            distance_evaluations: 0,
        }
    }

    #[test]
    fn singleton_prototype_is_its_member() {
        let g = RelevanceGroups::from_labels(&labels(&[(0, 0), (1, 0)]), View::Verb);
        let emb = array![[0.6, 0.8], [1.0, 0.0]];
        let p = compute_prototypes(emb.view(), &g).unwrap();
        assert_eq!(p[0].centroid.as_slice(), &[0.6, 0.8]);
        assert_eq!(p[0].member_count, 1);
    }

    #[test]
    fn antipodal_members_give_degenerate_prototype() {
        let g = RelevanceGroups::from_labels(&labels(&[(0, 0), (0, 1)]), View::Verb);
        let emb = array![[1.0, 0.0], [-1.0, 0.0]];
        let p = compute_prototypes(emb.view(), &g).unwrap();
        assert!(p[0].degenerate);
        assert_eq!(p[0].centroid.norm(), 0.0);

        // degenerate prototype → zero confidence
        let t = pseudo_label(
            array![[0.0, 1.0]].view(),
            emb.view(),
            &p,
            &g,
            LabellingVariant::NearestSource,
            ConfidenceVariant::Prototype,
        )
        .unwrap();
        assert_eq!(t.entries[0].confidence, 0.0);
        assert_eq!(t.entries[0].prototype_distance, None);
    }

    #[test]
    fn confidence_values() {
        assert_eq!(confidence_from_distance(0.0), 1.0);
        assert!((confidence_from_distance(2f64.ln()) - 0.5).abs() < 1e-15);
        assert!(confidence_from_distance(0.2) > confidence_from_distance(0.3));
    }

    #[test]
    fn single_group_everything_inherits_it() {
        let g = RelevanceGroups::from_labels(&labels(&[(4, 0), (4, 1), (4, 2)]), View::Verb);
        let src = array![[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]];
        let p = compute_prototypes(src.view(), &g).unwrap();
        let tgt = array![[-1.0, 0.2], [0.3, -0.9], [0.5, 0.5]];
        let t = pseudo_label(
            tgt.view(),
            src.view(),
            &p,
            &g,
            LabellingVariant::NearestSource,
            ConfidenceVariant::Prototype,
        )
        .unwrap();
        assert!(t.entries.iter().all(|e| e.label == Label::Verb(4)));
        assert_eq!(t.distance_evaluations, 3 * 3 + 3);
    }

    #[test]
    fn coincident_target_inherits_with_zero_distance() {
        let g = RelevanceGroups::from_labels(&labels(&[(0, 0), (1, 0), (2, 0)]), View::Verb);
        let src = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let p = compute_prototypes(src.view(), &g).unwrap();
        let tgt = array![[0.0, 2.0, 0.0]];
        let t = pseudo_label(
            tgt.view(),
            src.view(),
            &p,
            &g,
            LabellingVariant::NearestSource,
            ConfidenceVariant::Neighbour,
        )
        .unwrap();
        assert_eq!(t.entries[0].nearest_source, 1);
        assert!(t.entries[0].source_distance.abs() < 1e-15);
        assert!((t.entries[0].confidence - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_source_index() {
        let g = RelevanceGroups::from_labels(&labels(&[(1, 0), (0, 0)]), View::Verb);
        let src = array![[1.0, 0.0], [0.0, 1.0]];
        let p = compute_prototypes(src.view(), &g).unwrap();
        let tgt = array![[1.0, 1.0]];
        let t = pseudo_label(
            tgt.view(),
            src.view(),
            &p,
            &g,
            LabellingVariant::NearestSource,
            ConfidenceVariant::Prototype,
        )
        .unwrap();
        assert_eq!(t.entries[0].nearest_source, 0);
        assert_eq!(t.entries[0].label, Label::Verb(1));
    }

    #[test]
    fn nearest_prototype_variant_can_disagree_with_nearest_source() {
        // group 0 = {(1,0), (-1, 0.1)} has a prototype near (0, 0.05);
        // group 1 = {(0.2, 1)}. Target (0.9, 0.3) is nearest to source 0
        // but nearer to group 1's prototype than group 0's.
        let g = RelevanceGroups::from_labels(&labels(&[(0, 0), (0, 1), (1, 0)]), View::Verb);
        let src = array![[1.0, 0.0], [-1.0, 0.1], [0.2, 1.0]];
        let p = compute_prototypes(src.view(), &g).unwrap();
        let tgt = array![[0.9, 0.3]];
        let by_source = pseudo_label(
            tgt.view(),
            src.view(),
            &p,
            &g,
            LabellingVariant::NearestSource,
            ConfidenceVariant::Prototype,
        )
        .unwrap();
        let by_proto = pseudo_label(
            tgt.view(),
            src.view(),
            &p,
            &g,
            LabellingVariant::NearestPrototype,
            ConfidenceVariant::Prototype,
        )
        .unwrap();
        assert_eq!(by_source.entries[0].group, 0);
        assert_eq!(by_proto.entries[0].group, 1);
    }

    #[test]
    fn empty_source_is_an_error() {
        let g = RelevanceGroups::from_labels(&[], View::Verb);
        let err = pseudo_label(
            array![[1.0]].view(),
            Array2::zeros((0, 1)).view(),
            &[],
            &g,
            LabellingVariant::NearestSource,
            ConfidenceVariant::Prototype,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn ten_assigned_sixty_percent_selects_top_six() {
        let conf = [0.5, 0.9, 0.1, 0.7, 0.3, 0.8, 0.2, 0.6, 0.4, 0.95];
        let mut t = table(conf.iter().enumerate().map(|(i, &c)| entry(i, 0, c)).collect(), 1);
        select_targets(&mut t, 60.0, SamplingVariant::PerPrototypeTopX).unwrap();
        let chosen: Vec<usize> = t.entries.iter().filter(|e| e.selected).map(|e| e.target).collect();
        assert_eq!(chosen, vec![0, 1, 3, 5, 7, 9]);

        select_targets(&mut t, 100.0, SamplingVariant::PerPrototypeTopX).unwrap();
        assert!(t.entries.iter().all(|e| e.selected));
    }

    #[test]
    fn lone_target_is_always_kept() {
        let mut t = table(vec![entry(0, 0, 0.01), entry(1, 1, 0.9), entry(2, 1, 0.8)], 3);
        select_targets(&mut t, 60.0, SamplingVariant::PerPrototypeTopX).unwrap();
        assert!(t.entries[0].selected);
        assert!(t.entries[1].selected && !t.entries[2].selected);
        assert_eq!(kept_count(1, 60.0), 1);
        assert_eq!(kept_count(10, 30.0), 3);
        assert_eq!(kept_count(0, 60.0), 0);
        assert!(select_targets(&mut t, 0.0, SamplingVariant::UniformTopX).is_err());
    }

    #[test]
    fn uniform_selection_ignores_prototypes() {
        let mut t = table(vec![entry(0, 0, 0.01), entry(1, 1, 0.9), entry(2, 1, 0.8)], 2);
        select_targets(&mut t, 60.0, SamplingVariant::UniformTopX).unwrap();
        assert_eq!(
            t.entries.iter().map(|e| e.selected).collect::<Vec<_>>(),
            vec![false, true, false]
        );
        assert_eq!(label_diversity(&t), 0.5);
    }

    #[test]
    fn accuracy_and_diversity() {
        let mut t = table(vec![entry(0, 0, 0.9), entry(1, 1, 0.8), entry(2, 1, 0.7)], 2);
        let truth = labels(&[(0, 5), (1, 5), (0, 5)]);
        select_targets(&mut t, 100.0, SamplingVariant::PerPrototypeTopX).unwrap();
        let acc = label_accuracy(&t, &truth).unwrap();
        assert!((acc.all - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc.selected, Some(acc.all));
        assert_eq!(label_diversity(&t), 1.0);
        assert!(label_accuracy(&t, &truth[..2]).is_err());

        let all_right = labels(&[(0, 0), (1, 0), (1, 0)]);
        assert_eq!(label_accuracy(&t, &all_right).unwrap().all, 1.0);

        let mut single = table(vec![entry(0, 0, 0.9), entry(1, 0, 0.8)], 4);
        select_targets(&mut single, 100.0, SamplingVariant::PerPrototypeTopX).unwrap();
        assert_eq!(label_diversity(&single), 0.25);
    }

    #[test]
    fn diagnostics_csv_row() {
        let mut t = table(vec![entry(0, 0, 0.5), entry(1, 1, 1.0)], 2);
        select_targets(&mut t, 60.0, SamplingVariant::PerPrototypeTopX).unwrap();
        let d = AdaptDiagnostics::from_table(&t, 3, Some(&labels(&[(0, 0), (0, 0)])), 60.0).unwrap();
        let mut out = Vec::new();
        d.write_csv_row(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "verb,3,0.500000,0.500000,1.000000,0.500000,0.750000,2\n"
        );
    }

    fn arb_table() -> impl Strategy<Value = PseudoLabelTable> {
        (1usize..6).prop_flat_map(|groups| {
            proptest::collection::vec((0..groups, 0.001f64..1.0), 0..40).prop_map(move |raw| {
                table(
                    raw.into_iter().enumerate().map(|(i, (g, c))| entry(i, g, c)).collect(),
                    groups,
                )
            })
        })
    }

    proptest! {
        #[test]
        fn per_prototype_counts_and_coverage(mut t in arb_table(), x in 1.0f64..=100.0) {
            let mut uniform = t.clone();
            select_targets(&mut t, x, SamplingVariant::PerPrototypeTopX).unwrap();
            select_targets(&mut uniform, x, SamplingVariant::UniformTopX).unwrap();
            for g in 0..t.num_groups {
                let assigned = t.entries.iter().filter(|e| e.group == g).count();
                let selected = t.entries.iter().filter(|e| e.group == g && e.selected).count();
                prop_assert_eq!(selected, kept_count(assigned, x));
                if assigned > 0 {
                    prop_assert!(selected >= 1);
                }
            }
            prop_assert!(label_diversity(&t) >= label_diversity(&uniform));
        }

        #[test]
        fn selection_invariant_to_distance_scaling(mut t in arb_table(), x in 1.0f64..=100.0, s in 0.1f64..10.0) {
            let mut scaled = t.clone();
            for e in &mut scaled.entries {
                let d = e.prototype_distance.unwrap() * s;
                e.confidence = confidence_from_distance(d);
            }
            select_targets(&mut t, x, SamplingVariant::PerPrototypeTopX).unwrap();
            select_targets(&mut scaled, x, SamplingVariant::PerPrototypeTopX).unwrap();
            let a: Vec<bool> = t.entries.iter().map(|e| e.selected).collect();
            let b: Vec<bool> = scaled.entries.iter().map(|e| e.selected).collect();
            prop_assert_eq!(a, b);
        }
    }
}
