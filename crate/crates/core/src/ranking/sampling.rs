//! Triplet sampling for source and cross-domain terms.
//!
//! Positives of within-modal terms exclude the anchor itself; cross-modal
//! positives may be the anchor's own caption (or video). Source negatives
//! may be restricted to items whose action prototype is among the nearest
//! `fraction` of prototypes to the anchor's; when that leaves nothing
//! irrelevant in the current view, the negative is drawn uniformly instead.

use rand::Rng;

use super::{LossKind, TermBatch, Triplet};
use crate::adapt::{Prototype, PseudoLabelTable};
use crate::corpus::{RelevanceGroups, RelevanceSets, View};
use crate::error::{Error, Result};

/// `k`-th item (0-based) of `0..n` that is not in the ascending `members`.
fn kth_outside(members: &[usize], mut k: usize) -> usize {
    for &m in members {
        if m <= k {
            k += 1;
        } else {
            break;
        }
    }
    k
}

fn pick_irrelevant<R: Rng + ?Sized>(rng: &mut R, groups: &RelevanceGroups, group: usize) -> Option<usize> {
    let members = groups.members(group);
    let count = groups.num_items() - members.len();
    (count > 0).then(|| kth_outside(members, rng.random_range(0..count)))
}

fn pick_relevant<R: Rng + ?Sized>(
    rng: &mut R,
    groups: &RelevanceGroups,
    anchor: usize,
    include_self: bool,
) -> Option<usize> {
    let members = groups.members(groups.group_of(anchor));
    if include_self {
        return Some(members[rng.random_range(0..members.len())]);
    }
    if members.len() < 2 {
        return None;
    }
    let own = members.binary_search(&anchor).expect("anchor in its group");
    let mut k = rng.random_range(0..members.len() - 1);
    if k >= own {
        k += 1;
    }
    Some(members[k])
}

fn within_modal(kind: LossKind) -> bool {
    matches!(kind, LossKind::VideoToVideo | LossKind::TextToText)
}

/// Restricted negative pools derived from source action prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegativePools {
    fraction: f64,
    /// Per action group, the nearest other action groups.
    near: Vec<Vec<usize>>,
    /// `[view][action group]` → candidate source rows, ascending.
    pools: Option<Vec<Vec<Vec<usize>>>>,
}

impl HardNegativePools {
    /// No restriction: negatives are uniform over irrelevant items.
    pub fn uniform() -> Self {
        HardNegativePools {
            fraction: 1.0,
            near: Vec::new(),
            pools: None,
        }
    }

    /// `action_prototypes` are indexed by action group. Each group keeps its
    /// `max(1, floor(fraction·G))` nearest other prototypes (cosine distance,
    /// ties by index, degenerate prototypes last).
    pub fn from_prototypes(action_prototypes: &[Prototype], relevance: &RelevanceSets, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "hard negative fraction must lie in (0, 1], got {fraction}"
            )));
        }
        if fraction >= 1.0 {
            return Ok(Self::uniform());
        }
        let action = relevance.view(View::Action);
        let g = action.num_groups();
        if action_prototypes.len() != g {
            return Err(Error::CountMismatch {
                left_name: "action prototypes",
                left: action_prototypes.len(),
                right_name: "action groups",
                right: g,
            });
        }
        let k = (((fraction * g as f64) + 1e-9).floor() as usize)
            .max(1)
            .min(g.saturating_sub(1));
        let unit: Vec<Option<Vec<f64>>> = action_prototypes
            .iter()
            .map(|p| {
                (!p.degenerate).then(|| {
                    let n = p.centroid.norm();
                    p.centroid.as_slice().iter().map(|x| x / n).collect()
                })
            })
            .collect();
        let dist = |a: usize, b: usize| match (&unit[a], &unit[b]) {
            (Some(x), Some(y)) => 1.0 - x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>(),
            _ => f64::INFINITY,
        };
        let near: Vec<Vec<usize>> = (0..g)
            .map(|a| {
                let mut others: Vec<(f64, usize)> = (0..g).filter(|&b| b != a).map(|b| (dist(a, b), b)).collect();
                others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                others.into_iter().take(k).map(|(_, b)| b).collect()
            })
            .collect();

        let pools = View::ALL
            .iter()
            .map(|&view| {
                let groups = relevance.view(view);
                (0..g)
                    .map(|a| {
                        let own = match action.members(a).first() {
                            Some(&item) => groups.group_of(item),
                            None => return Vec::new(),
                        };
                        let mut rows: Vec<usize> = near[a]
                            .iter()
                            .flat_map(|&b| action.members(b).iter().copied())
                            .filter(|&r| groups.group_of(r) != own)
                            .collect();
                        rows.sort_unstable();
                        rows
                    })
                    .collect()
            })
            .collect();
        Ok(HardNegativePools {
            fraction,
            near,
            pools: Some(pools),
        })
    }

    pub fn fraction(&self) -> f64 {
        self.fraction
    }

    /// Nearest other action groups of `action_group` (empty when uniform).
    pub fn near_groups(&self, action_group: usize) -> &[usize] {
        self.near.get(action_group).map_or(&[], Vec::as_slice)
    }

    /// Restricted candidates for anchors in `action_group`, if restricted.
    pub fn candidates(&self, view: View, action_group: usize) -> Option<&[usize]> {
        self.pools.as_ref().map(|p| p[view as usize][action_group].as_slice())
    }
}

fn source_negative<R: Rng + ?Sized>(
    rng: &mut R,
    view: View,
    anchor: usize,
    relevance: &RelevanceSets,
    pools: &HardNegativePools,
) -> Option<usize> {
    let groups = relevance.view(view);
    if let Some(pool) = pools.candidates(view, relevance.view(View::Action).group_of(anchor)) {
        if !pool.is_empty() {
            return Some(pool[rng.random_range(0..pool.len())]);
        }
    }
    pick_irrelevant(rng, groups, groups.group_of(anchor))
}

/// One triplet per anchor for each of the four source terms of `view`.
/// Caption rows coincide with video rows in the source gallery.
pub fn sample_source_terms<R: Rng + ?Sized>(
    rng: &mut R,
    view: View,
    anchors: &[usize],
    relevance: &RelevanceSets,
    pools: &HardNegativePools,
) -> Vec<TermBatch> {
    let groups = relevance.view(view);
    let mut terms: Vec<TermBatch> = LossKind::SOURCE.iter().map(|&k| TermBatch::new(k, view)).collect();
    for &anchor in anchors {
        for term in &mut terms {
            let pos = pick_relevant(rng, groups, anchor, !within_modal(term.kind));
            let neg = source_negative(rng, view, anchor, relevance, pools);
            match (pos, neg) {
                (Some(p), Some(n)) => term.triplets.push(Triplet::of_kind(term.kind, view, anchor, p, n)),
                _ => term.skipped += 1,
            }
        }
    }
    terms
}

/// Every `(positive, negative)` combination for each anchor.
pub fn enumerate_source_triplets(kind: LossKind, groups: &RelevanceGroups, anchors: &[usize]) -> Result<TermBatch> {
    if kind.is_cross_domain() {
        return Err(Error::Config(format!("{} is not a source term", kind.name())));
    }
    let view = groups.view();
    let mut term = TermBatch::new(kind, view);
    for &a in anchors {
        let positives: Vec<usize> = if within_modal(kind) {
            groups.relevant(a).collect()
        } else {
            groups.members(groups.group_of(a)).to_vec()
        };
        let negatives: Vec<usize> = groups.irrelevant(a).collect();
        if positives.is_empty() || negatives.is_empty() {
            term.skipped += 1;
            continue;
        }
        for &p in &positives {
            for &n in &negatives {
                term.triplets.push(Triplet::of_kind(kind, view, a, p, n));
            }
        }
    }
    Ok(term)
}

/// Selected target videos of one view, grouped by inherited source group.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    view: View,
    /// Selected target rows, ascending.
    selected: Vec<usize>,
    /// Inherited group of each entry of `selected`.
    selected_group: Vec<usize>,
    by_group: Vec<Vec<usize>>,
}

impl TargetAssignment {
    pub fn from_table(table: &PseudoLabelTable) -> Self {
        let pairs: Vec<(usize, usize)> = table
            .entries
            .iter()
            .filter(|e| e.selected)
            .map(|e| (e.target, e.group))
            .collect();
        Self::from_pairs(table.view, table.num_groups, &pairs)
    }

    /// `(target row, group)` pairs; groups index the view's relevance groups.
    pub fn from_pairs(view: View, num_groups: usize, pairs: &[(usize, usize)]) -> Self {
        let mut pairs = pairs.to_vec();
        pairs.sort_unstable();
        pairs.dedup_by_key(|p| p.0);
        let mut by_group = vec![Vec::new(); num_groups];
        for &(t, g) in &pairs {
            by_group[g].push(t);
        }
        TargetAssignment {
            view,
            selected: pairs.iter().map(|p| p.0).collect(),
            selected_group: pairs.iter().map(|p| p.1).collect(),
            by_group,
        }
    }

    pub fn empty(view: View, num_groups: usize) -> Self {
        Self::from_pairs(view, num_groups, &[])
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn group_members(&self, group: usize) -> &[usize] {
        &self.by_group[group]
    }

    fn outside_count(&self, group: usize) -> usize {
        self.selected.len() - self.by_group[group].len()
    }

    fn kth_outside(&self, group: usize, k: usize) -> usize {
        self.selected
            .iter()
            .zip(&self.selected_group)
            .filter(|(_, &g)| g != group)
            .nth(k)
            .map(|(&t, _)| t)
            .expect("k below outside count")
    }
}

fn check_cross(kind: LossKind, assignment: &TargetAssignment, groups: &RelevanceGroups) -> Result<()> {
    if !kind.is_cross_domain() {
        return Err(Error::Config(format!("{} is not a cross-domain term", kind.name())));
    }
    if assignment.view != groups.view() || assignment.by_group.len() != groups.num_groups() {
        return Err(Error::Config(
            "target assignment does not match relevance groups".into(),
        ));
    }
    Ok(())
}

/// Samples one cross-domain term. `SourceToTarget` uses one triplet per
/// source anchor; `TargetToSource` draws `target_anchors` selected targets
/// with replacement.
pub fn sample_cross_domain_term<R: Rng + ?Sized>(
    rng: &mut R,
    kind: LossKind,
    assignment: &TargetAssignment,
    groups: &RelevanceGroups,
    source_anchors: &[usize],
    target_anchors: usize,
) -> Result<TermBatch> {
    check_cross(kind, assignment, groups)?;
    let view = groups.view();
    let mut term = TermBatch::new(kind, view);
    match kind {
        LossKind::SourceToTarget => {
            for &s in source_anchors {
                let g = groups.group_of(s);
                let same = &assignment.by_group[g];
                let others = assignment.outside_count(g);
                if same.is_empty() || others == 0 {
                    term.skipped += 1;
                    continue;
                }
                let p = same[rng.random_range(0..same.len())];
                let n = assignment.kth_outside(g, rng.random_range(0..others));
                term.triplets.push(Triplet::of_kind(kind, view, s, p, n));
            }
        }
        LossKind::TargetToSource => {
            if assignment.selected.is_empty() {
                return Ok(term);
            }
            for _ in 0..target_anchors {
                let i = rng.random_range(0..assignment.selected.len());
                let (t, g) = (assignment.selected[i], assignment.selected_group[i]);
                let members = groups.members(g);
                match pick_irrelevant(rng, groups, g) {
                    Some(n) if !members.is_empty() => {
                        let p = members[rng.random_range(0..members.len())];
                        term.triplets.push(Triplet::of_kind(kind, view, t, p, n));
                    }
                    _ => term.skipped += 1,
                }
            }
        }
        _ => unreachable!("checked"),
    }
    Ok(term)
}

/// Every cross-domain triplet. `SourceToTarget` anchors are the given
/// source rows; `TargetToSource` anchors are all selected targets.
pub fn enumerate_cross_domain_triplets(
    kind: LossKind,
    assignment: &TargetAssignment,
    groups: &RelevanceGroups,
    source_anchors: &[usize],
) -> Result<TermBatch> {
    check_cross(kind, assignment, groups)?;
    let view = groups.view();
    let mut term = TermBatch::new(kind, view);
    match kind {
        LossKind::SourceToTarget => {
            for &s in source_anchors {
                let g = groups.group_of(s);
                let others: Vec<usize> = (0..assignment.outside_count(g))
                    .map(|k| assignment.kth_outside(g, k))
                    .collect();
                if assignment.by_group[g].is_empty() || others.is_empty() {
                    term.skipped += 1;
                    continue;
                }
                for &p in &assignment.by_group[g] {
                    for &n in &others {
                        term.triplets.push(Triplet::of_kind(kind, view, s, p, n));
                    }
                }
            }
        }
        LossKind::TargetToSource => {
            for (&t, &g) in assignment.selected.iter().zip(&assignment.selected_group) {
                let negatives: Vec<usize> = (0..groups.num_items()).filter(|&r| groups.group_of(r) != g).collect();
                if groups.members(g).is_empty() || negatives.is_empty() {
                    term.skipped += 1;
                    continue;
                }
                for &p in groups.members(g) {
                    for &n in &negatives {
                        term.triplets.push(Triplet::of_kind(kind, view, t, p, n));
                    }
                }
            }
        }
        _ => unreachable!("checked"),
    }
    Ok(term)
}
