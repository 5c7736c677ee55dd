use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ActionLabel, Gallery};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Verb,
    Noun,
    Action,
}

impl View {
    pub const ALL: [View; 3] = [View::Verb, View::Noun, View::Action];

    pub fn label(self, action: ActionLabel) -> Label {
        match self {
            View::Verb => Label::Verb(action.verb),
            View::Noun => Label::Noun(action.noun),
            View::Action => Label::Action(action.verb, action.noun),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Verb => "verb",
            View::Noun => "noun",
            View::Action => "action",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verb" => Ok(View::Verb),
            "noun" => Ok(View::Noun),
            "action" => Ok(View::Action),
            other => Err(Error::Config(format!("unknown view `{other}`"))),
        }
    }
}

/// Relevance-group key within one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Verb(u32),
    Noun(u32),
    Action(u32, u32),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Verb(v) => write!(f, "v{v}"),
            Label::Noun(n) => write!(f, "n{n}"),
            Label::Action(v, n) => write!(f, "v{v}n{n}"),
        }
    }
}

/// Partition of captioned items into relevance groups for one view.
///
/// Groups are ordered by label; item positions refer to gallery rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceGroups {
    view: View,
    labels: Vec<Label>,
    members: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl RelevanceGroups {
    pub fn from_labels(labels: &[ActionLabel], view: View) -> Self {
        let keys: Vec<Label> = labels.iter().map(|&a| view.label(a)).collect();
        let mut distinct = keys.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let mut members = vec![Vec::new(); distinct.len()];
        let group_of: Vec<usize> = keys
            .iter()
            .enumerate()
            .map(|(item, key)| {
                let g = distinct.binary_search(key).expect("key present");
                members[g].push(item);
                g
            })
            .collect();
        RelevanceGroups {
            view,
            labels: distinct,
            members,
            group_of,
        }
    }

    pub fn build(gallery: &Gallery, view: View) -> Result<Self> {
        let captions = gallery.require_captions()?;
        Ok(Self::from_labels(&captions.labels, view))
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn num_groups(&self) -> usize {
        self.labels.len()
    }

    pub fn num_items(&self) -> usize {
        self.group_of.len()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label(&self, group: usize) -> Label {
        self.labels[group]
    }

    pub fn group_index(&self, label: Label) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn members(&self, group: usize) -> &[usize] {
        &self.members[group]
    }

    pub fn group_of(&self, item: usize) -> usize {
        self.group_of[item]
    }

    pub fn is_relevant(&self, a: usize, b: usize) -> bool {
        self.group_of[a] == self.group_of[b]
    }

    /// Items sharing the anchor's group, the anchor itself excluded.
    pub fn relevant(&self, anchor: usize) -> impl Iterator<Item = usize> + '_ {
        self.members[self.group_of[anchor]]
            .iter()
            .copied()
            .filter(move |&i| i != anchor)
    }

    pub fn irrelevant(&self, anchor: usize) -> impl Iterator<Item = usize> + '_ {
        let g = self.group_of[anchor];
        (0..self.group_of.len()).filter(move |&i| self.group_of[i] != g)
    }

    pub fn relevant_count(&self, anchor: usize) -> usize {
        self.members[self.group_of[anchor]].len() - 1
    }

    pub fn irrelevant_count(&self, anchor: usize) -> usize {
        self.group_of.len() - self.members[self.group_of[anchor]].len()
    }
}

/// Relevance groups of the source gallery for every view.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSets {
    verb: RelevanceGroups,
    noun: RelevanceGroups,
    action: RelevanceGroups,
}

impl RelevanceSets {
    pub fn build(gallery: &Gallery) -> Result<Self> {
        let captions = gallery.require_captions()?;
        Ok(Self::from_labels(&captions.labels))
    }

    pub fn from_labels(labels: &[ActionLabel]) -> Self {
        RelevanceSets {
            verb: RelevanceGroups::from_labels(labels, View::Verb),
            noun: RelevanceGroups::from_labels(labels, View::Noun),
            action: RelevanceGroups::from_labels(labels, View::Action),
        }
    }

    pub fn view(&self, view: View) -> &RelevanceGroups {
        match view {
            View::Verb => &self.verb,
            View::Noun => &self.noun,
            View::Action => &self.action,
        }
    }
}
