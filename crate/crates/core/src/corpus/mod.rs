//! Galleries, caption records, class vocabularies and per-view relevance.
//!
//! Two loaders exist for target data and they are deliberately distinct:
//! [`load_target_gallery`] is the training-time entry point and rejects any
//! record carrying a caption, while [`load_target_truth`] reads the
//! evaluation-only captions into a [`TargetTruth`], a type no training API
//! accepts.

mod features;
mod relevance;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseVector;

pub use features::{encode_features, read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use relevance::{Label, RelevanceGroups, RelevanceSets, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemId {
    pub domain: Domain,
    pub index: usize,
}

/// Verb and noun class of a caption; the action class is the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionLabel {
    pub verb: u32,
    pub noun: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub label: ActionLabel,
    pub text_feature: DenseVector,
    pub raw: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub verbs: u32,
    pub nouns: u32,
}

impl Vocabulary {
    pub fn check(&self, label: ActionLabel) -> Result<()> {
        if label.verb >= self.verbs {
            return Err(Error::UnknownClass {
                kind: "verb",
                id: label.verb,
                size: self.verbs,
            });
        }
        if label.noun >= self.nouns {
            return Err(Error::UnknownClass {
                kind: "noun",
                id: label.noun,
                size: self.nouns,
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vocab: Vocabulary = serde_json::from_str(&text)?;
        if vocab.verbs == 0 || vocab.nouns == 0 {
            return Err(Error::format("vocabulary", path, "empty vocabulary"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// A borrowed view of one gallery entry.
#[derive(Debug, Clone)]
pub struct GalleryItem<'a> {
    pub id: ItemId,
    pub video_feature: ArrayView1<'a, f64>,
    pub caption: Option<CaptionRecord>,
}

/// Captions of a gallery, stored column-wise so text features form a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Captions {
    pub labels: Vec<ActionLabel>,
    /// One row per item.
    pub text: Array2<f64>,
    pub raw: Vec<Option<String>>,
}

impl Captions {
    pub fn new(labels: Vec<ActionLabel>, text: Array2<f64>, raw: Vec<Option<String>>) -> Result<Self> {
        if labels.len() != text.nrows() {
            return Err(Error::CountMismatch {
                left_name: "caption labels",
                left: labels.len(),
                right_name: "text feature rows",
                right: text.nrows(),
            });
        }
        if raw.len() != labels.len() {
            return Err(Error::CountMismatch {
                left_name: "caption labels",
                left: labels.len(),
                right_name: "raw captions",
                right: raw.len(),
            });
        }
        Ok(Captions { labels, text, raw })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn text_dim(&self) -> usize {
        self.text.ncols()
    }

    pub fn record(&self, i: usize) -> CaptionRecord {
        CaptionRecord {
            label: self.labels[i],
            text_feature: DenseVector::new(self.text.row(i).to_vec()).expect("validated at load"),
            raw: self.raw[i].clone(),
        }
    }

    fn permuted(&self, order: &[usize]) -> Self {
        Captions {
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            text: self.text.select(Axis(0), order),
            raw: order.iter().map(|&i| self.raw[i].clone()).collect(),
        }
    }
}

/// Items of one domain. Source galleries always carry captions; target
/// galleries never do.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    domain: Domain,
    ids: Vec<ItemId>,
    video: Array2<f64>,
    captions: Option<Captions>,
}

impl Gallery {
    pub fn source(ids: Vec<usize>, video: Array2<f64>, captions: Captions) -> Result<Self> {
        Self::build(Domain::Source, ids, video, Some(captions))
    }

    pub fn target(ids: Vec<usize>, video: Array2<f64>) -> Result<Self> {
        Self::build(Domain::Target, ids, video, None)
    }

    fn build(domain: Domain, ids: Vec<usize>, video: Array2<f64>, captions: Option<Captions>) -> Result<Self> {
        if video.nrows() == 0 {
            return Err(Error::Empty("gallery"));
        }
        if ids.len() != video.nrows() {
            return Err(Error::CountMismatch {
                left_name: "item ids",
                left: ids.len(),
                right_name: "video feature rows",
                right: video.nrows(),
            });
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate item id in gallery".into()));
        }
        if video.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("video features"));
        }
        if let Some(c) = &captions {
            if c.len() != video.nrows() {
                return Err(Error::CountMismatch {
                    left_name: "captions",
                    left: c.len(),
                    right_name: "video feature rows",
                    right: video.nrows(),
                });
            }
            if c.text.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("text features"));
            }
        }
        Ok(Gallery {
            domain,
            ids: ids.into_iter().map(|index| ItemId { domain, index }).collect(),
            video,
            captions,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn video_dim(&self) -> usize {
        self.video.ncols()
    }

    pub fn video(&self) -> ArrayView2<'_, f64> {
        self.video.view()
    }

    pub fn captions(&self) -> Option<&Captions> {
        self.captions.as_ref()
    }

    /// Captions of a source gallery.
    pub fn require_captions(&self) -> Result<&Captions> {
        self.captions
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("{} gallery has no captions", self.domain)))
    }

    pub fn item(&self, i: usize) -> GalleryItem<'_> {
        GalleryItem {
            id: self.ids[i],
            video_feature: self.video.row(i),
            caption: self.captions.as_ref().map(|c| c.record(i)),
        }
    }

    /// Same gallery with video features replaced (e.g. after standardization).
    pub fn with_video(&self, video: Array2<f64>) -> Result<Self> {
        if video.dim() != self.video.dim() {
            return Err(Error::DimMismatch {
                context: "replacement video features",
                expected: self.video.len(),
                actual: video.len(),
            });
        }
        let mut g = self.clone();
        g.video = video;
        Ok(g)
    }

    /// Reorders storage; ids travel with their rows.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Gallery {
            domain: self.domain,
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            video: self.video.select(Axis(0), order),
            captions: self.captions.as_ref().map(|c| c.permuted(order)),
        }
    }
}

/// Evaluation-only captions of the target gallery, aligned with its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTruth {
    ids: Vec<ItemId>,
    captions: Captions,
}

impl TargetTruth {
    pub fn new(ids: Vec<usize>, captions: Captions) -> Result<Self> {
        if ids.len() != captions.len() {
            return Err(Error::CountMismatch {
                left_name: "truth ids",
                left: ids.len(),
                right_name: "truth captions",
                right: captions.len(),
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty("target truth"));
        }
        Ok(TargetTruth {
            ids: ids
                .into_iter()
                .map(|index| ItemId {
                    domain: Domain::Target,
                    index,
                })
                .collect(),
            captions,
        })
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn captions(&self) -> &Captions {
        &self.captions
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Truth labels reordered to match `gallery`'s storage order.
    pub fn labels_for(&self, gallery: &Gallery) -> Result<Vec<ActionLabel>> {
        let mut by_id = std::collections::HashMap::with_capacity(self.ids.len());
        for (row, id) in self.ids.iter().enumerate() {
            by_id.insert(id.index, row);
        }
        gallery
            .ids()
            .iter()
            .map(|id| {
                by_id
                    .get(&id.index)
                    .map(|&row| self.captions.labels[row])
                    .ok_or_else(|| Error::MissingTruth(format!("no caption for target item {}", id.index)))
            })
            .collect()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        TargetTruth {
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            captions: self.captions.permuted(order),
        }
    }
}

/// One line of a metadata JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub id: u64,
    pub domain: Domain,
    pub verb: Option<u32>,
    pub noun: Option<u32>,
    pub text_feature_row: Option<u32>,
    pub raw: Option<String>,
}

impl MetadataRecord {
    fn has_caption_fields(&self) -> bool {
        self.verb.is_some() || self.noun.is_some() || self.text_feature_row.is_some() || self.raw.is_some()
    }
}

pub fn read_metadata(path: &Path) -> Result<Vec<MetadataRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetadataRecord =
            serde_json::from_str(&line).map_err(|e| Error::format("metadata", path, format!("line {}: {e}", n + 1)))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Empty("metadata file"));
    }
    Ok(records)
}

pub fn write_metadata(path: &Path, records: &[MetadataRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Files making up one gallery on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryPaths {
    pub video: PathBuf,
    pub metadata: PathBuf,
    /// Text features indexed by `text_feature_row`; required for captioned data.
    pub text: Option<PathBuf>,
}

fn check_ids(records: &[MetadataRecord], path: &Path, domain: Domain) -> Result<Vec<usize>> {
    records
        .iter()
        .enumerate()
        .map(|(row, r)| {
            if r.domain != domain {
                return Err(Error::format(
                    "metadata",
                    path,
                    format!("line {}: expected domain {domain}, found {}", row + 1, r.domain),
                ));
            }
            if r.id != row as u64 {
                return Err(Error::format(
                    "metadata",
                    path,
                    format!("line {}: id {} does not equal its row number {row}", row + 1, r.id),
                ));
            }
            Ok(row)
        })
        .collect()
}

fn read_captions(
    records: &[MetadataRecord],
    meta_path: &Path,
    text_path: Option<&Path>,
    vocab: &Vocabulary,
) -> Result<Captions> {
    let text_path = text_path.ok_or_else(|| Error::Config("captioned gallery needs a text feature file".into()))?;
    let text = read_features(text_path)?;
    let mut labels = Vec::with_capacity(records.len());
    let mut rows = Vec::with_capacity(records.len());
    let mut raw = Vec::with_capacity(records.len());
    for (n, r) in records.iter().enumerate() {
        let missing = |field: &str| {
            Error::format(
                "metadata",
                meta_path,
                format!("line {}: caption field `{field}` is null", n + 1),
            )
        };
        let label = ActionLabel {
            verb: r.verb.ok_or_else(|| missing("verb"))?,
            noun: r.noun.ok_or_else(|| missing("noun"))?,
        };
        vocab.check(label)?;
        let row = r.text_feature_row.ok_or_else(|| missing("text_feature_row"))? as usize;
        if row >= text.nrows() {
            return Err(Error::format(
                "metadata",
                meta_path,
                format!(
                    "line {}: text_feature_row {row} out of range ({} rows)",
                    n + 1,
                    text.nrows()
                ),
            ));
        }
        labels.push(label);
        rows.push(row);
        raw.push(r.raw.clone());
    }
    Captions::new(labels, text.select(Axis(0), &rows), raw)
}

fn read_video(paths: &GalleryPaths, records: &[MetadataRecord]) -> Result<Array2<f64>> {
    let video = read_features(&paths.video)?;
    if video.nrows() != records.len() {
        return Err(Error::CountMismatch {
            left_name: "feature rows",
            left: video.nrows(),
            right_name: "metadata lines",
            right: records.len(),
        });
    }
    Ok(video)
}

pub fn load_source_gallery(paths: &GalleryPaths, vocab: &Vocabulary) -> Result<Gallery> {
    let records = read_metadata(&paths.metadata)?;
    let video = read_video(paths, &records)?;
    let ids = check_ids(&records, &paths.metadata, Domain::Source)?;
    let captions = read_captions(&records, &paths.metadata, paths.text.as_deref(), vocab)?;
    Gallery::source(ids, video, captions)
}

/// Training-time target loader. Any caption content is a protocol violation.
pub fn load_target_gallery(paths: &GalleryPaths) -> Result<Gallery> {
    if paths.text.is_some() {
        return Err(Error::Protocol(
            "target galleries take no text features at training time".into(),
        ));
    }
    let records = read_metadata(&paths.metadata)?;
    if let Some((row, _)) = records.iter().enumerate().find(|(_, r)| r.has_caption_fields()) {
        return Err(Error::Protocol(format!(
            "{} line {}: target item carries caption fields; target captions are evaluation-only",
            paths.metadata.display(),
            row + 1
        )));
    }
    let video = read_video(paths, &records)?;
    let ids = check_ids(&records, &paths.metadata, Domain::Target)?;
    Gallery::target(ids, video)
}

/// Evaluation-only loader for target captions.
pub fn load_target_truth(metadata: &Path, text: &Path, vocab: &Vocabulary) -> Result<TargetTruth> {
    let records = read_metadata(metadata)?;
    let ids = check_ids(&records, metadata, Domain::Target)?;
    let captions = read_captions(&records, metadata, Some(text), vocab)?;
    TargetTruth::new(ids, captions)
}

/// File names used for a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetLayout { root: root.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn source(&self) -> GalleryPaths {
        GalleryPaths {
            video: self.root.join("source_video.xmfe"),
            metadata: self.root.join("source_meta.jsonl"),
            text: Some(self.root.join("source_text.xmfe")),
        }
    }

    pub fn target(&self) -> GalleryPaths {
        GalleryPaths {
            video: self.root.join("target_video.xmfe"),
            metadata: self.root.join("target_meta.jsonl"),
            text: None,
        }
    }

    pub fn truth_metadata(&self) -> PathBuf {
        self.root.join("target_truth.jsonl")
    }

    pub fn truth_text(&self) -> PathBuf {
        self.root.join("target_text.xmfe")
    }

    pub fn spec(&self) -> PathBuf {
        self.root.join("synth_spec.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn record(id: u64, domain: Domain, caption: Option<(u32, u32, u32)>) -> MetadataRecord {
        MetadataRecord {
            id,
            domain,
            verb: caption.map(|c| c.0),
            noun: caption.map(|c| c.1),
            text_feature_row: caption.map(|c| c.2),
            raw: None,
        }
    }

    fn write_source(dir: &Path, n: usize, video_dim: usize, text_dim: usize) -> GalleryPaths {
        let paths = DatasetLayout::new(dir).source();
        write_features(&paths.video, &Array2::from_elem((n, video_dim), 0.5)).unwrap();
        write_features(paths.text.as_ref().unwrap(), &Array2::from_elem((n, text_dim), -0.25)).unwrap();
        let records: Vec<_> = (0..n)
            .map(|i| record(i as u64, Domain::Source, Some((i as u32 % 2, 1, i as u32))))
            .collect();
        write_metadata(&paths.metadata, &records).unwrap();
        paths
    }

    const VOCAB: Vocabulary = Vocabulary { verbs: 4, nouns: 4 };

    #[test]
    fn loads_three_items_at_reference_dims() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_source(dir.path(), 3, 3072, 200);
        let g = load_source_gallery(&paths, &VOCAB).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.video_dim(), 3072);
        assert_eq!(g.require_captions().unwrap().text_dim(), 200);
        assert_eq!(
            g.item(2).id,
            ItemId {
                domain: Domain::Source,
                index: 2
            }
        );
        assert_eq!(g.item(1).caption.unwrap().label, ActionLabel { verb: 1, noun: 1 });
    }

    #[test]
    fn empty_feature_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_source(dir.path(), 2, 4, 3);
        write_features(&paths.video, &Array2::zeros((0, 4))).unwrap();
        assert!(matches!(load_source_gallery(&paths, &VOCAB), Err(Error::Empty(_))));
        std::fs::write(&paths.metadata, "").unwrap();
        assert!(matches!(read_metadata(&paths.metadata), Err(Error::Empty(_))));
    }

    #[test]
    fn row_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_source(dir.path(), 3, 4, 3);
        write_features(&paths.video, &Array2::zeros((2, 4))).unwrap();
        match load_source_gallery(&paths, &VOCAB) {
            Err(Error::CountMismatch { left: 2, right: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_header_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_source(dir.path(), 3, 4, 3);
        std::fs::write(&paths.video, b"XMFX\x01\0\0\0").unwrap();
        assert!(matches!(load_source_gallery(&paths, &VOCAB), Err(Error::Format { .. })));

        let mut bytes = Vec::new();
        encode_features(&mut bytes, &Array2::zeros((3, 4))).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&paths.video, &bytes).unwrap();
        assert!(matches!(load_source_gallery(&paths, &VOCAB), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_class_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_source(dir.path(), 3, 4, 3);
        let small = Vocabulary { verbs: 1, nouns: 4 };
        assert!(matches!(
            load_source_gallery(&paths, &small),
            Err(Error::UnknownClass {
                kind: "verb",
                id: 1,
                size: 1
            })
        ));
    }

    #[test]
    fn video_dim_mismatch_between_text_rows() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_source(dir.path(), 3, 4, 3);
        // text file too short for the referenced rows
        write_features(paths.text.as_ref().unwrap(), &Array2::zeros((2, 3))).unwrap();
        assert!(matches!(load_source_gallery(&paths, &VOCAB), Err(Error::Format { .. })));
    }

    #[test]
    fn target_loader_rejects_captions() {
        let dir = tempfile::tempdir().unwrap();
        let layout = DatasetLayout::new(dir.path());
        let paths = layout.target();
        write_features(&paths.video, &Array2::zeros((2, 4))).unwrap();
        write_metadata(
            &paths.metadata,
            &[
                record(0, Domain::Target, None),
                record(1, Domain::Target, Some((0, 0, 0))),
            ],
        )
        .unwrap();
        assert!(matches!(load_target_gallery(&paths), Err(Error::Protocol(_))));

        write_metadata(
            &paths.metadata,
            &[record(0, Domain::Target, None), record(1, Domain::Target, None)],
        )
        .unwrap();
        let g = load_target_gallery(&paths).unwrap();
        assert_eq!(g.domain(), Domain::Target);
        assert!(g.captions().is_none());
    }

    #[test]
    fn domain_and_id_order_checked() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_source(dir.path(), 2, 4, 3);
        write_metadata(
            &paths.metadata,
            &[
                record(1, Domain::Source, Some((0, 0, 0))),
                record(0, Domain::Source, Some((0, 0, 1))),
            ],
        )
        .unwrap();
        assert!(matches!(load_source_gallery(&paths, &VOCAB), Err(Error::Format { .. })));
        write_metadata(
            &paths.metadata,
            &[
                record(0, Domain::Target, Some((0, 0, 0))),
                record(1, Domain::Source, Some((0, 0, 1))),
            ],
        )
        .unwrap();
        assert!(matches!(load_source_gallery(&paths, &VOCAB), Err(Error::Format { .. })));
    }

    #[test]
    fn truth_labels_follow_gallery_order() {
        let captions = Captions::new(
            vec![ActionLabel { verb: 0, noun: 1 }, ActionLabel { verb: 2, noun: 3 }],
            array![[1.0], [2.0]],
            vec![None, None],
        )
        .unwrap();
        let truth = TargetTruth::new(vec![0, 1], captions).unwrap();
        let g = Gallery::target(vec![0, 1], array![[0.0], [1.0]])
            .unwrap()
            .permuted(&[1, 0]);
        assert_eq!(
            truth.labels_for(&g).unwrap(),
            vec![ActionLabel { verb: 2, noun: 3 }, ActionLabel { verb: 0, noun: 1 }]
        );
        let missing = Gallery::target(vec![5], array![[0.0]]).unwrap();
        assert!(matches!(truth.labels_for(&missing), Err(Error::MissingTruth(_))));
    }

    #[test]
    fn metadata_line_shape() {
        let line = serde_json::to_string(&record(3, Domain::Target, None)).unwrap();
        assert_eq!(
            line,
            r#"{"id":3,"domain":"target","verb":null,"noun":null,"text_feature_row":null,"raw":null}"#
        );
    }
}
