//! Seeded synthetic source/target benchmark with a video-only domain shift.
//!
//! Video centroid of action `(v, n)` is `A_v + B_n + s·C_vn`; caption
//! centroid is `P_v + Q_n`. Items add isotropic Gaussian noise. Target video
//! features pass through an affine map `x ↦ M x + b` after the noise.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    write_features, write_metadata, ActionLabel, Captions, DatasetLayout, Domain, Gallery, MetadataRecord, TargetTruth,
    Vocabulary,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shift {
    Identity,
    /// Rotation by `rotation_angle` radians in `dim/2` random orthogonal
    /// planes, then a translation of norm `translation_norm` in a random
    /// direction.
    Random {
        rotation_angle: f64,
        translation_norm: f64,
    },
    Affine {
        matrix: Vec<Vec<f64>>,
        translation: Vec<f64>,
    },
}

impl Shift {
    /// Concrete `(M, b)`; random shifts draw from `rng`.
    pub fn resolve<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Result<(Array2<f64>, Array1<f64>)> {
        match self {
            Shift::Identity => Ok((Array2::eye(dim), Array1::zeros(dim))),
            Shift::Random {
                rotation_angle,
                translation_norm,
            } => {
                let gauss = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
                let q = gauss.qr().q();
                let (c, s) = (rotation_angle.cos(), rotation_angle.sin());
                let mut block = DMatrix::<f64>::identity(dim, dim);
                for k in 0..dim / 2 {
                    let (i, j) = (2 * k, 2 * k + 1);
                    block[(i, i)] = c;
                    block[(j, j)] = c;
                    block[(i, j)] = -s;
                    block[(j, i)] = s;
                }
                let m = &q * block * q.transpose();
                let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|x| *x *= translation_norm / norm);
                Ok((Array2::from_shape_fn((dim, dim), |(i, j)| m[(i, j)]), Array1::from(dir)))
            }
            Shift::Affine { matrix, translation } => {
                if matrix.len() != dim || matrix.iter().any(|r| r.len() != dim) || translation.len() != dim {
                    return Err(Error::Config(format!(
                        "affine shift must be {dim}x{dim} plus a {dim}-vector"
                    )));
                }
                let m = Array2::from_shape_fn((dim, dim), |(i, j)| matrix[i][j]);
                let det = DMatrix::from_fn(dim, dim, |i, j| m[[i, j]]).determinant();
                if !det.is_finite() || det.abs() < 1e-12 {
                    return Err(Error::Config("affine shift is not invertible".into()));
                }
                Ok((m, Array1::from(translation.clone())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_verbs: u32,
    pub num_nouns: u32,
    /// Items per action in each domain (before imbalance).
    pub items_per_action: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    /// Per-coordinate noise of video features.
    pub cluster_std: f64,
    /// Per-coordinate noise of caption features.
    pub text_std: f64,
    /// Weight of the action-specific part of each video centroid.
    pub action_scale: f64,
    pub shift: Shift,
    /// Action `k` (in a seeded order) keeps `items·(k+1)^-α` items.
    pub class_imbalance: Option<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_verbs: 5,
            num_nouns: 5,
            items_per_action: 20,
            feature_dim: 32,
            text_dim: 16,
            cluster_std: 0.4,
            text_std: 0.4,
            action_scale: 0.5,
            shift: Shift::Random {
                rotation_angle: 1.1,
                translation_norm: 1.2,
            },
            class_imbalance: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.num_verbs == 0 || self.num_nouns == 0 || self.items_per_action == 0 {
            return bad("class counts and items per action must be positive");
        }
        if self.feature_dim == 0 || self.text_dim == 0 {
            return bad("dims must be positive");
        }
        if !(self.cluster_std > 0.0 && self.text_std > 0.0) || !self.action_scale.is_finite() || self.action_scale < 0.0
        {
            return bad("noise levels must be positive and action scale non-negative");
        }
        if let Some(a) = self.class_imbalance {
            if !a.is_finite() || a < 0.0 {
                return bad("class imbalance exponent must be non-negative");
            }
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        (self.num_verbs * self.num_nouns) as usize
    }

    /// Items per action, indexed `verb * num_nouns + noun`.
    pub fn action_counts<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = self.num_actions();
        match self.class_imbalance {
            None => vec![self.items_per_action; n],
            Some(alpha) => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                let mut counts = vec![0; n];
                for (rank, &a) in order.iter().enumerate() {
                    let c = self.items_per_action as f64 * ((rank + 1) as f64).powf(-alpha);
                    counts[a] = (c.round() as usize).max(1);
                }
                counts
            }
        }
    }
}

/// Generated benchmark held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub vocab: Vocabulary,
    pub source: Gallery,
    pub target: Gallery,
    pub truth: TargetTruth,
}

fn gaussian_rows<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn domain_items<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &SynthSpec,
    counts: &[usize],
    video_centroids: &Array2<f64>,
    text_centroids: &Array2<f64>,
) -> (Vec<ActionLabel>, Array2<f64>, Array2<f64>) {
    let mut labels: Vec<ActionLabel> = counts
        .iter()
        .enumerate()
        .flat_map(|(a, &c)| {
            let label = ActionLabel {
                verb: (a / spec.num_nouns as usize) as u32,
                noun: (a % spec.num_nouns as usize) as u32,
            };
            std::iter::repeat_n(label, c)
        })
        .collect();
    labels.shuffle(rng);
    let action = |l: &ActionLabel| (l.verb * spec.num_nouns + l.noun) as usize;
    let rows: Vec<usize> = labels.iter().map(action).collect();
    let video =
        video_centroids.select(Axis(0), &rows) + gaussian_rows(rng, rows.len(), spec.feature_dim) * spec.cluster_std;
    let text = text_centroids.select(Axis(0), &rows) + gaussian_rows(rng, rows.len(), spec.text_dim) * spec.text_std;
    (labels, video, text)
}

fn raw_caption(l: ActionLabel) -> Option<String> {
    Some(format!("verb{} noun{}", l.verb, l.noun))
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (nv, nn) = (spec.num_verbs as usize, spec.num_nouns as usize);
    let verb_v = gaussian_rows(&mut rng, nv, spec.feature_dim);
    let noun_v = gaussian_rows(&mut rng, nn, spec.feature_dim);
    let act_v = gaussian_rows(&mut rng, nv * nn, spec.feature_dim);
    let verb_t = gaussian_rows(&mut rng, nv, spec.text_dim);
    let noun_t = gaussian_rows(&mut rng, nn, spec.text_dim);
    let video_centroids = Array2::from_shape_fn((nv * nn, spec.feature_dim), |(a, j)| {
        verb_v[[a / nn, j]] + noun_v[[a % nn, j]] + spec.action_scale * act_v[[a, j]]
    });
    let text_centroids = Array2::from_shape_fn((nv * nn, spec.text_dim), |(a, j)| {
        verb_t[[a / nn, j]] + noun_t[[a % nn, j]]
    });
    let (m, b) = spec.shift.resolve(spec.feature_dim, &mut rng)?;
    let counts = spec.action_counts(&mut rng);

    let (src_labels, src_video, src_text) = domain_items(&mut rng, spec, &counts, &video_centroids, &text_centroids);
    let (tgt_labels, tgt_clean, tgt_text) = domain_items(&mut rng, spec, &counts, &video_centroids, &text_centroids);
    let tgt_video = tgt_clean.dot(&m.t()) + &b;

    let src_raw = src_labels.iter().map(|&l| raw_caption(l)).collect();
    let tgt_raw = tgt_labels.iter().map(|&l| raw_caption(l)).collect();
    let n_src = src_labels.len();
    let n_tgt = tgt_labels.len();
    let source = Gallery::source(
        (0..n_src).collect(),
        src_video,
        Captions::new(src_labels, src_text, src_raw)?,
    )?;
    let target = Gallery::target((0..n_tgt).collect(), tgt_video)?;
    let truth = TargetTruth::new((0..n_tgt).collect(), Captions::new(tgt_labels, tgt_text, tgt_raw)?)?;
    Ok(SynthData {
        vocab: Vocabulary {
            verbs: spec.num_verbs,
            nouns: spec.num_nouns,
        },
        source,
        target,
        truth,
    })
}

fn caption_records(domain: Domain, captions: &Captions) -> Vec<MetadataRecord> {
    captions
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| MetadataRecord {
            id: i as u64,
            domain,
            verb: Some(l.verb),
            noun: Some(l.noun),
            text_feature_row: Some(i as u32),
            raw: captions.raw[i].clone(),
        })
        .collect()
}

/// Writes every dataset file plus the spec under `root`.
pub fn write_dataset(data: &SynthData, spec: &SynthSpec, root: &Path) -> Result<DatasetLayout> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let layout = DatasetLayout::new(root);
    data.vocab.save(&layout.vocab())?;

    let src = layout.source();
    let captions = data.source.require_captions()?;
    write_features(&src.video, &data.source.video().to_owned())?;
    write_features(src.text.as_ref().expect("source layout has text"), &captions.text)?;
    write_metadata(&src.metadata, &caption_records(Domain::Source, captions))?;

    let tgt = layout.target();
    write_features(&tgt.video, &data.target.video().to_owned())?;
    let bare: Vec<MetadataRecord> = (0..data.target.len())
        .map(|i| MetadataRecord {
            id: i as u64,
            domain: Domain::Target,
            verb: None,
            noun: None,
            text_feature_row: None,
            raw: None,
        })
        .collect();
    write_metadata(&tgt.metadata, &bare)?;
    write_features(&layout.truth_text(), &data.truth.captions().text)?;
    write_metadata(
        &layout.truth_metadata(),
        &caption_records(Domain::Target, data.truth.captions()),
    )?;

    let spec_json = serde_json::to_string_pretty(spec)?;
    std::fs::write(layout.spec(), spec_json + "\n").map_err(|e| Error::io(layout.spec(), e))?;
    Ok(layout)
}

/// [`generate`] followed by [`write_dataset`].
pub fn generate_to(spec: &SynthSpec, root: &Path) -> Result<DatasetLayout> {
    let data = generate(spec)?;
    write_dataset(&data, spec, root)
}
