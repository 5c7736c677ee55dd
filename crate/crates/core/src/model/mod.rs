//! Multi-view video/text embedding model.
//!
//! Verb and noun views each own a video-side and a text-side
//! [`EmbeddingNet`]. The action embedding of an input is the L2-normalized
//! concatenation of its verb and noun embeddings, optionally passed through
//! a learned affine head (one per modality) that normalizes again.

mod checkpoint;

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionRecord, View};
use crate::error::{Error, Result};
use crate::linalg::{check_dims, DenseVector, NORM_EPS};
use crate::nn::{EmbeddingNet, ForwardCache, NetGrads, SgdState};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub video_dim: usize,
    pub text_dim: usize,
    pub video_hidden: Vec<usize>,
    pub text_hidden: Vec<usize>,
    /// Output width of the verb and noun spaces.
    pub embed_dim: usize,
    /// Learned affine head on the concatenated action vector.
    pub action_head: bool,
}

impl ModelConfig {
    /// Reference widths: 228 video hidden, 1664 text hidden, 256-d views.
    pub fn reference(video_dim: usize, text_dim: usize) -> Self {
        ModelConfig {
            video_dim,
            text_dim,
            video_hidden: vec![228],
            text_hidden: vec![1664],
            embed_dim: 256,
            action_head: false,
        }
    }

    pub fn action_dim(&self) -> usize {
        2 * self.embed_dim
    }

    fn dims(&self, modality: Modality) -> Vec<usize> {
        let (input, hidden) = match modality {
            Modality::Video => (self.video_dim, &self.video_hidden),
            Modality::Text => (self.text_dim, &self.text_hidden),
        };
        std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(self.embed_dim))
            .collect()
    }
}

/// Video-side and text-side networks of one space.
#[derive(Debug, Clone, PartialEq)]
pub struct NetPair {
    pub video: EmbeddingNet,
    pub text: EmbeddingNet,
}

impl NetPair {
    pub fn get(&self, modality: Modality) -> &EmbeddingNet {
        match modality {
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }

    pub fn get_mut(&mut self, modality: Modality) -> &mut EmbeddingNet {
        match modality {
            Modality::Video => &mut self.video,
            Modality::Text => &mut self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewModel {
    config: ModelConfig,
    pub verb: NetPair,
    pub noun: NetPair,
    pub action_head: Option<NetPair>,
}

impl MultiViewModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let pair = |rng: &mut R| -> Result<NetPair> {
            Ok(NetPair {
                video: EmbeddingNet::new(&config.dims(Modality::Video), rng)?,
                text: EmbeddingNet::new(&config.dims(Modality::Text), rng)?,
            })
        };
        let verb = pair(rng)?;
        let noun = pair(rng)?;
        let action_head = if config.action_head {
            let d = config.action_dim();
            Some(NetPair {
                video: EmbeddingNet::new(&[d, d], rng)?,
                text: EmbeddingNet::new(&[d, d], rng)?,
            })
        } else {
            None
        };
        Ok(MultiViewModel {
            config,
            verb,
            noun,
            action_head,
        })
    }

    pub(crate) fn from_parts(verb: NetPair, noun: NetPair, action_head: Option<NetPair>) -> Result<Self> {
        let embed_dim = verb.video.output_dim();
        for net in [&verb.text, &noun.video, &noun.text] {
            check_dims("view output width", embed_dim, net.output_dim())?;
        }
        check_dims("video input width", verb.video.input_dim(), noun.video.input_dim())?;
        check_dims("text input width", verb.text.input_dim(), noun.text.input_dim())?;
        if let Some(head) = &action_head {
            for net in [&head.video, &head.text] {
                check_dims("action head input", 2 * embed_dim, net.input_dim())?;
                check_dims("action head output", 2 * embed_dim, net.output_dim())?;
            }
        }
        let hidden = |net: &EmbeddingNet| net.layers()[1..].iter().map(|l| l.input_dim()).collect::<Vec<_>>();
        let config = ModelConfig {
            video_dim: verb.video.input_dim(),
            text_dim: verb.text.input_dim(),
            video_hidden: hidden(&verb.video),
            text_hidden: hidden(&verb.text),
            embed_dim,
            action_head: action_head.is_some(),
        };
        Ok(MultiViewModel {
            config,
            verb,
            noun,
            action_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn view_dim(&self, view: View) -> usize {
        match view {
            View::Action => self.config.action_dim(),
            _ => self.config.embed_dim,
        }
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Video => self.config.video_dim,
            Modality::Text => self.config.text_dim,
        }
    }

    /// Named networks in a fixed order (checkpoint order).
    pub fn networks(&self) -> Vec<(&'static str, &EmbeddingNet)> {
        let mut nets = vec![
            ("verb.video", &self.verb.video),
            ("verb.text", &self.verb.text),
            ("noun.video", &self.noun.video),
            ("noun.text", &self.noun.text),
        ];
        if let Some(head) = &self.action_head {
            nets.push(("action.video", &head.video));
            nets.push(("action.text", &head.text));
        }
        nets
    }

    /// Forward pass over a batch of raw features, keeping what backward needs.
    pub fn forward(&self, features: ArrayView2<'_, f64>, modality: Modality) -> Result<MultiViewForward> {
        check_dims("model input", self.input_dim(modality), features.ncols())?;
        let verb = self.verb.get(modality).forward_batch(features)?;
        let noun = self.noun.get(modality).forward_batch(features)?;
        let concat = concatenate(Axis(1), &[verb.output.view(), noun.output.view()]).expect("same rows");
        let (action, stage) = match &self.action_head {
            None => {
                let (normed, norms) = normalize_rows(&concat);
                (normed, ActionStage::Normalize { norms })
            }
            Some(head) => {
                let cache = head.get(modality).forward_batch(concat.view())?;
                (cache.output.clone(), ActionStage::Head(Box::new(cache)))
            }
        };
        Ok(MultiViewForward {
            modality,
            verb,
            noun,
            stage,
            action,
        })
    }

    /// Accumulates parameter gradients of `Σ upstream ⊙ embeddings` into `grads`.
    pub fn backward(&self, fwd: &MultiViewForward, upstream: &ViewGrads, grads: &mut ModelGrads) -> Result<()> {
        let m = fwd.modality;
        let d = self.config.embed_dim;
        let mut verb_up = upstream.verb.clone();
        let mut noun_up = upstream.noun.clone();
        if upstream.action_active {
            let dconcat = match (&fwd.stage, &self.action_head) {
                (ActionStage::Normalize { norms }, None) => {
                    normalize_rows_backward(&fwd.action, norms, upstream.action.view())
                }
                (ActionStage::Head(cache), Some(head)) => {
                    let (g, dx) = head.get(m).backward_batch(cache, upstream.action.view())?;
                    grads
                        .action_head
                        .as_mut()
                        .expect("head grads allocated with head")
                        .get_mut(m)
                        .add_scaled(1.0, &g);
                    dx
                }
                _ => return Err(Error::Config("forward cache does not match model".into())),
            };
            verb_up += &dconcat.slice(ndarray::s![.., ..d]);
            noun_up += &dconcat.slice(ndarray::s![.., d..]);
        }
        let (gv, _) = self.verb.get(m).backward_batch(&fwd.verb, verb_up.view())?;
        grads.verb.get_mut(m).add_scaled(1.0, &gv);
        let (gn, _) = self.noun.get(m).backward_batch(&fwd.noun, noun_up.view())?;
        grads.noun.get_mut(m).add_scaled(1.0, &gn);
        Ok(())
    }

    pub fn embed_batch(&self, features: ArrayView2<'_, f64>, modality: Modality, view: View) -> Result<Array2<f64>> {
        let fwd = self.forward(features, modality)?;
        Ok(fwd.embeddings(view).to_owned())
    }

    pub fn embed_video(&self, video_feature: &DenseVector, view: View) -> Result<DenseVector> {
        self.embed_one(video_feature, Modality::Video, view)
    }

    pub fn embed_text(&self, caption: &CaptionRecord, view: View) -> Result<DenseVector> {
        self.embed_one(&caption.text_feature, Modality::Text, view)
    }

    fn embed_one(&self, x: &DenseVector, modality: Modality, view: View) -> Result<DenseVector> {
        check_dims("model input", self.input_dim(modality), x.dim())?;
        let row = ArrayView2::from_shape((1, x.dim()), x.as_slice()).expect("row view");
        let out = self.embed_batch(row, modality, view)?;
        DenseVector::new(out.row(0).to_vec())
    }
}

#[derive(Debug, Clone)]
enum ActionStage {
    Normalize { norms: Array1<f64> },
    Head(Box<ForwardCache>),
}

/// Cached forward pass of one modality through every view.
#[derive(Debug, Clone)]
pub struct MultiViewForward {
    modality: Modality,
    verb: ForwardCache,
    noun: ForwardCache,
    stage: ActionStage,
    action: Array2<f64>,
}

impl MultiViewForward {
    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn rows(&self) -> usize {
        self.action.nrows()
    }

    pub fn embeddings(&self, view: View) -> ArrayView2<'_, f64> {
        match view {
            View::Verb => self.verb.output.view(),
            View::Noun => self.noun.output.view(),
            View::Action => self.action.view(),
        }
    }

    pub fn zero_upstream(&self) -> ViewGrads {
        ViewGrads {
            verb: Array2::zeros(self.verb.output.raw_dim()),
            noun: Array2::zeros(self.noun.output.raw_dim()),
            action: Array2::zeros(self.action.raw_dim()),
            action_active: false,
        }
    }
}

/// Loss gradients with respect to the embeddings of one batch.
#[derive(Debug, Clone)]
pub struct ViewGrads {
    verb: Array2<f64>,
    noun: Array2<f64>,
    action: Array2<f64>,
    action_active: bool,
}

impl ViewGrads {
    pub fn get_mut(&mut self, view: View) -> &mut Array2<f64> {
        match view {
            View::Verb => &mut self.verb,
            View::Noun => &mut self.noun,
            View::Action => {
                self.action_active = true;
                &mut self.action
            }
        }
    }
}

fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut out = x.clone();
    for (mut row, &n) in out.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        if n >= NORM_EPS {
            row /= n;
        }
    }
    (out, norms)
}

fn normalize_rows_backward(y: &Array2<f64>, norms: &Array1<f64>, upstream: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut g = upstream.to_owned();
    Zip::from(g.rows_mut())
        .and(y.rows())
        .and(norms)
        .for_each(|mut g, y, &n| {
            if n >= NORM_EPS {
                let p = g.dot(&y);
                g.scaled_add(-p, &y);
                g /= n;
            }
        });
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGrads {
    pub video: NetGrads,
    pub text: NetGrads,
}

impl PairGrads {
    fn zeros(pair: &NetPair) -> Self {
        PairGrads {
            video: NetGrads::zeros_like(&pair.video),
            text: NetGrads::zeros_like(&pair.text),
        }
    }

    pub fn get(&self, modality: Modality) -> &NetGrads {
        match modality {
            Modality::Video => &self.video,
            Modality::Text => &self.text,
        }
    }

    pub fn get_mut(&mut self, modality: Modality) -> &mut NetGrads {
        match modality {
            Modality::Video => &mut self.video,
            Modality::Text => &mut self.text,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub verb: PairGrads,
    pub noun: PairGrads,
    pub action_head: Option<PairGrads>,
}

impl ModelGrads {
    pub fn zeros(model: &MultiViewModel) -> Self {
        ModelGrads {
            verb: PairGrads::zeros(&model.verb),
            noun: PairGrads::zeros(&model.noun),
            action_head: model.action_head.as_ref().map(PairGrads::zeros),
        }
    }

    pub fn add_scaled(&mut self, scale: f64, other: &ModelGrads) {
        self.verb.video.add_scaled(scale, &other.verb.video);
        self.verb.text.add_scaled(scale, &other.verb.text);
        self.noun.video.add_scaled(scale, &other.noun.video);
        self.noun.text.add_scaled(scale, &other.noun.text);
        if let (Some(a), Some(b)) = (&mut self.action_head, &other.action_head) {
            a.video.add_scaled(scale, &b.video);
            a.text.add_scaled(scale, &b.text);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for pair in [&mut self.verb, &mut self.noun]
            .into_iter()
            .chain(self.action_head.as_mut())
        {
            pair.video.scale(factor);
            pair.text.scale(factor);
        }
    }

    /// Named gradients in the same order as [`MultiViewModel::networks`].
    pub fn networks(&self) -> Vec<(&'static str, &NetGrads)> {
        let mut nets = vec![
            ("verb.video", &self.verb.video),
            ("verb.text", &self.verb.text),
            ("noun.video", &self.noun.video),
            ("noun.text", &self.noun.text),
        ];
        if let Some(head) = &self.action_head {
            nets.push(("action.video", &head.video));
            nets.push(("action.text", &head.text));
        }
        nets
    }
}

/// One momentum-SGD state per network.
#[derive(Debug, Clone)]
pub struct ModelSgd {
    verb: [SgdState; 2],
    noun: [SgdState; 2],
    head: Option<[SgdState; 2]>,
}

impl ModelSgd {
    pub fn new(model: &MultiViewModel, learning_rate: f64, momentum: f64) -> Result<Self> {
        let pair = |p: &NetPair| -> Result<[SgdState; 2]> {
            Ok([
                SgdState::new(&p.video, learning_rate, momentum)?,
                SgdState::new(&p.text, learning_rate, momentum)?,
            ])
        };
        Ok(ModelSgd {
            verb: pair(&model.verb)?,
            noun: pair(&model.noun)?,
            head: model.action_head.as_ref().map(pair).transpose()?,
        })
    }

    fn states(&self) -> Vec<&SgdState> {
        self.verb
            .iter()
            .chain(&self.noun)
            .chain(self.head.iter().flatten())
            .collect()
    }

    /// Flattened velocity of each network, ordered as [`MultiViewModel::networks`].
    pub fn velocities(&self) -> Vec<Vec<f64>> {
        self.states().iter().map(|s| s.velocity().flatten()).collect()
    }

    pub fn restore_velocities(&mut self, velocities: &[Vec<f64>]) -> Result<()> {
        let states: Vec<&mut SgdState> = self
            .verb
            .iter_mut()
            .chain(&mut self.noun)
            .chain(self.head.iter_mut().flatten())
            .collect();
        if states.len() != velocities.len() {
            return Err(Error::CountMismatch {
                left_name: "optimizer networks",
                left: states.len(),
                right_name: "stored velocities",
                right: velocities.len(),
            });
        }
        for (s, v) in states.into_iter().zip(velocities) {
            s.restore_velocity(v)?;
        }
        Ok(())
    }

    pub fn step(&mut self, model: &mut MultiViewModel, grads: &ModelGrads) -> Result<()> {
        fn pair(states: &mut [SgdState; 2], nets: &mut NetPair, g: &PairGrads) -> Result<()> {
            states[0].step(&mut nets.video, &g.video)?;
            states[1].step(&mut nets.text, &g.text)
        }
        pair(&mut self.verb, &mut model.verb, &grads.verb)?;
        pair(&mut self.noun, &mut model.noun, &grads.noun)?;
        match (&mut self.head, &mut model.action_head, &grads.action_head) {
            (Some(s), Some(n), Some(g)) => pair(s, n, g),
            (None, None, None) => Ok(()),
            _ => Err(Error::Config(
                "action head present in only some of model/grads/optimizer".into(),
            )),
        }
    }
}
