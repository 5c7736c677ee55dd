//! Shared by the integration targets: a finite-difference gradient check
//! and naive metric reimplementations.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xdomain::corpus::{Domain, View};
use xdomain::model::{Modality, ModelConfig, MultiViewModel};
use xdomain::nn::EmbeddingNet;
use xdomain::ranking::{evaluate_terms, Endpoint, LossInputs, LossKind, Reduction, TermBatch, Triplet};

const H: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
// Hinge terms have a kink at zero. A margin above the largest possible
// distance gap keeps every triplet active, so the loss is smooth.
const MARGIN: f64 = 2.5;

fn endpoints(kind: LossKind) -> ((Domain, Modality), (Domain, Modality)) {
    use Domain::*;
    use Modality::*;
    match kind {
        LossKind::VideoToText => ((Source, Video), (Source, Text)),
        LossKind::VideoToVideo => ((Source, Video), (Source, Video)),
        LossKind::TextToVideo => ((Source, Text), (Source, Video)),
        LossKind::TextToText => ((Source, Text), (Source, Text)),
        LossKind::SourceToTarget => ((Source, Video), (Target, Video)),
        LossKind::TargetToSource => ((Target, Video), (Source, Video)),
    }
}

fn terms(rng: &mut ChaCha8Rng, source: usize, target: usize) -> Vec<TermBatch> {
    let kinds = LossKind::SOURCE
        .into_iter()
        .chain([LossKind::SourceToTarget, LossKind::TargetToSource]);
    let mut out = Vec::new();
    for kind in kinds {
        let ((ad, am), (od, om)) = endpoints(kind);
        let rows = |d: Domain| if d == Domain::Source { source } else { target };
        for view in View::ALL {
            let mut batch = TermBatch::new(kind, view).weighted(rng.random_range(0.2..1.5));
            for _ in 0..3 {
                let mut end = |domain, modality| Endpoint {
                    domain,
                    modality,
                    row: rng.random_range(0..rows(domain)),
                };
                batch.triplets.push(Triplet {
                    anchor: end(ad, am),
                    positive: end(od, om),
                    negative: end(od, om),
                    view,
                });
            }
            out.push(batch);
        }
    }
    out
}

fn net_mut(model: &mut MultiViewModel, index: usize) -> &mut EmbeddingNet {
    match index {
        0 => &mut model.verb.video,
        1 => &mut model.verb.text,
        2 => &mut model.noun.video,
        3 => &mut model.noun.text,
        4 => &mut model.action_head.as_mut().unwrap().video,
        5 => &mut model.action_head.as_mut().unwrap().text,
        _ => unreachable!(),
    }
}

fn param_mut(net: &mut EmbeddingNet, mut index: usize) -> &mut f64 {
    for layer in net.layers_mut() {
        let w = layer.weight.len();
        if index < w {
            return layer.weight.iter_mut().nth(index).unwrap();
        }
        index -= w;
        let b = layer.bias.len();
        if index < b {
            return &mut layer.bias[index];
        }
        index -= b;
    }
    unreachable!()
}

fn features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Worst relative error and number of parameters checked.
pub fn gradient_check(seed: u64) -> (f64, usize) {
    let reduction = if seed.is_multiple_of(3) {
        Reduction::Sum
    } else {
        Reduction::Mean
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        video_dim: 5,
        text_dim: 4,
        video_hidden: vec![6],
        text_hidden: vec![5, 4],
        embed_dim: 3,
        action_head: seed.is_multiple_of(2),
    };
    let mut model = MultiViewModel::new(config, &mut rng).unwrap();
    // Nonzero biases so their gradients are exercised too.
    for i in 0..model.networks().len() {
        for layer in net_mut(&mut model, i).layers_mut() {
            layer.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
    }
    let sv = features(&mut rng, 6, 5);
    let st = features(&mut rng, 6, 4);
    let tv = features(&mut rng, 5, 5);
    let batches = terms(&mut rng, 6, 5);
    let inputs = LossInputs {
        source_video: sv.view(),
        source_text: st.view(),
        target_video: Some(tv.view()),
    };
    let loss = |m: &MultiViewModel| evaluate_terms(m, inputs, &batches, MARGIN, reduction).unwrap();

    let analytic: Vec<Vec<f64>> = loss(&model).grads.networks().iter().map(|(_, g)| g.flatten()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (n, grads) in analytic.iter().enumerate() {
        for (p, &a) in grads.iter().enumerate() {
            let orig = *param_mut(net_mut(&mut model, n), p);
            *param_mut(net_mut(&mut model, n), p) = orig + H;
            let up = loss(&model).total;
            *param_mut(net_mut(&mut model, n), p) = orig - H;
            let down = loss(&model).total;
            *param_mut(net_mut(&mut model, n), p) = orig;
            let numeric = (up - down) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

fn naive_dcg(rel: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, r) in rel.iter().enumerate() {
        total += r / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
    }
    total
}

/// `None` when nothing is relevant.
pub fn naive_ndcg(rel: &[f64]) -> Option<f64> {
    let mut ideal = Vec::new();
    for level in [1.0, 0.5] {
        ideal.extend(rel.iter().filter(|&&r| r == level));
    }
    ideal.resize(rel.len(), 0.0);
    let best = naive_dcg(&ideal);
    (best > 0.0).then(|| naive_dcg(rel) / best)
}

/// Binary relevance is `rel > 0.5`.
pub fn naive_ap(rel: &[f64]) -> Option<f64> {
    let relevant: Vec<usize> = (0..rel.len()).filter(|&i| rel[i] > 0.5).collect();
    if relevant.is_empty() {
        return None;
    }
    let precision_at = |k: usize| (0..=k).filter(|&i| rel[i] > 0.5).count() as f64 / (k + 1) as f64;
    Some(relevant.iter().map(|&k| precision_at(k)).sum::<f64>() / relevant.len() as f64)
}
