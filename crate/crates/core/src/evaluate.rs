//! Evaluation protocol on synthetic scenes: category-level maps built from
//! pseudo-class maps, localization scores, clustering quality and audio
//! classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_audio, encode_visual, AvPair};
use crate::error::{IerError, Result};
use crate::identifier::identify;
use crate::metrics::{
    auc, binarize_prediction_with, ciou, iou_boxes, map_metric, multilabel_pr, nmi, success_rate,
    MetricsReport, UNKNOWN_CATEGORY,
};
use crate::numerics::{dot, SimilarityMap};
use crate::prototypes::object_feature;
use crate::referrer::{infer_all, Inference, Model, ReferrerConfig};
use crate::world::{log_uniform, mix_audio_latents, ScenePair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub batch: usize,
    /// Multi-label decision threshold.
    pub zeta: f64,
    /// Relative binarization ratio of predicted maps.
    pub binarize_ratio: f64,
    /// Replace the distinguishing steps by zero.
    pub disable_steps: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            batch: 32,
            zeta: 0.5,
            binarize_ratio: crate::metrics::BINARIZE_RATIO,
            disable_steps: false,
        }
    }
}

/// Elementwise maximum of the pseudo-class maps assigned to `category`;
/// `None` when no cluster maps to it.
pub fn category_map(maps: &[SimilarityMap], clusters: &[usize], category: usize) -> Option<SimilarityMap> {
    let mut out: Option<SimilarityMap> = None;
    for (m, _) in maps.iter().zip(clusters).filter(|(_, &c)| c == category) {
        match out.as_mut() {
            None => out = Some(m.clone()),
            Some(o) => {
                for (a, b) in o.data.iter_mut().zip(&m.data) {
                    *a = a.max(*b);
                }
            }
        }
    }
    out
}

/// Category-level scores: the best pseudo-class score of each category.
pub fn category_scores(scores: &[f64], clusters: &[usize], categories: usize) -> Vec<f64> {
    let mut out = vec![0.0; categories];
    for (&s, &c) in scores.iter().zip(clusters) {
        if c != UNKNOWN_CATEGORY && c < categories {
            out[c] = f64::max(out[c], s);
        }
    }
    out
}

/// Per-scene localization result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub ciou: f64,
    /// IoU per true category; `None` for absent categories.
    pub per_class: Vec<Option<f64>>,
}

/// Class-aware IoU of one scene over its on-screen sounding categories.
pub fn score_scene(
    inference: &Inference,
    scene: &ScenePair,
    clusters: &[usize],
    categories: usize,
    ratio: f64,
) -> Result<SceneScore> {
    let mut per_class = vec![None; categories];
    let presence: Vec<bool> = scene.labels.iter().map(|&l| l == 1).collect();
    for t in (0..categories).filter(|&t| presence[t]) {
        let value = match category_map(&inference.av_maps, clusters, t) {
            Some(map) => iou_boxes(&binarize_prediction_with(&map, ratio), &scene.spec.boxes_for(t))?,
            None => 0.0,
        };
        per_class[t] = Some(value);
    }
    let ious: Vec<f64> = per_class.iter().map(|v| v.unwrap_or(0.0)).collect();
    Ok(SceneScore {
        ciou: ciou(&ious, &presence)?,
        per_class,
    })
}

fn model_for(model: &Model, config: &EvalConfig) -> Model {
    let mut m = model.clone();
    if config.disable_steps {
        m.steps = crate::identifier::StepParams::zeros(m.k(), m.encoders.embed_dim(), m.encoders.mid_dim());
    }
    m
}

/// Localization scores of a list of scenes.
pub fn localize(
    model: &Model,
    referrer: &ReferrerConfig,
    config: &EvalConfig,
    scenes: &[ScenePair],
    clusters: &[usize],
    categories: usize,
) -> Result<(Vec<Inference>, Vec<SceneScore>)> {
    let m = model_for(model, config);
    let pairs: Vec<AvPair<'_>> = scenes.iter().map(|s| (&s.visual, s.audio.as_slice())).collect();
    let inferences = infer_all(&m, referrer, &pairs, config.batch)?;
    let scores = inferences
        .par_iter()
        .zip(scenes.par_iter())
        .map(|(inf, s)| score_scene(inf, s, clusters, categories, config.binarize_ratio))
        .collect::<Result<Vec<_>>>()?;
    Ok((inferences, scores))
}

/// The true class of a single-source scene.
pub fn single_class(scene: &ScenePair) -> Result<usize> {
    scene
        .spec
        .objects
        .iter()
        .find(|o| o.sounding)
        .map(|o| o.class)
        .ok_or_else(|| IerError::domain("scene has no sounding object"))
}

/// Nearest visual prototype of each scene's object feature.
pub fn assign_to_prototypes(model: &Model, scenes: &[ScenePair]) -> Result<Vec<usize>> {
    scenes
        .par_iter()
        .map(|s| {
            let v = encode_visual(&model.encoders, &s.visual)?;
            let (a, _) = encode_audio(&model.encoders, &s.audio)?;
            let obj = object_feature(&v, &a);
            let scores: Vec<f64> = model.prototypes.visual.matrix.iter_rows().map(|p| dot(p, &obj)).collect();
            Ok(crate::numerics::argmax(&scores).unwrap_or(0))
        })
        .collect()
}

/// A mixture of single sources with its audible categories.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMixture {
    pub latent: Vec<f64>,
    pub truth: Vec<bool>,
}

/// Two-source mixtures of distinct true classes: the loud source at volume
/// 1, the quiet one at `1 / r` with `r` log-uniform in `[1, max_ratio]`.
pub fn make_eval_mixtures(
    scenes: &[ScenePair],
    categories: usize,
    count: usize,
    max_ratio: f64,
    seed: u64,
) -> Result<Vec<LabeledMixture>> {
    let classes = scenes.iter().map(single_class).collect::<Result<Vec<_>>>()?;
    let mut distinct = classes.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(IerError::config("mixtures need at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let i = rng.gen_range(0..scenes.len());
        let j = rng.gen_range(0..scenes.len());
        if classes[i] == classes[j] {
            continue;
        }
        let r = log_uniform(&mut rng, 1.0, max_ratio);
        let latent = mix_audio_latents(&[(&scenes[i].audio, 1.0), (&scenes[j].audio, 1.0 / r)], 0.0, &mut rng)?;
        let mut truth = vec![false; categories];
        truth[classes[i]] = true;
        truth[classes[j]] = true;
        out.push(LabeledMixture { latent, truth });
    }
    Ok(out)
}

/// Mean per-sample precision/recall and mAP of category-level audio scores.
pub fn classify(
    model: &Model,
    config: &EvalConfig,
    latents: &[&[f64]],
    truths: &[Vec<bool>],
    clusters: &[usize],
    categories: usize,
) -> Result<(f64, f64, f64)> {
    if latents.is_empty() || latents.len() != truths.len() {
        return Err(IerError::domain("classification needs matching, nonempty inputs"));
    }
    let steps = (!config.disable_steps).then_some(&model.steps);
    let scores: Vec<Vec<f64>> = latents
        .par_iter()
        .map(|l| {
            let s = identify(&model.encoders, steps, &model.prototypes.audio, l)?;
            Ok(category_scores(&s, clusters, categories))
        })
        .collect::<Result<_>>()?;
    let (mut p, mut r) = (0.0, 0.0);
    for (s, t) in scores.iter().zip(truths) {
        let (pi, ri) = multilabel_pr(s, t, config.zeta)?;
        p += pi;
        r += ri;
    }
    let n = latents.len() as f64;
    Ok((p / n, r / n, map_metric(&scores, truths)?))
}

/// Full report: localization on unconstrained scenes, single-source IoU and
/// clustering, audio classification on the unconstrained mixtures.
pub struct Evaluation {
    pub report: MetricsReport,
    pub scene_scores: Vec<SceneScore>,
    pub single_ious: Vec<f64>,
}

pub fn evaluate(
    model: &Model,
    referrer: &ReferrerConfig,
    config: &EvalConfig,
    single: &[ScenePair],
    unconstrained: &[ScenePair],
    clusters: &[usize],
    categories: usize,
) -> Result<Evaluation> {
    if single.is_empty() || unconstrained.is_empty() {
        return Err(IerError::usage("evaluation needs single-source and unconstrained scenes"));
    }
    let (_, scene_scores) = localize(model, referrer, config, unconstrained, clusters, categories)?;
    let cious: Vec<f64> = scene_scores.iter().map(|s| s.ciou).collect();
    let (_, single_scores) = localize(model, referrer, config, single, clusters, categories)?;
    let single_ious: Vec<f64> = single_scores.iter().map(|s| s.ciou).collect();

    let truth = single.iter().map(single_class).collect::<Result<Vec<_>>>()?;
    let assigned = assign_to_prototypes(model, single)?;
    let latents: Vec<&[f64]> = unconstrained.iter().map(|s| s.audio.as_slice()).collect();
    let truths: Vec<Vec<bool>> = unconstrained
        .iter()
        .map(|s| s.spec.audible(categories).iter().map(|&b| b == 1).collect())
        .collect();
    let (precision, recall, map) = classify(model, config, &latents, &truths, clusters, categories)?;
    let report = MetricsReport {
        iou_05: success_rate(&single_ious, 0.5),
        auc: auc(&cious)?,
        ciou_03: success_rate(&cious, 0.3),
        nmi: nmi(&assigned, &truth)?,
        precision,
        recall,
        map,
    };
    report.validate()?;
    Ok(Evaluation {
        report,
        scene_scores,
        single_ious,
    })
}
