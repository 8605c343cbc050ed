//! The cross-modal referrer: class-aware audio-visual maps, the binarized
//! visual mass that regularizes the audio distribution, and the symmetric KL
//! objective of the second training stage.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    audio_backward, encode_audio_full, encode_visual_full, make_batches, AudioEncoding, AvPair,
    EncoderParams, VisualEncoding,
};
use crate::error::{IerError, Result};
use crate::identifier::{distinguishing_step, expand_features, StepParams};
use crate::numerics::{
    axpy, cosine_sim, dot, global_avg_pool, kl_divergence, norm, normalize_backward, remap_similarity, softmax,
    BinaryMask, FeatureGrid, Matrix, SimilarityMap,
};
use crate::optim::{Adam, ParamSet};
use crate::prototypes::{PrototypeBank, PrototypeSet};

/// Below this total magnitude the mask-weighted audio scores are treated as
/// degenerate.
pub const SCORE_FLOOR: f64 = 1e-12;

/// How class visual maps become per-class visual weights for the audio
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMode {
    /// Fixed threshold.
    Constant(f64),
    /// Ratio of the largest response anywhere in the batch.
    BatchMaxRatio(f64),
    /// Ratio of the largest response of the item's own maps.
    ItemMaxRatio(f64),
    /// No binarization: average-pooled visual maps weight the scores.
    GapWeight,
    /// Mean response over every map of the batch.
    BatchMean,
}

impl ThresholdMode {
    /// Builds a mode from its index 1–5; `value` is the constant for mode 1
    /// and the ratio for modes 2 and 3.
    pub fn from_index(index: u8, value: f64) -> Result<Self> {
        match index {
            1 => Ok(ThresholdMode::Constant(value)),
            2 => Ok(ThresholdMode::BatchMaxRatio(value)),
            3 => Ok(ThresholdMode::ItemMaxRatio(value)),
            4 => Ok(ThresholdMode::GapWeight),
            5 => Ok(ThresholdMode::BatchMean),
            _ => Err(IerError::config(format!("threshold mode must be 1-5, got {index}"))),
        }
    }

    pub fn index(&self) -> u8 {
        match self {
            ThresholdMode::Constant(_) => 1,
            ThresholdMode::BatchMaxRatio(_) => 2,
            ThresholdMode::ItemMaxRatio(_) => 3,
            ThresholdMode::GapWeight => 4,
            ThresholdMode::BatchMean => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferrerConfig {
    pub threshold: ThresholdMode,
    /// Multiply class visual maps by the class audio similarity map.
    pub silent_filter: bool,
    /// Weight audio scores by the visual mask mass.
    pub offscreen_filter: bool,
}

impl Default for ReferrerConfig {
    fn default() -> Self {
        ReferrerConfig {
            threshold: ThresholdMode::BatchMean,
            silent_filter: true,
            offscreen_filter: true,
        }
    }
}

/// Everything needed for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoders: EncoderParams,
    pub steps: StepParams,
    pub prototypes: PrototypeSet,
}

impl Model {
    pub fn k(&self) -> usize {
        self.prototypes.k()
    }

    pub fn check(&self) -> Result<()> {
        self.encoders.check()?;
        let (k, c, m) = (self.k(), self.encoders.embed_dim(), self.encoders.mid_dim());
        if self.steps.k() != k || self.steps.embed_dim() != c || self.steps.mid_dim() != m {
            return Err(IerError::config("step parameters do not match the model"));
        }
        if self.prototypes.visual.dim() != c || self.prototypes.audio.dim() != c {
            return Err(IerError::config("prototype dimension does not match the encoders"));
        }
        Ok(())
    }
}

/// `L^v_k = l(f^v, P^v_k)` for every class.
pub fn class_visual_maps(features: &FeatureGrid, protos: &PrototypeBank) -> Result<Vec<SimilarityMap>> {
    protos
        .matrix
        .iter_rows()
        .map(|p| crate::numerics::localization_map(features, p))
        .collect()
}

/// `L^av_k = l(f^v, F_k) ⊙ L^v_k`.
pub fn class_av_maps(
    features: &FeatureGrid,
    expanded: &Matrix,
    visual_maps: &[SimilarityMap],
) -> Result<Vec<SimilarityMap>> {
    if expanded.rows != visual_maps.len() {
        return Err(IerError::domain("one expanded feature per visual map is required"));
    }
    visual_maps
        .iter()
        .enumerate()
        .map(|(k, lv)| {
            let a = crate::numerics::localization_map(features, expanded.row(k))?;
            if a.data.len() != lv.data.len() {
                return Err(IerError::domain("map sizes differ"));
            }
            let data = a.data.iter().zip(&lv.data).map(|(x, y)| x * y).collect();
            SimilarityMap::new(lv.height, lv.width, data)
        })
        .collect()
}

/// `softmax(GAP(L^av_1), …, GAP(L^av_K))`.
pub fn visual_guided_distribution(av_maps: &[SimilarityMap]) -> Result<Vec<f64>> {
    let gaps = av_maps.iter().map(global_avg_pool).collect::<Result<Vec<_>>>()?;
    Ok(softmax(&gaps))
}

/// Mean over every cell of every map of every batch item.
pub fn batch_mean_threshold(batch: &[Vec<SimilarityMap>]) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for maps in batch {
        for m in maps {
            sum += m.data.iter().sum::<f64>();
            count += m.data.len();
        }
    }
    if count == 0 {
        return Err(IerError::domain("threshold of an empty batch"));
    }
    Ok(sum / count as f64)
}

fn max_response(maps: &[SimilarityMap]) -> f64 {
    maps.iter().map(SimilarityMap::max).fold(f64::NEG_INFINITY, f64::max)
}

/// Per-item binarization thresholds; `None` for [`ThresholdMode::GapWeight`].
pub fn batch_thresholds(mode: ThresholdMode, batch: &[Vec<SimilarityMap>]) -> Result<Vec<Option<f64>>> {
    if batch.is_empty() {
        return Err(IerError::domain("threshold of an empty batch"));
    }
    Ok(match mode {
        ThresholdMode::Constant(c) => vec![Some(c); batch.len()],
        ThresholdMode::BatchMaxRatio(r) => {
            let m = batch.iter().map(|b| max_response(b)).fold(f64::NEG_INFINITY, f64::max);
            vec![Some(r * m); batch.len()]
        }
        ThresholdMode::ItemMaxRatio(r) => batch.iter().map(|b| Some(r * max_response(b))).collect(),
        ThresholdMode::GapWeight => vec![None; batch.len()],
        ThresholdMode::BatchMean => vec![Some(batch_mean_threshold(batch)?); batch.len()],
    })
}

pub fn binary_masks(visual_maps: &[SimilarityMap], threshold: f64) -> Vec<BinaryMask> {
    visual_maps.iter().map(|m| BinaryMask::above(m, threshold)).collect()
}

/// Audio-guided distribution and the quantities it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioGuided {
    /// `cos(P^a_k, F_k)`.
    pub similarities: Vec<f64>,
    /// `p^a_k`: similarities remapped to `[0, 1]` so that the normalizing sum
    /// cannot change sign.
    pub probabilities: Vec<f64>,
    /// Visual weight of each class (mask coverage, or GAP of `L^v`).
    pub weights: Vec<f64>,
    /// `weight · similarity`, before normalization.
    pub raw_scores: Vec<f64>,
    /// Scores after normalization by their sum (the softmax input).
    pub scores: Vec<f64>,
    pub distribution: Vec<f64>,
    /// Set when the scores were degenerate and raw similarities were used.
    pub fallback: bool,
}

/// Normalizes `weights ⊙ p^a` by its sum and applies softmax. Degenerate
/// scores (total magnitude or sum below [`SCORE_FLOOR`]) fall back to
/// `softmax(p^a)`.
pub fn audio_guided_from_weights(
    protos: &PrototypeBank,
    expanded: &Matrix,
    weights: &[f64],
) -> Result<AudioGuided> {
    let k = protos.len();
    if expanded.rows != k || weights.len() != k {
        return Err(IerError::domain("audio-guided distribution needs one weight per class"));
    }
    let similarities = (0..k)
        .map(|n| cosine_sim(protos.row(n), expanded.row(n)))
        .collect::<Result<Vec<_>>>()?;
    let probabilities = similarities.iter().map(|&s| remap_similarity(s)).collect::<Result<Vec<_>>>()?;
    let raw_scores: Vec<f64> = weights.iter().zip(&probabilities).map(|(w, p)| w * p).collect();
    let total: f64 = raw_scores.iter().sum();
    let magnitude: f64 = raw_scores.iter().map(|s| s.abs()).sum();
    let (scores, fallback) = if magnitude < SCORE_FLOOR || total.abs() < SCORE_FLOOR {
        warn!("degenerate audio-guided scores; falling back to raw similarities");
        (probabilities.clone(), true)
    } else {
        (raw_scores.iter().map(|s| s / total).collect(), false)
    };
    Ok(AudioGuided {
        distribution: softmax(&scores),
        similarities,
        probabilities,
        weights: weights.to_vec(),
        raw_scores,
        scores,
        fallback,
    })
}

/// Audio-guided distribution with binary masks as visual weights.
pub fn audio_guided_distribution(
    protos: &PrototypeBank,
    expanded: &Matrix,
    masks: &[BinaryMask],
) -> Result<AudioGuided> {
    let weights: Vec<f64> = masks.iter().map(BinaryMask::coverage).collect();
    audio_guided_from_weights(protos, expanded, &weights)
}

/// `½ KL(p‖q) + ½ KL(q‖p)`.
pub fn cross_distillation_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(0.5 * kl_divergence(p, q)? + 0.5 * kl_divergence(q, p)?)
}

/// Forward quantities of one scene kept for inference and backprop.
struct SceneForward {
    visual: VisualEncoding,
    audio: AudioEncoding,
    expanded: Matrix,
    /// `K × cells` class visual responses.
    lv: Matrix,
}

fn forward_scene(model: &Model, grid: &FeatureGrid, latent: &[f64]) -> Result<SceneForward> {
    let visual = encode_visual_full(&model.encoders, grid)?;
    let audio = encode_audio_full(&model.encoders, latent)?;
    let delta = distinguishing_step(&model.steps, &audio.mid)?;
    let expanded = expand_features(&audio.feature, &delta)?;
    let k = model.k();
    let cells = visual.features.cells();
    let mut lv = Matrix::zeros(k, cells);
    for n in 0..k {
        let p = model.prototypes.visual.row(n);
        for (c, v) in visual.features.iter_cells().enumerate() {
            lv.data[n * cells + c] = dot(v, p).clamp(-1.0, 1.0);
        }
    }
    Ok(SceneForward {
        visual,
        audio,
        expanded,
        lv,
    })
}

fn lv_maps(f: &SceneForward) -> Vec<SimilarityMap> {
    let (h, w) = (f.visual.features.height, f.visual.features.width);
    f.lv
        .iter_rows()
        .map(|r| SimilarityMap {
            height: h,
            width: w,
            data: r.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub visual_maps: Vec<SimilarityMap>,
    pub av_maps: Vec<SimilarityMap>,
    pub p_va: Vec<f64>,
    pub p_av: Vec<f64>,
    pub audio: AudioGuided,
    /// Threshold used for the masks, if any.
    pub threshold: Option<f64>,
}

fn unit_rows(expanded: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut unit = expanded.clone();
    let mut norms = Vec::with_capacity(expanded.rows);
    for n in 0..expanded.rows {
        let nn = norm(expanded.row(n));
        if nn == 0.0 || !nn.is_finite() {
            return Err(IerError::domain(format!("expanded feature {n} has zero norm")));
        }
        for v in unit.row_mut(n) {
            *v /= nn;
        }
        norms.push(nn);
    }
    Ok((unit, norms))
}

/// Per-class maps fed to the visual-guided distribution.
fn av_responses(f: &SceneForward, unit: &Matrix, silent_filter: bool) -> Matrix {
    if !silent_filter {
        return f.lv.clone();
    }
    let cells = f.lv.cols;
    let mut out = f.lv.clone();
    for n in 0..unit.rows {
        for (c, v) in f.visual.features.iter_cells().enumerate() {
            out.data[n * cells + c] *= dot(v, unit.row(n)).clamp(-1.0, 1.0);
        }
    }
    out
}

fn class_weights(f: &SceneForward, config: &ReferrerConfig, threshold: Option<f64>) -> Vec<f64> {
    if !config.offscreen_filter {
        return vec![1.0; f.lv.rows];
    }
    match threshold {
        Some(eps) => f
            .lv
            .iter_rows()
            .map(|r| r.iter().filter(|&&v| v > eps).count() as f64 / r.len() as f64)
            .collect(),
        None => f.lv.iter_rows().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect(),
    }
}

fn finish(f: &SceneForward, model: &Model, config: &ReferrerConfig, threshold: Option<f64>) -> Result<Inference> {
    let (unit, _) = unit_rows(&f.expanded)?;
    let av = av_responses(f, &unit, config.silent_filter);
    let gaps: Vec<f64> = av.iter_rows().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let weights = class_weights(f, config, threshold);
    let audio = audio_guided_from_weights(&model.prototypes.audio, &f.expanded, &weights)?;
    let (h, w) = (f.visual.features.height, f.visual.features.width);
    Ok(Inference {
        visual_maps: lv_maps(f),
        av_maps: av
            .iter_rows()
            .map(|r| SimilarityMap {
                height: h,
                width: w,
                data: r.to_vec(),
            })
            .collect(),
        p_va: softmax(&gaps),
        p_av: audio.distribution.clone(),
        audio,
        threshold: if config.offscreen_filter { threshold } else { None },
    })
}

/// Inference over a batch of scenes; batch-level thresholds couple the items.
pub fn infer_batch(model: &Model, config: &ReferrerConfig, scenes: &[AvPair<'_>]) -> Result<Vec<Inference>> {
    model.check()?;
    if scenes.is_empty() {
        return Ok(Vec::new());
    }
    let forwards: Vec<SceneForward> = scenes
        .par_iter()
        .map(|(g, a)| forward_scene(model, g, a))
        .collect::<Result<_>>()?;
    let maps: Vec<Vec<SimilarityMap>> = forwards.iter().map(lv_maps).collect();
    let thresholds = batch_thresholds(config.threshold, &maps)?;
    forwards
        .par_iter()
        .zip(thresholds)
        .map(|(f, t)| finish(f, model, config, t))
        .collect()
}

/// Inference over a list of scenes in consecutive batches of `batch`.
pub fn infer_all(model: &Model, config: &ReferrerConfig, scenes: &[AvPair<'_>], batch: usize) -> Result<Vec<Inference>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        out.extend(infer_batch(model, config, chunk)?);
    }
    Ok(out)
}

/// Inference on a single scene; batch statistics come from the scene alone.
pub fn infer(model: &Model, config: &ReferrerConfig, grid: &FeatureGrid, latent: &[f64]) -> Result<Inference> {
    Ok(infer_batch(model, config, &[(grid, latent)])?.remove(0))
}

/// Gradients of the symmetric KL with respect to the logits of both
/// softmaxes: `(∂L/∂g, ∂L/∂r)` for `P = softmax(g)`, `Q = softmax(r)`.
pub fn distillation_logit_grads(p: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(a, b)| a.max(crate::numerics::KL_FLOOR).ln() - b.max(crate::numerics::KL_FLOOR).ln())
        .collect();
    let mean_p: f64 = p.iter().zip(&d).map(|(a, x)| a * x).sum();
    let mean_q: f64 = q.iter().zip(&d).map(|(b, x)| b * x).sum();
    let gg = (0..p.len()).map(|j| 0.5 * (p[j] * (d[j] - mean_p) + p[j] - q[j])).collect();
    let gr = (0..p.len()).map(|j| 0.5 * (q[j] * (mean_q - d[j]) + q[j] - p[j])).collect();
    (gg, gr)
}

fn scene_loss_and_grad(
    model: &Model,
    config: &ReferrerConfig,
    grid: &FeatureGrid,
    latent: &[f64],
    f: &SceneForward,
    threshold: Option<f64>,
    grads: &mut EncoderParams,
) -> Result<f64> {
    let k = model.k();
    let cells = f.lv.cols;
    let inv_cells = 1.0 / cells as f64;
    let (unit, fnorms) = unit_rows(&f.expanded)?;
    let av = av_responses(f, &unit, config.silent_filter);
    let gaps: Vec<f64> = av.iter_rows().map(|r| r.iter().sum::<f64>() * inv_cells).collect();
    let p_va = softmax(&gaps);
    let weights = class_weights(f, config, threshold);
    let guided = audio_guided_from_weights(&model.prototypes.audio, &f.expanded, &weights)?;
    let loss = cross_distillation_loss(&p_va, &guided.distribution)?;
    let (g_gap, g_scores) = distillation_logit_grads(&p_va, &guided.distribution);

    // back through the score normalization
    let g_prob: Vec<f64>;
    let mut g_weight = vec![0.0; k];
    if guided.fallback {
        g_prob = g_scores;
    } else {
        let total: f64 = guided.raw_scores.iter().sum();
        let proj: f64 = g_scores.iter().zip(&guided.scores).map(|(g, r)| g * r).sum();
        let g_raw: Vec<f64> = g_scores.iter().map(|g| (g - proj) / total).collect();
        g_prob = g_raw.iter().zip(&weights).map(|(g, w)| g * w).collect();
        for n in 0..k {
            g_weight[n] = g_raw[n] * guided.probabilities[n];
        }
    }
    // the remap halves the slope
    let g_sim: Vec<f64> = g_prob.iter().map(|g| 0.5 * g).collect();
    let weight_grad_flows = config.offscreen_filter && threshold.is_none();

    let c = f.visual.features.channels;
    let mut g_cells = vec![0.0; cells * c];
    let mut g_unit = Matrix::zeros(k, c);
    for n in 0..k {
        let g_av = g_gap[n] * inv_cells;
        let extra_lv = if weight_grad_flows { g_weight[n] * inv_cells } else { 0.0 };
        let u = unit.row(n);
        let p = model.prototypes.visual.row(n);
        for (ci, v) in f.visual.features.iter_cells().enumerate() {
            let lv = f.lv.data[n * cells + ci];
            let (g_lv, g_a) = if config.silent_filter {
                let a = dot(v, u).clamp(-1.0, 1.0);
                (g_av * a + extra_lv, g_av * lv)
            } else {
                (g_av + extra_lv, 0.0)
            };
            let gc = &mut g_cells[ci * c..(ci + 1) * c];
            axpy(gc, g_lv, p);
            if g_a != 0.0 {
                axpy(gc, g_a, u);
                axpy(g_unit.row_mut(n), g_a, v);
            }
        }
        axpy(g_unit.row_mut(n), g_sim[n], model.prototypes.audio.row(n));
    }
    crate::encoders::visual_backward(grid, &f.visual, &g_cells, grads);

    let mut g_feature = vec![0.0; c];
    let mut g_mid = vec![0.0; f.audio.mid.len()];
    for n in 0..k {
        let g_expanded = normalize_backward(unit.row(n), fnorms[n], g_unit.row(n));
        axpy(&mut g_feature, 1.0, &g_expanded);
        axpy(&mut g_mid, 1.0, &model.steps.steps[n].weight.mul_t_vec(&g_expanded));
    }
    audio_backward(&model.encoders, latent, &f.audio, &g_feature, Some(&g_mid), grads);
    Ok(loss)
}

/// Symmetric KL loss of one scene under a fixed threshold (ignored by the
/// weighting mode and when the off-screen filter is off) and its gradient
/// with respect to the encoders.
pub fn scene_loss(
    model: &Model,
    config: &ReferrerConfig,
    grid: &FeatureGrid,
    latent: &[f64],
    threshold: f64,
) -> Result<(f64, EncoderParams)> {
    let f = forward_scene(model, grid, latent)?;
    let t = match config.threshold {
        ThresholdMode::GapWeight => None,
        _ => Some(threshold),
    };
    let mut grads = model.encoders.zeros_like();
    let loss = scene_loss_and_grad(model, config, grid, latent, &f, t, &mut grads)?;
    Ok((loss, grads))
}

/// Mean loss and gradient of a batch; thresholds are computed from the batch
/// and held constant for differentiation.
pub fn batch_loss_and_grad(
    model: &Model,
    config: &ReferrerConfig,
    batch: &[AvPair<'_>],
) -> Result<(f64, EncoderParams)> {
    if batch.is_empty() {
        return Err(IerError::domain("empty batch"));
    }
    let forwards: Vec<SceneForward> = batch
        .par_iter()
        .map(|(g, a)| forward_scene(model, g, a))
        .collect::<Result<_>>()?;
    let maps: Vec<Vec<SimilarityMap>> = forwards.iter().map(lv_maps).collect();
    let thresholds = batch_thresholds(config.threshold, &maps)?;
    let per_item: Vec<(f64, EncoderParams)> = forwards
        .par_iter()
        .zip(batch.par_iter())
        .zip(thresholds)
        .map(|((f, (g, a)), t)| {
            let mut grads = model.encoders.zeros_like();
            let loss = scene_loss_and_grad(model, config, g, a, f, t, &mut grads)?;
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = model.encoders.zeros_like();
    for (l, g) in &per_item {
        total += l;
        grads.add_scaled(scale, g);
    }
    Ok((total * scale, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Minimizes the mean symmetric KL over unconstrained scenes by updating the
/// encoders only; steps and prototypes stay fixed. Returns the model and the
/// mean loss of every epoch.
pub fn train_stage2(
    model: &Model,
    referrer: &ReferrerConfig,
    data: &[AvPair<'_>],
    config: &Stage2Config,
) -> Result<(Model, Vec<f64>)> {
    model.check()?;
    let mut model = model.clone();
    if config.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if data.is_empty() {
        return Err(IerError::config("stage-2 training needs at least one scene"));
    }
    if config.batch == 0 {
        return Err(IerError::config("batch size must be positive"));
    }
    let mut adam = Adam::with_lr(config.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for idx in make_batches(data.len(), config.batch, &mut rng) {
            let batch: Vec<AvPair<'_>> = idx.iter().map(|&i| data[i]).collect();
            let (loss, grads) = batch_loss_and_grad(&model, referrer, &batch)?;
            total += loss * batch.len() as f64;
            adam.step(&mut model.encoders, &grads)?;
        }
        losses.push(total / data.len() as f64);
    }
    Ok((model, losses))
}
