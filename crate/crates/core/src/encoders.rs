//! Reference affine encoders, the single-source correspondence loss and its
//! training loop.
//!
//! The visual encoder is one affine map applied per cell followed by L2
//! normalization. The audio encoder has two affine stages; the output of the
//! first one is the mid-level feature consumed by the distinguishing steps.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IerError, Result};
use crate::numerics::{
    dot, global_max_pool, localization_map, norm, normalize_backward, remap_similarity,
    remapped_bce_with_grad, bce, FeatureGrid, Matrix,
};
use crate::optim::{Adam, ParamSet};

/// `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    /// Uniform `±1/√in` initialization for weights and bias.
    pub fn random(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut weight = Matrix::zeros(output, input);
        for w in weight.data.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        let bias = (0..output).map(|_| rng.gen_range(-bound..bound)).collect();
        Affine { weight, bias }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weight.data[i * dim + i] = 1.0;
        }
        Affine {
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Affine {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.mul_vec(x);
        for (yi, b) in y.iter_mut().zip(&self.bias) {
            *yi += b;
        }
        y
    }

    /// Accumulates `∂L/∂W += g xᵀ`, `∂L/∂b += g` into `grad`.
    pub fn accumulate(&self, grad: &mut Affine, x: &[f64], g: &[f64]) {
        grad.weight.add_outer(1.0, g, x);
        for (gb, gi) in grad.bias.iter_mut().zip(g) {
            *gb += gi;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub visual: Affine,
    pub audio_mid: Affine,
    pub audio_out: Affine,
}

impl ParamSet for EncoderParams {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.visual.weight.data,
            &self.visual.bias,
            &self.audio_mid.weight.data,
            &self.audio_mid.bias,
            &self.audio_out.weight.data,
            &self.audio_out.bias,
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.visual.weight.data,
            &mut self.visual.bias,
            &mut self.audio_mid.weight.data,
            &mut self.audio_mid.bias,
            &mut self.audio_out.weight.data,
            &mut self.audio_out.bias,
        ]
    }
}

impl EncoderParams {
    pub fn random(c_in: usize, a_in: usize, embed: usize, mid: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut visual = Affine::random(c_in, embed, &mut rng);
        // Empty background cells then start degenerate instead of sharing one
        // direction that every audio feature can latch onto.
        visual.bias.fill(0.0);
        EncoderParams {
            visual,
            audio_mid: Affine::random(a_in, mid, &mut rng),
            audio_out: Affine::random(mid, embed, &mut rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.visual.output_dim()
    }

    pub fn mid_dim(&self) -> usize {
        self.audio_mid.output_dim()
    }

    pub fn check(&self) -> Result<()> {
        if self.audio_out.output_dim() != self.visual.output_dim()
            || self.audio_out.input_dim() != self.audio_mid.output_dim()
        {
            return Err(IerError::config("encoder dimensions are inconsistent"));
        }
        Ok(())
    }
}

/// Encoded grid plus the pre-normalization norms needed for backprop.
///
/// A zero norm marks a degenerate cell replaced by the uniform unit vector.
#[derive(Debug, Clone)]
pub struct VisualEncoding {
    pub features: FeatureGrid,
    pub pre_norms: Vec<f64>,
}

impl VisualEncoding {
    pub fn degenerate_cells(&self) -> usize {
        self.pre_norms.iter().filter(|&&n| n == 0.0).count()
    }
}

pub fn encode_visual_full(params: &EncoderParams, grid: &FeatureGrid) -> Result<VisualEncoding> {
    if grid.channels != params.visual.input_dim() {
        return Err(IerError::domain(format!(
            "visual encoder expects {} channels, grid has {}",
            params.visual.input_dim(),
            grid.channels
        )));
    }
    let c = params.embed_dim();
    let uniform = 1.0 / (c as f64).sqrt();
    let mut data = Vec::with_capacity(grid.cells() * c);
    let mut pre_norms = Vec::with_capacity(grid.cells());
    for cell in grid.iter_cells() {
        let z = params.visual.forward(cell);
        let n = norm(&z);
        if n > 0.0 && n.is_finite() {
            data.extend(z.iter().map(|v| v / n));
            pre_norms.push(n);
        } else {
            data.extend(std::iter::repeat(uniform).take(c));
            pre_norms.push(0.0);
        }
    }
    Ok(VisualEncoding {
        features: FeatureGrid {
            height: grid.height,
            width: grid.width,
            channels: c,
            data,
        },
        pre_norms,
    })
}

/// Per-cell affine map followed by L2 normalization.
pub fn encode_visual(params: &EncoderParams, grid: &FeatureGrid) -> Result<FeatureGrid> {
    let enc = encode_visual_full(params, grid)?;
    let bad = enc.degenerate_cells();
    if bad > 0 {
        warn!("{bad} visual cells had zero norm after the affine map; replaced by the uniform unit vector");
    }
    Ok(enc.features)
}

/// Backpropagates per-cell feature gradients (`cells × C`, row-major) into
/// the visual affine map. All-zero rows are skipped.
pub fn visual_backward(
    grid: &FeatureGrid,
    enc: &VisualEncoding,
    grad_features: &[f64],
    grads: &mut EncoderParams,
) {
    let c = enc.features.channels;
    for (idx, g) in grad_features.chunks_exact(c).enumerate() {
        let n = enc.pre_norms[idx];
        if n == 0.0 || g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let gz = normalize_backward(enc.features.cell(idx), n, g);
        grads.visual.weight.add_outer(1.0, &gz, grid.cell(idx));
        for (b, v) in grads.visual.bias.iter_mut().zip(&gz) {
            *b += v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct AudioEncoding {
    pub mid: Vec<f64>,
    pub pre_norm: f64,
    pub feature: Vec<f64>,
}

pub fn encode_audio_full(params: &EncoderParams, latent: &[f64]) -> Result<AudioEncoding> {
    if latent.len() != params.audio_mid.input_dim() {
        return Err(IerError::domain(format!(
            "audio encoder expects {} inputs, got {}",
            params.audio_mid.input_dim(),
            latent.len()
        )));
    }
    let mid = params.audio_mid.forward(latent);
    let y = params.audio_out.forward(&mid);
    let n = norm(&y);
    if n == 0.0 || !n.is_finite() {
        return Err(IerError::domain("audio feature has zero norm"));
    }
    Ok(AudioEncoding {
        feature: y.iter().map(|v| v / n).collect(),
        pre_norm: n,
        mid,
    })
}

/// Returns `(f^a, f_m)`: the unit audio feature and the mid-level feature.
pub fn encode_audio(params: &EncoderParams, latent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let enc = encode_audio_full(params, latent)?;
    Ok((enc.feature, enc.mid))
}

/// Backpropagates `∂L/∂f^a` (and optionally an extra `∂L/∂f_m`) into both
/// audio stages.
pub fn audio_backward(
    params: &EncoderParams,
    latent: &[f64],
    enc: &AudioEncoding,
    grad_feature: &[f64],
    grad_mid_extra: Option<&[f64]>,
    grads: &mut EncoderParams,
) {
    let gy = normalize_backward(&enc.feature, enc.pre_norm, grad_feature);
    params.audio_out.accumulate(&mut grads.audio_out, &enc.mid, &gy);
    let mut gm = params.audio_out.weight.mul_t_vec(&gy);
    if let Some(extra) = grad_mid_extra {
        for (a, b) in gm.iter_mut().zip(extra) {
            *a += b;
        }
    }
    params.audio_mid.accumulate(&mut grads.audio_mid, latent, &gm);
}

/// BCE between the remapped max-pooled localization map and `delta`.
pub fn correspondence_loss(audio: &[f64], visual: &FeatureGrid, delta: f64) -> Result<f64> {
    let map = localization_map(visual, audio)?;
    let peak = global_max_pool(&map)?;
    bce(remap_similarity(peak)?, delta)
}

/// Index and value of the best-matching cell for a unit audio feature.
fn peak_cell(features: &FeatureGrid, audio: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, cell) in features.iter_cells().enumerate() {
        let s = dot(cell, audio);
        if s > best.1 {
            best = (i, s);
        }
    }
    (best.0, best.1.clamp(-1.0, 1.0))
}

/// Correspondence loss of already-encoded inputs and its gradient, added
/// into `grads` with weight `scale`.
fn correspondence_backward(
    params: &EncoderParams,
    latent: &[f64],
    audio: &AudioEncoding,
    grid: &FeatureGrid,
    visual: &VisualEncoding,
    delta: f64,
    scale: f64,
    grads: &mut EncoderParams,
) -> Result<f64> {
    let (cell, s) = peak_cell(&visual.features, &audio.feature);
    let (loss, dl_ds) = remapped_bce_with_grad(s, delta)?;
    let g = scale * dl_ds;
    if g != 0.0 {
        let c = visual.features.channels;
        let mut grad_cells = vec![0.0; visual.features.data.len()];
        for (dst, a) in grad_cells[cell * c..(cell + 1) * c].iter_mut().zip(&audio.feature) {
            *dst = g * a;
        }
        visual_backward(grid, visual, &grad_cells, grads);
        let grad_audio: Vec<f64> = visual.features.cell(cell).iter().map(|v| g * v).collect();
        audio_backward(params, latent, audio, &grad_audio, None, grads);
    }
    Ok(loss)
}

/// Loss and parameter gradient of one correspondence term.
pub fn correspondence_loss_and_grad(
    params: &EncoderParams,
    latent: &[f64],
    grid: &FeatureGrid,
    delta: f64,
) -> Result<(f64, EncoderParams)> {
    let audio = encode_audio_full(params, latent)?;
    let visual = encode_visual_full(params, grid)?;
    let mut grads = params.zeros_like();
    let loss = correspondence_backward(params, latent, &audio, grid, &visual, delta, 1.0, &mut grads)?;
    Ok((loss, grads))
}

/// Splits `0..n` into shuffled batches of `batch` items; a trailing
/// singleton is folded into the previous batch.
pub fn make_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// A visual grid and its paired audio latent.
pub type AvPair<'a> = (&'a FeatureGrid, &'a [f64]);

/// Contrastive single-source training.
///
/// Each item in a batch contributes one matched term and one term against a
/// uniformly drawn other item of the same batch. Returns the trained
/// parameters and the mean loss of every epoch.
pub fn train_stage1(
    params: &EncoderParams,
    data: &[AvPair<'_>],
    config: &Stage1Config,
) -> Result<(EncoderParams, Vec<f64>)> {
    params.check()?;
    if config.batch < 2 {
        return Err(IerError::config("stage-1 batch size must be at least 2"));
    }
    if config.epochs == 0 {
        return Ok((params.clone(), Vec::new()));
    }
    if data.len() < 2 {
        return Err(IerError::config("stage-1 training needs at least two pairs"));
    }
    let mut params = params.clone();
    let mut adam = Adam::with_lr(config.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        let mut total = 0.0;
        let mut terms = 0usize;
        for batch in make_batches(data.len(), config.batch, &mut rng) {
            let negatives: Vec<usize> = (0..batch.len())
                .map(|i| {
                    let j = rng.gen_range(0..batch.len() - 1);
                    if j >= i {
                        j + 1
                    } else {
                        j
                    }
                })
                .collect();
            let p = &params;
            let visual: Vec<VisualEncoding> = batch
                .par_iter()
                .map(|&i| encode_visual_full(p, data[i].0))
                .collect::<Result<_>>()?;
            let scale = 1.0 / (2 * batch.len()) as f64;
            let per_item: Vec<(f64, EncoderParams)> = (0..batch.len())
                .into_par_iter()
                .map(|bi| {
                    let (grid, latent) = data[batch[bi]];
                    let audio = encode_audio_full(p, latent)?;
                    let mut g = p.zeros_like();
                    let pos = correspondence_backward(
                        p, latent, &audio, grid, &visual[bi], 1.0, scale, &mut g,
                    )?;
                    let nj = negatives[bi];
                    let neg = correspondence_backward(
                        p,
                        latent,
                        &audio,
                        data[batch[nj]].0,
                        &visual[nj],
                        0.0,
                        scale,
                        &mut g,
                    )?;
                    Ok((pos + neg, g))
                })
                .collect::<Result<_>>()?;
            let mut grads = params.zeros_like();
            for (loss, g) in &per_item {
                total += loss;
                grads.add_scaled(1.0, g);
            }
            terms += 2 * batch.len();
            adam.step(&mut params, &grads)?;
        }
        epoch_losses.push(total / terms as f64);
    }
    Ok((params, epoch_losses))
}

/// Mean max-pooled similarity of matched pairs and of pairs shifted by one.
pub fn correspondence_stats(params: &EncoderParams, data: &[AvPair<'_>]) -> Result<(f64, f64)> {
    let n = data.len();
    if n < 2 {
        return Err(IerError::domain("need at least two pairs"));
    }
    let encoded: Vec<(FeatureGrid, Vec<f64>)> = data
        .par_iter()
        .map(|(g, a)| Ok((encode_visual(params, g)?, encode_audio(params, a)?.0)))
        .collect::<Result<_>>()?;
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..n {
        pos += peak_cell(&encoded[i].0, &encoded[i].1).1;
        neg += peak_cell(&encoded[(i + 1) % n].0, &encoded[i].1).1;
    }
    Ok((pos / n as f64, neg / n as f64))
}
