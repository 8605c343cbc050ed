//! The audio instance identifier: per-pseudo-class distinguishing steps
//! computed from the mid-level audio feature, the mixed-audio loss and the
//! curriculum training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    audio_backward, encode_audio_full, encode_visual, make_batches, Affine, AudioEncoding, AvPair,
    EncoderParams,
};
use crate::error::{IerError, Result};
use crate::numerics::{axpy, cosine_sim, cosine_with_grad, remap_similarity, remapped_bce_with_grad, Matrix};
use crate::optim::{Adam, ParamSet};
use crate::prototypes::{one_hot, recompute_prototypes, single_source_loss_and_grad, PrototypeBank, PrototypeSet};
use crate::world::{log_uniform, mix_audio_latents};

/// Smallest mixing volume; volumes are drawn log-uniformly from `[MIN_VOLUME, 1]`.
pub const MIN_VOLUME: f64 = 0.1;

/// One affine map `C_m → C` per pseudo-class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepParams {
    pub steps: Vec<Affine>,
}

impl ParamSet for StepParams {
    fn blocks(&self) -> Vec<&[f64]> {
        self.steps
            .iter()
            .flat_map(|a| [a.weight.data.as_slice(), a.bias.as_slice()])
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.steps
            .iter_mut()
            .flat_map(|a| [a.weight.data.as_mut_slice(), a.bias.as_mut_slice()])
            .collect()
    }
}

impl StepParams {
    /// All-zero steps, i.e. `Δ = 0`.
    pub fn zeros(k: usize, embed: usize, mid: usize) -> Self {
        StepParams {
            steps: (0..k).map(|_| Affine::zeros(mid, embed)).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.steps.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.steps.first().map_or(0, Affine::output_dim)
    }

    pub fn mid_dim(&self) -> usize {
        self.steps.first().map_or(0, Affine::input_dim)
    }
}

/// `Δ` as a `K × C` matrix with row `n = W_n f_m + b_n`.
pub fn distinguishing_step(steps: &StepParams, mid: &[f64]) -> Result<Matrix> {
    if mid.len() != steps.mid_dim() {
        return Err(IerError::domain(format!(
            "steps expect a mid-level feature of length {}, got {}",
            steps.mid_dim(),
            mid.len()
        )));
    }
    let mut delta = Matrix::zeros(steps.k(), steps.embed_dim());
    for (n, step) in steps.steps.iter().enumerate() {
        delta.row_mut(n).copy_from_slice(&step.forward(mid));
    }
    Ok(delta)
}

/// `F_k = f^a + Δ_k`, without re-normalization.
pub fn expand_features(feature: &[f64], delta: &Matrix) -> Result<Matrix> {
    if feature.len() != delta.cols {
        return Err(IerError::domain("feature and step dimensions differ"));
    }
    let mut out = delta.clone();
    for n in 0..out.rows {
        axpy(out.row_mut(n), 1.0, feature);
    }
    Ok(out)
}

/// `(1/K) Σ_n bce(remap(cos(P^a_n, f^a + Δ_n)), Y_n)`.
pub fn mixed_loss(protos: &PrototypeBank, feature: &[f64], delta: &Matrix, labels: &[f64]) -> Result<f64> {
    Ok(mixed_loss_and_grad(protos, feature, delta, labels)?.0)
}

/// Mixed loss and its gradient with respect to the expanded features
/// (equivalently, with respect to `Δ`).
pub fn mixed_loss_and_grad(
    protos: &PrototypeBank,
    feature: &[f64],
    delta: &Matrix,
    labels: &[f64],
) -> Result<(f64, Matrix)> {
    let k = protos.len();
    if delta.rows != k || labels.len() != k {
        return Err(IerError::domain(format!(
            "expected {k} steps and labels, got {} and {}",
            delta.rows,
            labels.len()
        )));
    }
    let expanded = expand_features(feature, delta)?;
    let mut grad = Matrix::zeros(k, delta.cols);
    let mut loss = 0.0;
    for n in 0..k {
        let (cos, dcos) = cosine_with_grad(expanded.row(n), protos.row(n))
            .map_err(|_| IerError::domain(format!("expanded feature {n} has zero norm")))?;
        let (l, dl) = remapped_bce_with_grad(cos, labels[n])?;
        loss += l;
        axpy(grad.row_mut(n), dl / k as f64, &dcos);
    }
    Ok((loss / k as f64, grad))
}

/// Per-class prediction `remap(cos(P^a_n, F_n))`; with `delta = None` every
/// `F_n` is the plain feature.
pub fn class_scores(protos: &PrototypeBank, feature: &[f64], delta: Option<&Matrix>) -> Result<Vec<f64>> {
    (0..protos.len())
        .map(|n| {
            let cos = match delta {
                Some(d) => {
                    let f: Vec<f64> = feature.iter().zip(d.row(n)).map(|(a, b)| a + b).collect();
                    cosine_sim(&f, protos.row(n))?
                }
                None => cosine_sim(feature, protos.row(n))?,
            };
            remap_similarity(cos)
        })
        .collect()
}

/// Encodes an audio latent and scores it against every audio prototype.
pub fn identify(
    params: &EncoderParams,
    steps: Option<&StepParams>,
    protos: &PrototypeBank,
    latent: &[f64],
) -> Result<Vec<f64>> {
    let enc = encode_audio_full(params, latent)?;
    match steps {
        Some(s) => class_scores(protos, &enc.feature, Some(&distinguishing_step(s, &enc.mid)?)),
        None => class_scores(protos, &enc.feature, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub epoch: usize,
    pub mix_probability: f64,
    pub order: usize,
}

/// Linear ramp of the mixing probability from 0.5 to 0.9 and mixture order
/// 2, 3, 4 over the thirds of training.
pub fn curriculum_schedule(epoch: usize, total_epochs: usize) -> Result<CurriculumState> {
    if total_epochs == 0 {
        return Err(IerError::config("curriculum needs at least one epoch"));
    }
    if epoch >= total_epochs {
        return Err(IerError::domain(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    let last = total_epochs - 1;
    let mix_probability = if last == 0 {
        0.5
    } else {
        0.5 + 0.4 * epoch as f64 / last as f64
    };
    let order = if 3 * epoch < last || last == 0 {
        2
    } else if 3 * epoch < 2 * last {
        3
    } else {
        4
    };
    Ok(CurriculumState {
        epoch,
        mix_probability,
        order,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    /// Mixed (unit-norm) audio latent.
    pub latent: Vec<f64>,
    /// Multi-hot pseudo label over `K`.
    pub labels: Vec<f64>,
    pub members: Vec<usize>,
    pub volumes: Vec<f64>,
}

/// Mixes `order` samples of pairwise distinct pseudo-classes. If `first` is
/// given it is always a member; the remaining members are drawn uniformly and
/// redrawn on a class collision.
pub fn make_mixture(
    latents: &[&[f64]],
    assignments: &[usize],
    k: usize,
    order: usize,
    first: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Mixture> {
    if latents.len() != assignments.len() {
        return Err(IerError::domain("latent and assignment counts differ"));
    }
    let mut seen = vec![false; k];
    for &a in assignments {
        seen[a] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    if order == 0 || distinct < order {
        return Err(IerError::config(format!(
            "a mixture of order {order} needs as many distinct pseudo-classes, only {distinct} available"
        )));
    }
    let mut members = Vec::with_capacity(order);
    let mut used = vec![false; k];
    if let Some(i) = first {
        members.push(i);
        used[assignments[i]] = true;
    }
    while members.len() < order {
        let i = rng.gen_range(0..latents.len());
        if !used[assignments[i]] {
            used[assignments[i]] = true;
            members.push(i);
        }
    }
    let volumes: Vec<f64> = members.iter().map(|_| log_uniform(rng, MIN_VOLUME, 1.0)).collect();
    let entries: Vec<(&[f64], f64)> = members.iter().zip(&volumes).map(|(&i, &v)| (latents[i], v)).collect();
    let latent = mix_audio_latents(&entries, 0.0, rng)?;
    let mut labels = vec![0.0; k];
    for &i in &members {
        labels[assignments[i]] = 1.0;
    }
    Ok(Mixture {
        latent,
        labels,
        members,
        volumes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifierConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Also update the audio encoder during this stage.
    pub train_audio: bool,
    /// When false every item is a single source, which trains a baseline
    /// without distinguishing steps.
    pub use_mixtures: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mix_probability: f64,
    pub order: usize,
}

#[derive(Debug, Clone)]
pub struct IdentifierOutcome {
    pub steps: StepParams,
    pub params: EncoderParams,
    pub prototypes: PrototypeSet,
    pub log: Vec<EpochLog>,
}

enum Item {
    Single(usize),
    Mixed(Mixture),
}

fn item_grad(
    params: &EncoderParams,
    steps: &StepParams,
    protos: &PrototypeBank,
    item: &Item,
    data: &[AvPair<'_>],
    assignments: &[usize],
    train_audio: bool,
) -> Result<(f64, StepParams, Option<EncoderParams>)> {
    let k = protos.len();
    let mut gsteps = steps.zeros_like();
    let mut genc = train_audio.then(|| params.zeros_like());
    let loss = match item {
        Item::Single(i) => {
            let latent = data[*i].1;
            let enc = encode_audio_full(params, latent)?;
            let (loss, gf) = single_source_loss_and_grad(protos, &enc.feature, &one_hot(k, assignments[*i]))?;
            if let Some(g) = genc.as_mut() {
                audio_backward(params, latent, &enc, &gf, None, g);
            }
            loss
        }
        Item::Mixed(mix) => {
            let enc: AudioEncoding = encode_audio_full(params, &mix.latent)?;
            let delta = distinguishing_step(steps, &enc.mid)?;
            let (loss, gfeat) = mixed_loss_and_grad(protos, &enc.feature, &delta, &mix.labels)?;
            for (n, step) in steps.steps.iter().enumerate() {
                step.accumulate(&mut gsteps.steps[n], &enc.mid, gfeat.row(n));
            }
            if let Some(g) = genc.as_mut() {
                let mut gf = vec![0.0; enc.feature.len()];
                let mut gm = vec![0.0; enc.mid.len()];
                for (n, step) in steps.steps.iter().enumerate() {
                    axpy(&mut gf, 1.0, gfeat.row(n));
                    axpy(&mut gm, 1.0, &step.weight.mul_t_vec(gfeat.row(n)));
                }
                audio_backward(params, &mix.latent, &enc, &gf, Some(&gm), g);
            }
            loss
        }
    };
    Ok((loss, gsteps, genc))
}

/// Curriculum training of the distinguishing steps on single-source data.
///
/// Each batch item is, with the epoch's mixing probability, a mixture of the
/// epoch's order led by that item (mixed loss), otherwise the item alone
/// (single-source loss, no steps). Prototypes are recomputed under frozen
/// assignments at the start of each epoch.
pub fn train_identifier(
    params: &EncoderParams,
    steps: &StepParams,
    data: &[AvPair<'_>],
    prototypes: &PrototypeSet,
    config: &IdentifierConfig,
) -> Result<IdentifierOutcome> {
    let k = prototypes.k();
    if steps.k() != k || steps.embed_dim() != params.embed_dim() || steps.mid_dim() != params.mid_dim() {
        return Err(IerError::config("step parameters do not match the model"));
    }
    if data.len() != prototypes.assignments.len() {
        return Err(IerError::domain("dataset does not match the prototype assignments"));
    }
    let mut outcome = IdentifierOutcome {
        steps: steps.clone(),
        params: params.clone(),
        prototypes: prototypes.clone(),
        log: Vec::new(),
    };
    if config.epochs == 0 {
        return Ok(outcome);
    }
    if config.batch == 0 {
        return Err(IerError::config("batch size must be positive"));
    }
    let latents: Vec<&[f64]> = data.iter().map(|d| d.1).collect();
    let assignments = prototypes.assignments.clone();
    let mut step_opt = Adam::with_lr(config.lr)?;
    let mut enc_opt = Adam::with_lr(config.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for epoch in 0..config.epochs {
        let sched = curriculum_schedule(epoch, config.epochs)?;
        // With a frozen encoder the recomputed banks would be identical.
        if config.train_audio {
            let p = &outcome.params;
            let feats: Vec<_> = data
                .par_iter()
                .map(|(g, a)| Ok((encode_visual(p, g)?, encode_audio_full(p, a)?.feature)))
                .collect::<Result<_>>()?;
            let (vis, aud): (Vec<_>, Vec<_>) = feats.into_iter().unzip();
            outcome.prototypes = recompute_prototypes(&outcome.prototypes, &vis, &aud)?;
        }
        let mut total = 0.0;
        for batch in make_batches(data.len(), config.batch, &mut rng) {
            let mut items = Vec::with_capacity(batch.len());
            for &i in &batch {
                if config.use_mixtures && rng.gen::<f64>() < sched.mix_probability {
                    items.push(Item::Mixed(make_mixture(
                        &latents,
                        &assignments,
                        k,
                        sched.order,
                        Some(i),
                        &mut rng,
                    )?));
                } else {
                    items.push(Item::Single(i));
                }
            }
            let (p, s, bank) = (&outcome.params, &outcome.steps, &outcome.prototypes.audio);
            let per_item: Vec<_> = items
                .par_iter()
                .map(|item| item_grad(p, s, bank, item, data, &assignments, config.train_audio))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut gsteps = outcome.steps.zeros_like();
            let mut genc = outcome.params.zeros_like();
            for (loss, gs, ge) in &per_item {
                total += loss;
                gsteps.add_scaled(scale, gs);
                if let Some(ge) = ge {
                    genc.add_scaled(scale, ge);
                }
            }
            step_opt.step(&mut outcome.steps, &gsteps)?;
            if config.train_audio {
                enc_opt.step(&mut outcome.params, &genc)?;
            }
        }
        outcome.log.push(EpochLog {
            epoch,
            loss: total / data.len() as f64,
            mix_probability: sched.mix_probability,
            order: sched.order,
        });
    }
    Ok(outcome)
}
