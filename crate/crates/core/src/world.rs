//! Synthetic scenes in latent space with exact ground truth.
//!
//! Each class owns a visual latent and an audio latent. A scene writes the
//! visual latents of its objects into grid cells under their boxes and mixes
//! the audio latents of every audible source with scalar volume gains.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IerError, Result};
use crate::numerics::{cosine_sim, dot, l2_normalize, FeatureGrid, Matrix};

/// Maximum pairwise cosine between latents of different classes.
pub const MAX_CLASS_COSINE: f64 = 0.2;
const TABLE_REJECTION_ROUNDS: usize = 10_000;
const PLACEMENT_TRIES: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub k_true: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_in: usize,
    pub a_in: usize,
    pub noise: f64,
    pub volume_ratio_max: f64,
    pub box_min: usize,
    pub box_max: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            k_true: 11,
            grid_h: 14,
            grid_w: 14,
            c_in: 32,
            a_in: 32,
            noise: 0.1,
            volume_ratio_max: 10.0,
            box_min: 3,
            box_max: 6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 || self.c_in == 0 || self.a_in == 0 {
            return Err(IerError::config("class count and latent sizes must be positive"));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(IerError::config("grid must be non-empty"));
        }
        if self.box_min == 0 || self.box_min > self.box_max {
            return Err(IerError::config("box sizes must satisfy 1 <= box_min <= box_max"));
        }
        if self.box_max > self.grid_h.min(self.grid_w) {
            return Err(IerError::config("boxes do not fit in the grid"));
        }
        if !(self.noise >= 0.0) || !(self.volume_ratio_max >= 1.0) {
            return Err(IerError::config("noise must be >= 0 and volume_ratio_max >= 1"));
        }
        Ok(())
    }
}

/// Ground-truth latents for every class; rows are unit-norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub visual: Matrix,
    pub audio: Matrix,
}

impl ClassTable {
    pub fn num_classes(&self) -> usize {
        self.visual.rows
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect::<Vec<f64>>()
}

fn rejection_sample(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    budget: &mut usize,
) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        if *budget == 0 {
            return Err(IerError::config(format!(
                "could not draw {count} latents of dimension {dim} with pairwise cosine <= {MAX_CLASS_COSINE}"
            )));
        }
        *budget -= 1;
        let cand = match l2_normalize(&gaussian_vec(rng, dim, 1.0)) {
            Ok(v) => v,
            Err(_) => continue,
        };
        if rows.iter().all(|r| dot(r, &cand) <= MAX_CLASS_COSINE) {
            rows.push(cand);
        }
    }
    Matrix::from_rows(&rows)
}

/// Draws unit latents one class at a time, rejecting candidates whose cosine
/// with an earlier class exceeds [`MAX_CLASS_COSINE`].
pub fn make_class_table(k_true: usize, c_in: usize, a_in: usize, seed: u64) -> Result<ClassTable> {
    if k_true == 0 || c_in == 0 || a_in == 0 {
        return Err(IerError::config("class count and latent sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut budget = TABLE_REJECTION_ROUNDS;
    let visual = rejection_sample(&mut rng, k_true, c_in, &mut budget)?;
    let audio = rejection_sample(&mut rng, k_true, a_in, &mut budget)?;
    Ok(ClassTable { visual, audio })
}

/// Inclusive rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl GridBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    pub fn overlaps(&self, other: &GridBox) -> bool {
        self.y0 <= other.y1 && other.y0 <= self.y1 && self.x0 <= other.x1 && other.x0 <= self.x1
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: GridBox,
    pub sounding: bool,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffscreenSource {
    pub class: usize,
    pub volume: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub offscreen: Vec<OffscreenSource>,
    pub noise: f64,
}

impl SceneSpec {
    /// Multi-hot over `k_true` marking on-screen sounding classes.
    pub fn labels(&self, k_true: usize) -> Vec<u8> {
        let mut y = vec![0u8; k_true];
        for o in self.objects.iter().filter(|o| o.sounding) {
            y[o.class] = 1;
        }
        y
    }

    /// Multi-hot over `k_true` marking every audible class, on- or off-screen.
    pub fn audible(&self, k_true: usize) -> Vec<u8> {
        let mut y = self.labels(k_true);
        for o in &self.offscreen {
            y[o.class] = 1;
        }
        y
    }

    pub fn boxes_for(&self, class: usize) -> Vec<GridBox> {
        self.objects
            .iter()
            .filter(|o| o.class == class)
            .map(|o| o.bbox)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub visual: FeatureGrid,
    pub audio: Vec<f64>,
    pub labels: Vec<u8>,
    pub spec: SceneSpec,
}

/// `unit_norm(Σ volume · latent + N(0, σ²))`.
pub fn mix_audio_latents(entries: &[(&[f64], f64)], sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let dim = entries
        .first()
        .ok_or_else(|| IerError::domain("cannot mix an empty list of latents"))?
        .0
        .len();
    if entries.iter().any(|(l, _)| l.len() != dim) {
        return Err(IerError::domain("latent dimensions differ"));
    }
    let mut sum = vec![0.0; dim];
    for (latent, volume) in entries {
        for (s, l) in sum.iter_mut().zip(latent.iter()) {
            *s += volume * l;
        }
    }
    if sigma > 0.0 {
        for s in sum.iter_mut() {
            *s += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    l2_normalize(&sum).map_err(|_| IerError::domain("audio mixture sums to zero"))
}

pub fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return hi;
    }
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

fn random_box(rng: &mut impl Rng, config: &WorldConfig) -> GridBox {
    let h = rng.gen_range(config.box_min..=config.box_max);
    let w = rng.gen_range(config.box_min..=config.box_max);
    let y0 = rng.gen_range(0..=config.grid_h - h);
    let x0 = rng.gen_range(0..=config.grid_w - w);
    GridBox {
        y0,
        x0,
        y1: y0 + h - 1,
        x1: x0 + w - 1,
    }
}

fn render_visual(
    table: &ClassTable,
    objects: &[SceneObject],
    config: &WorldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureGrid> {
    let mut grid = FeatureGrid::zeros(config.grid_h, config.grid_w, config.c_in);
    for y in 0..config.grid_h {
        for x in 0..config.grid_w {
            let cell = grid.cell_mut(y * config.grid_w + x);
            if config.noise > 0.0 {
                for v in cell.iter_mut() {
                    *v = config.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            if let Some(obj) = objects.iter().find(|o| o.bbox.contains(y, x)) {
                for (v, g) in cell.iter_mut().zip(table.visual.row(obj.class)) {
                    *v += g;
                }
            }
        }
    }
    Ok(grid)
}

fn check_table(table: &ClassTable, config: &WorldConfig) -> Result<()> {
    if table.visual.cols != config.c_in || table.audio.cols != config.a_in {
        return Err(IerError::config("class table dimensions do not match the world"));
    }
    if table.num_classes() != config.k_true {
        return Err(IerError::config("class table size does not match k_true"));
    }
    Ok(())
}

/// One sounding object of a uniformly drawn class at volume 1.
pub fn synthesize_single_source(
    table: &ClassTable,
    config: &WorldConfig,
    seed: u64,
) -> Result<ScenePair> {
    check_table(table, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = rng.gen_range(0..table.num_classes());
    let obj = SceneObject {
        class,
        bbox: random_box(&mut rng, config),
        sounding: true,
        volume: 1.0,
    };
    let visual = render_visual(table, std::slice::from_ref(&obj), config, &mut rng)?;
    let audio = mix_audio_latents(&[(table.audio.row(class), 1.0)], config.noise, &mut rng)?;
    let spec = SceneSpec {
        objects: vec![obj],
        offscreen: vec![],
        noise: config.noise,
    };
    Ok(ScenePair {
        labels: spec.labels(config.k_true),
        visual,
        audio,
        spec,
    })
}

/// Four on-screen objects of distinct classes (two sounding, two silent) plus
/// one off-screen source of a fifth class.
pub fn synthesize_unconstrained(
    table: &ClassTable,
    config: &WorldConfig,
    seed: u64,
) -> Result<ScenePair> {
    check_table(table, config)?;
    let k = table.num_classes();
    if k < 5 {
        return Err(IerError::config(format!(
            "unconstrained scenes need at least 5 classes, got {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);

    let mut boxes: Vec<GridBox> = Vec::with_capacity(4);
    let mut tries = 0;
    while boxes.len() < 4 {
        if tries == PLACEMENT_TRIES {
            return Err(IerError::config(
                "could not place four non-overlapping boxes in the grid",
            ));
        }
        tries += 1;
        let b = random_box(&mut rng, config);
        if boxes.iter().all(|o| !o.overlaps(&b)) {
            boxes.push(b);
        }
    }
    let low = 1.0 / config.volume_ratio_max;
    let objects: Vec<SceneObject> = boxes
        .into_iter()
        .enumerate()
        .map(|(i, bbox)| {
            let sounding = i < 2;
            SceneObject {
                class: classes[i],
                bbox,
                sounding,
                volume: if sounding { log_uniform(&mut rng, low, 1.0) } else { 0.0 },
            }
        })
        .collect();
    let offscreen = vec![OffscreenSource {
        class: classes[4],
        volume: log_uniform(&mut rng, low, 1.0),
    }];
    let visual = render_visual(table, &objects, config, &mut rng)?;
    let mut entries: Vec<(&[f64], f64)> = objects
        .iter()
        .filter(|o| o.sounding)
        .map(|o| (table.audio.row(o.class), o.volume))
        .collect();
    entries.extend(offscreen.iter().map(|o| (table.audio.row(o.class), o.volume)));
    let audio = mix_audio_latents(&entries, config.noise, &mut rng)?;
    let spec = SceneSpec {
        objects,
        offscreen,
        noise: config.noise,
    };
    Ok(ScenePair {
        labels: spec.labels(k),
        visual,
        audio,
        spec,
    })
}

/// Single-source and unconstrained splits generated from one class table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub single: Vec<ScenePair>,
    pub unconstrained: Vec<ScenePair>,
}

/// Item `i` of the single-source split uses seed `seed + i`; the
/// unconstrained split uses `seed + 1_000_003 + i`.
pub fn generate_dataset(
    table: &ClassTable,
    config: &WorldConfig,
    seed: u64,
    n_single: usize,
    n_unconstrained: usize,
) -> Result<Dataset> {
    config.validate()?;
    let single = (0..n_single)
        .into_par_iter()
        .map(|i| synthesize_single_source(table, config, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let unconstrained = (0..n_unconstrained)
        .into_par_iter()
        .map(|i| {
            synthesize_unconstrained(table, config, seed.wrapping_add(1_000_003 + i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        single,
        unconstrained,
    })
}

/// Maximum pairwise cosine between distinct rows.
pub fn max_pairwise_cosine(m: &Matrix) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..m.rows {
        for j in (i + 1)..m.rows {
            worst = worst.max(cosine_sim(m.row(i), m.row(j)).unwrap_or(1.0));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_table_respects_cosine_bound() {
        let t = make_class_table(11, 32, 32, 5).unwrap();
        assert_eq!(t.num_classes(), 11);
        assert!(max_pairwise_cosine(&t.visual) <= MAX_CLASS_COSINE);
        assert!(max_pairwise_cosine(&t.audio) <= MAX_CLASS_COSINE);
        for r in t.visual.iter_rows().chain(t.audio.iter_rows()) {
            assert!((crate::numerics::norm(r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(t, make_class_table(11, 32, 32, 5).unwrap());
        assert_eq!(make_class_table(1, 4, 4, 0).unwrap().num_classes(), 1);
    }

    #[test]
    fn tiny_latent_space_either_fits_or_fails_cleanly() {
        match make_class_table(11, 8, 8, 1) {
            Ok(t) => assert!(max_pairwise_cosine(&t.visual) <= MAX_CLASS_COSINE),
            Err(e) => assert!(matches!(e, IerError::Config(_))),
        }
        assert!(matches!(
            make_class_table(40, 2, 2, 1),
            Err(IerError::Config(_))
        ));
    }

    #[test]
    fn noiseless_single_source_is_exact() {
        let config = WorldConfig {
            noise: 0.0,
            ..WorldConfig::default()
        };
        let t = make_class_table(11, 32, 32, 2).unwrap();
        let s = synthesize_single_source(&t, &config, 9).unwrap();
        let c = s.spec.objects[0].class;
        assert_eq!(s.audio, t.audio.row(c));
        assert_eq!(s.labels.iter().map(|&v| v as usize).sum::<usize>(), 1);
        assert_eq!(s.labels[c], 1);
        let b = s.spec.objects[0].bbox;
        for y in 0..config.grid_h {
            for x in 0..config.grid_w {
                let cell = s.visual.at(y, x);
                if b.contains(y, x) {
                    assert_eq!(cell, t.visual.row(c));
                } else {
                    assert!(cell.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn unconstrained_scene_structure() {
        let config = WorldConfig::default();
        let t = make_class_table(11, 32, 32, 3).unwrap();
        for seed in 0..50 {
            let s = synthesize_unconstrained(&t, &config, seed).unwrap();
            assert_eq!(s.labels.iter().filter(|&&v| v == 1).count(), 2);
            assert_eq!(s.spec.objects.len(), 4);
            assert_eq!(s.spec.offscreen.len(), 1);
            let off = s.spec.offscreen[0].class;
            assert_eq!(s.labels[off], 0);
            assert!(s.spec.objects.iter().all(|o| o.class != off));
            for (i, a) in s.spec.objects.iter().enumerate() {
                for b in &s.spec.objects[i + 1..] {
                    assert!(!a.bbox.overlaps(&b.bbox));
                    assert_ne!(a.class, b.class);
                }
            }
            for (c, &y) in s.labels.iter().enumerate() {
                if y == 1 {
                    assert!(!s.spec.boxes_for(c).is_empty());
                }
            }
            assert!(s.spec.boxes_for(off).is_empty());
            for o in s.spec.objects.iter().filter(|o| o.sounding) {
                assert!(o.volume >= 0.1 - 1e-12 && o.volume <= 1.0);
            }
        }
    }

    #[test]
    fn unit_volume_ratio_gives_equal_volumes() {
        let config = WorldConfig {
            volume_ratio_max: 1.0,
            ..WorldConfig::default()
        };
        let t = make_class_table(11, 32, 32, 3).unwrap();
        let s = synthesize_unconstrained(&t, &config, 4).unwrap();
        for o in s.spec.objects.iter().filter(|o| o.sounding) {
            assert_eq!(o.volume, 1.0);
        }
    }

    #[test]
    fn too_few_classes_for_unconstrained() {
        let config = WorldConfig {
            k_true: 4,
            ..WorldConfig::default()
        };
        let t = make_class_table(4, 32, 32, 3).unwrap();
        assert!(matches!(
            synthesize_unconstrained(&t, &config, 0),
            Err(IerError::Config(_))
        ));
    }

    #[test]
    fn boxes_that_cannot_fit_are_reported() {
        let config = WorldConfig {
            grid_h: 6,
            grid_w: 6,
            box_min: 5,
            box_max: 6,
            ..WorldConfig::default()
        };
        let t = make_class_table(11, 32, 32, 3).unwrap();
        assert!(matches!(
            synthesize_unconstrained(&t, &config, 0),
            Err(IerError::Config(_))
        ));
    }

    #[test]
    fn latent_mixing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = [0.6, 0.8];
        assert_eq!(mix_audio_latents(&[(&l, 1.0)], 0.0, &mut rng).unwrap(), vec![0.6, 0.8]);
        let m = mix_audio_latents(&[(&l, 1.0), (&l, 3.0)], 0.0, &mut rng).unwrap();
        assert!((cosine_sim(&m, &l).unwrap() - 1.0).abs() < 1e-12);

        let quiet = [1.0, 0.0];
        let loud = [0.0, 1.0];
        let m = mix_audio_latents(&[(&quiet, 1.0), (&loud, 10.0)], 0.0, &mut rng).unwrap();
        assert!((cosine_sim(&m, &quiet).unwrap() - 1.0 / 101f64.sqrt()).abs() < 1e-12);

        let neg = [-0.6, -0.8];
        assert!(mix_audio_latents(&[(&l, 1.0), (&neg, 1.0)], 0.0, &mut rng).is_err());
        assert!(mix_audio_latents(&[], 0.0, &mut rng).is_err());
    }

    #[test]
    fn quiet_source_fades_with_volume_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = make_class_table(5, 16, 16, 8).unwrap();
        let (quiet, loud) = (t.audio.row(0), t.audio.row(1));
        let mut last = f64::INFINITY;
        for ratio in [1.0, 2.0, 5.0, 10.0, 100.0, 1e4] {
            let m = mix_audio_latents(&[(quiet, 1.0), (loud, ratio)], 0.0, &mut rng).unwrap();
            let c = cosine_sim(&m, quiet).unwrap();
            assert!(c < last);
            last = c;
        }
        assert!(last <= MAX_CLASS_COSINE + 1e-3);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = WorldConfig::default();
        let t = make_class_table(11, 32, 32, 3).unwrap();
        let a = generate_dataset(&t, &config, 42, 8, 4).unwrap();
        let b = generate_dataset(&t, &config, 42, 8, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&t, &config, 43, 8, 4).unwrap();
        assert_ne!(a, c);
    }
}
