//! Audio and visual prototype banks built by clustering single-source
//! features, and the single-source prototype classification loss.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{IerError, Result};
use crate::numerics::{
    axpy, cosine_with_grad, dot, kmeans, l2_normalize, norm, remapped_bce_with_grad, FeatureGrid,
    Matrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Visual,
}

/// `K × C` matrix of unit-norm class centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub modality: Modality,
    pub matrix: Matrix,
}

impl PrototypeBank {
    pub fn new(modality: Modality, matrix: Matrix) -> Result<Self> {
        for (k, row) in matrix.iter_rows().enumerate() {
            if (norm(row) - 1.0).abs() > 1e-6 {
                return Err(IerError::domain(format!("prototype row {k} is not unit-norm")));
            }
        }
        Ok(PrototypeBank { modality, matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.matrix.row(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub visual: PrototypeBank,
    pub audio: PrototypeBank,
    /// Pseudo-class of every single-source sample.
    pub assignments: Vec<usize>,
    /// Number of clusters that received no samples.
    pub empty_clusters: usize,
}

impl PrototypeSet {
    pub fn k(&self) -> usize {
        self.visual.len()
    }

    /// Pseudo-classes that own at least one sample, ascending.
    pub fn populated(&self) -> Vec<usize> {
        let mut seen = vec![false; self.k()];
        for &a in &self.assignments {
            seen[a] = true;
        }
        (0..self.k()).filter(|&k| seen[k]).collect()
    }
}

/// The visual cell that best matches the paired (unit) audio feature.
pub fn object_feature(visual: &FeatureGrid, audio: &[f64]) -> Vec<f64> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, cell) in visual.iter_cells().enumerate() {
        let s = dot(cell, audio);
        if s > best.1 {
            best = (i, s);
        }
    }
    visual.cell(best.0).to_vec()
}

fn normalize_or(row: &[f64], fallback: &[f64]) -> Vec<f64> {
    l2_normalize(row).unwrap_or_else(|_| fallback.to_vec())
}

/// Clusters the visual object features of encoded single-source samples
/// and derives both banks.
///
/// `visual` and `audio` hold encoded (unit) features of the same samples.
pub fn build_prototypes(
    visual: &[FeatureGrid],
    audio: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<PrototypeSet> {
    if visual.len() != audio.len() {
        return Err(IerError::domain("visual and audio feature counts differ"));
    }
    if k < 2 {
        return Err(IerError::config("prototype banks need K >= 2"));
    }
    if visual.len() < k {
        return Err(IerError::domain(format!(
            "{} samples cannot form {k} prototypes",
            visual.len()
        )));
    }
    let objects: Vec<Vec<f64>> = visual
        .iter()
        .zip(audio)
        .map(|(g, a)| object_feature(g, a))
        .collect();
    let points = Matrix::from_rows(&objects)?;
    let clusters = kmeans(&points, k, seed, max_iter)?;

    let dim = points.cols;
    let uniform = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut visual_rows = Matrix::zeros(k, dim);
    for c in 0..k {
        let row = normalize_or(clusters.centroids.row(c), &uniform);
        visual_rows.row_mut(c).copy_from_slice(&row);
    }
    let mut sums = Matrix::zeros(k, audio[0].len());
    let mut counts = vec![0usize; k];
    for (a, &c) in audio.iter().zip(&clusters.assignments) {
        axpy(sums.row_mut(c), 1.0, a);
        counts[c] += 1;
    }
    let mut audio_rows = Matrix::zeros(k, audio[0].len());
    let mut empty = 0;
    for c in 0..k {
        let row = if counts[c] == 0 {
            empty += 1;
            visual_rows.row(c).to_vec()
        } else {
            normalize_or(sums.row(c), visual_rows.row(c))
        };
        audio_rows.row_mut(c).copy_from_slice(&row);
    }
    if empty > 0 {
        warn!("{empty} of {k} clusters are empty; their audio prototypes use the centroid direction");
    }
    Ok(PrototypeSet {
        visual: PrototypeBank::new(Modality::Visual, visual_rows)?,
        audio: PrototypeBank::new(Modality::Audio, audio_rows)?,
        assignments: clusters.assignments,
        empty_clusters: empty,
    })
}

/// Recomputes both banks from fresh features under frozen assignments.
///
/// Empty clusters keep their previous rows.
pub fn recompute_prototypes(
    previous: &PrototypeSet,
    visual: &[FeatureGrid],
    audio: &[Vec<f64>],
) -> Result<PrototypeSet> {
    if visual.len() != previous.assignments.len() || audio.len() != previous.assignments.len() {
        return Err(IerError::domain("feature count does not match the frozen assignments"));
    }
    let k = previous.k();
    let mut vs = Matrix::zeros(k, previous.visual.dim());
    let mut as_ = Matrix::zeros(k, previous.audio.dim());
    let mut counts = vec![0usize; k];
    for ((g, a), &c) in visual.iter().zip(audio).zip(&previous.assignments) {
        axpy(vs.row_mut(c), 1.0, &object_feature(g, a));
        axpy(as_.row_mut(c), 1.0, a);
        counts[c] += 1;
    }
    let mut vrows = previous.visual.matrix.clone();
    let mut arows = previous.audio.matrix.clone();
    let mut empty = 0;
    for c in 0..k {
        if counts[c] == 0 {
            empty += 1;
            continue;
        }
        let v = normalize_or(vs.row(c), previous.visual.row(c));
        vrows.row_mut(c).copy_from_slice(&v);
        let a = normalize_or(as_.row(c), previous.audio.row(c));
        arows.row_mut(c).copy_from_slice(&a);
    }
    if empty > 0 {
        warn!("{empty} clusters empty during recomputation; previous prototypes kept");
    }
    Ok(PrototypeSet {
        visual: PrototypeBank::new(Modality::Visual, vrows)?,
        audio: PrototypeBank::new(Modality::Audio, arows)?,
        assignments: previous.assignments.clone(),
        empty_clusters: empty,
    })
}

/// One-hot pseudo label.
pub fn one_hot(k: usize, class: usize) -> Vec<f64> {
    let mut y = vec![0.0; k];
    y[class] = 1.0;
    y
}

/// `(1/K) Σ_n bce(remap(cos(P^a_n, f^a)), Y_n)`.
pub fn single_source_loss(audio_protos: &PrototypeBank, feature: &[f64], labels: &[f64]) -> Result<f64> {
    Ok(single_source_loss_and_grad(audio_protos, feature, labels)?.0)
}

/// Loss and its gradient with respect to the audio feature.
pub fn single_source_loss_and_grad(
    audio_protos: &PrototypeBank,
    feature: &[f64],
    labels: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let k = audio_protos.len();
    if labels.len() != k {
        return Err(IerError::domain(format!(
            "label vector has {} entries for {k} prototypes",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; feature.len()];
    for (n, &y) in labels.iter().enumerate() {
        let (cos, dcos) = cosine_with_grad(feature, audio_protos.row(n))?;
        let (l, dl) = remapped_bce_with_grad(cos, y)?;
        loss += l;
        axpy(&mut grad, dl / k as f64, &dcos);
    }
    Ok((loss / k as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(rows: &[Vec<f64>]) -> PrototypeBank {
        PrototypeBank::new(Modality::Audio, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        one_hot(dim, i)
    }

    #[test]
    fn single_source_loss_examples() {
        let k = 4;
        let p = bank(&(0..k).map(|i| basis(6, i)).collect::<Vec<_>>());
        let l = single_source_loss(&p, &basis(6, 2), &one_hot(k, 2)).unwrap();
        let expected = ((k - 1) as f64 * 2f64.ln() + crate::numerics::bce(1.0, 1.0).unwrap()) / k as f64;
        assert!((l - expected).abs() < 1e-12);

        let one = bank(&[basis(3, 0)]);
        let l = single_source_loss(&one, &[0.6, 0.8, 0.0], &[1.0]).unwrap();
        assert!((l - crate::numerics::bce(0.8, 1.0).unwrap()).abs() < 1e-12);

        let l = single_source_loss(&p, &basis(6, 5), &one_hot(k, 1)).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    fn grid_with(cells: Vec<Vec<f64>>) -> FeatureGrid {
        let c = cells[0].len();
        FeatureGrid::new(1, cells.len(), c, cells.concat()).unwrap()
    }

    #[test]
    fn one_sample_per_cluster_uses_its_audio() {
        let visual: Vec<FeatureGrid> = (0..3).map(|i| grid_with(vec![basis(4, i), basis(4, 3)])).collect();
        let audio: Vec<Vec<f64>> = (0..3)
            .map(|i| l2_normalize(&[basis(4, i)[0] + 0.1, basis(4, i)[1], basis(4, i)[2], 0.0]).unwrap())
            .collect();
        let set = build_prototypes(&visual, &audio, 3, 0, 50).unwrap();
        assert_eq!(set.empty_clusters, 0);
        for (s, &c) in set.assignments.iter().enumerate() {
            for (a, b) in set.audio.row(c).iter().zip(&audio[s]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unchanged_features_give_unchanged_prototypes() {
        let visual: Vec<FeatureGrid> = (0..6).map(|i| grid_with(vec![basis(4, i % 3), basis(4, 3)])).collect();
        let audio: Vec<Vec<f64>> = (0..6).map(|i| basis(4, i % 3)).collect();
        let set = build_prototypes(&visual, &audio, 3, 1, 50).unwrap();
        let again = recompute_prototypes(&set, &visual, &audio).unwrap();
        assert_eq!(again.assignments, set.assignments);
        for (a, b) in again.visual.matrix.data.iter().zip(&set.visual.matrix.data) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in again.audio.matrix.data.iter().zip(&set.audio.matrix.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_commutes_with_recomputation() {
        let visual: Vec<FeatureGrid> = (0..4)
            .map(|i| grid_with(vec![l2_normalize(&[1.0, 0.1 * i as f64]).unwrap()]))
            .collect();
        let audio: Vec<Vec<f64>> = (0..4).map(|i| l2_normalize(&[1.0, -0.2 * i as f64]).unwrap()).collect();
        let mut set = build_prototypes(&visual, &audio, 2, 0, 50).unwrap();
        set.assignments = vec![0; 4];
        let base = recompute_prototypes(&set, &visual, &audio).unwrap();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |v: &[f64]| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]];
        let rv: Vec<FeatureGrid> = visual.iter().map(|g| grid_with(vec![rot(g.cell(0))])).collect();
        let ra: Vec<Vec<f64>> = audio.iter().map(|a| rot(a)).collect();
        let rotated = recompute_prototypes(&set, &rv, &ra).unwrap();
        let expect_v = rot(base.visual.row(0));
        let expect_a = rot(base.audio.row(0));
        for i in 0..2 {
            assert!((rotated.visual.row(0)[i] - expect_v[i]).abs() < 1e-12);
            assert!((rotated.audio.row(0)[i] - expect_a[i]).abs() < 1e-12);
        }
        // cluster 1 is empty under the forced assignment and keeps its rows
        assert_eq!(rotated.visual.row(1), set.visual.row(1));
        assert_eq!(rotated.empty_clusters, 1);
    }

    #[test]
    fn rows_are_unit_norm() {
        let visual: Vec<FeatureGrid> = (0..8)
            .map(|i| grid_with(vec![l2_normalize(&[1.0, i as f64, 0.5]).unwrap()]))
            .collect();
        let audio = visual.iter().map(|g| g.cell(0).to_vec()).collect::<Vec<_>>();
        let set = build_prototypes(&visual, &audio, 3, 4, 50).unwrap();
        for r in set.visual.matrix.iter_rows().chain(set.audio.matrix.iter_rows()) {
            assert!((norm(r) - 1.0).abs() < 1e-9);
            assert!((crate::numerics::cosine_sim(r, r).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!(build_prototypes(&visual, &audio, 9, 0, 10).is_err());
        assert!(build_prototypes(&visual, &audio, 1, 0, 10).is_err());
    }
}
