//! Similarity maps, pooling, distribution losses and k-means.
//!
//! Everything here is a pure function over `f64` slices. Row-major layout is
//! used for every matrix and grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IerError, Result};

/// Lower clamp applied to the denominator distribution inside [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;
/// Predictions are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside [`bce`].
pub const BCE_EPS: f64 = 1e-7;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(IerError::domain("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `out = self · x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows().map(|row| dot(row, x)).collect()
    }

    /// `out = selfᵀ · y`.
    pub fn mul_t_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.iter_rows().zip(y) {
            if yr != 0.0 {
                axpy(&mut out, yr, row);
            }
        }
        out
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let s = alpha * ur;
            if s != 0.0 {
                axpy(self.row_mut(r), s, v);
            }
        }
    }
}

/// `H × W` grid of `C`-dimensional feature vectors, row-major over cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(IerError::domain("feature grid dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(IerError::domain(format!(
                "feature grid expects {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(IerError::domain("feature grid contains non-finite values"));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureGrid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a grid from nested rows of cell vectors.
    pub fn from_cells(cells: &[Vec<Vec<f64>>]) -> Result<Self> {
        let height = cells.len();
        let width = cells.first().map_or(0, Vec::len);
        let channels = cells
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len);
        let mut data = Vec::with_capacity(height * width * channels);
        for row in cells {
            if row.len() != width {
                return Err(IerError::domain("ragged grid rows"));
            }
            for cell in row {
                if cell.len() != channels {
                    return Err(IerError::domain("inconsistent channel count"));
                }
                data.extend_from_slice(cell);
            }
        }
        FeatureGrid::new(height, width, channels, data)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.cell(y * self.width + x)
    }

    pub fn iter_cells(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }
}

/// `H × W` map of real values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(IerError::domain(format!(
                "map of {height}x{width} expects {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(SimilarityMap {
            height,
            width,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(IerError::domain("ragged map rows"));
        }
        SimilarityMap::new(height, width, rows.iter().flatten().copied().collect())
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        SimilarityMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Boolean `H × W` mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    /// Cells strictly above `threshold`.
    pub fn above(map: &SimilarityMap, threshold: f64) -> Self {
        BinaryMask {
            height: map.height,
            width: map.width,
            data: map.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of set cells (average pooling of the 0/1 mask).
    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha · x`.
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(IerError::domain(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(IerError::domain("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cos = cosine_sim(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect();
    Ok((cos, grad))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(IerError::domain("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backpropagates through `f = z / ‖z‖`: returns `∂L/∂z` given `∂L/∂f`.
pub fn normalize_backward(unit: &[f64], z_norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let proj = dot(grad_unit, unit);
    grad_unit
        .iter()
        .zip(unit)
        .map(|(g, f)| (g - proj * f) / z_norm)
        .collect()
}

/// Cosine similarity of `audio` against every cell of `grid`.
pub fn localization_map(grid: &FeatureGrid, audio: &[f64]) -> Result<SimilarityMap> {
    if grid.channels != audio.len() {
        return Err(IerError::domain(format!(
            "grid has {} channels but audio feature has {}",
            grid.channels,
            audio.len()
        )));
    }
    let data = grid
        .iter_cells()
        .map(|cell| cosine_sim(cell, audio))
        .collect::<Result<Vec<_>>>()?;
    SimilarityMap::new(grid.height, grid.width, data)
}

pub fn global_max_pool(map: &SimilarityMap) -> Result<f64> {
    argmax(&map.data)
        .map(|i| map.data[i])
        .ok_or_else(|| IerError::domain("max pooling over an empty map"))
}

pub fn global_avg_pool(map: &SimilarityMap) -> Result<f64> {
    mean(&map.data).ok_or_else(|| IerError::domain("average pooling over an empty map"))
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `Σ p ln(p / q)` with `0 ln 0 = 0` and `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(IerError::domain(format!(
            "KL divergence of distributions with {} and {} entries",
            p.len(),
            q.len()
        )));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (pk / qk.max(KL_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

fn check_target(target: f64) -> Result<()> {
    if target == 0.0 || target == 1.0 {
        Ok(())
    } else {
        Err(IerError::domain(format!("BCE target must be 0 or 1, got {target}")))
    }
}

pub fn bce(prediction: f64, target: f64) -> Result<f64> {
    check_target(target)?;
    let p = prediction.clamp(BCE_EPS, 1.0 - BCE_EPS);
    Ok(-(target * p.ln() + (1.0 - target) * (1.0 - p).ln()))
}

/// BCE together with `∂bce/∂prediction`; the derivative vanishes where the
/// clamp is active.
pub fn bce_with_grad(prediction: f64, target: f64) -> Result<(f64, f64)> {
    let loss = bce(prediction, target)?;
    let grad = if prediction <= BCE_EPS || prediction >= 1.0 - BCE_EPS {
        0.0
    } else {
        -target / prediction + (1.0 - target) / (1.0 - prediction)
    };
    Ok((loss, grad))
}

/// Maps a cosine score from `[-1, 1]` onto a probability in `[0, 1]`.
pub fn remap_similarity(s: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(IerError::domain(format!("similarity {s} outside [-1, 1]")));
    }
    Ok((s + 1.0) / 2.0)
}

/// BCE on a remapped cosine: loss and `∂loss/∂cos`.
pub fn remapped_bce_with_grad(cos: f64, target: f64) -> Result<(f64, f64)> {
    let (loss, dp) = bce_with_grad(remap_similarity(cos)?, target)?;
    Ok((loss, 0.5 * dp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point; ties go to the lowest index.
fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    points
        .iter_rows()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.iter_rows().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows;
    let mut centroids = Matrix::zeros(k, points.cols);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // Every point coincides with a chosen centroid.
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (d, p) in dist.iter_mut().zip(points.iter_rows()) {
            *d = d.min(sq_dist(p, points.row(pick)));
        }
    }
    centroids
}

/// Lloyd iterations with k-means++ seeding.
///
/// Empty clusters are re-seeded to the point farthest from its own centroid.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<ClusterResult> {
    if k == 0 {
        return Err(IerError::domain("k-means needs at least one cluster"));
    }
    if points.rows < k {
        return Err(IerError::domain(format!(
            "k-means with {} points cannot form {k} clusters",
            points.rows
        )));
    }
    if points.data.iter().any(|v| !v.is_finite()) {
        return Err(IerError::domain("k-means input contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iter.max(1) {
        iterations = iter + 1;
        let (next, dists) = assign(points, &centroids);
        history.push(dists.iter().sum());
        if next == assignments {
            break;
        }
        assignments = next;

        let mut sums = Matrix::zeros(k, points.cols);
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter_rows().zip(&assignments) {
            axpy(sums.row_mut(a), 1.0, p);
            counts[a] += 1;
        }
        let mut taken = vec![false; points.rows];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.rows)
                    .filter(|&i| !taken[i])
                    .max_by(|&i, &j| {
                        let di = sq_dist(points.row(i), centroids.row(assignments[i]));
                        let dj = sq_dist(points.row(j), centroids.row(assignments[j]));
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap_or(0);
                taken[far] = true;
                let row = points.row(far).to_vec();
                centroids.row_mut(c).copy_from_slice(&row);
            }
        }
    }

    let inertia = points
        .iter_rows()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, centroids.row(a)))
        .sum();
    Ok(ClusterResult {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cosine_sim(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, 1e-12));
        assert!(close(
            cosine_sim(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            0.70710678,
            1e-8
        ));
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_sim(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn localization_map_examples() {
        let g = FeatureGrid::from_cells(&[vec![vec![0.3, 0.4]]]).unwrap();
        let m = localization_map(&g, &[0.3, 0.4]).unwrap();
        assert!(close(m.data[0], 1.0, 1e-12));

        let g = FeatureGrid::from_cells(&[vec![vec![1.0, 0.0], vec![0.0, 1.0]]]).unwrap();
        assert_eq!(localization_map(&g, &[1.0, 0.0]).unwrap().data, vec![1.0, 0.0]);

        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let neg = vec![-1.0, 0.0];
        let g = FeatureGrid::from_cells(&[vec![e1.clone(), e2], vec![e1.clone(), neg]]).unwrap();
        let m = localization_map(&g, &e1).unwrap();
        assert_eq!(m.data, vec![1.0, 0.0, 1.0, -1.0]);

        assert!(localization_map(&g, &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pooling_examples() {
        let m = SimilarityMap::from_rows(&[vec![0.2, 0.9], vec![0.1, 0.3]]).unwrap();
        assert_eq!(global_max_pool(&m).unwrap(), 0.9);
        assert_eq!(global_max_pool(&SimilarityMap::filled(3, 3, 0.4)).unwrap(), 0.4);
        let m = SimilarityMap::from_rows(&[vec![-1.0, -0.5]]).unwrap();
        assert_eq!(global_max_pool(&m).unwrap(), -0.5);

        let m = SimilarityMap::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(global_avg_pool(&m).unwrap(), 0.5);
        assert!(close(global_avg_pool(&SimilarityMap::filled(2, 5, 0.7)).unwrap(), 0.7, 1e-12));
        let m = SimilarityMap::from_rows(&[vec![1.0, 2.0, 3.0, 6.0]]).unwrap();
        assert_eq!(global_avg_pool(&m).unwrap(), 3.0);

        let empty = SimilarityMap::new(0, 0, vec![]).unwrap();
        assert!(global_max_pool(&empty).is_err());
        assert!(global_avg_pool(&empty).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!(close(p[0], 2.0 / 3.0, 1e-12) && close(p[1], 1.0 / 3.0, 1e-12));
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p[0], 1.0, 1e-12) && p[1] < 1e-300);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert!(close(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), 1e-12));
        let expected = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5f64.ln();
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!(close(kl, expected, 1e-12));
        assert!(close(kl, 0.5108, 1e-4));
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!(close(bce(0.5, 1.0).unwrap(), 2f64.ln(), 1e-12));
        assert!(bce(1.0 - 1e-7, 1.0).unwrap() < 1e-6);
        assert!(close(bce(0.25, 0.0).unwrap(), -(0.75f64).ln(), 1e-12));
        assert!(close(bce(0.25, 0.0).unwrap(), 0.2877, 1e-4));
        assert!(bce(0.5, 0.5).is_err());
        // clamp keeps a perfectly wrong prediction finite
        assert!(bce(0.0, 1.0).unwrap().is_finite());
    }

    #[test]
    fn remap_and_normalize_examples() {
        assert_eq!(remap_similarity(1.0).unwrap(), 1.0);
        assert_eq!(remap_similarity(-1.0).unwrap(), 0.0);
        assert_eq!(remap_similarity(0.0).unwrap(), 0.5);
        assert!(remap_similarity(1.5).is_err());

        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
        assert_eq!(l2_normalize(&[0.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn kmeans_trivial_cases() {
        let pts = Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 2.0]]).unwrap();
        let res = kmeans(&pts, 3, 7, 100).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut sorted = res.assignments.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        for (i, &a) in res.assignments.iter().enumerate() {
            assert_eq!(res.centroids.row(a), pts.row(i));
        }

        let same = Matrix::from_rows(&vec![vec![1.5, -2.0]; 6]).unwrap();
        let res = kmeans(&same, 1, 0, 100).unwrap();
        assert_eq!(res.centroids.row(0), &[1.5, -2.0]);
        assert_eq!(res.inertia, 0.0);

        assert!(kmeans(&pts, 4, 0, 10).is_err());
        assert!(kmeans(&pts, 0, 0, 10).is_err());
    }

    #[test]
    fn kmeans_duplicates_leave_no_nan() {
        let mut rows = vec![vec![1.0, 0.0]; 5];
        rows.extend(vec![vec![0.0, 1.0]; 5]);
        let pts = Matrix::from_rows(&rows).unwrap();
        let res = kmeans(&pts, 4, 3, 50).unwrap();
        assert!(res.centroids.data.iter().all(|v| v.is_finite()));
        assert_eq!(res.inertia, 0.0);
        assert_ne!(res.assignments[0], res.assignments[9]);
    }

    #[test]
    fn cosine_gradient_matches_difference() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.0, 0.4, -0.2];
        let (_, g) = cosine_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[i] += h;
            am[i] -= h;
            let num = (cosine_sim(&ap, &b).unwrap() - cosine_sim(&am, &b).unwrap()) / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-8);
        }
    }
}
