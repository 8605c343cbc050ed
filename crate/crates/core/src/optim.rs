//! Adam and a central-difference gradient checker shared by every trainable
//! component.

use rand::seq::index;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IerError, Result};

/// A collection of flat parameter blocks in a fixed order.
///
/// Gradients use the same type as the parameters they belong to.
pub trait ParamSet {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += alpha · other`, block by block.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for b in self.blocks_mut() {
            for v in b.iter_mut() {
                *v *= alpha;
            }
        }
    }

    fn get_flat(&self, mut idx: usize) -> f64 {
        for b in self.blocks() {
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }

    fn set_flat(&mut self, mut idx: usize, value: f64) {
        for b in self.blocks_mut() {
            if idx < b.len() {
                b[idx] = value;
                return;
            }
            idx -= b.len();
        }
        panic!("parameter index out of range")
    }

    fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(IerError::config("learning rate must be positive"));
        }
        Ok(Adam {
            config,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn with_lr(lr: f64) -> Result<Self> {
        Adam::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        if !grads.is_finite() {
            return Err(IerError::Numeric("non-finite gradient".into()));
        }
        let gblocks = grads.blocks();
        if self.first.is_empty() {
            self.first = gblocks.iter().map(|b| vec![0.0; b.len()]).collect();
            self.second = self.first.clone();
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(gblocks)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Outcome of comparing analytic gradients to central differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub max_abs_analytic: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error with an absolute floor so that vanishing gradients compare
/// on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares `loss_and_grad`'s analytic gradient against central differences
/// with step [`GRAD_CHECK_STEP`].
///
/// When `max_coords` is set, a seeded random subset of coordinates is probed.
pub fn grad_check<P, F>(
    params: &P,
    loss_and_grad: F,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Result<(f64, P)>,
{
    let (_, analytic) = loss_and_grad(params)?;
    let n = params.num_params();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = index::sample(&mut rng, n, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    let h = GRAD_CHECK_STEP;
    let mut report = GradCheckReport {
        checked: coords.len(),
        max_rel_error: 0.0,
        worst_index: None,
        max_abs_analytic: 0.0,
    };
    let mut probe = params.clone();
    for idx in coords {
        let orig = params.get_flat(idx);
        probe.set_flat(idx, orig + h);
        let (plus, _) = loss_and_grad(&probe)?;
        probe.set_flat(idx, orig - h);
        let (minus, _) = loss_and_grad(&probe)?;
        probe.set_flat(idx, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get_flat(idx);
        report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(idx);
        }
    }
    Ok(report)
}
