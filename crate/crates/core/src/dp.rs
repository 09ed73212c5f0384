//! Client-side differential privacy: per-example clipping with Gaussian
//! noise on the gradients, and Laplace noise on the smashed data.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::sgd_update;
use crate::model::{Segment, Trace};
use crate::rng::NoiseSource;
use crate::tensor::{GradientSet, ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    /// σ
    pub noise_scale: f64,
    /// C′
    pub clip_norm: f64,
    /// ε, as declared for the gradient mechanism.
    pub epsilon: f64,
    pub delta: f64,
    /// ε′
    pub smashed_epsilon: f64,
    pub gradient_dp: bool,
    pub smashed_dp: bool,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            noise_scale: 1.3,
            clip_norm: 1.0,
            epsilon: 0.5,
            delta: 1e-5,
            smashed_epsilon: 1.0,
            gradient_dp: false,
            smashed_dp: false,
        }
    }
}

impl DpConfig {
    pub fn enabled(&self) -> bool {
        self.gradient_dp || self.smashed_dp
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("noise_scale", self.noise_scale),
            ("clip_norm", self.clip_norm),
            ("epsilon", self.epsilon),
            ("smashed_epsilon", self.smashed_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// Gradient of each example's own loss. `upstream` is the gradient of the
/// batch-mean loss, so each row is rescaled by the batch size; the mean of
/// the returned gradients is then the batch gradient.
pub fn per_example_gradients(
    segment: &Segment<'_>,
    params: &ParameterSet,
    trace: &Trace,
    upstream: &Tensor,
) -> Result<Vec<GradientSet>> {
    let batch = trace.batch_size();
    if upstream.rows() != batch || upstream.row_len() != trace.output.row_len() {
        return Err(Error::ShapeMismatch(format!("upstream {:?} for a batch of {batch}", upstream.shape())));
    }
    (0..batch)
        .map(|i| {
            let mut row = upstream.slice_rows(i, i + 1);
            row.scale(batch as f64);
            segment.backward(params, &trace.example(i), &row).map(|(_, g)| g)
        })
        .collect()
}

/// ḡ = g / max(1, ‖g‖₂ / C′).
pub fn clip_gradient(g: &GradientSet, clip_norm: f64) -> GradientSet {
    let factor = (g.l2_norm() / clip_norm).max(1.0);
    let mut out = g.clone();
    if factor > 1.0 {
        out.scale(1.0 / factor);
    }
    out
}

/// g̃ = (1/n)·Σᵢ (ḡᵢ + N(0, σ²C′²)), with fresh noise for every example and
/// coordinate.
pub fn noisy_average(
    clipped: &[GradientSet],
    noise_scale: f64,
    clip_norm: f64,
    noise: &mut NoiseSource,
) -> Result<GradientSet> {
    let first = clipped.first().ok_or(Error::EmptyUpdateSet)?;
    let std = noise_scale * clip_norm;
    let mut acc = first.zeroed();
    for g in clipped {
        for ((_, a), (_, b)) in acc.entries_mut().iter_mut().zip(g.entries()) {
            a.ensure_same_shape(b, "per-example gradient")?;
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y + noise.gaussian(std);
            }
        }
    }
    acc.scale(1.0 / clipped.len() as f64);
    Ok(acc)
}

/// W ← W − η·g̃.
pub fn dp_client_update(params: &ParameterSet, noisy: &GradientSet, lr: f64) -> Result<ParameterSet> {
    sgd_update(params, noisy, lr)
}

/// Largest post-clip norm seen, for auditing a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClipStats {
    pub examples: u64,
    pub clipped: u64,
    pub max_norm: f64,
}

impl ClipStats {
    pub fn merge(&mut self, other: &ClipStats) {
        self.examples += other.examples;
        self.clipped += other.clipped;
        self.max_norm = self.max_norm.max(other.max_norm);
    }
}

/// Per-example gradients, clipped and noisily averaged.
pub fn private_gradient(
    segment: &Segment<'_>,
    params: &ParameterSet,
    trace: &Trace,
    upstream: &Tensor,
    config: &DpConfig,
    noise: &mut NoiseSource,
    stats: &mut ClipStats,
) -> Result<GradientSet> {
    let per_example = per_example_gradients(segment, params, trace, upstream)?;
    let clipped: Vec<GradientSet> = per_example
        .iter()
        .map(|g| {
            let c = clip_gradient(g, config.clip_norm);
            stats.examples += 1;
            if g.l2_norm() > config.clip_norm {
                stats.clipped += 1;
            }
            stats.max_norm = stats.max_norm.max(c.l2_norm());
            c
        })
        .collect();
    noisy_average(&clipped, config.noise_scale, config.clip_norm, noise)
}

/// Adds Lap(ΔIⱼ/ε′) to every element of feature column `j`, where ΔIⱼ is
/// the column's range over the batch. Constant columns are left untouched.
pub fn randomize_smashed(activations: &Tensor, smashed_epsilon: f64, noise: &mut NoiseSource) -> Tensor {
    let rows = activations.rows();
    let cols = activations.row_len();
    let mut out = activations.clone();
    if rows == 0 {
        return out;
    }
    let src = activations.data();
    let mut lo = src[..cols].to_vec();
    let mut hi = lo.clone();
    for r in 1..rows {
        for (j, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let scales: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l) / smashed_epsilon).collect();
    for row in out.data_mut().chunks_mut(cols) {
        for (v, &b) in row.iter_mut().zip(&scales) {
            if b > 0.0 {
                *v += noise.laplace(b);
            }
        }
    }
    out
}

/// Declared privacy budget under simple additive composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetReport {
    pub epsilon: f64,
    pub delta: f64,
}

impl BudgetReport {
    pub const METHOD: &'static str = "simple composition, not a moments accountant";
}

impl fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) [{}]", self.epsilon, self.delta, Self::METHOD)
    }
}

/// ε_total = ε·[gradient DP] + ε′·[smashed DP].
pub fn report_budget(config: &DpConfig) -> BudgetReport {
    let mut epsilon = 0.0;
    if config.gradient_dp {
        epsilon += config.epsilon;
    }
    if config.smashed_dp {
        epsilon += config.smashed_epsilon;
    }
    BudgetReport { epsilon, delta: config.delta }
}
