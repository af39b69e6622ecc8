//! Resilient training rule for binary layers.
//!
//! The task loss is augmented with a per-channel weighted reconstruction
//! loss `L_R = ½ Σ_i γ_i ‖w_i − α_i sign(w_i)‖²`. Its gradient adds
//! `γ_i (w − α_i b)` to the straight-through weight gradient, so a latent
//! weight only changes sign when the task gradient on `ŵ` exceeds `γ_i` in
//! magnitude. `γ_i` is re-estimated each iteration from the fraction of
//! weights in the channel that flipped sign times the largest gradient
//! magnitude seen in that channel, clamped to `[gamma_min, gamma_max]`.

mod config;
mod optim;
mod trainer;

pub use crate::model::InferencePath;
pub use config::{GammaMode, Schedule, TrainConfig};
pub use optim::{lr_at, sgd_step, sgd_update, BinaryMomentum};
pub use trainer::{evaluate, Trainer};

use serde::{Deserialize, Serialize};

use crate::binarize::{sign, BinaryLayer};
use crate::bitkernel::{PackedBitTensor, PackedRow};
use crate::numcore::Scalar;
use crate::Result;

/// `½ Σ_i γ_i ‖w_i − α_i b^{w_i}‖²` for one layer.
pub fn reconstruction_loss<T: Scalar>(layer: &BinaryLayer<T>) -> T {
    let half = T::from_f64_lossy(0.5);
    (0..layer.c_out())
        .map(|i| {
            let a = layer.alpha[i];
            let sq: T = layer
                .channel(i)
                .iter()
                .map(|&w| {
                    let r = w - a * sign(w);
                    r * r
                })
                .sum();
            half * layer.gamma[i] * sq
        })
        .sum()
}

/// `∂L_R/∂w = γ_i (w − α_i b)` for channel `i`, with `b` held constant.
pub fn reconstruction_weight_grad<T: Scalar>(layer: &BinaryLayer<T>, i: usize) -> Vec<T> {
    let (a, g) = (layer.alpha[i], layer.gamma[i]);
    layer.channel(i).iter().map(|&w| g * (w - a * sign(w))).collect()
}

/// Resilient weight gradient for channel `i`:
/// `α_i (upstream ⊛ 1_{|w|≤1} − γ_i b) + γ_i w`, where `upstream = ∂L/∂ŵ_i`.
pub fn resilient_grad<T: Scalar>(upstream: &[T], layer: &BinaryLayer<T>, i: usize) -> Vec<T> {
    let (a, g) = (layer.alpha[i], layer.gamma[i]);
    upstream
        .iter()
        .zip(layer.channel(i))
        .map(|(&u, &w)| {
            let gated = if w.abs() <= T::one() { u } else { T::zero() };
            a * (gated - g * sign(w)) + g * w
        })
        .collect()
}

/// `δα_i = ∂L/∂α_i + ∂L_R/∂α_i`, with `∂L_R/∂α_i = −γ_i Σ_j (w_ij − α_i b_ij) b_ij`.
pub fn alpha_grad<T: Scalar>(layer: &BinaryLayer<T>, i: usize, task_grad_alpha: T) -> T {
    let (a, g) = (layer.alpha[i], layer.gamma[i]);
    let s: T = layer
        .channel(i)
        .iter()
        .map(|&w| {
            let b = sign(w);
            (w - a * b) * b
        })
        .sum();
    task_grad_alpha - g * s
}

/// Closed interval for γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaBounds {
    pub min: f64,
    pub max: f64,
}

/// Unclamped adaptive value `(flips / M) · max_grad`.
pub fn adaptive_gamma_raw<T: Scalar>(flips: u64, fan_in: usize, max_grad_mag: T) -> T {
    let proportion = T::from_f64_lossy(flips as f64) / T::from_usize_lossy(fan_in);
    proportion * max_grad_mag
}

pub fn clamp_gamma<T: Scalar>(raw: T, bounds: GammaBounds) -> T {
    raw.max(T::from_f64_lossy(bounds.min))
        .min(T::from_f64_lossy(bounds.max))
}

/// New `γ_i` from the channel's signs at iterations `t` and `t+1` and the
/// largest `|∂L/∂ŵ|` in the channel at iteration `t`.
pub fn gamma_update<T: Scalar>(
    signs_t: PackedRow<'_>,
    signs_t1: PackedRow<'_>,
    max_grad_mag: T,
    bounds: GammaBounds,
) -> Result<T> {
    if signs_t.len != signs_t1.len || signs_t.words.len() != signs_t1.words.len() {
        return Err(crate::Error::dim(
            "gamma_update",
            format!("sign rows of length {} and {}", signs_t.len, signs_t1.len),
        ));
    }
    let flips: u64 = signs_t
        .words
        .iter()
        .zip(signs_t1.words)
        .map(|(a, b)| (a ^ b).count_ones() as u64)
        .sum();
    Ok(clamp_gamma(
        adaptive_gamma_raw(flips, signs_t.len, max_grad_mag),
        bounds,
    ))
}

/// Sign-flip counts for one layer over three consecutive snapshots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OscillationCounts {
    /// Per channel: flips between the middle and newest snapshot.
    pub flips: Vec<u64>,
    /// Per channel: positions that flipped on both consecutive steps.
    pub sequential: Vec<u64>,
    pub fan_in: usize,
}

impl OscillationCounts {
    pub fn weight_count(&self) -> u64 {
        (self.flips.len() * self.fan_in) as u64
    }

    pub fn flip_count(&self) -> u64 {
        self.flips.iter().sum()
    }

    pub fn sequential_count(&self) -> u64 {
        self.sequential.iter().sum()
    }

    pub fn flip_proportion(&self) -> f64 {
        self.flip_count() as f64 / self.weight_count() as f64
    }

    pub fn sequential_ratio(&self) -> f64 {
        self.sequential_count() as f64 / self.weight_count() as f64
    }
}

/// Counts flips `prev → curr` and sequential oscillations, i.e. positions
/// whose sign went `prev_prev → prev → curr` as `+,−,+` or `−,+,−`.
pub fn detect_oscillation(
    prev_prev: &PackedBitTensor,
    prev: &PackedBitTensor,
    curr: &PackedBitTensor,
) -> Result<OscillationCounts> {
    let flips = prev.flips_per_row(curr)?;
    let sequential = prev.sequential_flips_per_row(prev_prev, curr)?;
    Ok(OscillationCounts {
        flips,
        sequential,
        fan_in: prev.row_len(),
    })
}

/// Per-layer, per-iteration sign-flip statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationRecord {
    pub layer_id: usize,
    pub iteration: usize,
    pub flip_count: u64,
    pub sequential_count: u64,
    pub weight_count: u64,
    pub flip_proportion: f64,
    pub sequential_ratio: f64,
    pub max_grad_mag: Vec<f64>,
}

impl OscillationRecord {
    pub fn new(layer_id: usize, iteration: usize, counts: &OscillationCounts, max_grad_mag: Vec<f64>) -> Self {
        Self {
            layer_id,
            iteration,
            flip_count: counts.flip_count(),
            sequential_count: counts.sequential_count(),
            weight_count: counts.weight_count(),
            flip_proportion: counts.flip_proportion(),
            sequential_ratio: counts.sequential_ratio(),
            max_grad_mag,
        }
    }
}
