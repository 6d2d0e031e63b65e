//! Channel-statistic style transfer: renormalizes a source image so its
//! per-channel mean/std match a target image's statistics, perturbed by
//! Gaussian-sampled offsets scaled by the source-target statistic gap.

use crate::datagen::LabeledSample;
use crate::error::{IdmError, Result};
use crate::seeds::{self, stream};
use crate::tensor::{Image, LabelMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Floor applied to standard deviations so constant channels stay invertible.
pub const STD_EPS: f64 = 1e-6;

/// Per-channel (mean, population std) of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Gaussian offset weights drawn once per stylization, recorded for
/// reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatOffsets {
    pub delta_mu: f64,
    pub delta_sigma: f64,
}

impl StatOffsets {
    pub const ZERO: StatOffsets = StatOffsets {
        delta_mu: 0.0,
        delta_sigma: 0.0,
    };

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        StatOffsets {
            delta_mu: StandardNormal.sample(rng),
            delta_sigma: StandardNormal.sample(rng),
        }
    }

    /// Draw offsets from a one-shot seeded generator.
    pub fn sample_seeded(seed: u64) -> Self {
        StatOffsets::sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// How the statistic-gap magnitude enters the reconstructed target stats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Euclidean norm of the whole per-channel difference vector, broadcast
    /// to all channels (the default reading).
    #[default]
    VectorNorm,
    /// Per-channel absolute difference.
    PerChannelAbs,
}

/// A stylized source image together with its untouched label and the
/// offsets that produced it.
#[derive(Debug, Clone)]
pub struct StylizedSample {
    pub image: Image,
    pub source_label: LabelMap,
    pub offsets: StatOffsets,
    pub source_id: String,
}

/// Per-channel spatial mean and population std, floored at [`STD_EPS`].
pub fn compute_stats(image: &Image) -> ChannelStats {
    let n = image.plane_len() as f64;
    let mut mean = Vec::with_capacity(image.ch);
    let mut std = Vec::with_capacity(image.ch);
    for c in 0..image.ch {
        let plane = image.plane(c);
        let m: f64 = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = plane
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / n;
        mean.push(m);
        std.push(var.sqrt().max(STD_EPS));
    }
    ChannelStats { mean, std }
}

/// Reconstructed target statistics: the target's stats plus the sampled
/// offsets scaled by the magnitude of the source-target gap.
pub fn reconstruct_target_stats(
    stats_t: &ChannelStats,
    stats_s: &ChannelStats,
    offsets: StatOffsets,
    mode: NormMode,
) -> ChannelStats {
    let ch = stats_t.mean.len();
    let gap_mag = |t: &[f64], s: &[f64], c: usize| -> f64 {
        match mode {
            NormMode::VectorNorm => t
                .iter()
                .zip(s)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            NormMode::PerChannelAbs => (t[c] - s[c]).abs(),
        }
    };
    let mean = (0..ch)
        .map(|c| stats_t.mean[c] + offsets.delta_mu * gap_mag(&stats_t.mean, &stats_s.mean, c))
        .collect();
    let std = (0..ch)
        .map(|c| {
            (stats_t.std[c] + offsets.delta_sigma * gap_mag(&stats_t.std, &stats_s.std, c))
                .max(STD_EPS)
        })
        .collect();
    ChannelStats { mean, std }
}

/// Stylize with explicit offsets against precomputed target stats.
pub fn stylize_with(
    source: &LabeledSample,
    target_stats: &ChannelStats,
    offsets: StatOffsets,
    mode: NormMode,
) -> Result<StylizedSample> {
    if target_stats.mean.len() != source.image.ch {
        return Err(IdmError::Contract(format!(
            "channel mismatch: target stats {} vs source {}",
            target_stats.mean.len(),
            source.image.ch
        )));
    }
    let stats_s = compute_stats(&source.image);
    let recon = reconstruct_target_stats(target_stats, &stats_s, offsets, mode);
    let mut out = source.image.clone();
    for c in 0..out.ch {
        let mu_s = stats_s.mean[c];
        let sigma_s = stats_s.std[c];
        let gamma = recon.mean[c];
        let beta = recon.std[c];
        for v in out.plane_mut(c) {
            let normed = (*v as f64 - mu_s) / sigma_s;
            *v = (beta * normed + gamma).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(StylizedSample {
        image: out,
        source_label: source.label.clone(),
        offsets,
        source_id: source.id.clone(),
    })
}

/// Transfer the target image's channel statistics onto the source image,
/// with offsets sampled from the standard normal under the given seed.
pub fn stylize(source: &LabeledSample, target: &Image, seed: u64, mode: NormMode) -> Result<StylizedSample> {
    if target.ch != source.image.ch {
        return Err(IdmError::Contract(format!(
            "channel mismatch: target {} vs source {}",
            target.ch, source.image.ch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, stream::STYLE, 0));
    let offsets = StatOffsets::sample(&mut rng);
    stylize_with(source, &compute_stats(target), offsets, mode)
}
