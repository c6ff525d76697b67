//! Mask generation: random baseline, salience-guided SBAM selection, and the
//! per-sample adaptive masking ratio.
//!
//! Every strategy keeps the visible count at `K = ceil(L * (1 - gamma))`, so
//! comparisons between strategies hold the token budget constant. SBAM masks
//! the `L - K` tokens with the *highest* noise-adjusted salience; the
//! `invert_selection` flag flips this to mask the lowest-salience tokens
//! instead, for comparison runs.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{argsort_asc, Mat3, Rng};
use crate::salience::{self, SalienceMap};
use crate::tokenize::TokenBatch;

/// Mask selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Uniform random token selection at the base ratio.
    Random,
    /// Salience plus uniform noise, highest adjusted salience masked.
    Sbam,
    /// SBAM with the per-sample adaptive masking ratio.
    SbamAmr,
    /// SBAM with the noise amplitude forced to zero (randomness-off ablation).
    SalienceOnly,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Sbam => "sbam",
            Strategy::SbamAmr => "sbam-amr",
            Strategy::SalienceOnly => "salience-only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "sbam" => Ok(Strategy::Sbam),
            "sbam-amr" | "sbam_amr" => Ok(Strategy::SbamAmr),
            "salience-only" | "salience_only" => Ok(Strategy::SalienceOnly),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected random, sbam, sbam-amr or salience-only)"
            ))),
        }
    }
}

/// Masking hyperparameters.
///
/// `base_ratio` is the fraction of tokens hidden; `delta_r` bounds how far
/// the adaptive ratio may drift from it; `delta` is the salience threshold
/// counting a token as highly salient.
#[derive(Debug, Clone)]
pub struct MaskingConfig {
    pub base_ratio: f32,
    pub delta_r: f32,
    pub delta: f32,
    pub noise_amplitude: f32,
    pub seed: u64,
    pub strategy: Strategy,
    pub invert_selection: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            base_ratio: 0.75,
            delta_r: 0.15,
            delta: 0.1,
            noise_amplitude: 0.5,
            seed: 0,
            strategy: Strategy::Sbam,
            invert_selection: false,
        }
    }
}

impl MaskingConfig {
    /// Checks `r - dr >= 0`, `r + dr <= 1` and the scalar domains.
    pub fn validate(&self) -> Result<()> {
        let r = self.base_ratio;
        let dr = self.delta_r;
        if !r.is_finite() || !dr.is_finite() {
            return Err(Error::Config(format!(
                "ratio {r} and delta-r {dr} must be finite"
            )));
        }
        if dr < 0.0 {
            return Err(Error::Config(format!("delta-r {dr} must be >= 0")));
        }
        if r - dr < 0.0 || r + dr > 1.0 {
            return Err(Error::Config(format!(
                "ratio {r} with delta-r {dr} leaves [{}, {}] outside [0,1]",
                r - dr,
                r + dr
            )));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0,1]", self.delta)));
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::Config(format!(
                "noise amplitude {} must be >= 0",
                self.noise_amplitude
            )));
        }
        Ok(())
    }

    /// The attainable adaptive-ratio interval `[r - dr, r + dr]`.
    pub fn ratio_bounds(&self) -> (f32, f32) {
        let r = self.base_ratio as f64;
        let dr = self.delta_r as f64;
        ((r - dr) as f32, (r + dr) as f32)
    }
}

/// Number of visible tokens, `K = ceil(L * (1 - gamma))`.
///
/// Computed in f64 with a small snap term (`1e-9 + L * 1e-7`) so that ratios
/// stated to a few decimal places behave exactly as written despite f32
/// rounding; genuinely fractional products are far from the snap window.
pub fn visible_count(l: usize, gamma: f32) -> usize {
    let x = l as f64 * (1.0 - gamma as f64);
    let snap = 1e-9 + l as f64 * 1e-7;
    (((x - snap).ceil()).max(0.0) as usize).min(l)
}

/// Number of masked tokens, `L - K`.
pub fn masked_count(l: usize, gamma: f32) -> usize {
    l - visible_count(l, gamma)
}

/// Binary mask over a token batch; 1 = masked, 0 = visible.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    mask: Vec<u8>,
    n: usize,
    l: usize,
    ratios: Vec<f32>,
}

impl MaskSet {
    /// Builds a mask from explicit per-sample masked-token indices.
    pub fn from_indices(n: usize, l: usize, masked: &[Vec<usize>]) -> Result<MaskSet> {
        if masked.len() != n {
            return Err(Error::shape(
                "MaskSet::from_indices",
                format!("{n} samples"),
                format!("{} index lists", masked.len()),
            ));
        }
        let mut mask = vec![0u8; n * l];
        let mut ratios = Vec::with_capacity(n);
        for (k, indices) in masked.iter().enumerate() {
            for &i in indices {
                if i >= l {
                    return Err(Error::parameter(
                        "masked index",
                        format!("{i} out of range for L = {l}"),
                    ));
                }
                if mask[k * l + i] == 1 {
                    return Err(Error::parameter(
                        "masked index",
                        format!("{i} listed twice for sample {k}"),
                    ));
                }
                mask[k * l + i] = 1;
            }
            ratios.push(indices.len() as f32 / l as f32);
        }
        Ok(MaskSet { mask, n, l, ratios })
    }

    fn from_masked_indices(n: usize, l: usize, masked: &[Vec<usize>]) -> MaskSet {
        MaskSet::from_indices(n, l, masked).expect("strategy-internal indices are valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len_tokens(&self) -> usize {
        self.l
    }

    pub fn is_masked(&self, n: usize, l: usize) -> bool {
        self.mask[n * self.l + l] == 1
    }

    /// Row of 0/1 flags for sample `n`.
    pub fn row(&self, n: usize) -> &[u8] {
        &self.mask[n * self.l..(n + 1) * self.l]
    }

    /// Realized masked fraction per sample.
    pub fn ratios(&self) -> &[f32] {
        &self.ratios
    }

    pub fn masked_count(&self, n: usize) -> usize {
        self.row(n).iter().map(|&b| b as usize).sum()
    }

    pub fn total_masked(&self) -> usize {
        self.mask.iter().map(|&b| b as usize).sum()
    }

    /// Ascending indices of masked tokens in sample `n`.
    pub fn masked_positions(&self, n: usize) -> Vec<usize> {
        self.row(n)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }
}

/// Uniform random masking: every sample hides exactly `masked_count(L, gamma)`
/// tokens, drawn without replacement.
pub fn random_mask(n: usize, l: usize, gamma: f32, rng: &mut Rng) -> MaskSet {
    let m = masked_count(l, gamma);
    let masked: Vec<Vec<usize>> = (0..n).map(|_| rng.sample_distinct(l, m)).collect();
    MaskSet::from_masked_indices(n, l, &masked)
}

/// Salience-guided masking over noise-adjusted scores.
///
/// Per sample, the `K = ceil(L * (1 - gamma))` tokens with the lowest
/// adjusted salience stay visible and the rest are masked. Ties break by
/// ascending token index. With `invert` the selection flips: the K highest
/// stay visible.
pub fn sbam_mask(s: &SalienceMap, gamma_per_sample: &[f32], invert: bool) -> Result<MaskSet> {
    let adjusted = s.adjusted().ok_or_else(|| {
        Error::parameter("salience map", "adjusted scores missing; add noise first")
    })?;
    let (n, l) = (adjusted.rows(), adjusted.cols());
    if gamma_per_sample.len() != n {
        return Err(Error::shape(
            "sbam_mask",
            format!("{n} samples"),
            format!("{} ratios", gamma_per_sample.len()),
        ));
    }
    let mut masked = Vec::with_capacity(n);
    for (k, &gamma) in gamma_per_sample.iter().enumerate() {
        let order = argsort_asc(adjusted.row(k));
        let keep = visible_count(l, gamma);
        let hidden: Vec<usize> = if invert {
            order[..l - keep].to_vec()
        } else {
            order[keep..].to_vec()
        };
        masked.push(hidden);
    }
    Ok(MaskSet::from_masked_indices(n, l, &masked))
}

/// Per-sample adaptive masking ratio
/// `r - dr + 2 dr * mean(score > delta)`, clamped onto `[r - dr, r + dr]`
/// to shed float dust at the endpoints.
pub fn amr_ratio(s: &SalienceMap, cfg: &MaskingConfig) -> Vec<f32> {
    let r = cfg.base_ratio as f64;
    let dr = cfg.delta_r as f64;
    let delta = cfg.delta as f64;
    let scores = s.scores();
    (0..scores.rows())
        .map(|k| {
            let row = scores.row(k);
            let above = row.iter().filter(|&&v| v as f64 > delta).count();
            let mean = above as f64 / row.len() as f64;
            let ratio = r - dr + 2.0 * dr * mean;
            ratio.clamp(r - dr, r + dr) as f32
        })
        .collect()
}

/// Visible tokens and masked positions extracted from a batch.
#[derive(Debug, Clone)]
pub struct MaskedTokens {
    /// Per sample: the visible tokens, original order, flattened to
    /// `visible_count * D`.
    pub visible: Vec<Vec<f32>>,
    /// Per sample: ascending indices of the masked tokens.
    pub masked_positions: Vec<Vec<usize>>,
    dim: usize,
}

impl MaskedTokens {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rebuilds full-length sequences: original tokens at visible slots,
    /// `mask_token` everywhere else.
    pub fn scatter(&self, l: usize, mask_token: &[f32]) -> Result<Mat3> {
        if mask_token.len() != self.dim {
            return Err(Error::shape(
                "scatter",
                format!("token dim {}", self.dim),
                format!("mask token dim {}", mask_token.len()),
            ));
        }
        let n = self.visible.len();
        let mut out = Mat3::zeros(n, l, self.dim);
        for k in 0..n {
            let mut next_visible = 0;
            let masked = &self.masked_positions[k];
            let mut masked_iter = masked.iter().peekable();
            for t in 0..l {
                let row_base = self.visible[k].as_slice();
                let dst = &mut out.data_mut()[(k * l + t) * self.dim..(k * l + t + 1) * self.dim];
                if masked_iter.peek() == Some(&&t) {
                    masked_iter.next();
                    dst.copy_from_slice(mask_token);
                } else {
                    dst.copy_from_slice(
                        &row_base[next_visible * self.dim..(next_visible + 1) * self.dim],
                    );
                    next_visible += 1;
                }
            }
        }
        Ok(out)
    }
}

/// Splits a batch into visible tokens (original order) and masked positions.
pub fn apply_mask(x: &TokenBatch, m: &MaskSet) -> Result<MaskedTokens> {
    if x.n() != m.n() || x.len_tokens() != m.len_tokens() {
        return Err(Error::shape(
            "apply_mask",
            format!("tokens ({}, {})", x.n(), x.len_tokens()),
            format!("mask ({}, {})", m.n(), m.len_tokens()),
        ));
    }
    let d = x.dim();
    let mut visible = Vec::with_capacity(x.n());
    let mut masked_positions = Vec::with_capacity(x.n());
    for k in 0..x.n() {
        let mut vis = Vec::with_capacity((x.len_tokens() - m.masked_count(k)) * d);
        let mut pos = Vec::with_capacity(m.masked_count(k));
        for t in 0..x.len_tokens() {
            if m.is_masked(k, t) {
                pos.push(t);
            } else {
                vis.extend_from_slice(x.token(k, t));
            }
        }
        visible.push(vis);
        masked_positions.push(pos);
    }
    Ok(MaskedTokens {
        visible,
        masked_positions,
        dim: d,
    })
}

/// A generated mask plus everything the strategy computed on the way.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub masks: MaskSet,
    /// Present for salience-driven strategies.
    pub salience: Option<SalienceMap>,
    /// The per-sample ratio each mask was drawn at.
    pub gammas: Vec<f32>,
}

/// Runs the configured strategy over a token batch.
///
/// Salience is computed on the raw tokens; the adaptive ratio reuses that one
/// computation. Noise is drawn fresh from `rng` on every call.
pub fn plan_masks(x: &TokenBatch, cfg: &MaskingConfig, rng: &mut Rng) -> Result<MaskPlan> {
    cfg.validate()?;
    let n = x.n();
    let l = x.len_tokens();
    match cfg.strategy {
        Strategy::Random => {
            let gammas = vec![cfg.base_ratio; n];
            Ok(MaskPlan {
                masks: random_mask(n, l, cfg.base_ratio, rng),
                salience: None,
                gammas,
            })
        }
        Strategy::Sbam | Strategy::SalienceOnly | Strategy::SbamAmr => {
            let amplitude = if cfg.strategy == Strategy::SalienceOnly {
                0.0
            } else {
                cfg.noise_amplitude
            };
            let scores = salience::token_salience(x);
            let gammas = if cfg.strategy == Strategy::SbamAmr {
                amr_ratio(&scores, cfg)
            } else {
                vec![cfg.base_ratio; n]
            };
            let adjusted = salience::adjust_with_noise(&scores, rng, amplitude)?;
            let masks = sbam_mask(&adjusted, &gammas, cfg.invert_selection)?;
            Ok(MaskPlan {
                masks,
                salience: Some(adjusted),
                gammas,
            })
        }
    }
}
