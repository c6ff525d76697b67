//! Token salience from affinity matrices.
//!
//! For each sample the token affinity matrix `A = X . X^T` is row-softmaxed
//! into `A_hat`, and a token's salience is its *outgoing* weight: the column
//! sum of `A_hat`, i.e. how much that token contributes to every token's
//! attention, min-max normalized per sample onto `[0, 1]`. An optional
//! uniform noise term spreads masking decisions across near-ties.
//!
//! Salience here is computed on raw patchified pixel tokens, which keeps it
//! model-free; [`salience_of_tokens`] accepts externally produced embeddings
//! when a caller wants salience over some other representation.

use crate::error::{Error, Result};
use crate::numerics::{self, Mat2, Mat3, Rng};
use crate::tokenize::TokenBatch;

/// Per-sample, per-token salience scores, plus the noise-adjusted variant
/// used for mask selection.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMap {
    scores: Mat2,
    adjusted: Option<Mat2>,
}

impl SalienceMap {
    /// Assembles a map from precomputed parts, e.g. scores derived outside
    /// this crate. Scores must lie in `[0, 1]`; `adjusted` must match shape.
    pub fn from_parts(scores: Mat2, adjusted: Option<Mat2>) -> Result<Self> {
        if let Some(bad) = scores.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::parameter(
                "salience scores",
                format!("must lie in [0,1], found {bad}"),
            ));
        }
        if let Some(adj) = &adjusted {
            if (adj.rows(), adj.cols()) != (scores.rows(), scores.cols()) {
                return Err(Error::shape(
                    "SalienceMap::from_parts",
                    format!("scores ({},{})", scores.rows(), scores.cols()),
                    format!("adjusted ({},{})", adj.rows(), adj.cols()),
                ));
            }
        }
        Ok(SalienceMap { scores, adjusted })
    }

    /// Normalized scores in `[0, 1]`, shape (N, L).
    pub fn scores(&self) -> &Mat2 {
        &self.scores
    }

    /// Noise-adjusted scores, present after [`adjust_with_noise`].
    pub fn adjusted(&self) -> Option<&Mat2> {
        self.adjusted.as_ref()
    }

    pub fn n(&self) -> usize {
        self.scores.rows()
    }

    pub fn len_tokens(&self) -> usize {
        self.scores.cols()
    }
}

/// Affinity matrix `A[n] = X[n] . X[n]^T`, shape (N, L, L).
pub fn affinity(x: &TokenBatch) -> Mat3 {
    affinity_of_tokens(x.tokens())
}

fn affinity_of_tokens(tokens: &Mat3) -> Mat3 {
    numerics::bmm(tokens, &tokens.transposed()).expect("X and X^T always conform")
}

/// Salience of raw patch tokens. See [`salience_of_tokens`].
pub fn token_salience(x: &TokenBatch) -> SalienceMap {
    salience_of_tokens(x.tokens())
}

/// Salience over arbitrary token embeddings of shape (N, L, D).
///
/// Per sample: row-softmax the affinity matrix, sum each column, then min-max
/// normalize the L sums. A sample whose tokens are all identical has uniform
/// column sums and degenerates to all-zero scores, leaving any downstream
/// noise in full control of the masking order.
pub fn salience_of_tokens(tokens: &Mat3) -> SalienceMap {
    let normalized = numerics::softmax_rows(&affinity_of_tokens(tokens));
    let raw = numerics::colsum(&normalized);
    let mut data = Vec::with_capacity(raw.rows() * raw.cols());
    for k in 0..raw.rows() {
        data.extend(numerics::minmax_normalize(raw.row(k)));
    }
    SalienceMap {
        scores: Mat2::new(raw.rows(), raw.cols(), data).expect("same shape as raw sums"),
        adjusted: None,
    }
}

/// Adds uniform noise in `[0, amplitude)` to every score.
///
/// Amplitude 0 is the randomness-off ablation: adjusted scores equal the raw
/// scores exactly. Negative amplitudes are rejected.
pub fn adjust_with_noise(s: &SalienceMap, rng: &mut Rng, amplitude: f32) -> Result<SalienceMap> {
    if amplitude < 0.0 {
        return Err(Error::parameter(
            "noise amplitude",
            format!("must be non-negative, got {amplitude}"),
        ));
    }
    let (n, l) = (s.scores.rows(), s.scores.cols());
    let adjusted = if amplitude == 0.0 {
        s.scores.clone()
    } else {
        let noise = numerics::uniform(rng, n, l, 0.0, amplitude)?;
        let data = s
            .scores
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Mat2::new(n, l, data)?
    };
    Ok(SalienceMap {
        scores: s.scores.clone(),
        adjusted: Some(adjusted),
    })
}
