//! Masked-reconstruction objective.
//!
//! The loss is the squared L2 distance between prediction and normalized
//! target, summed over masked tokens only and divided by the number of masked
//! *tokens* (not elements). Many MAE-style codebases average over elements
//! instead; the token normalization here is deliberate and tested.

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::numerics::Mat3;
use crate::tokenize::TokenBatch;

/// Loss value with its decomposition.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f32,
    pub masked_count: usize,
    /// Per-sample sums of squared errors over that sample's masked tokens,
    /// before dividing by `masked_count`.
    pub per_sample: Vec<f32>,
}

fn check_shapes(pred: &TokenBatch, target: &TokenBatch, m: &MaskSet) -> Result<()> {
    if pred.tokens().dims() != target.tokens().dims() {
        return Err(Error::shape(
            "mim_loss",
            format!("pred {:?}", pred.tokens().dims()),
            format!("target {:?}", target.tokens().dims()),
        ));
    }
    if pred.n() != m.n() || pred.len_tokens() != m.len_tokens() {
        return Err(Error::shape(
            "mim_loss",
            format!("pred ({}, {})", pred.n(), pred.len_tokens()),
            format!("mask ({}, {})", m.n(), m.len_tokens()),
        ));
    }
    Ok(())
}

/// Mean squared reconstruction error over masked tokens.
pub fn mim_loss(pred: &TokenBatch, target: &TokenBatch, m: &MaskSet) -> Result<LossReport> {
    check_shapes(pred, target, m)?;
    let masked_count = m.total_masked();
    if masked_count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut per_sample = Vec::with_capacity(pred.n());
    let mut total = 0.0f64;
    for k in 0..pred.n() {
        let mut sample = 0.0f64;
        for t in 0..pred.len_tokens() {
            if m.is_masked(k, t) {
                for (p, q) in pred.token(k, t).iter().zip(target.token(k, t)) {
                    let diff = *p as f64 - *q as f64;
                    sample += diff * diff;
                }
            }
        }
        per_sample.push(sample as f32);
        total += sample;
    }
    Ok(LossReport {
        value: (total / masked_count as f64) as f32,
        masked_count,
        per_sample,
    })
}

/// Analytic gradient of [`mim_loss`] with respect to the predictions:
/// `2 (pred - target) / masked_count` at masked positions, zero elsewhere.
pub fn mim_loss_grad(pred: &TokenBatch, target: &TokenBatch, m: &MaskSet) -> Result<TokenBatch> {
    check_shapes(pred, target, m)?;
    let masked_count = m.total_masked();
    if masked_count == 0 {
        return Err(Error::EmptyMask);
    }
    let (n, l, d) = pred.tokens().dims();
    let scale = 2.0f64 / masked_count as f64;
    let mut data = vec![0.0f32; n * l * d];
    for k in 0..n {
        for t in 0..l {
            if m.is_masked(k, t) {
                let base = (k * l + t) * d;
                for (i, (p, q)) in pred.token(k, t).iter().zip(target.token(k, t)).enumerate() {
                    data[base + i] = ((*p as f64 - *q as f64) * scale) as f32;
                }
            }
        }
    }
    pred.with_tokens(Mat3::new(n, l, d, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::masking::random_mask;
    use crate::numerics::Rng;
    use crate::tokenize::patchify;

    fn test_batch(n: usize, rng: &mut Rng) -> TokenBatch {
        let images: Vec<Image> = (0..n)
            .map(|_| {
                let pixels: Vec<f32> = (0..4 * 4).map(|_| rng.next_f32_in(0.0, 1.0)).collect();
                Image::new(4, 4, 1, pixels).unwrap()
            })
            .collect();
        patchify(&images, 2).unwrap()
    }

    fn with_values(batch: &TokenBatch, values: Vec<f32>) -> TokenBatch {
        let (n, l, d) = batch.tokens().dims();
        batch
            .with_tokens(Mat3::new(n, l, d, values).unwrap())
            .unwrap()
    }

    fn mask_of(batch: &TokenBatch, masked: &[Vec<usize>]) -> MaskSet {
        MaskSet::from_indices(batch.n(), batch.len_tokens(), masked).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut rng = Rng::from_seed(1);
        let batch = test_batch(2, &mut rng);
        let m = random_mask(2, 4, 0.5, &mut rng);
        let report = mim_loss(&batch, &batch, &m).unwrap();
        assert_eq!(report.value, 0.0);
        assert_eq!(report.masked_count, 4);
    }

    #[test]
    fn single_masked_token_unit_errors() {
        let mut rng = Rng::from_seed(2);
        let batch = test_batch(1, &mut rng);
        let mut values = batch.tokens().data().to_vec();
        // Token 1 differs by +1 in two of its four dims.
        values[4] += 1.0;
        values[5] += 1.0;
        let pred = with_values(&batch, values);
        let m = mask_of(&batch, &[vec![1]]);
        let report = mim_loss(&pred, &batch, &m).unwrap();
        assert!((report.value - 2.0).abs() < 1e-6);
        assert_eq!(report.masked_count, 1);
    }

    #[test]
    fn visible_positions_do_not_contribute() {
        let mut rng = Rng::from_seed(3);
        let batch = test_batch(1, &mut rng);
        let m = mask_of(&batch, &[vec![0, 3]]);
        let base = mim_loss(&batch, &batch, &m).unwrap();

        let mut values = batch.tokens().data().to_vec();
        for v in values.iter_mut().take(12).skip(4) {
            *v += 5.0; // tokens 1 and 2 stay visible
        }
        let perturbed = with_values(&batch, values);
        let after = mim_loss(&perturbed, &batch, &m).unwrap();
        assert_eq!(base.value, after.value);
        let grad = mim_loss_grad(&perturbed, &batch, &m).unwrap();
        assert!(grad.token(0, 1).iter().all(|&g| g == 0.0));
        assert!(grad.token(0, 2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut rng = Rng::from_seed(4);
        let batch = test_batch(1, &mut rng);
        let m = mask_of(&batch, &[vec![]]);
        assert!(matches!(
            mim_loss(&batch, &batch, &m),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            mim_loss_grad(&batch, &batch, &m),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn value_matches_per_sample_partition() {
        let mut rng = Rng::from_seed(5);
        let batch = test_batch(3, &mut rng);
        let pred = test_batch(3, &mut rng);
        let m = random_mask(3, 4, 0.5, &mut rng);
        let report = mim_loss(&pred, &batch, &m).unwrap();
        let total: f32 = report.per_sample.iter().sum();
        let recomputed = total / report.masked_count as f32;
        assert!((report.value - recomputed).abs() <= 1e-6 * report.value.max(1e-12));
    }

    #[test]
    fn loss_invariant_under_sample_permutation() {
        let mut rng = Rng::from_seed(6);
        let batch = test_batch(2, &mut rng);
        let pred = test_batch(2, &mut rng);
        let m = mask_of(&batch, &[vec![0, 2], vec![1]]);

        let swap = |b: &TokenBatch| {
            let (_, l, d) = b.tokens().dims();
            let stride = l * d;
            let mut data = b.tokens().data().to_vec();
            data.rotate_left(stride);
            with_values(b, data)
        };
        let m_swapped = mask_of(&batch, &[vec![1], vec![0, 2]]);
        let a = mim_loss(&pred, &batch, &m).unwrap();
        let b = mim_loss(&swap(&pred), &swap(&batch), &m_swapped).unwrap();
        assert!((a.value - b.value).abs() < 1e-7);
    }

    #[test]
    fn normalization_divides_by_masked_token_count() {
        let mut rng = Rng::from_seed(7);
        let batch = test_batch(1, &mut rng);
        let mut values = batch.tokens().data().to_vec();
        for v in values.iter_mut().take(4) {
            *v += 0.5; // error only on token 0
        }
        let pred = with_values(&batch, values.clone());

        // Doubling the masked count while the summed error stays put halves
        // the loss: token 1 is masked but error-free.
        let one = mim_loss(&pred, &batch, &mask_of(&batch, &[vec![0]])).unwrap();
        let two = mim_loss(&pred, &batch, &mask_of(&batch, &[vec![0, 1]])).unwrap();
        assert!(
            (two.value - 0.5 * one.value).abs() < 1e-7,
            "{} vs {}",
            two.value,
            one.value
        );

        // And with the identical error replicated onto the second token the
        // per-token mean is unchanged.
        for v in values.iter_mut().take(8).skip(4) {
            *v += 0.5;
        }
        let pred_dup = with_values(&batch, values);
        let dup = mim_loss(&pred_dup, &batch, &mask_of(&batch, &[vec![0, 1]])).unwrap();
        assert!((dup.value - one.value).abs() < 1e-6);
    }

    #[test]
    fn grad_is_zero_for_perfect_prediction() {
        let mut rng = Rng::from_seed(8);
        let batch = test_batch(1, &mut rng);
        let m = mask_of(&batch, &[vec![0, 1]]);
        let grad = mim_loss_grad(&batch, &batch, &m).unwrap();
        assert!(grad.tokens().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_matches_central_finite_differences() {
        let mut rng = Rng::from_seed(9);
        for _ in 0..20 {
            let batch = test_batch(2, &mut rng);
            let pred = test_batch(2, &mut rng);
            let gamma = 0.25 + rng.next_f32_in(0.0, 0.5);
            let m = random_mask(2, 4, gamma, &mut rng);
            if m.total_masked() == 0 {
                continue;
            }
            let grad = mim_loss_grad(&pred, &batch, &m).unwrap();
            let h = 1e-3f32;
            for idx in 0..pred.tokens().data().len() {
                let mut plus = pred.tokens().data().to_vec();
                let mut minus = plus.clone();
                plus[idx] += h;
                minus[idx] -= h;
                let lp = mim_loss(&with_values(&pred, plus), &batch, &m)
                    .unwrap()
                    .value;
                let lm = mim_loss(&with_values(&pred, minus), &batch, &m)
                    .unwrap()
                    .value;
                let numeric = (lp - lm) as f64 / (2.0 * h as f64);
                let analytic = grad.tokens().data()[idx] as f64;
                let tol = 1e-3 * analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() <= tol,
                    "idx {idx}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }
}
