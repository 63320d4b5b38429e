use crate::autodiff::{Real, Tape, Var};
use crate::error::{Error, Result};

/// Frequency floor added before inversion.
pub const CLASS_WEIGHT_EPS: f64 = 0.02;

/// Inverse-frequency class weights `1 / (freq + 0.02)`, normalized to mean 1.
pub fn class_weights(histogram: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("label histogram is all zero".into()));
    }
    let raw: Vec<f64> = histogram
        .iter()
        .map(|&c| 1.0 / (c as f64 / total as f64 + CLASS_WEIGHT_EPS))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

pub fn label_histogram(labels: &[u32], classes: usize) -> Result<Vec<u64>> {
    let mut h = vec![0u64; classes];
    for (i, &l) in labels.iter().enumerate() {
        *h.get_mut(l as usize).ok_or(Error::LabelOutOfRange {
            point: i,
            label: l,
            num_classes: classes,
        })? += 1;
    }
    Ok(h)
}

pub fn weighted_cross_entropy<T: Real>(
    tape: &Tape<T>,
    logits: &Var<T>,
    labels: &[u32],
    weights: &[f64],
) -> Result<Var<T>> {
    let w: Vec<T> = weights.iter().map(|&v| T::of(v)).collect();
    tape.weighted_cross_entropy(logits, labels, &w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_histogram_gives_unit_weights() {
        assert_eq!(class_weights(&[5, 5, 5, 5]).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn two_class_weights() {
        let w = class_weights(&[90, 10]).unwrap();
        let (a, b) = (1.0 / 0.92, 1.0 / 0.12);
        let mean = (a + b) / 2.0;
        assert!((w[0] - a / mean).abs() < 1e-12);
        assert!((w[1] - b / mean).abs() < 1e-12);
        assert!(class_weights(&[0, 0]).is_err());
        let w = class_weights(&[10, 0, 30]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!(w[1] >= w[0] && w[1] >= w[2]);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let tape = Tape::<f64>::inference();
        let logits = Var::constant(Tensor::zeros(vec![6, 5]));
        let l = weighted_cross_entropy(&tape, &logits, &[0, 1, 2, 3, 4, 0], &[1.0; 5]).unwrap();
        assert!((l.data()[0] - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_drive_loss_to_zero() {
        let tape = Tape::<f64>::inference();
        let logits = Var::constant(Tensor::from_f64(vec![2, 3], &[200.0, 0.0, 0.0, 0.0, 0.0, 200.0]).unwrap());
        let l = weighted_cross_entropy(&tape, &logits, &[0, 2], &[1.0, 2.0, 3.0]).unwrap();
        assert!(l.data()[0] < 1e-12);
        assert!(weighted_cross_entropy(&tape, &logits, &[0, 3], &[1.0; 3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = rng.gen_range(1..8);
            let c = rng.gen_range(2..6);
            let x = Tensor::new(vec![n, c], (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
            let w: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
            let err = grad_check(|t, v| weighted_cross_entropy(t, v, &labels, &w), &x, DEFAULT_EPS).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }
}
