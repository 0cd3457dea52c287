use crate::error::{Error, Result};

/// Lower clamp bound applied to probabilities before any logarithm.
pub const PROB_MIN: f64 = 1e-7;
/// Upper clamp bound applied to probabilities before any logarithm.
pub const PROB_MAX: f64 = 1.0 - 1e-7;

/// Numerically stable softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax over a non-empty slice, overwriting it.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Backward of softmax: given outputs `y` and upstream `dy`, returns `dx`.
pub(crate) fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, dyi)| yi * (dyi - dot)).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_MIN, PROB_MAX)
}

fn check_lengths(p: &[f64], y: &[f64]) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "probability length {} does not match target length {}",
            p.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Two-term binary cross-entropy summed over classes, with `p` clamped into
/// `[PROB_MIN, PROB_MAX]`.
pub fn binary_cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(p, y)?;
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

/// Gradient of [`binary_cross_entropy`] with respect to the unclamped `p`.
/// Entries outside the clamp range receive zero gradient.
pub fn binary_cross_entropy_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_lengths(p, y)?;
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if !(PROB_MIN..=PROB_MAX).contains(&p) {
                0.0
            } else {
                (1.0 - y) / (1.0 - p) - y / p
            }
        })
        .collect())
}

/// Positive-term-only cross-entropy `-Σ y log p`.
pub fn positive_cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(p, y)?;
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| -y * clamp_prob(p).ln())
        .sum())
}

pub fn positive_cross_entropy_grad(p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_lengths(p, y)?;
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if !(PROB_MIN..=PROB_MAX).contains(&p) {
                0.0
            } else {
                -y / p
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[123.4]).unwrap(), vec![1.0]);
        // exp(k)/Σexp reference values for [1,2,3]
        let s = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expect = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(matches!(softmax(&[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn bce_examples() {
        let perfect = binary_cross_entropy(&[1.0 - 1e-7, 1e-7], &[1.0, 0.0]).unwrap();
        assert!(perfect < 1e-6);
        let half = binary_cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((half - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((half - 1.386_294).abs() < 1e-6);
        let smooth = binary_cross_entropy(&[0.3, 0.6], &[0.82, 0.02]).unwrap();
        assert!(smooth.is_finite() && smooth > 0.0);
        assert!(binary_cross_entropy(&[0.5], &[1.0, 0.0]).is_err());
        // hard probabilities are clamped rather than producing infinities
        assert!(binary_cross_entropy(&[0.0, 1.0], &[1.0, 0.0])
            .unwrap()
            .is_finite());
    }

    #[test]
    fn bce_grad_matches_central_difference() {
        let p = [0.2, 0.7, 0.45];
        let y = [1.0, 0.0, 0.82];
        let g = binary_cross_entropy_grad(&p, &y).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = p;
            up[i] += h;
            let mut dn = p;
            dn[i] -= h;
            let num = (binary_cross_entropy(&up, &y).unwrap()
                - binary_cross_entropy(&dn, &y).unwrap())
                / (2.0 * h);
            assert!((num - g[i]).abs() < 1e-6, "{num} vs {}", g[i]);
        }
        assert_eq!(
            binary_cross_entropy_grad(&[1.5], &[1.0]).unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let x = [0.3, -1.2, 2.0, 0.1];
        let dy = [1.0, -0.5, 0.25, 2.0];
        let y = softmax(&x).unwrap();
        let dx = softmax_backward(&y, &dy);
        let f = |x: &[f64]| -> f64 {
            softmax(x)
                .unwrap()
                .iter()
                .zip(&dy)
                .map(|(a, b)| a * b)
                .sum()
        };
        for i in 0..4 {
            let mut up = x;
            up[i] += 1e-6;
            let mut dn = x;
            dn[i] -= 1e-6;
            let num = (f(&up) - f(&dn)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..=64)) {
            let s = softmax(&v).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..=64), k in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn sigmoid_symmetry(x in -700.0f64..700.0) {
            prop_assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-12);
        }

        #[test]
        fn sigmoid_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            if a < b {
                prop_assert!(sigmoid(a) <= sigmoid(b));
            }
        }

        #[test]
        fn bce_nonnegative_and_minimized_at_hard_target(
            y in prop::collection::vec(prop::bool::ANY, 1..10),
            p in prop::collection::vec(0.0f64..=1.0, 10),
            delta in 1e-4f64..0.5,
        ) {
            let y: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let p = &p[..y.len()];
            prop_assert!(binary_cross_entropy(p, &y).unwrap() >= 0.0);
            let at_target = binary_cross_entropy(&y, &y).unwrap();
            for i in 0..y.len() {
                let mut q = y.clone();
                q[i] = if y[i] == 1.0 { 1.0 - delta } else { delta };
                prop_assert!(binary_cross_entropy(&q, &y).unwrap() > at_target);
            }
        }
    }
}
