use super::NnError;

/// Exponential linear unit with unit scale.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Derivative of [`elu`], expressed through the forward output to avoid a second `exp`.
#[inline]
pub fn elu_grad_from_output(pre: f64, post: f64) -> f64 {
    if pre >= 0.0 {
        1.0
    } else {
        post + 1.0
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NnError> {
    if logits.is_empty() {
        return Err(NnError::EmptyInput);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax: given `p = softmax(l)` and `dL/dp`, returns `dL/dl`.
pub fn softmax_backward(weights: &[f64], d_weights: &[f64]) -> Vec<f64> {
    let dot: f64 = weights.iter().zip(d_weights).map(|(p, g)| p * g).sum();
    weights
        .iter()
        .zip(d_weights)
        .map(|(p, g)| p * (g - dot))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_values() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(2.0), 2.0);
        // exp(-1) - 1 to 18 digits
        assert!((elu(-1.0) - (-0.632_120_558_828_557_7)).abs() < 1e-15);
    }

    #[test]
    fn elu_is_monotone_and_continuous_at_zero() {
        let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.01).collect();
        for w in xs.windows(2) {
            assert!(elu(w[1]) >= elu(w[0]));
        }
        assert!((elu(-1e-12) - elu(1e-12)).abs() < 1e-11);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let w = softmax(&[0.0; 4]).unwrap();
        assert_eq!(w, vec![0.25; 4]);
        let w = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert!((w[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(NnError::EmptyInput)));
    }

    #[test]
    fn softmax_shift_is_bitwise_when_shift_is_exact() {
        // Integer shifts keep l - max exact, so the two calls see identical inputs to exp.
        let a = softmax(&[0.0, 1.5, -2.25]).unwrap();
        let b = softmax(&[64.0, 65.5, 61.75]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let l = [0.3, -1.2, 0.7, 2.0];
        let g = [1.0, -0.5, 0.25, 2.0];
        let p = softmax(&l).unwrap();
        let analytic = softmax_backward(&p, &g);
        let h = 1e-6;
        for i in 0..l.len() {
            let mut lp = l;
            let mut lm = l;
            lp[i] += h;
            lm[i] -= h;
            let fp: f64 = softmax(&lp).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
            let fm: f64 = softmax(&lm).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
            let numeric = (fp - fm) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8);
        }
    }
}
