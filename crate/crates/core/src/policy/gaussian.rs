//! Diagonal Gaussian action distribution with a state-independent log-std.

use rand::Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct SampledAction {
    /// Unclamped Gaussian draw; its density is what PPO scores.
    pub raw: Vec<f64>,
    /// `raw` clamped to `[-1, 1]`, the action actually executed.
    pub clamped: Vec<f64>,
    pub log_prob: f64,
}

pub fn log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((&m, &ls), &a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Gradients of [`log_prob`] with respect to `mean` and `log_std`.
pub fn log_prob_grad(mean: &[f64], log_std: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dm = Vec::with_capacity(mean.len());
    let mut dls = Vec::with_capacity(mean.len());
    for ((&m, &ls), &a) in mean.iter().zip(log_std).zip(action) {
        let inv_var = (-2.0 * ls).exp();
        let diff = a - m;
        dm.push(diff * inv_var);
        dls.push(diff * diff * inv_var - 1.0);
    }
    (dm, dls)
}

/// Differential entropy; its gradient with respect to every log-std entry is 1.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

pub fn sample_action<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> SampledAction {
    let raw: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .map(|(&m, &ls)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + ls.exp() * eps
        })
        .collect();
    let lp = log_prob(mean, log_std, &raw);
    let clamped = raw.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    SampledAction { raw, clamped, log_prob: lp }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn density_at_mean_with_unit_std() {
        let mean = vec![0.3; 11];
        let lp = log_prob(&mean, &[0.0; 11], &mean);
        let expected = -(11.0 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn tiny_std_returns_mean() {
        let mean = vec![0.1, -0.2, 0.5];
        let ls = vec![(1e-12f64).ln(); 3];
        let s = sample_action(&mean, &ls, &mut seed::rng(4, &[]));
        for (a, m) in s.raw.iter().zip(&mean) {
            assert!((a - m).abs() < 1e-10);
        }
    }

    #[test]
    fn same_seed_same_sample_and_clamp() {
        let mean = vec![0.9; 11];
        let ls = vec![0.0; 11];
        let a = sample_action(&mean, &ls, &mut seed::rng(9, &[]));
        let b = sample_action(&mean, &ls, &mut seed::rng(9, &[]));
        assert_eq!(a, b);
        assert!(a.clamped.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((a.log_prob - log_prob(&mean, &ls, &a.raw)).abs() < 1e-15);
    }

    #[test]
    fn log_prob_gradient_by_differences() {
        let mean = [0.2, -0.4];
        let ls = [-0.3, 0.5];
        let a = [0.7, -1.1];
        let (dm, dls) = log_prob_grad(&mean, &ls, &a);
        let h = 1e-6;
        for i in 0..2 {
            let mut mp = mean;
            let mut mm = mean;
            mp[i] += h;
            mm[i] -= h;
            let n = (log_prob(&mp, &ls, &a) - log_prob(&mm, &ls, &a)) / (2.0 * h);
            assert!((n - dm[i]).abs() < 1e-8);
            let mut lp = ls;
            let mut lm = ls;
            lp[i] += h;
            lm[i] -= h;
            let n = (log_prob(&mean, &lp, &a) - log_prob(&mean, &lm, &a)) / (2.0 * h);
            assert!((n - dls[i]).abs() < 1e-8);
        }
    }
}
