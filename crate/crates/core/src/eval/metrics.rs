use serde::{Deserialize, Serialize};

use super::EvalError;

/// Order statistics of per-object success counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub s_min: f64,
    pub s_max: f64,
    /// Mean of the five smallest values.
    pub s5_minus: f64,
    /// Mean of the five largest values.
    pub s5_plus: f64,
    pub s_mean: f64,
    pub n: usize,
}

impl Summary {
    /// `S_min ≤ S̄5− ≤ S̄ ≤ S̄5+ ≤ S_max`.
    pub fn ordered(&self) -> bool {
        self.s_min <= self.s5_minus && self.s5_minus <= self.s_mean && self.s_mean <= self.s5_plus && self.s5_plus <= self.s_max
    }

    /// With exactly five objects both five-means equal the overall mean.
    pub fn five_means_degenerate(&self) -> bool {
        self.n == 5
    }
}

/// Value-sorted copy, stable on ties.
pub fn sorted(s: &[f64]) -> Vec<f64> {
    let mut v = s.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Eq.-style summary of `s`. All sums run over the ascending sort, so the
/// result does not depend on the order of `s`.
pub fn summarize(s: &[f64]) -> Result<Summary, EvalError> {
    if s.len() < 5 {
        return Err(EvalError::TooFewObjects(s.len()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let v = sorted(s);
    let n = v.len();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(Summary {
        s_min: v[0],
        s_max: v[n - 1],
        s5_minus: mean(&v[..5]),
        s5_plus: mean(&v[n - 5..]),
        s_mean: mean(&v),
        n,
    })
}

/// Indices of the `k` smallest and `k` largest values (value order, ties by index).
pub fn extreme_indices(s: &[f64], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    let k = k.min(idx.len());
    let worst = idx[..k].to_vec();
    let mut best: Vec<usize> = idx[idx.len() - k..].to_vec();
    best.reverse();
    (worst, best)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_to_ten() {
        let s: Vec<f64> = (1..=10).map(f64::from).collect();
        let r = summarize(&s).unwrap();
        assert_eq!((r.s_min, r.s_max, r.s5_minus, r.s5_plus, r.s_mean), (1.0, 10.0, 3.0, 8.0, 5.5));
    }

    #[test]
    fn constant_and_short() {
        let r = summarize(&[7.0; 10]).unwrap();
        assert_eq!((r.s_min, r.s_max, r.s5_minus, r.s5_plus, r.s_mean), (7.0, 7.0, 7.0, 7.0, 7.0));
        assert!(matches!(summarize(&[1.0; 4]), Err(EvalError::TooFewObjects(4))));
        assert!(summarize(&[1.0; 5]).unwrap().five_means_degenerate());
    }

    #[test]
    fn extremes() {
        let (w, b) = extreme_indices(&[3.0, 1.0, 1.0, 9.0], 2);
        assert_eq!(w, vec![1, 2]);
        assert_eq!(b, vec![3, 0]);
    }
}
