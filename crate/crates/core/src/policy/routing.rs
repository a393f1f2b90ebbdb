//! Gate routing (soft, top-k, switch) and weighted aggregation of expert outputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dims::{PC_EMBED_DIM, SHAPE_DIM};
use super::PolicyError;
use crate::nn::{softmax, softmax_backward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "k")]
pub enum RouterMode {
    /// Dense softmax over all experts.
    Soft,
    /// Softmax over the `k` largest logits, zero elsewhere.
    TopK(usize),
    /// One-hot at the argmax logit.
    Switch,
}

impl fmt::Display for RouterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouterMode::Soft => write!(f, "soft"),
            RouterMode::TopK(k) => write!(f, "topk{k}"),
            RouterMode::Switch => write!(f, "switch"),
        }
    }
}

/// Which slice of the 38-dim shape descriptor the gate consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateView {
    /// Point-cloud embedding and category one-hot (38).
    Full,
    /// Point-cloud embedding only (32).
    Pc,
    /// Category one-hot only (6).
    Category,
}

impl GateView {
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            GateView::Full => 0..SHAPE_DIM,
            GateView::Pc => 0..PC_EMBED_DIM,
            GateView::Category => PC_EMBED_DIM..SHAPE_DIM,
        }
    }

    pub fn dim(self) -> usize {
        self.range().len()
    }

    pub fn select(self, e_shape: &[f64]) -> &[f64] {
        &e_shape[self.range()]
    }

    pub const ALL: [GateView; 3] = [GateView::Full, GateView::Pc, GateView::Category];
}

impl fmt::Display for GateView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateView::Full => "full",
            GateView::Pc => "pc",
            GateView::Category => "category",
        })
    }
}

impl FromStr for GateView {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(GateView::Full),
            "pc" => Ok(GateView::Pc),
            "category" => Ok(GateView::Category),
            other => Err(format!("unknown gate view `{other}` (full|pc|category)")),
        }
    }
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate().skip(1) {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest logits in ascending index order; ties prefer lower indices.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Routing weights from gate logits.
pub fn route(logits: &[f64], mode: RouterMode) -> Result<Vec<f64>, PolicyError> {
    let n = logits.len();
    if n == 0 {
        return Err(PolicyError::Routing("no experts".into()));
    }
    match mode {
        RouterMode::Soft => Ok(softmax(logits)?),
        RouterMode::TopK(k) => {
            if k == 0 || k > n {
                return Err(PolicyError::Routing(format!("top-k with k={k} over {n} experts")));
            }
            let kept = top_k_indices(logits, k);
            let sub: Vec<f64> = kept.iter().map(|&i| logits[i]).collect();
            let w = softmax(&sub)?;
            let mut out = vec![0.0; n];
            for (&i, wi) in kept.iter().zip(w) {
                out[i] = wi;
            }
            Ok(out)
        }
        RouterMode::Switch => {
            let mut out = vec![0.0; n];
            out[argmax(logits)] = 1.0;
            Ok(out)
        }
    }
}

/// Gradient of the routing weights with respect to the logits.
///
/// Soft and top-k use the exact Jacobian of the function computed by [`route`]
/// (top-k is piecewise smooth: zero gradient for dropped experts). Switch routing
/// is piecewise constant, so it uses a straight-through estimator: the forward
/// pass is one-hot but the gradient is that of the dense softmax.
pub fn route_backward(logits: &[f64], weights: &[f64], mode: RouterMode, d_weights: &[f64]) -> Vec<f64> {
    match mode {
        RouterMode::Soft => softmax_backward(weights, d_weights),
        RouterMode::TopK(_) => {
            let kept: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
            let w: Vec<f64> = kept.iter().map(|&i| weights[i]).collect();
            let g: Vec<f64> = kept.iter().map(|&i| d_weights[i]).collect();
            let d = softmax_backward(&w, &g);
            let mut out = vec![0.0; weights.len()];
            for (&i, di) in kept.iter().zip(d) {
                out[i] = di;
            }
            out
        }
        RouterMode::Switch => {
            let p = softmax(logits).expect("non-empty logits");
            softmax_backward(&p, d_weights)
        }
    }
}

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Convex combination `Σ p_i y_i`. Zero-weight experts are skipped, so a one-hot
/// weight vector reproduces the selected output bit for bit.
pub fn aggregate(weights: &[f64], outputs: &[&[f64]]) -> Result<Vec<f64>, PolicyError> {
    if weights.len() != outputs.len() || weights.is_empty() {
        return Err(PolicyError::Routing(format!(
            "{} weights for {} expert outputs",
            weights.len(),
            outputs.len()
        )));
    }
    check_simplex(weights)?;
    let dim = outputs[0].len();
    if outputs.iter().any(|o| o.len() != dim) {
        return Err(PolicyError::Dimension { what: "expert output", expected: dim, got: 0 });
    }
    let mut acc: Option<Vec<f64>> = None;
    for (&p, y) in weights.iter().zip(outputs) {
        if p == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => acc = Some(y.iter().map(|v| p * v).collect()),
            Some(a) => {
                for (av, yv) in a.iter_mut().zip(y.iter()) {
                    *av += p * yv;
                }
            }
        }
    }
    Ok(acc.unwrap_or_else(|| vec![0.0; dim]))
}

pub(crate) fn check_simplex(weights: &[f64]) -> Result<(), PolicyError> {
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(PolicyError::NotNormalized(sum));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switch_is_argmax() {
        assert_eq!(route(&[1.0, 3.0, 2.0], RouterMode::Switch).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
    }

    #[test]
    fn top2_over_kept_pair() {
        let w = route(&[0.0, 3f64.ln(), -5.0], RouterMode::TopK(2)).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert!((w[1] - 0.75).abs() < 1e-15);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.0, 1.0, 1.0], 1), vec![1]);
    }

    #[test]
    fn top_n_equals_soft_bitwise() {
        let l = [0.31, -1.7, 2.2, 0.05];
        let a = route(&l, RouterMode::TopK(4)).unwrap();
        let b = route(&l, RouterMode::Soft).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn invalid_k() {
        assert!(route(&[0.0, 1.0], RouterMode::TopK(3)).is_err());
        assert!(route(&[0.0, 1.0], RouterMode::TopK(0)).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let a = [1.0, -2.0, 0.5];
        let b = [-1.0, 2.0, -0.5];
        assert_eq!(aggregate(&[0.5, 0.5], &[&a, &b]).unwrap(), vec![0.0; 3]);
        let c = [0.1, 0.2, 0.3];
        let one_hot = aggregate(&[0.0, 1.0, 0.0], &[&a, &c, &b]).unwrap();
        assert_eq!(one_hot, c.to_vec());
        assert!(matches!(aggregate(&[0.5, 0.6], &[&a, &b]), Err(PolicyError::NotNormalized(_))));
        assert!(aggregate(&[-0.5, 1.5], &[&a, &b]).is_err());
    }

    #[test]
    fn topk_backward_matches_finite_differences() {
        let l = [0.4, -0.3, 1.2, 0.9];
        let g = [0.7, -1.1, 0.3, 2.0];
        let mode = RouterMode::TopK(2);
        let w = route(&l, mode).unwrap();
        let analytic = route_backward(&l, &w, mode, &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut lp = l;
            let mut lm = l;
            lp[i] += h;
            lm[i] -= h;
            let f = |x: &[f64]| -> f64 { route(x, mode).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum() };
            let numeric = (f(&lp) - f(&lm)) / (2.0 * h);
            assert!((numeric - analytic[i]).abs() < 1e-8, "{i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn gate_views() {
        assert_eq!(GateView::Full.dim(), 38);
        assert_eq!(GateView::Pc.dim(), 32);
        assert_eq!(GateView::Category.dim(), 6);
        assert_eq!("pc".parse::<GateView>().unwrap(), GateView::Pc);
    }
}
