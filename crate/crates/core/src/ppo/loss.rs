use serde::Serialize;

use super::{PpoConfig, PpoError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Loss terms plus the derivative of `total` with respect to every sample's new
/// log-probability and new value. The entropy derivative is `-entropy_coef`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub terms: LossTerms,
    pub d_log_prob: Vec<f64>,
    pub d_value: Vec<f64>,
}

/// Clipped surrogate, clipped-value squared error and entropy bonus, averaged
/// over the samples:
///
/// `policy = -mean(min(r A, clamp(r, 1-c, 1+c) A))`, `r = exp(new - old)`;
/// `value = mean(max((V - R)², (V_old + clamp(V - V_old, -c, c) - R)²))`;
/// `total = policy + value_coef·value - entropy_coef·entropy`;
/// `approx_kl = mean(old - new)`.
#[allow(clippy::too_many_arguments)]
pub fn ppo_loss(
    old_log_probs: &[f64],
    new_log_probs: &[f64],
    advantages: &[f64],
    old_values: &[f64],
    new_values: &[f64],
    returns: &[f64],
    entropy: f64,
    cfg: &PpoConfig,
) -> Result<LossGrad, PpoError> {
    let n = old_log_probs.len();
    if n == 0 || [new_log_probs.len(), advantages.len(), old_values.len(), new_values.len(), returns.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(PpoError::Shape(format!("loss over {n} samples with mismatched inputs")));
    }
    let inv = 1.0 / n as f64;
    let c = cfg.clip;
    let mut terms = LossTerms::default();
    let mut d_log_prob = vec![0.0; n];
    let mut d_value = vec![0.0; n];
    let mut clipped = 0usize;
    for i in 0..n {
        let log_ratio = new_log_probs[i] - old_log_probs[i];
        let r = log_ratio.exp();
        if !r.is_finite() {
            return Err(PpoError::NonFiniteRatio);
        }
        let a = advantages[i];
        let unclipped = r * a;
        let clamped = r.clamp(1.0 - c, 1.0 + c) * a;
        if unclipped <= clamped {
            terms.policy_loss -= unclipped * inv;
            d_log_prob[i] = -a * r * inv;
        } else {
            terms.policy_loss -= clamped * inv;
            clipped += 1;
        }
        terms.approx_kl -= log_ratio * inv;

        let v = new_values[i];
        let v_old = old_values[i];
        let dv = v - v_old;
        let v_clip = v_old + dv.clamp(-c, c);
        let e1 = (v - returns[i]).powi(2);
        let e2 = (v_clip - returns[i]).powi(2);
        if e1 >= e2 {
            terms.value_loss += e1 * inv;
            d_value[i] = cfg.value_coef * 2.0 * (v - returns[i]) * inv;
        } else {
            terms.value_loss += e2 * inv;
            let pass = if dv.abs() < c { 1.0 } else { 0.0 };
            d_value[i] = cfg.value_coef * 2.0 * (v_clip - returns[i]) * pass * inv;
        }
    }
    terms.entropy = entropy;
    terms.clip_fraction = clipped as f64 * inv;
    terms.total = terms.policy_loss + cfg.value_coef * terms.value_loss - cfg.entropy_coef * entropy;
    Ok(LossGrad { terms, d_log_prob, d_value })
}
