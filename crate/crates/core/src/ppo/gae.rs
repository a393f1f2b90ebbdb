use super::PpoError;

/// Generalized advantage estimation over a `T × E` rollout stored time-major
/// (`index = t·E + e`). `bootstrap` holds `V(s_T)` per env.
///
/// `δ_t = r_t + γ V_{t+1} (1 - d_t) - V_t`, `A_t = δ_t + γλ (1 - d_t) A_{t+1}`,
/// returns `= A + V`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let e = bootstrap.len();
    let n = rewards.len();
    if e == 0 || n % e != 0 || values.len() != n || dones.len() != n {
        return Err(PpoError::Shape(format!(
            "rewards {n}, values {}, dones {}, envs {e}",
            values.len(),
            dones.len()
        )));
    }
    let t_len = n / e;
    let mut adv = vec![0.0; n];
    for env in 0..e {
        let mut next_adv = 0.0;
        let mut next_value = bootstrap[env];
        for t in (0..t_len).rev() {
            let i = t * e + env;
            let not_done = if dones[i] { 0.0 } else { 1.0 };
            let delta = rewards[i] + gamma * next_value * not_done - values[i];
            next_adv = delta + gamma * lambda * not_done * next_adv;
            adv[i] = next_adv;
            next_value = values[i];
        }
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to mean 0, std 1 (population std, with a small floor).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv {
        *a = (*a - mean) / std;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    /// Direct definition: `A_t = Σ_k (γλ)^k δ_{t+k}`, truncated at the first done.
    fn oracle(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
        let t_len = r.len();
        let next_v = |t: usize| if t + 1 < t_len { v[t + 1] } else { boot };
        let delta: Vec<f64> = (0..t_len)
            .map(|t| r[t] + g * next_v(t) * if d[t] { 0.0 } else { 1.0 } - v[t])
            .collect();
        (0..t_len)
            .map(|t| {
                let mut acc = 0.0;
                let mut w = 1.0;
                for k in t..t_len {
                    acc += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn zeros_give_zero_advantage() {
        let (a, r) = compute_gae(&[0.0; 8], &[0.0; 8], &[false; 8], &[0.0], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![0.0; 8]);
        assert_eq!(r, vec![0.0; 8]);
    }

    #[test]
    fn gamma_zero_is_reward_minus_value() {
        let r = [1.0, 2.0, -1.0];
        let v = [0.5, 0.1, 0.3];
        let (a, _) = compute_gae(&r, &v, &[false; 3], &[9.0], 0.0, 0.95).unwrap();
        for t in 0..3 {
            assert_eq!(a[t], r[t] - v[t]);
        }
    }

    #[test]
    fn matches_direct_sum_on_random_sequences() {
        let mut rng = seed::rng(3, &[]);
        for _ in 0..50 {
            let r: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let d: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.2)).collect();
            let boot = rng.gen_range(-1.0..1.0);
            for (g, l) in [(0.99, 0.95), (0.9, 1.0), (0.9, 0.0)] {
                let (a, _) = compute_gae(&r, &v, &d, &[boot], g, l).unwrap();
                for (x, y) in a.iter().zip(oracle(&r, &v, &d, boot, g, l)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(compute_gae(&[0.0; 8], &[0.0; 7], &[false; 8], &[0.0], 0.99, 0.95).is_err());
        assert!(compute_gae(&[0.0; 9], &[0.0; 9], &[false; 9], &[0.0, 0.0], 0.99, 0.95).is_err());
    }

    #[test]
    fn normalization() {
        let mut a = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages(&mut a);
        let mean: f64 = a.iter().sum::<f64>() / 4.0;
        let var: f64 = a.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15 && (var - 1.0).abs() < 1e-12);
    }
}
