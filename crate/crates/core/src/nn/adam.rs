use super::NnError;

/// Adam moments and hyperparameters for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected Adam update. A non-finite gradient leaves both the
    /// parameters and the state untouched and is reported as an error.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.len() {
            return Err(NnError::ShapeMismatch { expected: self.len(), got: params.len() });
        }
        if grads.len() != self.len() {
            return Err(NnError::ShapeMismatch { expected: self.len(), got: grads.len() });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient);
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3, 5e-3);
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn single_step_by_hand() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 -> 0 - 0.1 * 1 / (1 + 1e-8)
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 0.1);
        s.step(&mut p, &[1.0]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_calls_identical_results() {
        let mut s1 = AdamState::new(2, 0.01);
        let mut s2 = s1.clone();
        let mut p1 = vec![0.3, -0.4];
        let mut p2 = p1.clone();
        for g in [[0.5, -1.0], [0.1, 2.0]] {
            s1.step(&mut p1, &g).unwrap();
            s2.step(&mut p2, &g).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = vec![1.0, 2.0];
        let mut s = AdamState::new(2, 0.1);
        let before = s.clone();
        assert!(matches!(s.step(&mut p, &[f64::NAN, 0.0]), Err(NnError::NonFiniteGradient)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s, before);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::new(2, 0.1);
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert!(s.step(&mut [0.0; 2], &[0.0; 1]).is_err());
    }
}
