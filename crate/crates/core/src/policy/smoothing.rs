use serde::{Deserialize, Serialize};

use super::dims::NUM_JOINTS;

/// Exponential moving average over executed actions: `ā_t = α a_t + (1-α) ā_{t-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherState {
    pub prev: [f64; NUM_JOINTS],
    pub alpha: f64,
}

impl SmootherState {
    pub fn new(alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "smoothing alpha {alpha} outside [0, 1]");
        Self { prev: [0.0; NUM_JOINTS], alpha }
    }

    pub fn smooth(&mut self, action: &[f64]) -> [f64; NUM_JOINTS] {
        let mut out = [0.0; NUM_JOINTS];
        for ((o, &a), p) in out.iter_mut().zip(action).zip(&self.prev) {
            *o = self.alpha * a + (1.0 - self.alpha) * p;
        }
        self.prev = out;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_cases() {
        let a = [2.0; NUM_JOINTS];
        let mut s = SmootherState::new(1.0);
        s.prev = [5.0; NUM_JOINTS];
        assert_eq!(s.smooth(&a), a);

        let mut s = SmootherState::new(0.0);
        s.prev = [5.0; NUM_JOINTS];
        assert_eq!(s.smooth(&a), [5.0; NUM_JOINTS]);

        let mut s = SmootherState::new(0.5);
        assert_eq!(s.smooth(&a), [1.0; NUM_JOINTS]);
        assert_eq!(s.prev, [1.0; NUM_JOINTS]);
    }
}
