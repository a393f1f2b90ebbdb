//! Unit quaternions for object orientation: composition, exponential map,
//! rotation distance and Haar-uniform sampling.

use std::f64::consts::PI;
use std::ops::{Mul, Neg};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

/// Quaternion `w + xi + yj + zk`, stored scalar-first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalize(self) -> Quat {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conj(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Representative with non-negative scalar part.
    pub fn canonical(self) -> Quat {
        if self.w < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Quat {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Exponential map from a rotation vector (axis × angle) to a unit quaternion.
    pub fn exp_map(v: [f64; 3]) -> Quat {
        let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if theta < 1e-8 {
            // second-order series of sin(θ/2)/θ and cos(θ/2)
            let k = 0.5 - theta * theta / 48.0;
            Quat::new(1.0 - theta * theta / 8.0, k * v[0], k * v[1], k * v[2]).normalize()
        } else {
            let (s, c) = (0.5 * theta).sin_cos();
            let k = s / theta;
            Quat::new(c, k * v[0], k * v[1], k * v[2])
        }
    }

    /// Rotation vector with angle in `[0, π]` (inverse of [`Quat::exp_map`] on the
    /// canonical hemisphere).
    pub fn log_map(self) -> [f64; 3] {
        let q = self.canonical();
        let s = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if s < 1e-12 {
            return [2.0 * q.x, 2.0 * q.y, 2.0 * q.z];
        }
        let angle = 2.0 * s.atan2(q.w);
        let k = angle / s;
        [k * q.x, k * q.y, k * q.z]
    }

    /// Rotates a vector by this unit quaternion.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let p = Quat::new(0.0, v[0], v[1], v[2]);
        let r = self * p * self.conj();
        [r.x, r.y, r.z]
    }
}

impl Mul for Quat {
    type Output = Quat;

    /// Hamilton product.
    fn mul(self, b: Quat) -> Quat {
        let a = self;
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

impl Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Haar-uniform random rotation (Shoemake's subgroup algorithm).
pub fn sample_uniform_so3<R: Rng + ?Sized>(rng: &mut R) -> Quat {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    Quat::new(b * c3, a * s2, a * c2, b * s3).normalize()
}

const UNIT_TOLERANCE: f64 = 1e-6;

/// Rotation angle between two orientations, `2·acos(|⟨a, b⟩|)` in `[0, π]`.
/// Invariant to the sign of either quaternion.
pub fn quat_angle(a: Quat, b: Quat) -> Result<f64, EnvError> {
    for q in [a, b] {
        if !((q.norm() - 1.0).abs() <= UNIT_TOLERANCE) {
            return Err(EnvError::NonUnitQuaternion(q.norm()));
        }
    }
    Ok(angle_unchecked(a, b))
}

/// Equals `2·acos(|⟨a, b⟩|)`, evaluated through the relative rotation so that
/// nearly equal orientations do not lose precision in `acos` near 1.
#[inline]
pub(crate) fn angle_unchecked(a: Quat, b: Quat) -> f64 {
    let r = a.conj() * b;
    let s = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
    2.0 * s.atan2(r.w.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn angle_basics() {
        let r = Quat::from_axis_angle([0.3, -1.0, 0.2], 1.1);
        assert!(quat_angle(r, r).unwrap() < 1e-12);
        assert!(quat_angle(r, -r).unwrap() < 1e-12);
        let half_turn = Quat::from_axis_angle([1.0, 0.0, 0.0], PI);
        assert!((quat_angle(Quat::IDENTITY, half_turn).unwrap() - PI).abs() < 1e-12);
        assert!(quat_angle(Quat::new(2.0, 0.0, 0.0, 0.0), r).is_err());
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = seed::rng(1, &[]);
        for _ in 0..200 {
            let v = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let back = Quat::exp_map(v).log_map();
            for k in 0..3 {
                assert!((back[k] - v[k]).abs() < 1e-12);
            }
        }
        let tiny = Quat::exp_map([1e-10, 0.0, 0.0]);
        assert!((tiny.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn composition_adds_angles_about_one_axis() {
        let a = Quat::exp_map([0.4, 0.0, 0.0]);
        let b = Quat::exp_map([0.5, 0.0, 0.0]);
        let c = a * b;
        assert!((quat_angle(Quat::IDENTITY, c).unwrap() - 0.9).abs() < 1e-12);
        let v = Quat::from_axis_angle([0.0, 0.0, 1.0], PI / 2.0).rotate([1.0, 0.0, 0.0]);
        assert!((v[1] - 1.0).abs() < 1e-12 && v[0].abs() < 1e-12);
    }

    #[test]
    fn samples_are_unit() {
        let mut rng = seed::rng(2, &[]);
        for _ in 0..10_000 {
            let q = sample_uniform_so3(&mut rng);
            assert!((q.norm() - 1.0).abs() < 1e-12);
        }
    }
}
