use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::run::evaluate_objects;
use super::EvalError;
use crate::env::{EnvParams, ObjectSpec, WorkerPool};
use crate::io::write_atomic;
use crate::policy::{PolicyEnsemble, PolicyMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRow {
    pub object_id: usize,
    pub category: usize,
    /// Mean routing weights over all evaluation steps.
    pub mean: Vec<f64>,
    /// Mean routing weights within each episode.
    pub episodes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub n_experts: usize,
    pub rows: Vec<GateRow>,
}

/// Runs the MoE policy on each object and records its routing weights.
#[allow(clippy::too_many_arguments)]
pub fn export_gate_weights(
    ens: &PolicyEnsemble,
    objects: &[ObjectSpec],
    params: &EnvParams,
    alpha: f64,
    episodes: usize,
    seed_value: u64,
    pool: &WorkerPool,
) -> Result<GateTrace, EvalError> {
    let results = evaluate_objects(ens, PolicyMode::Moe, objects, params, alpha, episodes, seed_value, pool)?;
    let rows = results
        .into_iter()
        .map(|r| GateRow {
            object_id: r.id,
            category: r.category,
            mean: r.gate_mean.unwrap_or_default(),
            episodes: r.gate_episodes.unwrap_or_default(),
        })
        .collect();
    Ok(GateTrace { n_experts: ens.n_experts(), rows })
}

pub fn write_gate_csv(path: &Path, trace: &GateTrace) -> Result<(), EvalError> {
    let mut s = String::from("object_id");
    (1..=trace.n_experts).for_each(|i| s.push_str(&format!(",w_{i}")));
    s.push('\n');
    for r in &trace.rows {
        s.push_str(&r.object_id.to_string());
        r.mean.iter().for_each(|w| s.push_str(&format!(",{w}")));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance captured by each axis (eigenvalues of the covariance).
    pub variances: [f64; 2],
    /// Set when the input had no variance; `coords` are then all zero.
    pub degenerate: bool,
}

/// Centered PCA onto the top two principal axes. Each axis is signed so that
/// its largest-magnitude loading is positive (first index on ties).
pub fn project_2d(vectors: &[Vec<f64>]) -> Result<Projection, EvalError> {
    let n = vectors.len();
    if n < 2 {
        return Err(EvalError::TooFewPoints(n));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(EvalError::Ragged);
    }
    let mean: Vec<f64> = (0..d).map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / n as f64;
    if cov.iter().all(|&c| c == 0.0) {
        log::warn!("projection input has zero variance; returning zeros");
        return Ok(Projection { coords: vec![[0.0; 2]; n], variances: [0.0; 2], degenerate: true });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(2);
    let mut variances = [0.0; 2];
    for k in 0..2 {
        let Some(&col) = order.get(k) else {
            axes.push(vec![0.0; d]);
            continue;
        };
        let mut axis: Vec<f64> = eig.eigenvectors.column(col).iter().copied().collect();
        let lead = (1..d).fold(0, |best, j| if axis[j].abs() > axis[best].abs() { j } else { best });
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        variances[k] = eig.eigenvalues[col].max(0.0);
        axes.push(axis);
    }
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |a: &Vec<f64>| row.iter().zip(a).map(|(r, w)| r * w).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();
    Ok(Projection { coords, variances, degenerate: false })
}

pub fn write_projection_csv(path: &Path, ids: &[usize], p: &Projection) -> Result<(), EvalError> {
    let mut s = String::from("object_id,x,y\n");
    for (id, c) in ids.iter().zip(&p.coords) {
        s.push_str(&format!("{id},{},{}\n", c[0], c[1]));
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_have_no_second_coordinate() {
        let v: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = project_2d(&v).unwrap();
        assert!(p.coords.iter().all(|c| c[1].abs() < 1e-12));
        assert!(p.variances[0] >= p.variances[1]);
    }

    #[test]
    fn three_points_in_the_plane() {
        let v = vec![vec![-1.0, 0.5], vec![1.0, -0.5], vec![0.0, 0.0]];
        let p = project_2d(&v).unwrap();
        // Closed form: cov = [[2/3, -1/3], [-1/3, 1/6]], eigenvalues 5/6 and 0.
        assert!((p.variances[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!(p.variances[1].abs() < 1e-12);
        let s = 5f64.sqrt();
        // Leading axis (2, -1)/√5, signed so the larger loading is positive.
        let expect = [-2.5 / s, 2.5 / s, 0.0];
        for (c, e) in p.coords.iter().zip(expect) {
            assert!((c[0] - e).abs() < 1e-12, "{c:?} vs {e}");
        }
    }

    #[test]
    fn zero_variance_and_short_inputs() {
        let p = project_2d(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!(p.degenerate && p.coords.iter().all(|c| *c == [0.0, 0.0]));
        assert!(project_2d(&[vec![1.0]]).is_err());
        assert!(project_2d(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
