//! One-sided (Hestenes) Jacobi SVD for small dense matrices.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Pairwise orthogonality target `|⟨a_p, a_q⟩| ≤ TOL·‖a_p‖‖a_q‖`.
const TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 80;
/// Below this the smallest singular value is treated as exactly zero.
pub const RANK_DEFICIENT_FLOOR: f64 = 1e-300;

/// Extreme singular values and the condition number `σ_max / σ_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularExtremes {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `f64::INFINITY` when the matrix is rank deficient.
    pub kappa: f64,
}

impl SingularExtremes {
    pub fn is_rank_deficient(&self) -> bool {
        self.kappa.is_infinite()
    }
}

/// All `min(rows, cols)` singular values, sorted in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Orthogonalize the columns of the tall orientation.
    let work = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = work.shape();
    // Column-major copy so rotations touch contiguous memory.
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j)).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&columns[p], &columns[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = columns.split_at_mut(q);
                let cp = &mut left[p];
                let cq = &mut right[0];
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let xp = *x;
                    let yq = *y;
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Largest and smallest singular values of `m` and its condition number.
pub fn singular_extremes(m: &Matrix) -> Result<SingularExtremes> {
    if m.rows() == 0 || m.cols() == 0 || m.max_abs() == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let sv = singular_values(m);
    let sigma_max = sv[0];
    let sigma_min = *sv.last().expect("non-empty");
    let kappa = if sigma_min < RANK_DEFICIENT_FLOOR {
        f64::INFINITY
    } else {
        sigma_max / sigma_min
    };
    Ok(SingularExtremes {
        sigma_max,
        sigma_min,
        kappa,
    })
}
