//! Dense linear algebra, spectral utilities and reproducible random streams.

mod matrix;
mod rng;
mod svd;

pub use matrix::{frobenius_energy, Matrix, Vector};
pub use rng::{Label, RngStream};
pub use svd::{singular_extremes, singular_values, SingularExtremes, RANK_DEFICIENT_FLOOR};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

/// I.i.d. `N(0, std²)` matrix drawn from a fresh generator on `rng`.
pub fn sample_gaussian(rng: &RngStream, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "std must be finite and >= 0, got {std}"
        )));
    }
    let mut g = rng.generator();
    let data = (0..rows * cols)
        .map(|_| std * g.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Gaussian vector of length `dim`.
pub fn sample_gaussian_vector(rng: &RngStream, dim: usize, std: f64) -> Result<Vector> {
    Ok(Vector::new(
        sample_gaussian(rng, dim, 1, std)?.as_slice().to_vec(),
    ))
}

/// `r × d` matrix whose rows are mutually orthogonal with norm `scale`,
/// i.e. `A Aᵀ = scale² I_r`.
pub fn orthonormal_rows(rng: &RngStream, r: usize, d: usize, scale: f64) -> Result<Matrix> {
    if r > d {
        return shape_err(
            "orthonormal_rows",
            format!("cannot fit {r} orthonormal rows in dimension {d}"),
        );
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must be > 0, got {scale}"
        )));
    }
    let g = sample_gaussian(rng, r, d, 1.0)?;
    let mut rows: Vec<Vec<f64>> = (0..r).map(|i| g.row(i).to_vec()).collect();
    // Modified Gram-Schmidt, two passes for orthogonality at machine precision.
    for i in 0..r {
        for _ in 0..2 {
            for j in 0..i {
                let proj: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= proj * y;
                }
            }
        }
        let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::InvalidArgument(
                "degenerate Gaussian draw in orthonormal_rows".into(),
            ));
        }
        rows[i].iter_mut().for_each(|x| *x /= norm);
    }
    Matrix::from_vec(
        r,
        d,
        rows.into_iter().flatten().map(|x| x * scale).collect(),
    )
}
