//! Low-rank adapters `Δw = B·A` and the algebra of how uplink noise reaches
//! the weight update.
//!
//! Three update configurations are supported:
//!
//! * [`AdapterMode::UpdateBoth`]: vanilla LoRA, both factors are trained.
//! * [`AdapterMode::FixedGaussianA`]: `A` is drawn once from `N(0, 1/d_in)` and
//!   frozen; only `B` is trained.
//! * [`AdapterMode::FixedOrthonormalA`]: `A` has orthogonal rows of norm `s`
//!   (`A Aᵀ = s² I_r`) and is frozen; only `B` is trained.
//!
//! With `A` frozen the noise reaching `Δw` is exactly linear in the noise,
//! `−η n_v uᵀ AᵀA`, whereas training both factors adds a `B Bᵀ` path and
//! second-order cross terms in `η`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{orthonormal_rows, sample_gaussian, Matrix, RngStream, Vector};

/// Which low-rank factors are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterMode {
    UpdateBoth,
    FixedGaussianA,
    FixedOrthonormalA,
}

impl AdapterMode {
    pub const ALL: [AdapterMode; 3] = [
        AdapterMode::UpdateBoth,
        AdapterMode::FixedGaussianA,
        AdapterMode::FixedOrthonormalA,
    ];

    pub fn trains_a(self) -> bool {
        matches!(self, AdapterMode::UpdateBoth)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterMode::UpdateBoth => "UpdateBoth",
            AdapterMode::FixedGaussianA => "FixedGaussianA",
            AdapterMode::FixedOrthonormalA => "FixedOrthonormalA",
        }
    }
}

impl std::fmt::Display for AdapterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Trainable low-rank pair attached to one frozen `d_out × d_in` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `r × d_in`
    a: Matrix,
    /// `d_out × r`
    b: Matrix,
    mode: AdapterMode,
    scale: f64,
}

/// Per-adapter gradient, shaped like `(A, B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub a: Matrix,
    pub b: Matrix,
}

impl AdapterGrad {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self {
            a: Matrix::zeros(adapter.a.rows(), adapter.a.cols()),
            b: Matrix::zeros(adapter.b.rows(), adapter.b.cols()),
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &AdapterGrad) -> Result<()> {
        self.a.axpy(s, &other.a)?;
        self.b.axpy(s, &other.b)
    }

    pub fn max_abs_diff(&self, other: &AdapterGrad) -> f64 {
        self.a
            .max_abs_diff(&other.a)
            .max(self.b.max_abs_diff(&other.b))
    }
}

/// Split of a layer-output gradient into its data-dependent part and the
/// propagated channel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDecomposition {
    pub g_v: Vector,
    pub n_v: Vector,
}

impl NoiseDecomposition {
    pub fn total(&self) -> Result<Vector> {
        self.g_v.add(&self.n_v)
    }
}

impl LoraAdapter {
    /// Fresh adapter with `B = 0`, so the initial update `B·A` vanishes.
    pub fn init(
        mode: AdapterMode,
        rank: usize,
        d_in: usize,
        d_out: usize,
        scale: f64,
        rng: &RngStream,
    ) -> Result<Self> {
        if rank == 0 || 2 * rank > d_in.min(d_out) {
            return shape_err(
                "LoraAdapter::init",
                format!("rank {rank} must satisfy 1 <= r <= min({d_in}, {d_out})/2"),
            );
        }
        let a = match mode {
            AdapterMode::UpdateBoth | AdapterMode::FixedGaussianA => {
                sample_gaussian(rng, rank, d_in, 1.0 / (d_in as f64).sqrt())?
            }
            AdapterMode::FixedOrthonormalA => {
                if !(scale > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "orthonormal scale must be > 0, got {scale}"
                    )));
                }
                orthonormal_rows(rng, rank, d_in, scale)?
            }
        };
        Ok(Self {
            a,
            b: Matrix::zeros(d_out, rank),
            mode,
            scale,
        })
    }

    /// Assembles an adapter from explicit factors.
    pub fn from_parts(a: Matrix, b: Matrix, mode: AdapterMode, scale: f64) -> Result<Self> {
        if a.rows() != b.cols() {
            return shape_err(
                "LoraAdapter::from_parts",
                format!("A is {:?} but B is {:?}", a.shape(), b.shape()),
            );
        }
        Ok(Self { a, b, mode, scale })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// `Δw = B·A`
    pub fn delta_w(&self) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("adapter factors are conformable")
    }

    /// `w_frozen + B·A`
    pub fn effective_weight(&self, w_frozen: &Matrix) -> Result<Matrix> {
        w_frozen.add(&self.delta_w())
    }

    /// One gradient step. Fixed-`A` modes ignore `grad_a`.
    pub fn apply_update(&self, grad: &AdapterGrad, eta: f64) -> Result<LoraAdapter> {
        let mut next = self.clone();
        next.b.axpy(-eta, &grad.b)?;
        if self.mode.trains_a() {
            next.a.axpy(-eta, &grad.a)?;
        }
        if !(next.a.is_finite() && next.b.is_finite()) {
            return Err(Error::NonFinite("LoraAdapter::apply_update"));
        }
        Ok(next)
    }
}

/// Layer output `v = (w_frozen + B·A)·u`.
pub fn lora_forward(w_frozen: &Matrix, adapter: &LoraAdapter, u: &Vector) -> Result<Vector> {
    if w_frozen.shape() != (adapter.d_out(), adapter.d_in()) {
        return shape_err(
            "lora_forward",
            format!(
                "frozen weight {:?} vs adapter {}x{}",
                w_frozen.shape(),
                adapter.d_out(),
                adapter.d_in()
            ),
        );
    }
    let base = w_frozen.matvec(u)?;
    let low = adapter.b.matvec(&adapter.a.matvec(u)?)?;
    base.add(&low)
}

/// `∇_A = Bᵀ g uᵀ`, an `r × d_in` matrix.
pub fn grad_wrt_a(b: &Matrix, g_total: &Vector, u: &Vector) -> Result<Matrix> {
    let bt_g = b.tr_matvec(g_total)?;
    Ok(Matrix::outer(&bt_g, u))
}

/// `∇_B = g uᵀ Aᵀ = g (A u)ᵀ`, a `d_out × r` matrix.
pub fn grad_wrt_b(g_total: &Vector, u: &Vector, a: &Matrix) -> Result<Matrix> {
    let au = a.matvec(u)?;
    Ok(Matrix::outer(g_total, &au))
}

/// Both adapter gradients for one layer given its backpropagated output signal.
pub fn adapter_grads(adapter: &LoraAdapter, g_total: &Vector, u: &Vector) -> Result<AdapterGrad> {
    Ok(AdapterGrad {
        a: grad_wrt_a(&adapter.b, g_total, u)?,
        b: grad_wrt_b(g_total, u, &adapter.a)?,
    })
}

fn check_noise_shapes(a: &Matrix, b: Option<&Matrix>, vs: &[&Vector], u: &Vector) -> Result<()> {
    let d_in = a.cols();
    if u.dim() != d_in {
        return shape_err(
            "noise_in_delta_w",
            format!("u has dim {} but A has {} columns", u.dim(), d_in),
        );
    }
    if let Some(b) = b {
        if b.cols() != a.rows() {
            return shape_err(
                "noise_in_delta_w",
                format!("A {:?} and B {:?}", a.shape(), b.shape()),
            );
        }
        for v in vs {
            if v.dim() != b.rows() {
                return shape_err(
                    "noise_in_delta_w",
                    format!("vector dim {} vs d_out {}", v.dim(), b.rows()),
                );
            }
        }
    }
    Ok(())
}

/// Noise contribution to `Δw` when both factors are trained:
///
/// `−η(B Bᵀ n uᵀ + n uᵀ AᵀA) + η²(T1 + T2 + T3)` with
/// `T1 = (g uᵀAᵀ)(Bᵀn uᵀ)`, `T2 = (n uᵀAᵀ)(Bᵀg uᵀ)`, `T3 = (n uᵀAᵀ)(Bᵀn uᵀ)`.
pub fn noise_in_delta_w_both(
    a: &Matrix,
    b: &Matrix,
    g_v: &Vector,
    n_v: &Vector,
    u: &Vector,
    eta: f64,
) -> Result<Matrix> {
    check_noise_shapes(a, Some(b), &[g_v, n_v], u)?;
    // Each bracketed factor is rank one: (x uᵀ Aᵀ) = x (A u)ᵀ and (Bᵀ y uᵀ) = (Bᵀ y) uᵀ.
    let au = a.matvec(u)?;
    let bt_n = b.tr_matvec(n_v)?;
    let bt_g = b.tr_matvec(g_v)?;

    let bbt_n = b.matvec(&bt_n)?;
    let ata_u = a.tr_matvec(&au)?;
    let mut out = Matrix::outer(&bbt_n, u);
    out.axpy(1.0, &Matrix::outer(n_v, &ata_u))?;
    let mut out = out.scale(-eta);

    // (x (Au)ᵀ)(y uᵀ) = ((Au)·y) x uᵀ
    let t1 = Matrix::outer(g_v, u).scale(au.dot(&bt_n)?);
    let t2 = Matrix::outer(n_v, u).scale(au.dot(&bt_g)?);
    let t3 = Matrix::outer(n_v, u).scale(au.dot(&bt_n)?);
    let eta2 = eta * eta;
    out.axpy(eta2, &t1)?;
    out.axpy(eta2, &t2)?;
    out.axpy(eta2, &t3)?;
    Ok(out)
}

/// Noise contribution to `Δw` with `A` frozen: `−η n uᵀ AᵀA`, exact.
pub fn noise_in_delta_w_fixed_a(a: &Matrix, n_v: &Vector, u: &Vector, eta: f64) -> Result<Matrix> {
    check_noise_shapes(a, None, &[], u)?;
    let ata_u = a.tr_matvec(&a.matvec(u)?)?;
    Ok(Matrix::outer(n_v, &ata_u).scale(-eta))
}

/// Expected energy `E‖n_Δw‖_F²` for frozen `A` and isotropic noise:
/// `η² · tr(Cov(n_v)) · ‖AᵀA u‖²`.
pub fn noise_energy_fixed_a(a: &Matrix, u: &Vector, noise_cov_trace: f64, eta: f64) -> Result<f64> {
    if !(noise_cov_trace >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise covariance trace must be >= 0, got {noise_cov_trace}"
        )));
    }
    check_noise_shapes(a, None, &[], u)?;
    let ata_u = a.tr_matvec(&a.matvec(u)?)?;
    Ok(eta * eta * noise_cov_trace * ata_u.norm_sq())
}
