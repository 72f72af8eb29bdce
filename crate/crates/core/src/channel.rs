//! Block flat-fading uplink with additive white Gaussian noise.
//!
//! A device scales its clipped gradient deviation by `α`, the channel applies a
//! real non-negative gain `h` and adds `N(0, N₀ I)` noise, and the server
//! divides by `h`. The equalized estimate therefore carries noise with
//! per-entry variance `N₀ / h²`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian_vector, RngStream, Vector};

/// Default clamp on drawn channel gains.
pub const DEFAULT_H_FLOOR: f64 = 1e-3;

/// Relative slack used by [`power_ok`].
const POWER_SLACK: f64 = 1e-12;

/// Per-device, per-round link state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    /// Channel gain, dimensionless.
    pub h: f64,
    /// Noise power `N₀`.
    pub n0: f64,
    /// Transmit power cap `P_k`.
    pub p_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FadingKind {
    Constant {
        h0: f64,
    },
    /// Rayleigh-distributed magnitude normalized to `E[h²] = 1`.
    RayleighUnitPower,
}

/// Serialized as one flat object, e.g. `{"kind": "Constant", "h0": 0.8}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FadingRepr", into = "FadingRepr")]
pub struct FadingModel {
    pub kind: FadingKind,
    pub h_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum FadingTag {
    Constant,
    RayleighUnitPower,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FadingRepr {
    kind: FadingTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    h0: Option<f64>,
    #[serde(default = "default_h_floor")]
    h_floor: f64,
}

impl TryFrom<FadingRepr> for FadingModel {
    type Error = String;

    fn try_from(r: FadingRepr) -> std::result::Result<Self, String> {
        let kind = match (r.kind, r.h0) {
            (FadingTag::Constant, Some(h0)) => FadingKind::Constant { h0 },
            (FadingTag::Constant, None) => return Err("constant fading needs `h0`".into()),
            (FadingTag::RayleighUnitPower, None) => FadingKind::RayleighUnitPower,
            (FadingTag::RayleighUnitPower, Some(_)) => {
                return Err("`h0` only applies to constant fading".into())
            }
        };
        Ok(Self {
            kind,
            h_floor: r.h_floor,
        })
    }
}

impl From<FadingModel> for FadingRepr {
    fn from(m: FadingModel) -> Self {
        let (kind, h0) = match m.kind {
            FadingKind::Constant { h0 } => (FadingTag::Constant, Some(h0)),
            FadingKind::RayleighUnitPower => (FadingTag::RayleighUnitPower, None),
        };
        Self {
            kind,
            h0,
            h_floor: m.h_floor,
        }
    }
}

fn default_h_floor() -> f64 {
    DEFAULT_H_FLOOR
}

impl Default for FadingModel {
    fn default() -> Self {
        Self {
            kind: FadingKind::RayleighUnitPower,
            h_floor: DEFAULT_H_FLOOR,
        }
    }
}

impl FadingModel {
    pub fn constant(h0: f64) -> Self {
        Self {
            kind: FadingKind::Constant { h0 },
            h_floor: DEFAULT_H_FLOOR,
        }
    }

    pub fn rayleigh() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_floor > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "h_floor must be > 0, got {}",
                self.h_floor
            )));
        }
        if let FadingKind::Constant { h0 } = self.kind {
            if !(h0 >= 0.0) || !h0.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "constant gain must be >= 0, got {h0}"
                )));
            }
        }
        Ok(())
    }
}

/// One block-fading coefficient, clamped below at the model's floor.
pub fn draw_channel(model: &FadingModel, rng: &RngStream) -> f64 {
    let raw = match model.kind {
        FadingKind::Constant { h0 } => h0,
        FadingKind::RayleighUnitPower => {
            let mut g = rng.generator();
            let x: f64 = g.sample(StandardNormal);
            let y: f64 = g.sample(StandardNormal);
            ((x * x + y * y) / 2.0).sqrt()
        }
    };
    raw.max(model.h_floor)
}

/// Received signal `y = h·α·g + n`, `n ~ N(0, N₀ I)`.
pub fn transmit_uplink(
    g_clipped: &Vector,
    alpha: f64,
    ch: &ChannelState,
    rng: &RngStream,
) -> Result<Vector> {
    let noise = sample_gaussian_vector(rng, g_clipped.dim(), ch.n0.sqrt())?;
    let mut y = g_clipped.scale(ch.h * alpha);
    y.axpy(1.0, &noise)?;
    Ok(y)
}

/// Receiver estimate `ĝ = y / h`.
pub fn equalize(y: &Vector, h: f64, h_floor: f64) -> Result<Vector> {
    if !(h >= h_floor) {
        return Err(Error::ChannelBelowFloor { h, floor: h_floor });
    }
    Ok(y.scale(1.0 / h))
}

/// Per-device SNR `(αC)² / (d N₀)`; infinite when `N₀ = 0`.
pub fn snr(alpha: f64, clip_c: f64, d: usize, n0: f64) -> f64 {
    let signal = (alpha * clip_c).powi(2);
    if n0 == 0.0 {
        return if signal == 0.0 { 0.0 } else { f64::INFINITY };
    }
    signal / (d as f64 * n0)
}

/// Transmit power constraint `(αC)² ≤ P`.
pub fn power_ok(alpha: f64, clip_c: f64, ch: &ChannelState) -> bool {
    (alpha * clip_c).powi(2) <= ch.p_max * (1.0 + POWER_SLACK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_fading_and_floor() {
        let r = RngStream::new(0);
        assert_eq!(draw_channel(&FadingModel::constant(0.7), &r), 0.7);
        assert_eq!(draw_channel(&FadingModel::constant(1e-6), &r), 1e-3);
    }

    #[test]
    fn rayleigh_second_moment() {
        let model = FadingModel::rayleigh();
        let n = 100_000;
        let root = RngStream::new(3).child("fading");
        let m2: f64 = (0..n)
            .map(|i| draw_channel(&model, &root.child(crate::numerics::Label::Index(i))).powi(2))
            .sum::<f64>()
            / n as f64;
        assert!((m2 - 1.0).abs() <= 0.02, "E[h^2] = {m2}");
    }

    #[test]
    fn noiseless_uplink_is_exact() {
        let g = Vector::new(vec![0.3, -0.4]);
        let ch = ChannelState {
            h: 0.5,
            n0: 0.0,
            p_max: 1.0,
        };
        let y = transmit_uplink(&g, 2.0, &ch, &RngStream::new(0)).unwrap();
        assert_eq!(y, g.scale(1.0));
        assert_eq!(equalize(&y, 0.5, 1e-3).unwrap(), g.scale(2.0));
    }

    #[test]
    fn zero_alpha_is_pure_noise() {
        let g = Vector::new(vec![1.0; 100_000]);
        let ch = ChannelState {
            h: 1.0,
            n0: 0.25,
            p_max: 1.0,
        };
        let y = transmit_uplink(&g, 0.0, &ch, &RngStream::new(12)).unwrap();
        let n = y.dim() as f64;
        let var = y.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        assert!((var - 0.25).abs() / 0.25 <= 0.02, "var {var}");
    }

    #[test]
    fn uplink_is_deterministic_per_path() {
        let g = Vector::new(vec![0.1; 8]);
        let ch = ChannelState {
            h: 0.9,
            n0: 1.0,
            p_max: 1.0,
        };
        let r = RngStream::new(5).round(1).device(2);
        assert_eq!(
            transmit_uplink(&g, 1.0, &ch, &r).unwrap(),
            transmit_uplink(&g, 1.0, &ch, &r).unwrap()
        );
    }

    #[test]
    fn equalize_identity_and_floor() {
        let y = Vector::new(vec![1.0, 2.0]);
        assert_eq!(equalize(&y, 1.0, 1e-3).unwrap(), y);
        assert!(matches!(
            equalize(&y, 1e-4, 1e-3),
            Err(Error::ChannelBelowFloor { .. })
        ));
    }

    #[test]
    fn snr_formula() {
        assert_eq!(snr(1.0, 1.0, 1, 1.0), 1.0);
        assert_eq!(snr(3.0, 2.0, 9, 1.0), 4.0);
        assert_eq!(snr(0.0, 2.0, 9, 1.0), 0.0);
        assert!(snr(1.0, 1.0, 4, 0.0).is_infinite());
    }

    #[test]
    fn power_check_boundary() {
        let ch = ChannelState {
            h: 1.0,
            n0: 1.0,
            p_max: 4.0,
        };
        let c = 0.01;
        let edge = ch.p_max.sqrt() / c;
        assert!(power_ok(edge, c, &ch));
        assert!(!power_ok(1.01 * edge, c, &ch));
        assert!(power_ok(0.0, c, &ch));
    }
}
