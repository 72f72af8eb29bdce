//! Gradient clipping, `(ε, δ)` accounting for channel-noise privacy, and the
//! privacy-aware choice of the transmit scaling factor `α`.
//!
//! With post-equalization noise `σ_eff = √N₀ / h` and sensitivity `αC`, the
//! moments-accountant bound over `T` transmissions reads
//!
//! ```text
//! ε = c₁ · αC · √(T ln(1/δ)) / σ_eff = c₁ · h · √(T ln(1/δ)) · √(SNR · d)
//! ```
//!
//! and the largest `α` meeting both a target `ε₀` and the power cap `P` is
//!
//! ```text
//! α = min{ ε₀ √N₀ / (c₁ C h √(T ln(1/δ))),  √P / C }.
//! ```

use serde::{Deserialize, Serialize};

use crate::channel::ChannelState;
use crate::error::{Error, Result};
use crate::numerics::Vector;

/// Relative slack allowed when re-checking realized `ε` against the target.
pub const EPSILON_SLACK: f64 = 1e-9;

/// Composition constants for the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Accountant {
    /// `c₁` as configured, `δ` used as is.
    #[default]
    MomentsAccountant,
    /// `c₁ = 2` with the failure probability split evenly, `δ → δ/2`.
    StrongComposition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyConfig {
    pub epsilon_target: f64,
    pub delta: f64,
    pub clip_c: f64,
    /// Number of uplink transmissions per device.
    pub rounds: usize,
    pub c1: f64,
}

impl PrivacyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.epsilon_target > 0.0) {
            return bad(format!(
                "epsilon_target must be > 0, got {}",
                self.epsilon_target
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if !(self.clip_c > 0.0) {
            return bad(format!("clip_c must be > 0, got {}", self.clip_c));
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if !(self.c1 > 0.0) {
            return bad(format!("c1 must be > 0, got {}", self.c1));
        }
        Ok(())
    }

    /// Effective `(c₁, δ)` under the chosen accountant.
    pub fn with_accountant(&self, accountant: Accountant) -> PrivacyConfig {
        match accountant {
            Accountant::MomentsAccountant => *self,
            Accountant::StrongComposition => PrivacyConfig {
                c1: 2.0,
                delta: self.delta / 2.0,
                ..*self
            },
        }
    }

    /// `√(T ln(1/δ))`
    pub fn composition_factor(&self) -> f64 {
        (self.rounds as f64 * (1.0 / self.delta).ln()).sqrt()
    }
}

/// Which cap determined `α`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Binding {
    PrivacyBound,
    PowerBound,
}

/// One device's realized privacy loss over a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpend {
    pub device: usize,
    /// Worst case over rounds of the per-round bound.
    pub realized_epsilon: f64,
    /// Binding branch of the round that attains the worst case.
    pub binding: Binding,
    pub per_round_epsilon: Vec<f64>,
    pub per_round_binding: Vec<Binding>,
}

impl PrivacySpend {
    pub fn power_bound_rounds(&self) -> usize {
        self.per_round_binding
            .iter()
            .filter(|b| **b == Binding::PowerBound)
            .count()
    }
}

/// `g · C / max(C, ‖g‖₂)`
pub fn clip_gradient(g: &Vector, clip_c: f64) -> Vector {
    let norm = g.norm();
    if norm <= clip_c {
        g.clone()
    } else {
        g.scale(clip_c / norm)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "delta must lie in (0,1), got {delta}"
        )))
    }
}

/// `ε = c₁ h √(T ln(1/δ)) √(SNR·d)`
pub fn epsilon_from_snr(
    c1: f64,
    h: f64,
    t_rounds: usize,
    delta: f64,
    snr: f64,
    d: usize,
) -> Result<f64> {
    check_delta(delta)?;
    Ok(c1 * h * (t_rounds as f64 * (1.0 / delta).ln()).sqrt() * (snr * d as f64).sqrt())
}

/// `ε = c₁ αC √(T ln(1/δ)) / σ_eff`; infinite when `σ_eff = 0` and `α > 0`.
pub fn epsilon_from_sigma(
    c1: f64,
    alpha: f64,
    clip_c: f64,
    sigma_eff: f64,
    t_rounds: usize,
    delta: f64,
) -> Result<f64> {
    check_delta(delta)?;
    let sensitivity = alpha * clip_c;
    if sensitivity == 0.0 {
        return Ok(0.0);
    }
    if sigma_eff == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(c1 * sensitivity * (t_rounds as f64 * (1.0 / delta).ln()).sqrt() / sigma_eff)
}

/// Cap on `α` imposed by the privacy target alone.
pub fn privacy_cap(cfg: &PrivacyConfig, ch: &ChannelState) -> f64 {
    cfg.epsilon_target * ch.n0.sqrt() / (cfg.c1 * cfg.clip_c * ch.h * cfg.composition_factor())
}

/// Cap on `α` imposed by the power constraint alone.
pub fn power_cap(clip_c: f64, ch: &ChannelState) -> f64 {
    ch.p_max.sqrt() / clip_c
}

/// Largest `α` satisfying both the privacy target and the power cap.
pub fn power_control_alpha(cfg: &PrivacyConfig, ch: &ChannelState) -> (f64, Binding) {
    let privacy = privacy_cap(cfg, ch);
    let power = power_cap(cfg.clip_c, ch);
    if privacy < power {
        (privacy, Binding::PrivacyBound)
    } else {
        (power, Binding::PowerBound)
    }
}

/// What a device actually sent in one round, as seen by the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmission {
    pub alpha: f64,
    pub h: f64,
    pub binding: Binding,
}

/// Realized `ε` over a run, evaluated at the worst-case `α·h` product.
pub fn account_rounds(
    device: usize,
    rounds: &[Transmission],
    n0: f64,
    cfg: &PrivacyConfig,
) -> Result<PrivacySpend> {
    check_delta(cfg.delta)?;
    let sigma_of = |h: f64| n0.sqrt() / h;
    let per_round_epsilon = rounds
        .iter()
        .map(|tx| {
            epsilon_from_sigma(
                cfg.c1,
                tx.alpha,
                cfg.clip_c,
                sigma_of(tx.h),
                cfg.rounds,
                cfg.delta,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let per_round_binding: Vec<Binding> = rounds.iter().map(|tx| tx.binding).collect();
    let (worst, realized_epsilon) = per_round_epsilon.iter().copied().enumerate().fold(
        (None, 0.0_f64),
        |(arg, best), (i, e)| {
            if arg.is_none() || e > best {
                (Some(i), e)
            } else {
                (arg, best)
            }
        },
    );
    let binding = worst
        .map(|i| per_round_binding[i])
        .unwrap_or(Binding::PrivacyBound);
    Ok(PrivacySpend {
        device,
        realized_epsilon,
        binding,
        per_round_epsilon,
        per_round_binding,
    })
}
