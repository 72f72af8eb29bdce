//! Round orchestration for split federated fine-tuning.
//!
//! Each round, every device in TDMA order:
//!
//! 1. embeds a batch of its local data and sends `z_e` to the server;
//! 2. receives the encoder output `z` (ideal downlink);
//! 3. steps its task head and forms the mean gradient deviation `g = ∂L/∂z`;
//! 4. clips `g`, picks `α` by power control and sends `α g̃` over the fading
//!    uplink, which the server equalizes;
//! 5. has the server backpropagate the received estimate into every adapter.
//!
//! The server then aggregates adapter gradients weighted by local dataset size
//! and takes one step. Per-device work reads only shared immutable state and
//! device-keyed random streams, so running it on a thread pool gives the same
//! bits as running it serially.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    draw_channel, equalize, power_ok, snr, transmit_uplink, ChannelState, FadingModel,
};
use crate::data::{batch_stream, generate, partition, DataSpec, Dataset, Shard};
use crate::error::{Error, Result};
use crate::lora::{AdapterGrad, AdapterMode};
use crate::model::{
    head_batch_grads, HeadOptState, HeadOptimizer, ModelConfig, SplitModel, TaskHead,
};
use crate::numerics::{RngStream, Vector};
use crate::privacy::{
    account_rounds, clip_gradient, epsilon_from_sigma, power_cap, power_control_alpha, Accountant,
    Binding, PrivacyConfig, PrivacySpend, Transmission,
};

use rand::seq::IndexedRandom;

/// How devices choose the transmit scaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PowerPolicy {
    /// `α = min(privacy cap, power cap)`.
    #[default]
    PrivacyAware,
    /// `α = √P / C` regardless of privacy; used for noiseless baselines.
    FullPower,
}

/// How the server turns the equalized uplink signal into the gradient it
/// backpropagates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Receiver {
    /// `ĝ = α g̃ + n/h` as received.
    Raw,
    /// `ĝ / α`, so a noiseless link delivers `g̃` exactly.
    #[default]
    Descale,
    /// `ĝ · √P / (α C)`: every device is brought to the amplitude of a
    /// full-power transmission. Coincides with `Raw` for power-bound devices.
    FullPowerReference,
}

/// Everything needed to run one training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub model: ModelConfig,
    pub mode: AdapterMode,
    pub devices: usize,
    pub rounds: usize,
    pub eta: f64,
    pub eta_local: f64,
    pub head_optimizer: HeadOptimizer,
    /// Per-round batch drawn from each shard; `0` means the whole shard.
    pub batch_size: usize,
    pub epsilon_target: f64,
    pub delta: f64,
    pub clip_c: f64,
    pub c1: f64,
    pub accountant: Accountant,
    pub fading: FadingModel,
    pub n0: f64,
    pub p_max: f64,
    pub power_policy: PowerPolicy,
    pub receiver: Receiver,
    pub data: DataSpec,
    pub fraction: f64,
    pub parallel: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mode: AdapterMode::FixedOrthonormalA,
            devices: 15,
            rounds: 30,
            eta: 1e-3,
            eta_local: 0.1,
            head_optimizer: HeadOptimizer::Sgd,
            batch_size: 32,
            epsilon_target: 3.0,
            delta: 1e-5,
            clip_c: 0.01,
            c1: 1.0,
            accountant: Accountant::MomentsAccountant,
            fading: FadingModel::default(),
            n0: 1.0,
            p_max: 1.0,
            power_policy: PowerPolicy::PrivacyAware,
            receiver: Receiver::Descale,
            data: DataSpec {
                n: 2000,
                d_x: 16,
                classes: 4,
                margin: 3.0,
            },
            fraction: 0.05,
            parallel: false,
        }
    }
}

impl FederationConfig {
    /// Privacy parameters with `T` = number of rounds and the accountant applied.
    pub fn privacy(&self) -> PrivacyConfig {
        PrivacyConfig {
            epsilon_target: self.epsilon_target,
            delta: self.delta,
            clip_c: self.clip_c,
            rounds: self.rounds.max(1),
            c1: self.c1,
        }
        .with_accountant(self.accountant)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        self.model.validate()?;
        self.privacy().validate()?;
        self.fading.validate()?;
        if self.devices == 0 {
            return bad("devices must be >= 1".into());
        }
        if !(self.eta >= 0.0) || !(self.eta_local >= 0.0) {
            return bad("learning rates must be >= 0".into());
        }
        if !(self.n0 >= 0.0) || !(self.p_max > 0.0) {
            return bad(format!(
                "need n0 >= 0 and p_max > 0, got {} and {}",
                self.n0, self.p_max
            ));
        }
        if self.power_policy == PowerPolicy::PrivacyAware && self.n0 == 0.0 {
            return bad(
                "privacy-aware power control needs n0 > 0 (noiseless channels leak everything)"
                    .into(),
            );
        }
        if self.data.d_x != self.model.d_x || self.data.classes != self.model.classes {
            return bad("data and model must agree on d_x and classes".into());
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad(format!("fraction must lie in (0,1], got {}", self.fraction));
        }
        Ok(())
    }
}

/// A device's private state.
#[derive(Debug, Clone)]
pub struct DeviceState {
    pub id: usize,
    pub shard: Shard,
    pub head: TaskHead,
    pub optimizer: HeadOptState,
    pub transmissions: Vec<Transmission>,
}

/// Per-device entries of a [`RoundRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRoundRecord {
    pub device: usize,
    pub h: f64,
    pub alpha: f64,
    pub snr: f64,
    pub binding: Binding,
    /// `ε` implied by this round's `α·h` under the `T`-round bound.
    pub epsilon: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub devices: Vec<DeviceRoundRecord>,
    /// Dataset-size weighted mean of device batch losses.
    pub train_loss: f64,
    /// Mean test accuracy over device heads after the round.
    pub test_accuracy: f64,
}

/// Device-to-server traffic, as observed on the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum UplinkMessage {
    /// Embedded features `z_e`, one vector per batch sample.
    Features {
        device: usize,
        round: usize,
        payload: Vec<Vector>,
    },
    /// The scaled, clipped gradient deviation `α g̃` before channel noise.
    GradientDeviation {
        device: usize,
        round: usize,
        alpha: f64,
        payload: Vector,
    },
}

/// Size-weighted aggregate `Σ_k (|D_k| / Σ_j |D_j|) ∇_k`.
pub fn aggregate(per_device: &[Vec<AdapterGrad>], sizes: &[usize]) -> Result<Vec<AdapterGrad>> {
    if per_device.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty gradient list".into(),
        ));
    }
    if per_device.len() != sizes.len() || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "{} gradients vs {} positive sizes required",
            per_device.len(),
            sizes.len()
        )));
    }
    let total: usize = sizes.iter().sum();
    let mut out: Vec<AdapterGrad> = per_device[0]
        .iter()
        .map(|g| AdapterGrad {
            a: crate::numerics::Matrix::zeros(g.a.rows(), g.a.cols()),
            b: crate::numerics::Matrix::zeros(g.b.rows(), g.b.cols()),
        })
        .collect();
    for (grads, &size) in per_device.iter().zip(sizes) {
        let w = size as f64 / total as f64;
        for (acc, g) in out.iter_mut().zip(grads) {
            acc.axpy(w, g)?;
        }
    }
    Ok(out)
}

/// What one device contributes to a round.
struct DeviceOutcome {
    grads: Vec<AdapterGrad>,
    record: DeviceRoundRecord,
    transmission: Transmission,
    messages: Vec<UplinkMessage>,
}

/// Mutable training state: the server's model plus every device.
#[derive(Debug, Clone)]
pub struct Federation {
    pub cfg: FederationConfig,
    pub model: SplitModel,
    pub devices: Vec<DeviceState>,
    pub train: Dataset,
    pub test: Dataset,
    /// Root of all per-round streams.
    pub stream: RngStream,
}

impl Federation {
    /// Builds data, shards, model and devices. Data and frozen weights depend
    /// only on `seed`; `stream` keys the per-round randomness.
    pub fn new(cfg: FederationConfig, seed: u64, stream: RngStream) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = generate(seed, &cfg.data)?;
        let shards = partition(&train, cfg.data.classes, cfg.devices, cfg.fraction, seed)?;
        let model = SplitModel::init(
            &cfg.model,
            cfg.mode,
            cfg.devices,
            &RngStream::new(seed).child("model"),
        )?;
        Self::from_parts(cfg, model, train, test, shards, stream)
    }

    /// Assembles a federation from explicit parts.
    pub fn from_parts(
        cfg: FederationConfig,
        mut model: SplitModel,
        train: Dataset,
        test: Dataset,
        shards: Vec<Shard>,
        stream: RngStream,
    ) -> Result<Self> {
        if shards.len() != cfg.devices || model.heads.len() != cfg.devices {
            return Err(Error::InvalidArgument(
                "one shard and one head per device required".into(),
            ));
        }
        let heads = std::mem::take(&mut model.heads);
        let devices = shards
            .into_iter()
            .zip(heads)
            .enumerate()
            .map(|(id, (shard, head))| DeviceState {
                id,
                optimizer: HeadOptState::new(cfg.head_optimizer, &head),
                shard,
                head,
                transmissions: Vec::new(),
            })
            .collect();
        Ok(Self {
            cfg,
            model,
            devices,
            train,
            test,
            stream,
        })
    }

    /// The model with current device heads attached.
    pub fn snapshot(&self) -> SplitModel {
        let mut m = self.model.clone();
        m.heads = self.devices.iter().map(|d| d.head.clone()).collect();
        m
    }

    fn batch_indices(&self, device: &DeviceState, t: usize) -> Vec<usize> {
        let bs = self.cfg.batch_size;
        if bs == 0 || bs >= device.shard.len() {
            return device.shard.clone();
        }
        let mut g = batch_stream(self.stream.seed(), t, device.id).generator();
        let mut idx: Vec<usize> = device.shard.choose_multiple(&mut g, bs).copied().collect();
        idx.sort_unstable();
        idx
    }

    fn device_step(&self, device: &mut DeviceState, t: usize) -> Result<DeviceOutcome> {
        let cfg = &self.cfg;
        let model = &self.model;
        let batch = self.batch_indices(device, t);
        let round_stream = self.stream.round(t).device(device.id);

        // (1) device embedding, (2) server encoder
        let z_e: Vec<Vector> = batch
            .iter()
            .map(|&i| model.embed(&self.train.features[i]))
            .collect::<Result<_>>()?;
        let forwards = z_e
            .iter()
            .map(|z| model.encoder_forward(z))
            .collect::<Result<Vec<_>>>()?;
        let zs: Vec<Vector> = forwards.iter().map(|(z, _)| z.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.train.labels[i]).collect();

        // (3) local head update and gradient deviation, both at the pre-step head
        let (loss, head_grad, g) = head_batch_grads(&device.head, &zs, &labels)?;
        device
            .optimizer
            .step(&mut device.head, &head_grad, cfg.eta_local)?;

        // (4) clip, power control, uplink, equalize
        let g_clipped = clip_gradient(&g, cfg.clip_c);
        let h = draw_channel(&cfg.fading, &round_stream.child("fading"));
        let ch = ChannelState {
            h,
            n0: cfg.n0,
            p_max: cfg.p_max,
        };
        let privacy = cfg.privacy();
        let (alpha, binding) = match cfg.power_policy {
            PowerPolicy::PrivacyAware => power_control_alpha(&privacy, &ch),
            PowerPolicy::FullPower => (power_cap(cfg.clip_c, &ch), Binding::PowerBound),
        };
        if !power_ok(alpha, cfg.clip_c, &ch) {
            return Err(Error::PowerViolation {
                device: device.id,
                power: (alpha * cfg.clip_c).powi(2),
                p_max: ch.p_max,
            });
        }
        let y = transmit_uplink(&g_clipped, alpha, &ch, &round_stream.child("uplink-noise"))?;
        let mut g_hat = equalize(&y, h, cfg.fading.h_floor)?;
        if alpha > 0.0 {
            match cfg.receiver {
                Receiver::Raw => {}
                Receiver::Descale => g_hat = g_hat.scale(1.0 / alpha),
                Receiver::FullPowerReference => {
                    g_hat = g_hat.scale(power_cap(cfg.clip_c, &ch) / alpha)
                }
            }
        }

        // (5) server-side chain rule, averaged over the batch
        let m = forwards.len() as f64;
        let mut grads: Vec<AdapterGrad> =
            model.adapters.iter().map(AdapterGrad::zeros_like).collect();
        for (_, trace) in &forwards {
            for (acc, g) in grads
                .iter_mut()
                .zip(model.backprop_to_adapters(trace, &g_hat)?)
            {
                acc.axpy(1.0 / m, &g)?;
            }
        }

        let sigma_eff = cfg.n0.sqrt() / h;
        let epsilon = epsilon_from_sigma(
            privacy.c1,
            alpha,
            cfg.clip_c,
            sigma_eff,
            privacy.rounds,
            privacy.delta,
        )?;
        let record = DeviceRoundRecord {
            device: device.id,
            h,
            alpha,
            snr: snr(alpha, cfg.clip_c, g_clipped.dim(), cfg.n0),
            binding,
            epsilon,
            loss,
        };
        let messages = vec![
            UplinkMessage::Features {
                device: device.id,
                round: t,
                payload: z_e,
            },
            UplinkMessage::GradientDeviation {
                device: device.id,
                round: t,
                alpha,
                payload: g_clipped.scale(alpha),
            },
        ];
        Ok(DeviceOutcome {
            grads,
            record,
            transmission: Transmission { alpha, h, binding },
            messages,
        })
    }

    /// Runs round `t`. Uplink messages are appended to `wire` when given.
    pub fn run_round(
        &mut self,
        t: usize,
        mut wire: Option<&mut Vec<UplinkMessage>>,
    ) -> Result<RoundRecord> {
        let mut devices = std::mem::take(&mut self.devices);
        let outcomes: Vec<Result<DeviceOutcome>> = if self.cfg.parallel {
            devices
                .par_iter_mut()
                .map(|d| self.device_step(d, t))
                .collect()
        } else {
            devices.iter_mut().map(|d| self.device_step(d, t)).collect()
        };
        self.devices = devices;
        let outcomes = outcomes
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::RoundAborted {
                round: t,
                reason: e.to_string(),
            })?;

        let sizes: Vec<usize> = self.devices.iter().map(|d| d.shard.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut per_device = Vec::with_capacity(outcomes.len());
        let mut records = Vec::with_capacity(outcomes.len());
        let mut train_loss = 0.0;
        for ((outcome, dev), &size) in outcomes.into_iter().zip(&mut self.devices).zip(&sizes) {
            train_loss += outcome.record.loss * size as f64 / total as f64;
            dev.transmissions.push(outcome.transmission);
            records.push(outcome.record);
            per_device.push(outcome.grads);
            if let Some(w) = wire.as_mut() {
                w.extend(outcome.messages);
            }
        }
        let global = aggregate(&per_device, &sizes)?;
        for (adapter, g) in self.model.adapters.iter_mut().zip(&global) {
            *adapter = adapter
                .apply_update(g, self.cfg.eta)
                .map_err(|e| Error::RoundAborted {
                    round: t,
                    reason: e.to_string(),
                })?;
        }
        let test_accuracy = self.test_accuracy()?;
        Ok(RoundRecord {
            round: t,
            devices: records,
            train_loss,
            test_accuracy,
        })
    }

    /// Mean over device heads of test-set accuracy.
    pub fn test_accuracy(&self) -> Result<f64> {
        let zs = self
            .test
            .features
            .iter()
            .map(|x| Ok(self.model.encoder_forward(&self.model.embed(x)?)?.0))
            .collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        for dev in &self.devices {
            let mut correct = 0usize;
            for (z, &y) in zs.iter().zip(&self.test.labels) {
                if dev.head.predict(z)? == y {
                    correct += 1;
                }
            }
            total += correct as f64 / self.test.len() as f64;
        }
        Ok(total / self.devices.len() as f64)
    }

    /// Realized privacy per device over the transmissions made so far.
    pub fn privacy_spend(&self) -> Result<Vec<PrivacySpend>> {
        let cfg = self.cfg.privacy();
        self.devices
            .iter()
            .map(|d| account_rounds(d.id, &d.transmissions, self.cfg.n0, &cfg))
            .collect()
    }
}

/// Result of a full run.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub records: Vec<RoundRecord>,
    pub model: SplitModel,
    pub spends: Vec<PrivacySpend>,
}

/// Runs `cfg.rounds` rounds and accounts privacy.
pub fn run_training(
    cfg: &FederationConfig,
    seed: u64,
    stream: &RngStream,
) -> Result<TrainingOutcome> {
    let mut fed = Federation::new(cfg.clone(), seed, stream.clone())?;
    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        records.push(fed.run_round(t, None)?);
    }
    let spends = if cfg.rounds == 0 || cfg.power_policy == PowerPolicy::FullPower {
        Vec::new()
    } else {
        fed.privacy_spend()?
    };
    Ok(TrainingOutcome {
        records,
        model: fed.snapshot(),
        spends,
    })
}
