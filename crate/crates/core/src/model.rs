//! Desk-scale split network.
//!
//! Device side: a frozen linear embedding `z_e = W_e x` and a per-device affine
//! softmax head. Server side: `L` frozen square layers, each carrying a LoRA
//! adapter, with an elementwise activation between layers and none after the
//! last, so the encoder output is `z = v^(L)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::lora::{adapter_grads, lora_forward, AdapterGrad, AdapterMode, LoraAdapter};
use crate::numerics::{orthonormal_rows, singular_extremes, Label, Matrix, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shapes and initialization of the split model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_x: usize,
    pub width: usize,
    pub layers: usize,
    pub rank: usize,
    /// Row norm of a frozen orthonormal `A`.
    pub scale: f64,
    pub classes: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_x: 16,
            width: 32,
            layers: 2,
            rank: 4,
            scale: 0.1,
            classes: 4,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_x == 0 || self.width == 0 || self.layers == 0 {
            return bad("model dims d_x, width and layers must be >= 1".into());
        }
        if self.d_x > self.width {
            return bad(format!(
                "d_x ({}) must not exceed width ({})",
                self.d_x, self.width
            ));
        }
        if self.rank == 0 || 2 * self.rank > self.width {
            return bad(format!("rank {} must satisfy 1 <= r <= width/2", self.rank));
        }
        if !(self.scale > 0.0) {
            return bad(format!("scale must be > 0, got {}", self.scale));
        }
        if self.classes < 2 {
            return bad("classes must be >= 2".into());
        }
        Ok(())
    }
}

/// Per-device affine classifier `logits = W z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub weight: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub weight: Matrix,
    pub bias: Vector,
}

impl TaskHead {
    pub fn zeros(classes: usize, width: usize) -> Self {
        Self {
            weight: Matrix::zeros(classes, width),
            bias: Vector::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, z: &Vector) -> Result<Vector> {
        self.weight.matvec(z)?.add(&self.bias)
    }

    pub fn predict(&self, z: &Vector) -> Result<usize> {
        let l = self.logits(z)?;
        Ok(l.as_slice()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0)
    }
}

fn softmax(logits: &Vector) -> Vector {
    let max = logits
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.as_slice().iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::new(exps.into_iter().map(|e| e / sum).collect())
}

/// Softmax cross-entropy loss and its gradient with respect to `z`.
pub fn task_loss(head: &TaskHead, z: &Vector, label: usize) -> Result<(f64, Vector)> {
    let (loss, _, g) = head_loss_and_grads(head, z, label)?;
    Ok((loss, g))
}

/// Loss, parameter gradient and `∂L/∂z` for one sample.
pub fn head_loss_and_grads(
    head: &TaskHead,
    z: &Vector,
    label: usize,
) -> Result<(f64, HeadGrad, Vector)> {
    if label >= head.classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            head.classes()
        )));
    }
    let logits = head.logits(z)?;
    let max = logits
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .as_slice()
            .iter()
            .map(|l| (l - max).exp())
            .sum::<f64>()
            .ln();
    let loss = lse - logits[label];
    let mut delta = softmax(&logits);
    delta.as_mut_slice()[label] -= 1.0;
    let g_z = head.weight.tr_matvec(&delta)?;
    let grad = HeadGrad {
        weight: Matrix::outer(&delta, z),
        bias: delta,
    };
    Ok((loss, grad, g_z))
}

/// Mean loss, mean head gradient and mean `∂L/∂z` over a batch.
pub fn head_batch_grads(
    head: &TaskHead,
    zs: &[Vector],
    labels: &[usize],
) -> Result<(f64, HeadGrad, Vector)> {
    if zs.len() != labels.len() || zs.is_empty() {
        return shape_err(
            "head_batch_grads",
            format!("{} features vs {} labels", zs.len(), labels.len()),
        );
    }
    let m = zs.len() as f64;
    let mut loss = 0.0;
    let mut gw = Matrix::zeros(head.weight.rows(), head.weight.cols());
    let mut gb = Vector::zeros(head.classes());
    let mut gz = Vector::zeros(head.weight.cols());
    for (z, &y) in zs.iter().zip(labels) {
        let (l, g, dz) = head_loss_and_grads(head, z, y)?;
        loss += l;
        gw.axpy(1.0 / m, &g.weight)?;
        gb.axpy(1.0 / m, &g.bias)?;
        gz.axpy(1.0 / m, &dz)?;
    }
    Ok((
        loss / m,
        HeadGrad {
            weight: gw,
            bias: gb,
        },
        gz,
    ))
}

/// One plain gradient step on a single sample.
pub fn task_head_step(
    head: &TaskHead,
    z: &Vector,
    label: usize,
    eta_local: f64,
) -> Result<TaskHead> {
    let (_, grad, _) = head_loss_and_grads(head, z, label)?;
    let mut next = head.clone();
    next.weight.axpy(-eta_local, &grad.weight)?;
    next.bias.axpy(-eta_local, &grad.bias)?;
    Ok(next)
}

/// Local optimizer for task heads.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum HeadOptimizer {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state carried by a device between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOptState {
    kind: HeadOptimizer,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl HeadOptState {
    pub fn new(kind: HeadOptimizer, head: &TaskHead) -> Self {
        let n = head.weight.as_slice().len() + head.bias.dim();
        Self {
            kind,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Applies `grad` to `head` in place.
    pub fn step(&mut self, head: &mut TaskHead, grad: &HeadGrad, lr: f64) -> Result<()> {
        match self.kind {
            HeadOptimizer::Sgd => {
                head.weight.axpy(-lr, &grad.weight)?;
                head.bias.axpy(-lr, &grad.bias)?;
            }
            HeadOptimizer::Adam => {
                self.step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
                let params = head
                    .weight
                    .as_mut_slice()
                    .iter_mut()
                    .chain(head.bias.as_mut_slice().iter_mut());
                let grads = grad.weight.as_slice().iter().chain(grad.bias.as_slice());
                for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Everything the server keeps from one encoder forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub z_e: Vector,
    /// `u^(i)`, the input of layer `i`.
    pub inputs: Vec<Vector>,
    /// `v^(i)`, the pre-activation output of layer `i`.
    pub outputs: Vec<Vector>,
    pub z: Vector,
}

/// Frozen embedding and encoder plus trainable adapters and task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub embedding: Matrix,
    pub frozen: Vec<Matrix>,
    pub adapters: Vec<LoraAdapter>,
    pub activation: Activation,
    pub heads: Vec<TaskHead>,
}

impl SplitModel {
    /// Random frozen weights, fresh adapters (`B = 0`) and zero heads.
    pub fn init(
        cfg: &ModelConfig,
        mode: AdapterMode,
        n_heads: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        // Isometric embedding: orthonormal columns.
        let embedding =
            orthonormal_rows(&rng.child("embedding"), cfg.d_x, cfg.width, 1.0)?.transpose();
        let frozen = (0..cfg.layers)
            .map(|i| {
                orthonormal_rows(
                    &rng.child("encoder").child(Label::Layer(i)),
                    cfg.width,
                    cfg.width,
                    1.0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let adapters = (0..cfg.layers)
            .map(|i| {
                LoraAdapter::init(
                    mode,
                    cfg.rank,
                    cfg.width,
                    cfg.width,
                    cfg.scale,
                    &rng.child("adapter").child(Label::Layer(i)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embedding,
            frozen,
            adapters,
            activation: cfg.activation,
            heads: vec![TaskHead::zeros(cfg.classes, cfg.width); n_heads],
        })
    }

    pub fn layers(&self) -> usize {
        self.frozen.len()
    }

    pub fn width(&self) -> usize {
        self.embedding.rows()
    }

    /// Device-side embedding `z_e = W_e x`.
    pub fn embed(&self, x: &Vector) -> Result<Vector> {
        self.embedding.matvec(x)
    }

    /// Server-side encoder pass through the adapted layers.
    pub fn encoder_forward(&self, z_e: &Vector) -> Result<(Vector, ForwardTrace)> {
        let mut inputs = Vec::with_capacity(self.layers());
        let mut outputs = Vec::with_capacity(self.layers());
        let mut u = z_e.clone();
        for (i, (w, ad)) in self.frozen.iter().zip(&self.adapters).enumerate() {
            let v = lora_forward(w, ad, &u)?;
            inputs.push(u);
            u = if i + 1 < self.layers() {
                v.map(|x| self.activation.apply(x))
            } else {
                v.clone()
            };
            outputs.push(v);
        }
        let trace = ForwardTrace {
            z_e: z_e.clone(),
            inputs,
            outputs,
            z: u.clone(),
        };
        Ok((u, trace))
    }

    fn effective_weights(&self) -> Result<Vec<Matrix>> {
        self.frozen
            .iter()
            .zip(&self.adapters)
            .map(|(w, ad)| ad.effective_weight(w))
            .collect()
    }

    /// Backpropagates an encoder-output gradient to every adapter.
    pub fn backprop_to_adapters(
        &self,
        trace: &ForwardTrace,
        g_hat: &Vector,
    ) -> Result<Vec<AdapterGrad>> {
        if g_hat.dim() != self.width() {
            return shape_err(
                "backprop_to_adapters",
                format!(
                    "gradient dim {} vs encoder width {}",
                    g_hat.dim(),
                    self.width()
                ),
            );
        }
        let weights = self.effective_weights()?;
        let mut grads = Vec::with_capacity(self.layers());
        let mut delta = g_hat.clone();
        for i in (0..self.layers()).rev() {
            grads.push(adapter_grads(&self.adapters[i], &delta, &trace.inputs[i])?);
            if i > 0 {
                let back = weights[i].tr_matvec(&delta)?;
                let act = trace.outputs[i - 1].map(|x| self.activation.derivative(x));
                delta = back.hadamard(&act)?;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    /// Explicit Jacobian `∂z / ∂v^(layer)` at the traced point.
    pub fn output_jacobian(&self, trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
        if layer >= self.layers() {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range for {} layers",
                self.layers()
            )));
        }
        let weights = self.effective_weights()?;
        let mut jac = Matrix::identity(self.width());
        for i in (layer + 1..self.layers()).rev() {
            // ∂v^(i)/∂v^(i-1) = W_i · diag(σ'(v^(i-1)))
            let d = &trace.outputs[i - 1];
            let step = Matrix::from_fn(self.width(), self.width(), |r, c| {
                weights[i].get(r, c) * self.activation.derivative(d[c])
            });
            jac = jac.matmul(&step)?;
        }
        Ok(jac)
    }

    /// Condition number of the map carrying a perturbation at layer
    /// `layer`'s output to the encoder output; infinite if singular.
    pub fn jacobian_condition(&self, trace: &ForwardTrace, layer: usize) -> Result<f64> {
        let jac = self.output_jacobian(trace, layer)?;
        match singular_extremes(&jac) {
            Ok(e) => Ok(e.kappa),
            Err(Error::ZeroMatrix) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    /// Full forward pass with head `k`.
    pub fn predict(&self, head: usize, x: &Vector) -> Result<usize> {
        let (z, _) = self.encoder_forward(&self.embed(x)?)?;
        self.heads[head].predict(&z)
    }
}
