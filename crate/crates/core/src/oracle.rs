//! Brute-force reference implementations used to cross-check the library.
//!
//! Everything here works on nested `Vec`s with literal triple loops and never
//! calls the arithmetic in [`crate::numerics`], [`crate::lora`] or
//! [`crate::model`]; only plain data is read out of those types.

#![allow(clippy::needless_range_loop)]

use crate::numerics::{Matrix, RngStream, Vector};

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect())
        .collect()
}

pub fn from_dense(d: &Dense) -> Matrix {
    let rows = d.len();
    let cols = d.first().map_or(0, Vec::len);
    Matrix::from_fn(rows, cols, |i, j| d[i][j])
}

pub fn col(v: &Vector) -> Dense {
    v.as_slice().iter().map(|&x| vec![x]).collect()
}

pub fn row(v: &Vector) -> Dense {
    vec![v.as_slice().to_vec()]
}

pub fn naive_matmul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let k = b.len();
    let m = b.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k, "naive_matmul shape");
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn naive_transpose(a: &Dense) -> Dense {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| (0..rows).map(|i| a[i][j]).collect())
        .collect()
}

pub fn naive_add(a: &Dense, b: &Dense, s: f64) -> Dense {
    a.iter()
        .zip(b)
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + s * y).collect())
        .collect()
}

pub fn naive_trace(a: &Dense) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// `B_new A_new − B A` for both factors trained on `g_v + n_v` (noisy) and on
/// `g_v` alone (clean), expanded by explicit products.
pub fn brute_delta_w(
    a: &Matrix,
    b: &Matrix,
    g_v: &Vector,
    n_v: &Vector,
    u: &Vector,
    eta: f64,
) -> (Matrix, Matrix) {
    let a = to_dense(a);
    let b = to_dense(b);
    let ut = row(u);
    let step = |g: &Dense| -> Dense {
        // ∇_A = Bᵀ g uᵀ, ∇_B = g uᵀ Aᵀ
        let grad_a = naive_matmul(&naive_matmul(&naive_transpose(&b), g), &ut);
        let grad_b = naive_matmul(&naive_matmul(g, &ut), &naive_transpose(&a));
        let a_new = naive_add(&a, &grad_a, -eta);
        let b_new = naive_add(&b, &grad_b, -eta);
        naive_add(&naive_matmul(&b_new, &a_new), &naive_matmul(&b, &a), -1.0)
    };
    let noisy_g: Dense = g_v
        .as_slice()
        .iter()
        .zip(n_v.as_slice())
        .map(|(x, y)| vec![x + y])
        .collect();
    let noisy = step(&noisy_g);
    let clean = step(&col(g_v));
    (from_dense(&noisy), from_dense(&clean))
}

/// `(B − η∇_B)A − BA` with `A` frozen, evaluated for `g + n` minus for `g`.
pub fn brute_delta_w_fixed_a(
    a: &Matrix,
    b: &Matrix,
    g_v: &Vector,
    n_v: &Vector,
    u: &Vector,
    eta: f64,
) -> Matrix {
    let a = to_dense(a);
    let b = to_dense(b);
    let ut = row(u);
    let update = |g: &Dense| -> Dense {
        let grad_b = naive_matmul(&naive_matmul(g, &ut), &naive_transpose(&a));
        let b_new = naive_add(&b, &grad_b, -eta);
        naive_add(&naive_matmul(&b_new, &a), &naive_matmul(&b, &a), -1.0)
    };
    let noisy_g: Dense = g_v
        .as_slice()
        .iter()
        .zip(n_v.as_slice())
        .map(|(x, y)| vec![x + y])
        .collect();
    from_dense(&naive_add(&update(&noisy_g), &update(&col(g_v)), -1.0))
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite_diff step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let fp = f(&x);
            x[i] = orig - step;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * step)
        })
        .collect()
}

/// Monte-Carlo mean and standard error of `‖−η n uᵀ AᵀA‖_F²` over
/// `n ~ N(0, sigma2 I_{d_out})`.
pub fn mc_noise_energy(
    a: &Matrix,
    u: &Vector,
    d_out: usize,
    sigma2: f64,
    eta: f64,
    n_samples: usize,
    rng: &RngStream,
) -> (f64, f64) {
    use rand::Rng;
    use rand_distr::StandardNormal;

    if sigma2 == 0.0 {
        return (0.0, 0.0);
    }
    let a = to_dense(a);
    // m = AᵀA u, so the noise matrix is −η n mᵀ and its energy is η²‖n‖²‖m‖².
    // The product is still formed entry by entry to stay literal.
    let ata = naive_matmul(&naive_transpose(&a), &a);
    let m: Vec<f64> = naive_matmul(&ata, &col(u))
        .into_iter()
        .map(|r| r[0])
        .collect();
    let sd = sigma2.sqrt();
    let mut g = rng.generator();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let n: Vec<f64> = (0..d_out)
            .map(|_| sd * g.sample::<f64, _>(StandardNormal))
            .collect();
        let mut energy = 0.0;
        for ni in &n {
            for mj in &m {
                let e = -eta * ni * mj;
                energy += e * e;
            }
        }
        sum += energy;
        sum_sq += energy * energy;
    }
    let ns = n_samples as f64;
    let mean = sum / ns;
    let var = (sum_sq / ns - mean * mean).max(0.0) * ns / (ns - 1.0);
    (mean, (var / ns).sqrt())
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted descending. Used to cross-check singular values via `mᵀm`.
pub fn symmetric_eigenvalues(sym: &Dense) -> Vec<f64> {
    let n = sym.len();
    let mut a = sym.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Parameters of a monolithic (non-split) copy of the network.
#[derive(Debug, Clone)]
pub struct MonolithicNet {
    pub embedding: Dense,
    pub frozen: Vec<Dense>,
    pub a: Vec<Dense>,
    pub b: Vec<Dense>,
    pub head_w: Dense,
    pub head_b: Vec<f64>,
    pub tanh: bool,
    pub train_a: bool,
}

impl MonolithicNet {
    fn act(&self, x: f64) -> f64 {
        if self.tanh {
            x.tanh()
        } else {
            x
        }
    }

    fn act_prime(&self, x: f64) -> f64 {
        if self.tanh {
            1.0 - x.tanh().powi(2)
        } else {
            1.0
        }
    }

    fn layer_weight(&self, i: usize) -> Dense {
        naive_add(&self.frozen[i], &naive_matmul(&self.b[i], &self.a[i]), 1.0)
    }

    /// Returns `(layer inputs, pre-activations, encoder output)`.
    fn forward(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let mut u: Vec<f64> = naive_matmul(&self.embedding, &x.iter().map(|&v| vec![v]).collect())
            .into_iter()
            .map(|r| r[0])
            .collect();
        let layers = self.frozen.len();
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for i in 0..layers {
            let w = self.layer_weight(i);
            let v: Vec<f64> = naive_matmul(&w, &u.iter().map(|&s| vec![s]).collect())
                .into_iter()
                .map(|r| r[0])
                .collect();
            ins.push(u);
            u = if i + 1 < layers {
                v.iter().map(|&s| self.act(s)).collect()
            } else {
                v.clone()
            };
            outs.push(v);
        }
        (ins, outs, u)
    }

    pub fn loss(&self, x: &[f64], label: usize) -> f64 {
        let (_, _, z) = self.forward(x);
        let logits: Vec<f64> = (0..self.head_w.len())
            .map(|c| self.head_b[c] + (0..z.len()).map(|j| self.head_w[c][j] * z[j]).sum::<f64>())
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    }

    /// One centralized step on a batch: head gradient descent with rate
    /// `eta_local`; the mean encoder-output gradient is clipped to `clip_c`
    /// and pushed through every sample's Jacobian (batch mean) into the
    /// adapters, which step with rate `eta`.
    pub fn step(
        &mut self,
        xs: &[Vec<f64>],
        labels: &[usize],
        eta: f64,
        eta_local: f64,
        clip_c: f64,
    ) {
        let m = xs.len() as f64;
        let classes = self.head_w.len();
        let width = self.frozen[0].len();
        let layers = self.frozen.len();
        let mut traces = Vec::new();
        let mut gz = vec![0.0; width];
        let mut gw = vec![vec![0.0; width]; classes];
        let mut gb = vec![0.0; classes];
        for (x, &y) in xs.iter().zip(labels) {
            let (ins, outs, z) = self.forward(x);
            let logits: Vec<f64> = (0..classes)
                .map(|c| self.head_b[c] + (0..width).map(|j| self.head_w[c][j] * z[j]).sum::<f64>())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let mut delta: Vec<f64> = logits.iter().map(|l| (l - max).exp() / denom).collect();
            delta[y] -= 1.0;
            for j in 0..width {
                let mut s = 0.0;
                for c in 0..classes {
                    s += self.head_w[c][j] * delta[c];
                }
                gz[j] += s / m;
            }
            for c in 0..classes {
                gb[c] += delta[c] / m;
                for j in 0..width {
                    gw[c][j] += delta[c] * z[j] / m;
                }
            }
            traces.push((ins, outs));
        }
        let norm = gz.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > clip_c {
            gz.iter_mut().for_each(|v| *v *= clip_c / norm);
        }

        let weights: Vec<Dense> = (0..layers).map(|i| self.layer_weight(i)).collect();
        let mut grad_a: Vec<Dense> = self
            .a
            .iter()
            .map(|a| vec![vec![0.0; a[0].len()]; a.len()])
            .collect();
        let mut grad_b: Vec<Dense> = self
            .b
            .iter()
            .map(|b| vec![vec![0.0; b[0].len()]; b.len()])
            .collect();
        for (ins, outs) in &traces {
            let mut delta = gz.clone();
            for i in (0..layers).rev() {
                let rank = self.a[i].len();
                // Bᵀδ and A u
                let bt_delta: Vec<f64> = (0..rank)
                    .map(|r| (0..width).map(|k| self.b[i][k][r] * delta[k]).sum())
                    .collect();
                let au: Vec<f64> = (0..rank)
                    .map(|r| (0..ins[i].len()).map(|k| self.a[i][r][k] * ins[i][k]).sum())
                    .collect();
                for r in 0..rank {
                    for k in 0..ins[i].len() {
                        grad_a[i][r][k] += bt_delta[r] * ins[i][k] / m;
                    }
                }
                for k in 0..width {
                    for r in 0..rank {
                        grad_b[i][k][r] += delta[k] * au[r] / m;
                    }
                }
                if i > 0 {
                    delta = (0..width)
                        .map(|c| {
                            let back: f64 = (0..width).map(|k| weights[i][k][c] * delta[k]).sum();
                            back * self.act_prime(outs[i - 1][c])
                        })
                        .collect();
                }
            }
        }
        for c in 0..classes {
            self.head_b[c] -= eta_local * gb[c];
            for j in 0..width {
                self.head_w[c][j] -= eta_local * gw[c][j];
            }
        }
        for i in 0..layers {
            self.b[i] = naive_add(&self.b[i], &grad_b[i], -eta);
            if self.train_a {
                self.a[i] = naive_add(&self.a[i], &grad_a[i], -eta);
            }
        }
    }
}
