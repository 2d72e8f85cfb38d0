//! One-hidden-layer perceptron shared by the shallow-net mapper and the
//! continual classifier: rectified hidden layer, softmax cross-entropy loss,
//! Adam updates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Early stop once the best epoch loss has not improved by at least
    /// `min_improvement` for `patience` epochs.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            min_improvement: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// hidden × input
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// output × hidden
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

impl Mlp {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let l1 = (6.0 / input as f64).sqrt();
        let l2 = (6.0 / (hidden + output) as f64).sqrt();
        Self {
            w1: DMatrix::from_fn(hidden, input, |_, _| rng.random_range(-l1..l1)),
            b1: DVector::zeros(hidden),
            w2: DMatrix::from_fn(output, hidden, |_, _| rng.random_range(-l2..l2)),
            b2: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Append `extra` output rows with weights uniform in `±init` and zero
    /// bias. Existing rows are untouched.
    pub fn extend_outputs<R: Rng>(&mut self, extra: usize, init: f64, rng: &mut R) {
        if extra == 0 {
            return;
        }
        let (out, hid) = self.w2.shape();
        let mut w2 = DMatrix::zeros(out + extra, hid);
        w2.rows_mut(0, out).copy_from(&self.w2);
        for r in out..out + extra {
            for c in 0..hid {
                w2[(r, c)] = rng.random_range(-init..=init);
            }
        }
        let mut b2 = DVector::zeros(out + extra);
        b2.rows_mut(0, out).copy_from(&self.b2);
        self.w2 = w2;
        self.b2 = b2;
    }

    /// Round every parameter to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *p = *p as f32 as f64;
        }
    }

    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let x = DVector::from_iterator(x.len(), x.iter().map(|v| *v as f64));
        let mut h = &self.w1 * x + &self.b1;
        h.apply(|v| *v = v.max(0.0));
        let z = &self.w2 * h + &self.b2;
        z.iter().copied().collect()
    }

    /// Logits for the columns of `x` (input × batch).
    pub fn logits_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = &self.w1 * x;
        for mut col in h.column_iter_mut() {
            col += &self.b1;
            col.apply(|v| *v = v.max(0.0));
        }
        let mut z = &self.w2 * h;
        for mut col in z.column_iter_mut() {
            col += &self.b2;
        }
        z
    }

    /// Mean cross-entropy of the columns of `x` against class indices `y`.
    pub fn loss(&self, x: &DMatrix<f64>, y: &[usize]) -> f64 {
        let z = self.logits_batch(x);
        let n = y.len() as f64;
        z.column_iter()
            .zip(y)
            .map(|(col, &t)| {
                let m = col.max();
                let lse = m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - col[t]
            })
            .sum::<f64>()
            / n
    }

    pub fn loss_and_grad(&self, x: &DMatrix<f64>, y: &[usize]) -> (f64, Grads) {
        let n = y.len();
        let mut z1 = &self.w1 * x;
        for mut col in z1.column_iter_mut() {
            col += &self.b1;
        }
        let a1 = z1.map(|v| v.max(0.0));
        let mut z2 = &self.w2 * &a1;
        for mut col in z2.column_iter_mut() {
            col += &self.b2;
        }

        let mut loss = 0.0;
        let mut dz2 = z2;
        for (mut col, &t) in dz2.column_iter_mut().zip(y) {
            let m = col.max();
            col.apply(|v| *v = (*v - m).exp());
            let sum = col.sum();
            loss -= (col[t] / sum).ln();
            col /= sum;
            col[t] -= 1.0;
            col /= n as f64;
        }
        loss /= n as f64;

        let gw2 = &dz2 * a1.transpose();
        let gb2 = row_sums(&dz2);
        let mut dz1 = self.w2.transpose() * &dz2;
        dz1.zip_apply(&z1, |g, z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let gw1 = &dz1 * x.transpose();
        let gb1 = row_sums(&dz1);
        (
            loss,
            Grads {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        )
    }

    pub fn params(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for block in [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ] {
            if index < block.len() {
                block[index] = value;
                return;
            }
            index -= block.len();
        }
        panic!("parameter index out of range");
    }
}

impl Grads {
    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()))
}

/// Inputs as a column matrix (input × batch).
pub fn batch_matrix(rows: &[&[f32]]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(d, rows.len(), |i, j| rows[j][i] as f64)
}

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut offset = 0;
        let pairs: [(&mut [f64], &[f64]); 4] = [
            (mlp.w1.as_mut_slice(), grads.w1.as_slice()),
            (mlp.b1.as_mut_slice(), grads.b1.as_slice()),
            (mlp.w2.as_mut_slice(), grads.w2.as_slice()),
            (mlp.b2.as_mut_slice(), grads.b2.as_slice()),
        ];
        for (params, g) in pairs {
            for (i, (p, gi)) in params.iter_mut().zip(g).enumerate() {
                let k = offset + i;
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                let mh = self.m[k] / c1;
                let vh = self.v[k] / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            offset += params.len();
        }
    }
}

/// Tracks the epoch-loss plateau rule.
#[derive(Debug, Clone)]
pub struct Plateau {
    best: f64,
    since_best: usize,
    patience: usize,
    min_improvement: f64,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            patience: cfg.patience,
            min_improvement: cfg.min_improvement,
        }
    }

    /// Record an epoch loss; true when training should stop.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_improvement {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

/// Central finite-difference gradient of `mlp.loss`, for checks.
pub fn numeric_grad(mlp: &Mlp, x: &DMatrix<f64>, y: &[usize], h: f64) -> Vec<f64> {
    let base = mlp.params();
    let mut probe = mlp.clone();
    base.iter()
        .enumerate()
        .map(|(i, &p)| {
            probe.set_param(i, p + h);
            let up = probe.loss(x, y);
            probe.set_param(i, p - h);
            let down = probe.loss(x, y);
            probe.set_param(i, p);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error between two gradients, with an
/// absolute floor for entries near zero.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
