//! The trainable transfer head: batch normalisation, a regularised ReLU
//! dense layer, dropout, and a two-way softmax output. Forward and backward
//! passes are written out by hand in f64.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::HeadSpec;

/// Head parameters addressable for inspection and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadParam {
    BnGamma,
    BnBeta,
    DenseKernel,
    DenseBias,
    OutputKernel,
    OutputBias,
}

impl HeadParam {
    pub const TRAINABLE: [HeadParam; 6] = [
        HeadParam::BnGamma,
        HeadParam::BnBeta,
        HeadParam::DenseKernel,
        HeadParam::DenseBias,
        HeadParam::OutputKernel,
        HeadParam::OutputBias,
    ];

    pub fn tensor_name(self) -> &'static str {
        match self {
            HeadParam::BnGamma => "head.bn.gamma",
            HeadParam::BnBeta => "head.bn.beta",
            HeadParam::DenseKernel => "head.dense.kernel",
            HeadParam::DenseBias => "head.dense.bias",
            HeadParam::OutputKernel => "head.output.kernel",
            HeadParam::OutputBias => "head.output.bias",
        }
    }
}

/// Loss split into its data and penalty terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub kernel_l2: f64,
    pub bias_l1: f64,
    pub activity_l1: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.data + self.kernel_l2 + self.bias_l1 + self.activity_l1
    }

    pub fn penalty(&self) -> f64 {
        self.kernel_l2 + self.bias_l1 + self.activity_l1
    }
}

/// Per-unit keep decisions for one training batch, row-major (batch, units).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    scale: f64,
}

impl DropoutMask {
    pub fn sample(rng: &mut impl Rng, batch: usize, units: usize, rate: f64) -> Self {
        Self {
            keep: (0..batch * units).map(|_| rng.random::<f64>() >= rate).collect(),
            scale: 1.0 / (1.0 - rate),
        }
    }

    /// Keeps every unit; training-mode forward without dropout noise.
    pub fn none(batch: usize, units: usize) -> Self {
        Self {
            keep: vec![true; batch * units],
            scale: 1.0,
        }
    }

    fn factor(&self, i: usize) -> f64 {
        if self.keep[i] {
            self.scale
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub dense_kernel: Vec<f64>,
    pub dense_bias: Vec<f64>,
    pub output_kernel: Vec<f64>,
    pub output_bias: Vec<f64>,
}

impl HeadGradients {
    pub fn get(&self, p: HeadParam) -> &[f64] {
        match p {
            HeadParam::BnGamma => &self.gamma,
            HeadParam::BnBeta => &self.beta,
            HeadParam::DenseKernel => &self.dense_kernel,
            HeadParam::DenseBias => &self.dense_bias,
            HeadParam::OutputKernel => &self.output_kernel,
            HeadParam::OutputBias => &self.output_bias,
        }
    }
}

/// Result of one training-mode pass over a batch.
#[derive(Debug, Clone)]
pub struct TrainPass {
    pub loss: LossBreakdown,
    pub grads: HeadGradients,
    pub probabilities: Vec<[f64; 2]>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    spec: HeadSpec,
    inputs: usize,
    pub(crate) gamma: Vec<f64>,
    pub(crate) beta: Vec<f64>,
    pub(crate) moving_mean: Vec<f64>,
    pub(crate) moving_var: Vec<f64>,
    /// Dense kernel, (inputs, units) row-major.
    pub(crate) dense_kernel: Vec<f64>,
    pub(crate) dense_bias: Vec<f64>,
    /// Output kernel, (units, 2) row-major.
    pub(crate) output_kernel: Vec<f64>,
    pub(crate) output_bias: Vec<f64>,
}

fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect()
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// -ln softmax(z)[y], computed from logits.
fn cross_entropy(z: [f64; 2], y: usize) -> f64 {
    let m = z[0].max(z[1]);
    m + ((z[0] - m).exp() + (z[1] - m).exp()).ln() - z[y]
}

impl Head {
    /// Glorot-uniform kernels, zero biases, identity batch norm.
    pub fn new(spec: HeadSpec, inputs: usize, rng: &mut impl Rng) -> Self {
        let units = spec.dense.units;
        let classes = spec.output.classes;
        Self {
            gamma: vec![1.0; inputs],
            beta: vec![0.0; inputs],
            moving_mean: vec![0.0; inputs],
            moving_var: vec![1.0; inputs],
            dense_kernel: glorot_uniform(rng, inputs, units),
            dense_bias: vec![0.0; units],
            output_kernel: glorot_uniform(rng, units, classes),
            output_bias: vec![0.0; classes],
            spec,
            inputs,
        }
    }

    /// All-zero parameters, identity statistics; filled in by loaders.
    pub(crate) fn zeroed(spec: HeadSpec, inputs: usize) -> Self {
        let units = spec.dense.units;
        let classes = spec.output.classes;
        Self {
            gamma: vec![0.0; inputs],
            beta: vec![0.0; inputs],
            moving_mean: vec![0.0; inputs],
            moving_var: vec![1.0; inputs],
            dense_kernel: vec![0.0; inputs * units],
            dense_bias: vec![0.0; units],
            output_kernel: vec![0.0; units * classes],
            output_bias: vec![0.0; classes],
            spec,
            inputs,
        }
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn units(&self) -> usize {
        self.spec.dense.units
    }

    pub fn param(&self, p: HeadParam) -> &[f64] {
        match p {
            HeadParam::BnGamma => &self.gamma,
            HeadParam::BnBeta => &self.beta,
            HeadParam::DenseKernel => &self.dense_kernel,
            HeadParam::DenseBias => &self.dense_bias,
            HeadParam::OutputKernel => &self.output_kernel,
            HeadParam::OutputBias => &self.output_bias,
        }
    }

    pub fn param_mut(&mut self, p: HeadParam) -> &mut Vec<f64> {
        match p {
            HeadParam::BnGamma => &mut self.gamma,
            HeadParam::BnBeta => &mut self.beta,
            HeadParam::DenseKernel => &mut self.dense_kernel,
            HeadParam::DenseBias => &mut self.dense_bias,
            HeadParam::OutputKernel => &mut self.output_kernel,
            HeadParam::OutputBias => &mut self.output_bias,
        }
    }

    pub fn moving_mean(&self) -> &[f64] {
        &self.moving_mean
    }

    pub fn moving_var(&self) -> &[f64] {
        &self.moving_var
    }

    /// Weight-only penalties (kernel L2 and bias L1).
    fn weight_penalties(&self) -> (f64, f64) {
        let d = &self.spec.dense;
        let l2 = d.kernel_l2 * self.dense_kernel.iter().map(|w| w * w).sum::<f64>();
        let l1 = d.bias_l1 * self.dense_bias.iter().map(|b| b.abs()).sum::<f64>();
        (l2, l1)
    }

    /// ReLU dense activations and output logits for one normalised row.
    fn dense_and_logits(&self, normed: &[f64], keep: impl Fn(usize) -> f64) -> (Vec<f64>, [f64; 2]) {
        let units = self.units();
        let mut act = self.dense_bias.clone();
        for (i, &x) in normed.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.dense_kernel[i * units..(i + 1) * units];
            for (a, w) in act.iter_mut().zip(row) {
                *a += x * w;
            }
        }
        for a in &mut act {
            *a = a.max(0.0);
        }
        let mut z = [self.output_bias[0], self.output_bias[1]];
        for (u, &a) in act.iter().enumerate() {
            let d = a * keep(u);
            z[0] += d * self.output_kernel[u * 2];
            z[1] += d * self.output_kernel[u * 2 + 1];
        }
        (act, z)
    }

    fn normalise(&self, x: &[f64], mean: &[f64], var: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let eps = self.spec.batch_norm.epsilon;
        let xhat: Vec<f64> = (0..self.inputs)
            .map(|i| (x[i] - mean[i]) / (var[i] + eps).sqrt())
            .collect();
        let y = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| self.gamma[i] * v + self.beta[i])
            .collect();
        (xhat, y)
    }

    /// Inference-mode logits: moving statistics, no dropout.
    pub fn logits_eval(&self, features: &[f64]) -> [f64; 2] {
        let (_, y) = self.normalise(features, &self.moving_mean, &self.moving_var);
        self.dense_and_logits(&y, |_| 1.0).1
    }

    pub fn predict_proba(&self, features: &[f64]) -> [f64; 2] {
        softmax2(self.logits_eval(features))
    }

    /// Inference-mode loss over a set, penalties included.
    pub fn eval_loss(&self, features: &[Vec<f64>], labels: &[usize]) -> LossBreakdown {
        let n = features.len().max(1) as f64;
        let mut data = 0.0;
        let mut activity = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let (_, normed) = self.normalise(x, &self.moving_mean, &self.moving_var);
            let (act, z) = self.dense_and_logits(&normed, |_| 1.0);
            data += cross_entropy(z, y);
            activity += act.iter().sum::<f64>();
        }
        let (kernel_l2, bias_l1) = self.weight_penalties();
        LossBreakdown {
            data: data / n,
            kernel_l2,
            bias_l1,
            activity_l1: self.spec.dense.activity_l1 * activity / n,
        }
    }

    /// Training-mode loss (batch statistics, given dropout) without
    /// gradients. Used by finite-difference checks.
    pub fn train_loss(&self, features: &[Vec<f64>], labels: &[usize], dropout: &DropoutMask) -> LossBreakdown {
        self.forward_backward(features, labels, dropout).loss
    }

    /// Training-mode forward and backward pass over one batch.
    ///
    /// Loss is mean cross-entropy plus `kernel_l2 * Σw²` on the dense
    /// kernel, `bias_l1 * Σ|b|` on the dense bias and
    /// `activity_l1 * Σ|a| / batch` on the dense activations.
    pub fn forward_backward(&self, features: &[Vec<f64>], labels: &[usize], dropout: &DropoutMask) -> TrainPass {
        let b = features.len();
        assert!(b > 0, "empty batch");
        assert_eq!(labels.len(), b);
        let n = self.inputs;
        let units = self.units();
        let bf = b as f64;
        let spec = &self.spec.dense;

        let mut mean = vec![0.0; n];
        for x in features {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / bf;
            }
        }
        let mut var = vec![0.0; n];
        for x in features {
            for i in 0..n {
                var[i] += (x[i] - mean[i]).powi(2) / bf;
            }
        }

        let mut grads = HeadGradients {
            gamma: vec![0.0; n],
            beta: vec![0.0; n],
            dense_kernel: vec![0.0; n * units],
            dense_bias: vec![0.0; units],
            output_kernel: vec![0.0; units * 2],
            output_bias: vec![0.0; 2],
        };
        let mut data = 0.0;
        let mut activity = 0.0;
        let mut probabilities = Vec::with_capacity(b);

        for (row, (x, &y)) in features.iter().zip(labels).enumerate() {
            let (xhat, normed) = self.normalise(x, &mean, &var);
            let keep = |u: usize| dropout.factor(row * units + u);
            let (act, z) = self.dense_and_logits(&normed, keep);
            data += cross_entropy(z, y);
            activity += act.iter().sum::<f64>();
            let p = softmax2(z);
            probabilities.push(p);

            let mut dz = [p[0] / bf, p[1] / bf];
            dz[y] -= 1.0 / bf;
            grads.output_bias[0] += dz[0];
            grads.output_bias[1] += dz[1];

            let mut dpre = vec![0.0; units];
            for u in 0..units {
                let dropped = act[u] * keep(u);
                grads.output_kernel[u * 2] += dropped * dz[0];
                grads.output_kernel[u * 2 + 1] += dropped * dz[1];
                if act[u] > 0.0 {
                    let dact = keep(u) * (dz[0] * self.output_kernel[u * 2] + dz[1] * self.output_kernel[u * 2 + 1])
                        + spec.activity_l1 / bf;
                    dpre[u] = dact;
                }
            }
            for (g, d) in grads.dense_bias.iter_mut().zip(&dpre) {
                *g += d;
            }
            for i in 0..n {
                let yi = normed[i];
                let row_k = &self.dense_kernel[i * units..(i + 1) * units];
                let g_row = &mut grads.dense_kernel[i * units..(i + 1) * units];
                let mut dy = 0.0;
                for u in 0..units {
                    g_row[u] += yi * dpre[u];
                    dy += row_k[u] * dpre[u];
                }
                grads.gamma[i] += dy * xhat[i];
                grads.beta[i] += dy;
            }
        }

        for (g, w) in grads.dense_kernel.iter_mut().zip(&self.dense_kernel) {
            *g += 2.0 * spec.kernel_l2 * w;
        }
        for (g, bias) in grads.dense_bias.iter_mut().zip(&self.dense_bias) {
            *g += spec.bias_l1 * bias.signum() * f64::from(u8::from(*bias != 0.0));
        }

        let (kernel_l2, bias_l1) = self.weight_penalties();
        TrainPass {
            loss: LossBreakdown {
                data: data / bf,
                kernel_l2,
                bias_l1,
                activity_l1: spec.activity_l1 * activity / bf,
            },
            grads,
            probabilities,
            batch_mean: mean,
            batch_var: var,
        }
    }

    /// Folds batch statistics into the moving averages.
    pub fn update_moving_stats(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.spec.batch_norm.momentum;
        for i in 0..self.inputs {
            self.moving_mean[i] = m * self.moving_mean[i] + (1.0 - m) * mean[i];
            self.moving_var[i] = m * self.moving_var[i] + (1.0 - m) * var[i];
        }
    }

    /// Replaces the moving averages outright.
    pub fn set_moving_stats(&mut self, mean: &[f64], var: &[f64]) {
        self.moving_mean = mean.to_vec();
        self.moving_var = var.to_vec();
    }

    pub fn parameter_count(&self) -> usize {
        // batch norm keeps four vectors; two are non-trainable statistics
        4 * self.inputs + self.dense_kernel.len() + self.dense_bias.len() + self.output_kernel.len() + self.output_bias.len()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(head: &Head, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f64>> = HeadParam::TRAINABLE
            .iter()
            .map(|&p| vec![0.0; head.param(p).len()])
            .collect();
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn apply(&mut self, head: &mut Head, grads: &HeadGradients, learning_rate: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, &p) in HeadParam::TRAINABLE.iter().enumerate() {
            let g = grads.get(p);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in head.param_mut(p).iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}
