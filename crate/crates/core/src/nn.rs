//! Layers shared by the teacher and the student: the conv backbone,
//! initialisers, the clamped binary cross-entropy and SGD with momentum.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Bound, Float, ParamSet, Tape, Tensor, Var};

/// Probabilities are clamped into `[P_CLAMP, 1 - P_CLAMP]` before a log.
pub const P_CLAMP: f64 = 1e-6;

/// Channel widths of a stack of 3×3 conv blocks, input channels first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backbone {
    pub channels: Vec<usize>,
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone { channels: vec![3, 16, 32, 64] }
    }
}

impl Backbone {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            bail!(Config, "backbone needs at least one conv layer with non-zero widths, got {:?}", self.channels);
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Side of the last conv map for a square input; every block but the last halves it.
    pub fn feature_side(&self, input: usize) -> usize {
        input >> (self.layers() - 1)
    }

    pub fn layer_name(i: usize) -> String {
        format!("conv{}", i + 1)
    }

    pub fn init<T: Float>(&self, params: &mut ParamSet<T>, rng: &mut impl Rng) -> Result<()> {
        self.validate()?;
        for i in 0..self.layers() {
            let (cin, cout) = (self.channels[i], self.channels[i + 1]);
            let name = Self::layer_name(i);
            params.insert(format!("{name}.weight"), he_uniform(&[cout, cin, 3, 3], cin * 9, rng))?;
            params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        }
        Ok(())
    }

    /// conv → ReLU per block with a 2× max-pool after every block but the
    /// last. Returns the activation of each block; the last one is `F_conv`.
    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        bound: &Bound,
        input: Var,
    ) -> Result<Vec<Var>> {
        let mut x = input;
        let mut acts = Vec::with_capacity(self.layers());
        for i in 0..self.layers() {
            let name = Self::layer_name(i);
            let w = params.var(bound, &format!("{name}.weight"));
            let b = params.var(bound, &format!("{name}.bias"));
            let conv = tape.conv2d(x, w, Some(b), 1, 1)?;
            let act = tape.relu(conv)?;
            acts.push(act);
            x = if i + 1 < self.layers() { tape.max_pool2d(act, 2, 2)? } else { act };
        }
        Ok(acts)
    }

    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("conv")
    }
}

/// Uniform on `±sqrt(6 / fan_in)`.
pub fn he_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Float>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

fn uniform<T: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape product")
}

/// Stack CHW images into an NCHW batch.
pub fn batch_images<T: Float>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::stack(&images.iter().collect::<Vec<_>>())
}

/// `-(1/N) Σ_n Σ_k [y ln p + (1 - y) ln(1 - p)]` with `p` clamped, for `p` of shape N×K.
pub fn bce_loss<T: Float>(tape: &mut Tape<T>, p: Var, targets: &Tensor<T>) -> Result<Var> {
    if tape.shape(p) != targets.shape() {
        bail!(Dimension, "bce: predictions {:?} vs targets {:?}", tape.shape(p), targets.shape());
    }
    let n = tape.shape(p).first().copied().unwrap_or(1).max(1);
    let pc = tape.clamp(p, T::lit(P_CLAMP), T::lit(1.0 - P_CLAMP))?;
    let y = tape.constant(targets.clone());
    let not_y = tape.constant(targets.map(|v| T::one() - v));
    let log_p = tape.ln(pc)?;
    let q = tape.affine(pc, -T::one(), T::one())?;
    let log_q = tape.ln(q)?;
    let pos = tape.mul(y, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum_all(both)?;
    tape.scale(total, T::lit(-1.0 / n as f64))
}

/// Multi-hot targets of a batch as an N×K tensor.
pub fn targets<T: Float>(labels: &[&[usize]], k: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * k];
    for (n, ls) in labels.iter().enumerate() {
        for &l in *ls {
            data[n * k + l] = T::one();
        }
    }
    Tensor::new(&[labels.len(), k], data).expect("shape product")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ v − lr (g + wd w)`, `w ← w + v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub cfg: SgdConfig,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd { cfg, velocity: HashMap::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update from the accumulated grads; frozen and grad-less
    /// parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        let (lr, mu, wd) = (T::lit(self.cfg.lr), T::lit(self.cfg.momentum), T::lit(self.cfg.weight_decay));
        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = mu * *vi - lr * (gi + wd * *w);
                *w += *vi;
            }
        }
    }

    /// Drop the momentum of every parameter whose name satisfies `pred`.
    pub fn reset_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.velocity.retain(|name, _| !pred(name));
    }
}
