//! The multi-label classification student.
//!
//! Same conv stack as the teacher, then one more 2× pool, a hidden fully
//! connected layer and K sigmoid outputs. For distillation the last conv map
//! is passed through `Ψ`, which is the identity when the channel counts of
//! both networks agree and a learnable 1×1 conv otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::RgbImage;
use crate::nn::{batch_images, he_uniform, xavier_uniform, Backbone};
use crate::regions::{weighted_roi_var, BBox};
use crate::tensor::{Bound, Float, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Psi {
    Identity,
    Conv1x1,
}

/// Pooling between `F_conv` and the classifier's hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPool {
    /// 2×2 max pool, the flattened map feeds the hidden layer.
    Grid,
    /// Max over all positions per channel.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub num_classes: usize,
    pub channels: Vec<usize>,
    pub hidden: usize,
    pub head_pool: HeadPool,
    pub input_size: usize,
    pub psi: Psi,
    /// Channel count `Ψ` must produce (the teacher's `F_conv` width).
    pub feature_channels: usize,
    pub roi_out: [usize; 2],
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            num_classes: 10,
            channels: Backbone::default().channels,
            hidden: 128,
            head_pool: HeadPool::Grid,
            input_size: 64,
            psi: Psi::Identity,
            feature_channels: 64,
            roi_out: [7, 7],
        }
    }
}

impl StudentConfig {
    pub fn backbone(&self) -> Backbone {
        Backbone { channels: self.channels.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone();
        bb.validate()?;
        if self.num_classes == 0 || self.hidden == 0 || self.roi_out.contains(&0) {
            bail!(Config, "student num_classes, hidden and roi_out must be positive");
        }
        if self.input_size >> bb.layers() == 0 {
            bail!(Config, "student input_size {} is too small for the backbone", self.input_size);
        }
        if self.psi == Psi::Identity && bb.out_channels() != self.feature_channels {
            bail!(
                Contract,
                "identity transform leaves {} channels but the teacher has {}",
                bb.out_channels(),
                self.feature_channels
            );
        }
        Ok(())
    }

    /// Side of the map entering the classifier head.
    pub fn head_side(&self) -> usize {
        match self.head_pool {
            HeadPool::Grid => self.input_size >> self.backbone().layers(),
            HeadPool::Global => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentModel<T> {
    pub cfg: StudentConfig,
    pub params: ParamSet<T>,
    /// Set once feature-level transfer has run on these conv weights.
    pub stage1_done: bool,
}

/// Logits, plain and softened sigmoid predictions of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput<T> {
    pub m: Tensor<T>,
    pub p: Tensor<T>,
    pub p_soft: Tensor<T>,
}

/// Tape handles of a batched student forward: block activations, `Ψ(F_conv)` and `B×K` logits.
#[derive(Debug, Clone)]
pub struct StudentVars {
    pub acts: Vec<Var>,
    pub features: Var,
    pub logits: Var,
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

/// Parameters stage 1 may update: the conv stack and `Ψ`.
pub fn is_feature_param(name: &str) -> bool {
    Backbone::is_backbone_param(name) || name.starts_with("psi.")
}

impl<T: Float> StudentModel<T> {
    pub fn new(cfg: StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let bb = cfg.backbone();
        bb.init(&mut params, &mut rng)?;
        if cfg.psi == Psi::Conv1x1 {
            let (cin, cout) = (bb.out_channels(), cfg.feature_channels);
            params.insert("psi.weight", he_uniform(&[cout, cin, 1, 1], cin, &mut rng))?;
            params.insert("psi.bias", Tensor::zeros(&[cout]))?;
        }
        let mut model = StudentModel { cfg, params, stage1_done: false };
        model.insert_head(&mut rng)?;
        Ok(model)
    }

    fn head_shapes(&self) -> [(&'static str, Vec<usize>); 4] {
        let side = self.cfg.head_side();
        let flat = self.cfg.backbone().out_channels() * side * side;
        let (h, k) = (self.cfg.hidden, self.cfg.num_classes);
        [
            ("head.fc.weight", vec![h, flat]),
            ("head.fc.bias", vec![h]),
            ("head.out.weight", vec![k, h]),
            ("head.out.bias", vec![k]),
        ]
    }

    fn insert_head(&mut self, rng: &mut impl Rng) -> Result<()> {
        for (name, shape) in self.head_shapes() {
            let value = if shape.len() == 2 {
                xavier_uniform(&shape, shape[1], shape[0], rng)
            } else {
                Tensor::zeros(&shape)
            };
            match self.params.get_mut(name) {
                Some(p) => p.value = value,
                None => {
                    self.params.insert(name, value)?;
                }
            }
        }
        Ok(())
    }

    /// Fresh Xavier-uniform weights and zero biases for the classifier head.
    pub fn reinit_head(&mut self, seed: u64) -> Result<()> {
        self.insert_head(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Copy the conv stack of another network (the teacher) by parameter name.
    pub fn load_backbone_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for i in 0..self.cfg.backbone().layers() {
            for part in ["weight", "bias"] {
                let name = format!("{}.{part}", Backbone::layer_name(i));
                let (Some(src), Some(dst)) = (other.get(&name), self.params.get_mut(&name)) else {
                    bail!(Contract, "parameter {name} missing on one side");
                };
                if src.value.shape() != dst.value.shape() {
                    bail!(Contract, "{name}: shapes {:?} and {:?} differ", src.value.shape(), dst.value.shape());
                }
                dst.value = src.value.clone();
            }
        }
        Ok(())
    }

    pub fn input_tensor(&self, image: &RgbImage) -> Result<Tensor<T>> {
        let s = self.cfg.input_size;
        if image.width() != s || image.height() != s {
            bail!(Contract, "student expects {s}x{s} input, got {}x{}", image.width(), image.height());
        }
        Ok(image.to_tensor())
    }

    /// Batched forward on a `B×3×S×S` input.
    pub fn forward_tape(&self, tape: &mut Tape<T>, bound: &Bound, images: Var) -> Result<StudentVars> {
        let xs = tape.shape(images).to_vec();
        let s = self.cfg.input_size;
        if xs.len() != 4 || xs[1] != self.cfg.channels[0] || xs[2] != s || xs[3] != s {
            bail!(Contract, "student expects B×{}×{s}×{s} input, got {:?}", self.cfg.channels[0], xs);
        }
        let p = &self.params;
        let acts = self.cfg.backbone().forward(tape, p, bound, images)?;
        let f_conv = *acts.last().expect("non-empty backbone");
        let features = match self.cfg.psi {
            Psi::Identity => f_conv,
            Psi::Conv1x1 => tape.conv2d(f_conv, p.var(bound, "psi.weight"), Some(p.var(bound, "psi.bias")), 1, 0)?,
        };
        let pooled = match self.cfg.head_pool {
            HeadPool::Grid => tape.max_pool2d(f_conv, 2, 2)?,
            HeadPool::Global => {
                let side = tape.shape(f_conv)[2];
                tape.max_pool2d(f_conv, side, side)?
            }
        };
        let ps = tape.shape(pooled).to_vec();
        let flat = tape.reshape(pooled, &[ps[0], ps[1] * ps[2] * ps[3]])?;
        let fc = tape.linear(flat, p.var(bound, "head.fc.weight"), Some(p.var(bound, "head.fc.bias")))?;
        let hidden = tape.relu(fc)?;
        let logits = tape.linear(hidden, p.var(bound, "head.out.weight"), Some(p.var(bound, "head.out.bias")))?;
        Ok(StudentVars { acts, features, logits })
    }

    /// Logits of a batch of CHW images, no gradients.
    pub fn logits_batch(&self, images: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_where(&mut tape, |_| false);
        let x = tape.constant(batch_images(images)?);
        let vars = self.forward_tape(&mut tape, &bound, x)?;
        Ok(tape.value(vars.logits).clone())
    }

    /// Sigmoid predictions of a batch of images.
    pub fn predict_batch(&self, images: &[&RgbImage]) -> Result<Vec<Vec<f64>>> {
        let xs = images.iter().map(|im| self.input_tensor(im)).collect::<Result<Vec<_>>>()?;
        let m = self.logits_batch(&xs)?;
        let k = self.cfg.num_classes;
        Ok(m.data().chunks(k).map(|row| row.iter().map(|v| sigmoid(v.as_f64())).collect()).collect())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logits, sigmoid and tempered sigmoid of one image.
pub fn student_forward<T: Float>(model: &StudentModel<T>, image: &RgbImage, t: &Tensor<T>) -> Result<StudentOutput<T>> {
    let x = model.input_tensor(image)?;
    let mut tape = Tape::new();
    let bound = model.params.bind_where(&mut tape, |_| false);
    let input = tape.constant(batch_images(&[x])?);
    let vars = model.forward_tape(&mut tape, &bound, input)?;
    let k = model.cfg.num_classes;
    let m = tape.reshape(vars.logits, &[k])?;
    let p = tape.sigmoid(m)?;
    let tv = tape.constant(t.clone());
    let p_soft = tape.tempered_sigmoid(m, tv)?;
    Ok(StudentOutput { m: tape.value(m).clone(), p: tape.value(p).clone(), p_soft: tape.value(p_soft).clone() })
}

/// `Ψ(F_conv)` of one image RoI-pooled over `proposals` and weighted by `s_prime`.
pub fn student_conv_features<T: Float>(
    model: &StudentModel<T>,
    image: &RgbImage,
    proposals: &[BBox],
    s_prime: &[f64],
) -> Result<Tensor<T>> {
    let x = model.input_tensor(image)?;
    let mut tape = Tape::new();
    let bound = model.params.bind_where(&mut tape, |_| false);
    let input = tape.constant(batch_images(&[x])?);
    let vars = model.forward_tape(&mut tape, &bound, input)?;
    let fc = tape.shape(vars.features)[1];
    if fc != model.cfg.feature_channels {
        bail!(Contract, "transformed features have {fc} channels, expected {}", model.cfg.feature_channels);
    }
    let s = model.cfg.input_size;
    let out = (model.cfg.roi_out[0], model.cfg.roi_out[1]);
    let f = weighted_roi_var(&mut tape, vars.features, &[proposals], &[s_prime], out, (s, s))?;
    Ok(tape.value(f).clone())
}

/// Thresholded prediction: 1 where `p > tau`, strictly.
pub fn predict_labels(p: &[f64], tau: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v > tau)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_gives_half() {
        let mut model = StudentModel::<f64>::new(StudentConfig::default(), 3).unwrap();
        for p in model.params.iter_mut().filter(|p| is_head_param(&p.name)) {
            p.value = p.value.map(|_| 0.0);
        }
        let img = RgbImage::filled(64, 64, [10, 200, 30]);
        let out = student_forward(&model, &img, &Tensor::full(&[10], 1.0)).unwrap();
        assert!(out.p.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.p, out.p_soft);
    }

    #[test]
    fn wrong_size_is_contract_error() {
        let model = StudentModel::<f32>::new(StudentConfig::default(), 0).unwrap();
        let img = RgbImage::filled(32, 32, [0, 0, 0]);
        let r = student_forward(&model, &img, &Tensor::full(&[10], 1.0));
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn identity_psi_needs_matching_channels() {
        let cfg = StudentConfig { channels: vec![3, 8, 16, 32], ..Default::default() };
        assert!(matches!(StudentModel::<f32>::new(cfg.clone(), 0), Err(crate::Error::Contract(_))));
        let cfg = StudentConfig { psi: Psi::Conv1x1, ..cfg };
        let model = StudentModel::<f32>::new(cfg, 0).unwrap();
        let img = RgbImage::filled(64, 64, [90, 90, 90]);
        let b = BBox::new(0.0, 0.0, 32.0, 32.0).unwrap();
        let f = student_conv_features(&model, &img, &[b], &[0.5]).unwrap();
        assert_eq!(f.shape(), &[1, 64, 7, 7]);
    }

    #[test]
    fn labels_are_strict() {
        assert_eq!(predict_labels(&[0.9, 0.1, 0.5], 0.5), vec![1, 0, 0]);
    }

    #[test]
    fn reinit_head_keeps_backbone() {
        let mut model = StudentModel::<f32>::new(StudentConfig::default(), 0).unwrap();
        let conv = model.params.value("conv1.weight").clone();
        let head = model.params.value("head.fc.weight").clone();
        model.reinit_head(99).unwrap();
        assert_eq!(&conv, model.params.value("conv1.weight"));
        assert_ne!(&head, model.params.value("head.fc.weight"));
    }
}
