//! The weakly-supervised detection teacher.
//!
//! A conv backbone produces `F_conv`; every proposal is RoI-pooled from it,
//! scaled by its prior score and passed through one fully connected layer.
//! Two heads then give K logits per proposal. The classification branch is
//! normalised over classes, the detection branch over proposals, and their
//! product `S` summed over proposals is the image-level prediction `p`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{bail, Result};
use crate::image::RgbImage;
use crate::nn::{bce_loss, targets, xavier_uniform, Backbone, Sgd, SgdConfig};
use crate::regions::{nms, roi_window, BBox, ProposalConfig, ProposalSet};
use crate::tensor::{Bound, Float, ParamSet, SoftmaxAxis, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub num_classes: usize,
    pub channels: Vec<usize>,
    pub roi_out: [usize; 2],
    pub fc_width: usize,
    pub image_size: usize,
    /// Train on a randomly chosen scale per batch from `{image_size, scales...}`.
    pub multi_scale: bool,
    pub extra_scales: Vec<usize>,
    pub flip: bool,
    pub top_n: usize,
    pub proposal_scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub nms_thresh: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        let proposals = ProposalConfig::default();
        TeacherConfig {
            num_classes: 10,
            channels: Backbone::default().channels,
            roi_out: [7, 7],
            fc_width: 128,
            image_size: 64,
            multi_scale: false,
            extra_scales: vec![96],
            flip: true,
            top_n: proposals.top_n,
            proposal_scales: proposals.scales,
            aspect_ratios: proposals.aspect_ratios,
            nms_thresh: 0.4,
            epochs: 8,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.num_classes == 0 || self.fc_width == 0 || self.top_n == 0 || self.batch_size == 0 {
            bail!(Config, "teacher num_classes, fc_width, top_n and batch_size must be positive");
        }
        if self.roi_out.contains(&0) {
            bail!(Config, "teacher roi_out must be at least 1x1");
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh < 1.0) {
            bail!(Config, "teacher nms_thresh must be in (0, 1)");
        }
        let min_side = self.image_size >> (self.backbone().layers() - 1);
        if min_side == 0 {
            bail!(Config, "image_size {} is too small for the backbone", self.image_size);
        }
        Ok(())
    }

    pub fn backbone(&self) -> Backbone {
        Backbone { channels: self.channels.clone() }
    }

    pub fn proposal_config(&self) -> ProposalConfig {
        ProposalConfig {
            top_n: self.top_n,
            scales: self.proposal_scales.clone(),
            aspect_ratios: self.aspect_ratios.clone(),
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherModel<T> {
    pub cfg: TeacherConfig,
    pub params: ParamSet<T>,
}

/// Every intermediate of a teacher forward pass, one entry per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle<T> {
    pub m_c: Tensor<T>,
    pub m_d: Tensor<T>,
    pub s_c: Tensor<T>,
    pub s_d: Tensor<T>,
    pub s: Tensor<T>,
    pub p: Tensor<T>,
    pub s_prime: Tensor<T>,
}

impl<T: Float> ScoreBundle<T> {
    /// Fuse two `R×K` logit matrices.
    pub fn from_logits(m_c: Tensor<T>, m_d: Tensor<T>) -> Result<Self> {
        if m_c.shape().len() != 2 || m_c.shape() != m_d.shape() {
            bail!(Dimension, "score fusion wants two equal R×K matrices, got {:?} and {:?}", m_c.shape(), m_d.shape());
        }
        let mut tape = Tape::new();
        let (c, d) = (tape.constant(m_c), tape.constant(m_d));
        let v = fuse(&mut tape, c, d)?;
        Ok(v.bundle(&tape, 0))
    }

    pub fn num_proposals(&self) -> usize {
        self.m_c.shape()[0]
    }
}

/// Tape handles of the fused scores of a batch (`B×R×K` matrices, `B×K` prediction).
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub m_c: Var,
    pub m_d: Var,
    pub s_c: Var,
    pub s_d: Var,
    pub s: Var,
    pub p: Var,
    pub s_prime: Var,
}

impl FusionVars {
    /// Value-level bundle of image `b` (or of the lone unbatched image when the tape holds `R×K` matrices).
    pub fn bundle<T: Float>(&self, tape: &Tape<T>, b: usize) -> ScoreBundle<T> {
        let pick = |v: Var, rank: usize| {
            let t = tape.value(v);
            if t.shape().len() == rank {
                t.index_first(b)
            } else {
                t.clone()
            }
        };
        ScoreBundle {
            m_c: pick(self.m_c, 3),
            m_d: pick(self.m_d, 3),
            s_c: pick(self.s_c, 3),
            s_d: pick(self.s_d, 3),
            s: pick(self.s, 3),
            p: pick(self.p, 2),
            s_prime: pick(self.s_prime, 2),
        }
    }
}

/// Two-branch fusion of `[.., R, K]` logits.
pub fn fuse<T: Float>(tape: &mut Tape<T>, m_c: Var, m_d: Var) -> Result<FusionVars> {
    let rank = tape.shape(m_c).len();
    let s_c = tape.softmax(m_c, SoftmaxAxis::Class.index(rank))?;
    let s_d = tape.softmax(m_d, SoftmaxAxis::Proposal.index(rank))?;
    let s = tape.mul(s_c, s_d)?;
    let sum = tape.sum_axis(s, rank - 2)?;
    // a sum of softmax weights can round one ulp past 1
    let p = tape.clamp(sum, T::zero(), T::one())?;
    let s_prime = tape.sum_axis(s, rank - 1)?;
    Ok(FusionVars { m_c, m_d, s_c, s_d, s, p, s_prime })
}

/// `p'^T = Σ_r softmax_class(M_c / t_c) ⊙ softmax_proposal(M_d / t_d)` on the tape.
/// `t_d` is indexed by proposal rank.
pub fn softened_prediction_var<T: Float>(
    tape: &mut Tape<T>,
    m_c: Var,
    m_d: Var,
    t_c: Var,
    t_d: Var,
) -> Result<Var> {
    let rank = tape.shape(m_c).len();
    let a = tape.tempered_softmax(m_c, t_c, SoftmaxAxis::Class.index(rank))?;
    let b = tape.tempered_softmax(m_d, t_d, SoftmaxAxis::Proposal.index(rank))?;
    let s = tape.mul(a, b)?;
    tape.sum_axis(s, rank - 2)
}

pub fn teacher_softened_prediction<T: Float>(
    bundle: &ScoreBundle<T>,
    t_c: &Tensor<T>,
    t_d: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let m_c = tape.constant(bundle.m_c.clone());
    let m_d = tape.constant(bundle.m_d.clone());
    let tc = tape.constant(t_c.clone());
    let td = tape.constant(t_d.clone());
    let p = softened_prediction_var(&mut tape, m_c, m_d, tc, td)?;
    Ok(tape.value(p).clone())
}

/// Handles of a batched teacher forward pass.
#[derive(Debug, Clone)]
pub struct TeacherVars {
    /// Activation of every conv block; the last one is `F_conv`.
    pub acts: Vec<Var>,
    pub f_conv: Var,
    pub fusion: FusionVars,
}

impl<T: Float> TeacherModel<T> {
    pub fn new(cfg: TeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let bb = cfg.backbone();
        bb.init(&mut params, &mut rng)?;
        let roi_in = bb.out_channels() * cfg.roi_out[0] * cfg.roi_out[1];
        let (f, k) = (cfg.fc_width, cfg.num_classes);
        params.insert("fc.weight", xavier_uniform(&[f, roi_in], roi_in, f, &mut rng))?;
        params.insert("fc.bias", Tensor::zeros(&[f]))?;
        params.insert("cls.weight", xavier_uniform(&[k, f], f, k, &mut rng))?;
        params.insert("cls.bias", Tensor::zeros(&[k]))?;
        params.insert("det.weight", xavier_uniform(&[k, f], f, k, &mut rng))?;
        params.insert("det.bias", Tensor::zeros(&[k]))?;
        Ok(TeacherModel { cfg, params })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn freeze(&mut self) {
        self.params.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    /// Batched forward. `images` is `B×3×H×W`; `proposals[b]` are in pixel
    /// coordinates of that input and all hold the same number of boxes.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: Var,
        proposals: &[&ProposalSet],
    ) -> Result<TeacherVars> {
        let xs = tape.shape(images).to_vec();
        if xs.len() != 4 || xs[0] != proposals.len() {
            bail!(Contract, "{} proposal sets for an input of shape {:?}", proposals.len(), xs);
        }
        let r = proposals.first().map_or(0, |p| p.len());
        if r == 0 || proposals.iter().any(|p| p.len() != r) {
            bail!(Contract, "every image needs the same non-zero proposal count");
        }
        let (b, ih, iw) = (xs[0], xs[2], xs[3]);
        let p = &self.params;
        let acts = self.cfg.backbone().forward(tape, p, bound, images)?;
        let f_conv = *acts.last().expect("non-empty backbone");
        let fs = tape.shape(f_conv).to_vec();
        let out = (self.cfg.roi_out[0], self.cfg.roi_out[1]);
        let mut windows = Vec::with_capacity(b * r);
        let mut priors = Vec::with_capacity(b * r);
        for (bi, set) in proposals.iter().enumerate() {
            for (bx, &s) in set.boxes.iter().zip(&set.prior_scores) {
                windows.push(roi_window(bx, (fs[2], fs[3]), (ih, iw), out, bi)?);
                priors.push(T::lit(s));
            }
        }
        let pooled = tape.roi_pool(f_conv, &windows)?;
        let weighted = tape.scale_rows(pooled, &priors)?;
        let flat = tape.reshape(weighted, &[b * r, fs[1] * out.0 * out.1])?;
        let fc = tape.linear(flat, p.var(bound, "fc.weight"), Some(p.var(bound, "fc.bias")))?;
        let hidden = tape.relu(fc)?;
        let k = self.cfg.num_classes;
        let mc = tape.linear(hidden, p.var(bound, "cls.weight"), Some(p.var(bound, "cls.bias")))?;
        let md = tape.linear(hidden, p.var(bound, "det.weight"), Some(p.var(bound, "det.bias")))?;
        let mc = tape.reshape(mc, &[b, r, k])?;
        let md = tape.reshape(md, &[b, r, k])?;
        Ok(TeacherVars { acts, f_conv, fusion: fuse(tape, mc, md)? })
    }

    /// Value-level forward of a batch: `F_conv` (`C×h×w`) and the score bundle of each image.
    pub fn forward_batch(&self, images: &[Tensor<T>], proposals: &[&ProposalSet]) -> Result<Vec<(Tensor<T>, ScoreBundle<T>)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_where(&mut tape, |_| false);
        let x = tape.constant(crate::nn::batch_images(images)?);
        let vars = self.forward_tape(&mut tape, &bound, x, proposals)?;
        let f = tape.value(vars.f_conv);
        Ok((0..images.len()).map(|b| (f.index_first(b), vars.fusion.bundle(&tape, b))).collect())
    }

    pub fn teacher_forward(&self, image: &RgbImage, proposals: &ProposalSet) -> Result<ScoreBundle<T>> {
        if proposals.len() != self.cfg.top_n {
            bail!(Contract, "teacher expects {} proposals, got {}", self.cfg.top_n, proposals.len());
        }
        let x = self.input_tensor(image);
        let mut out = self.forward_batch(&[x], &[proposals])?;
        Ok(out.pop().expect("one image").1)
    }

    /// The image as a CHW tensor at the configured input size.
    pub fn input_tensor(&self, image: &RgbImage) -> Tensor<T> {
        let s = self.cfg.image_size;
        if image.width() == s && image.height() == s {
            image.to_tensor()
        } else {
            image.resize_nearest(s, s).to_tensor()
        }
    }

    /// Per-class detections: NMS over each column of `S`, boxes with their fused scores.
    pub fn detect(&self, image: &RgbImage, proposals: &ProposalSet) -> Result<Vec<Vec<(BBox, f64)>>> {
        let bundle = self.teacher_forward(image, proposals)?;
        detections(&bundle, proposals, self.cfg.nms_thresh)
    }
}

/// Per-class NMS over the columns of a bundle's fused matrix.
pub fn detections<T: Float>(
    bundle: &ScoreBundle<T>,
    proposals: &ProposalSet,
    nms_thresh: f64,
) -> Result<Vec<Vec<(BBox, f64)>>> {
    let (r, k) = (bundle.s.shape()[0], bundle.s.shape()[1]);
    if r != proposals.len() {
        bail!(Contract, "{} proposals for a bundle over {r}", proposals.len());
    }
    let s = bundle.s.data();
    (0..k)
        .map(|c| {
            let col: Vec<f64> = (0..r).map(|i| s[i * k + c].as_f64()).collect();
            let keep = nms(&proposals.boxes, &col, nms_thresh)?;
            Ok(keep.into_iter().map(|i| (proposals.boxes[i], col[i])).collect())
        })
        .collect()
}

/// Proposals of every image, generated once at the native image size.
pub fn dataset_proposals(ds: &Dataset, cfg: &ProposalConfig) -> Result<Vec<ProposalSet>> {
    ds.images
        .iter()
        .zip(&ds.ids)
        .map(|(img, id)| crate::regions::generate_proposals(img, id, cfg))
        .collect()
}

/// Image tensor and matching proposals, resized to `size` and optionally mirrored.
pub fn prepare_input<T: Float>(image: &RgbImage, proposals: &ProposalSet, size: usize, flip: bool) -> (Tensor<T>, ProposalSet) {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut img = if image.width() == size && image.height() == size {
        image.clone()
    } else {
        image.resize_nearest(size, size)
    };
    let mut props = if size as f64 == w && size as f64 == h {
        proposals.clone()
    } else {
        let mut p = proposals.clone();
        p.boxes = p.boxes.iter().map(|b| b.scaled(size as f64 / w, size as f64 / h)).collect();
        p
    };
    if flip {
        img = img.flip_horizontal();
        props = props.flip_horizontal(size as f64);
    }
    (img.to_tensor(), props)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
}

/// Train the teacher on image-level labels with clamped BCE on `p`.
/// `proposals[i]` belongs to `ds.images[i]`.
pub fn train_teacher<T: Float>(
    ds: &Dataset,
    proposals: &[ProposalSet],
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<(TeacherModel<T>, TrainReport)> {
    if ds.is_empty() {
        bail!(Input, "cannot train a teacher on an empty dataset");
    }
    if proposals.len() != ds.len() {
        bail!(Contract, "{} proposal sets for {} images", proposals.len(), ds.len());
    }
    let mut model = TeacherModel::<T>::new(cfg.clone(), seed)?;
    let mut sgd = Sgd::new(cfg.sgd());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e12);
    let mut report = TrainReport { seed, epoch_losses: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut scales = vec![cfg.image_size];
    if cfg.multi_scale {
        scales.extend(&cfg.extra_scales);
    }
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let size = scales[rng.gen_range(0..scales.len())];
            let mut xs = Vec::with_capacity(chunk.len());
            let mut ps = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let flip = cfg.flip && rng.gen_bool(0.5);
                let (x, p) = prepare_input::<T>(&ds.images[i], &proposals[i], size, flip);
                xs.push(x);
                ps.push(p);
            }
            let labels: Vec<&[usize]> = chunk.iter().map(|&i| ds.labels[i].as_slice()).collect();
            let y = targets::<T>(&labels, cfg.num_classes);
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let x = tape.constant(crate::nn::batch_images(&xs)?);
            let refs: Vec<&ProposalSet> = ps.iter().collect();
            let vars = model.forward_tape(&mut tape, &bound, x, &refs)?;
            let loss = bce_loss(&mut tape, vars.fusion.p, &y)?;
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.collect_grads(&tape, &bound);
            sgd.step(&mut model.params);
            total += tape.value(loss).item().as_f64() * chunk.len() as f64;
        }
        let mean = total / ds.len() as f64;
        log::info!("teacher epoch {} loss {:.5}", epoch + 1, mean);
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}

/// Image-level teacher predictions `p` over a dataset at the configured input size.
pub fn predict_dataset<T: Float>(
    model: &TeacherModel<T>,
    ds: &Dataset,
    proposals: &[ProposalSet],
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut xs = Vec::new();
        let mut ps = Vec::new();
        for &i in chunk {
            let (x, p) = prepare_input::<T>(&ds.images[i], &proposals[i], model.cfg.image_size, false);
            xs.push(x);
            ps.push(p);
        }
        let refs: Vec<&ProposalSet> = ps.iter().collect();
        for (_, bundle) in model.forward_batch(&xs, &refs)? {
            out.push(bundle.p.to_f64_vec());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fusion() {
        let m_c = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let m_d = Tensor::<f64>::zeros(&[2, 2]);
        let b = ScoreBundle::from_logits(m_c, m_d).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (1.0 + e);
        let lo = 1.0 / (1.0 + e);
        assert_eq!(b.s_d.data(), &[0.5, 0.5, 0.5, 0.5]);
        let s = [0.5 * hi, 0.5 * lo, 0.5 * lo, 0.5 * hi];
        for (a, e) in b.s.data().iter().zip(s) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in b.p.data().iter().zip([s[0] + s[2], s[1] + s[3]]) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn single_proposal_degeneracy() {
        let m_c = Tensor::<f64>::from_f64(&[1, 3], &[0.3, -1.0, 2.0]).unwrap();
        let m_d = Tensor::<f64>::from_f64(&[1, 3], &[5.0, 1.0, -4.0]).unwrap();
        let b = ScoreBundle::from_logits(m_c, m_d).unwrap();
        assert_eq!(b.s_d.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(b.p.data(), b.s_c.data());
    }

    #[test]
    fn forward_shapes_and_contract() {
        let cfg = TeacherConfig { top_n: 5, ..Default::default() };
        let model = TeacherModel::<f32>::new(cfg.clone(), 1).unwrap();
        let img = RgbImage::filled(64, 64, [120, 30, 200]);
        let props = crate::regions::generate_proposals(&img, "x", &cfg.proposal_config()).unwrap();
        let b = model.teacher_forward(&img, &props).unwrap();
        assert_eq!(b.s.shape(), &[5, 10]);
        assert_eq!(b.p.shape(), &[10]);
        let fewer = ProposalSet::new("x", props.boxes[..3].to_vec(), props.prior_scores[..3].to_vec()).unwrap();
        assert!(matches!(model.teacher_forward(&img, &fewer), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn empty_dataset_is_input_error() {
        let ds = Dataset { num_classes: 10, ids: vec![], images: vec![], labels: vec![] };
        let r = train_teacher::<f32>(&ds, &[], &TeacherConfig::default(), 0);
        assert!(matches!(r, Err(crate::Error::Input(_))));
    }
}
