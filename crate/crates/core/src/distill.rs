//! Two-stage transfer from the frozen teacher into the student.
//!
//! Stage 1 matches RoI-pooled conv features. The teacher's objectness `s′`
//! picks the regions (NMS, then the best `top_after_nms`) and weights the
//! pooled features of both networks; only the student's conv stack and `Ψ`
//! are updated. Stage 2 retrains the student with a fresh head on the hard
//! labels plus `λ` times the squared distance between the teacher's and the
//! student's temperature-softened predictions. The temperatures are learned
//! alongside the student.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clsnet::{is_feature_param, StudentModel};
use crate::datagen::Dataset;
use crate::error::{bail, Result};
use crate::nn::{batch_images, bce_loss, targets, Backbone, Sgd, SgdConfig};
use crate::regions::{nms, recycle, weighted_roi_var, BBox, ProposalSet};
use crate::tensor::{Float, ParamSet, Tape, Tensor, Var};
use crate::wsdnet::{prepare_input, softened_prediction_var, ScoreBundle, TeacherModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weight of the prediction-level loss in stage 2.
    pub lambda: f64,
    pub nms_thresh: f64,
    pub top_after_nms: usize,
    /// Conv blocks whose RoI features are matched in stage 1, e.g. `["conv3"]`.
    pub distill_layers: Vec<String>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub stage1_lr: f64,
    pub stage1_max_epochs: usize,
    /// Stage 1 stops once the loss moved less than `stage1_tol` (relative) over this many epochs.
    pub stage1_window: usize,
    pub stage1_tol: f64,
    pub stage2_lr: f64,
    pub stage2_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_delta: f64,
    pub lr_decay: f64,
    pub temp_lr: f64,
    pub temp_min: f64,
    pub flip: bool,
    /// Keep teacher outputs per image and mirror state instead of recomputing them each batch.
    pub cache_teacher: bool,
    pub require_stage1: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            nms_thresh: 0.4,
            top_after_nms: 32,
            distill_layers: vec!["conv3".into()],
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 0.0005,
            stage1_lr: 0.001,
            stage1_max_epochs: 100,
            stage1_window: 5,
            stage1_tol: 1e-4,
            stage2_lr: 0.01,
            stage2_epochs: 8,
            plateau_patience: 3,
            plateau_delta: 1e-4,
            lr_decay: 0.1,
            temp_lr: 0.01,
            temp_min: 0.05,
            flip: true,
            cache_teacher: false,
            require_stage1: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            bail!(Config, "lambda must be non-negative, got {}", self.lambda);
        }
        if !(self.nms_thresh > 0.0 && self.nms_thresh < 1.0) {
            bail!(Config, "nms_thresh must be in (0, 1), got {}", self.nms_thresh);
        }
        if self.top_after_nms == 0 || self.batch_size == 0 || self.stage1_window == 0 {
            bail!(Config, "top_after_nms, batch_size and stage1_window must be positive");
        }
        if !(self.temp_min > 0.0) {
            bail!(Config, "temp_min must be positive");
        }
        Ok(())
    }

    fn stage1_sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.stage1_lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    fn stage2_sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.stage2_lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }
}

/// Learnable temperatures: `t_c` per class and `t_d` per proposal rank for
/// the teacher, `t` per class for the student.
#[derive(Debug, Clone)]
pub struct TemperatureBank<T> {
    pub params: ParamSet<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSnapshot {
    pub t_c: Vec<f64>,
    pub t_d: Vec<f64>,
    pub t: Vec<f64>,
}

impl<T: Float> TemperatureBank<T> {
    pub fn new(num_classes: usize, top_n: usize) -> Self {
        let mut params = ParamSet::new();
        params.insert("t_c", Tensor::full(&[num_classes], T::one())).expect("fresh set");
        params.insert("t_d", Tensor::full(&[top_n], T::one())).expect("fresh set");
        params.insert("t", Tensor::full(&[num_classes], T::one())).expect("fresh set");
        TemperatureBank { params }
    }

    pub fn t_c(&self) -> &Tensor<T> {
        self.params.value("t_c")
    }

    pub fn t_d(&self) -> &Tensor<T> {
        self.params.value("t_d")
    }

    pub fn t(&self) -> &Tensor<T> {
        self.params.value("t")
    }

    pub fn clamp_min(&mut self, min: f64) {
        let lo = T::lit(min);
        for p in self.params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = v.max(lo));
        }
    }

    pub fn snapshot(&self) -> TemperatureSnapshot {
        TemperatureSnapshot { t_c: self.t_c().to_f64_vec(), t_d: self.t_d().to_f64_vec(), t: self.t().to_f64_vec() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub seed: u64,
    pub epochs: usize,
    pub layers: Vec<String>,
    /// Stage-1 loss of every layer before training and after the last epoch,
    /// measured without augmentation.
    pub initial_feature_losses: Vec<f64>,
    pub final_feature_losses: Vec<f64>,
    /// Per layer, per epoch mean stage-1 loss.
    pub feature_losses: Vec<Vec<f64>>,
    pub hard_losses: Vec<f64>,
    pub soft_losses: Vec<f64>,
    pub total_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub temperatures: Option<TemperatureSnapshot>,
    pub wall_time_s: f64,
}

/// Indices of the regions kept for distillation: NMS over `s′`, truncated
/// to `top_after_nms` and recycled from the front when too few survive.
pub fn select_distill_indices<T: Float>(
    bundle: &ScoreBundle<T>,
    proposals: &ProposalSet,
    cfg: &DistillConfig,
) -> Result<Vec<usize>> {
    let s_prime = bundle.s_prime.to_f64_vec();
    let mut keep = nms(&proposals.boxes, &s_prime, cfg.nms_thresh)?;
    keep.truncate(cfg.top_after_nms);
    Ok(recycle(&keep, cfg.top_after_nms))
}

/// Boxes `R′` and their objectness `s′` restricted to them.
pub fn select_distill_proposals<T: Float>(
    bundle: &ScoreBundle<T>,
    proposals: &ProposalSet,
    cfg: &DistillConfig,
) -> Result<(Vec<BBox>, Vec<f64>)> {
    let idx = select_distill_indices(bundle, proposals, cfg)?;
    let s = bundle.s_prime.to_f64_vec();
    Ok((idx.iter().map(|&i| proposals.boxes[i]).collect(), idx.iter().map(|&i| s[i]).collect()))
}

/// `(1/(2N)) Σ_n (1/|R′|) ‖F_T − F_S‖²` for `N·|R′|`-row feature blocks.
pub fn feature_loss_var<T: Float>(tape: &mut Tape<T>, f_t: Var, f_s: Var, batch: usize) -> Result<Var> {
    if tape.shape(f_t) != tape.shape(f_s) {
        bail!(Contract, "feature shapes {:?} and {:?} differ", tape.shape(f_t), tape.shape(f_s));
    }
    let rows = tape.shape(f_t).first().copied().unwrap_or(0);
    if batch == 0 || rows % batch != 0 {
        bail!(Contract, "{rows} feature rows do not split over {batch} images");
    }
    let per_image = rows / batch;
    let diff = tape.sub(f_t, f_s)?;
    let sq = tape.sum_squares(diff)?;
    tape.scale(sq, T::lit(1.0 / (2.0 * batch as f64 * per_image as f64)))
}

pub fn feature_distill_loss<T: Float>(f_t: &Tensor<T>, f_s: &Tensor<T>, batch: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(f_t.clone()), tape.constant(f_s.clone()));
    let l = feature_loss_var(&mut tape, a, b, batch)?;
    Ok(tape.value(l).item().as_f64())
}

/// `(1/(2N)) Σ_n ‖p′^T − p′^S‖²` for `N×K` (or length-K) predictions.
pub fn prediction_loss_var<T: Float>(tape: &mut Tape<T>, p_t: Var, p_s: Var) -> Result<Var> {
    if tape.shape(p_t) != tape.shape(p_s) {
        bail!(Contract, "prediction shapes {:?} and {:?} differ", tape.shape(p_t), tape.shape(p_s));
    }
    let n = if tape.shape(p_t).len() >= 2 { tape.shape(p_t)[0] } else { 1 };
    let diff = tape.sub(p_t, p_s)?;
    let sq = tape.sum_squares(diff)?;
    tape.scale(sq, T::lit(1.0 / (2.0 * n as f64)))
}

pub fn prediction_distill_loss<T: Float>(p_t: &Tensor<T>, p_s: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(p_t.clone()), tape.constant(p_s.clone()));
    let l = prediction_loss_var(&mut tape, a, b)?;
    Ok(tape.value(l).item().as_f64())
}

/// Clamped binary cross-entropy summed over classes, averaged over images.
pub fn hard_loss<T: Float>(p: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = bce_loss(&mut tape, pv, y)?;
    Ok(tape.value(l).item().as_f64())
}

/// `hard + λ · soft` on the tape.
pub fn combined_loss_var<T: Float>(tape: &mut Tape<T>, hard: Var, soft: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        bail!(Contract, "lambda must be non-negative, got {lambda}");
    }
    let weighted = tape.scale(soft, T::lit(lambda))?;
    tape.add(hard, weighted)
}

pub fn combined_loss(hard: f64, soft: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        bail!(Contract, "lambda must be non-negative, got {lambda}");
    }
    Ok(hard + lambda * soft)
}

/// Teacher-side quantities of one image in one mirror state.
#[derive(Debug, Clone)]
pub struct TeacherEntry<T> {
    /// Activations of the distilled layers, `C×h×w` each (empty when not requested).
    pub features: Vec<Tensor<T>>,
    /// Selected regions in the student's input coordinates, and their `s′`.
    pub boxes: Vec<BBox>,
    pub weights: Vec<f64>,
    pub m_c: Tensor<T>,
    pub m_d: Tensor<T>,
}

/// Teacher outputs keyed by `(image index, mirrored)`.
#[derive(Debug)]
pub struct TeacherCache<T> {
    enabled: bool,
    layers: Vec<usize>,
    entries: HashMap<(usize, bool), TeacherEntry<T>>,
}

impl<T: Float> TeacherCache<T> {
    pub fn new(enabled: bool, layers: Vec<usize>) -> Self {
        TeacherCache { enabled, layers, entries: HashMap::new() }
    }

    /// Entries for a batch, computing the missing ones in one teacher pass.
    pub fn fetch(
        &mut self,
        teacher: &TeacherModel<T>,
        ds: &Dataset,
        proposals: &[ProposalSet],
        keys: &[(usize, bool)],
        cfg: &DistillConfig,
    ) -> Result<Vec<TeacherEntry<T>>> {
        let missing: Vec<(usize, bool)> = keys.iter().copied().filter(|k| !self.entries.contains_key(k)).collect();
        let computed = if missing.is_empty() {
            Vec::new()
        } else {
            teacher_entries(teacher, ds, proposals, &missing, &self.layers, cfg)?
        };
        if !self.enabled {
            let mut fresh: HashMap<(usize, bool), TeacherEntry<T>> = missing.into_iter().zip(computed).collect();
            return Ok(keys.iter().map(|k| fresh.remove(k).expect("computed above")).collect());
        }
        self.entries.extend(missing.into_iter().zip(computed));
        Ok(keys.iter().map(|k| self.entries[k].clone()).collect())
    }
}

fn teacher_entries<T: Float>(
    teacher: &TeacherModel<T>,
    ds: &Dataset,
    proposals: &[ProposalSet],
    keys: &[(usize, bool)],
    layers: &[usize],
    cfg: &DistillConfig,
) -> Result<Vec<TeacherEntry<T>>> {
    let size = teacher.cfg.image_size;
    let mut xs = Vec::with_capacity(keys.len());
    let mut ps = Vec::with_capacity(keys.len());
    for &(i, flip) in keys {
        let (x, p) = prepare_input::<T>(&ds.images[i], &proposals[i], size, flip);
        xs.push(x);
        ps.push(p);
    }
    let mut tape = Tape::new();
    let bound = teacher.params.bind_where(&mut tape, |_| false);
    let x = tape.constant(batch_images(&xs)?);
    let refs: Vec<&ProposalSet> = ps.iter().collect();
    let vars = teacher.forward_tape(&mut tape, &bound, x, &refs)?;
    keys.iter()
        .enumerate()
        .map(|(b, &(i, flip))| {
            let bundle = vars.fusion.bundle(&tape, b);
            let idx = select_distill_indices(&bundle, &ps[b], cfg)?;
            let native = if flip {
                proposals[i].flip_horizontal(ds.images[i].width() as f64)
            } else {
                proposals[i].clone()
            };
            let s = bundle.s_prime.to_f64_vec();
            Ok(TeacherEntry {
                features: layers.iter().map(|&l| tape.value(vars.acts[l]).index_first(b)).collect(),
                boxes: idx.iter().map(|&j| native.boxes[j]).collect(),
                weights: idx.iter().map(|&j| s[j]).collect(),
                m_c: bundle.m_c,
                m_d: bundle.m_d,
            })
        })
        .collect()
}

fn resolve_layers(names: &[String], backbone: &Backbone) -> Result<Vec<usize>> {
    if names.is_empty() {
        bail!(Config, "distill_layers must name at least one conv layer");
    }
    names
        .iter()
        .map(|n| {
            (0..backbone.layers())
                .find(|&i| Backbone::layer_name(i) == *n)
                .ok_or_else(|| crate::Error::Config(format!("unknown distill layer {n:?}")))
        })
        .collect()
}

fn student_inputs<T: Float>(ds: &Dataset, keys: &[(usize, bool)]) -> Result<Tensor<T>> {
    let xs: Vec<Tensor<T>> = keys
        .iter()
        .map(|&(i, flip)| {
            if flip {
                ds.images[i].flip_horizontal().to_tensor()
            } else {
                ds.images[i].to_tensor()
            }
        })
        .collect();
    batch_images(&xs)
}

fn batch_keys(chunk: &[usize], flip: bool, rng: &mut impl Rng) -> Vec<(usize, bool)> {
    chunk.iter().map(|&i| (i, flip && rng.gen_bool(0.5))).collect()
}

fn check_frozen<T: Float>(teacher: &TeacherModel<T>) -> Result<()> {
    if !teacher.is_frozen() {
        bail!(Contract, "the teacher must be frozen before distillation");
    }
    Ok(())
}

struct Stage1Batch {
    total: Var,
    per_layer: Vec<Var>,
}

/// Record the stage-1 loss of one batch on `tape`.
fn stage1_batch<T: Float>(
    tape: &mut Tape<T>,
    student: &StudentModel<T>,
    bound: &crate::tensor::Bound,
    entries: &[TeacherEntry<T>],
    inputs: Tensor<T>,
    layers: &[usize],
    roi_out: (usize, usize),
) -> Result<Stage1Batch> {
    let b = entries.len();
    let x = tape.constant(inputs);
    let vars = student.forward_tape(tape, bound, x)?;
    let last = student.cfg.backbone().layers() - 1;
    let size = student.cfg.input_size;
    let boxes: Vec<&[BBox]> = entries.iter().map(|e| e.boxes.as_slice()).collect();
    let weights: Vec<&[f64]> = entries.iter().map(|e| e.weights.as_slice()).collect();
    let mut per_layer = Vec::with_capacity(layers.len());
    for (j, &l) in layers.iter().enumerate() {
        let fs_map = if l == last { vars.features } else { vars.acts[l] };
        let t_maps: Vec<&Tensor<T>> = entries.iter().map(|e| &e.features[j]).collect();
        let ft_map = tape.constant(Tensor::stack(&t_maps)?);
        if tape.shape(ft_map)[1] != tape.shape(fs_map)[1] {
            bail!(
                Contract,
                "layer {}: teacher has {} channels, student {}",
                Backbone::layer_name(l),
                tape.shape(ft_map)[1],
                tape.shape(fs_map)[1]
            );
        }
        let f_t = weighted_roi_var(tape, ft_map, &boxes, &weights, roi_out, (size, size))?;
        let f_s = weighted_roi_var(tape, fs_map, &boxes, &weights, roi_out, (size, size))?;
        per_layer.push(feature_loss_var(tape, f_t, f_s, b)?);
    }
    let mut total = per_layer[0];
    for &v in &per_layer[1..] {
        total = tape.add(total, v)?;
    }
    Ok(Stage1Batch { total, per_layer })
}

/// Mean per-layer stage-1 loss over the whole dataset without mirroring or updates.
pub fn stage1_loss<T: Float>(
    teacher: &TeacherModel<T>,
    student: &StudentModel<T>,
    ds: &Dataset,
    proposals: &[ProposalSet],
    cfg: &DistillConfig,
    cache: &mut TeacherCache<T>,
) -> Result<Vec<f64>> {
    let layers = cache.layers.clone();
    let roi_out = (teacher.cfg.roi_out[0], teacher.cfg.roi_out[1]);
    let mut sums = vec![0.0; layers.len()];
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(cfg.batch_size) {
        let keys: Vec<(usize, bool)> = chunk.iter().map(|&i| (i, false)).collect();
        let entries = cache.fetch(teacher, ds, proposals, &keys, cfg)?;
        let mut tape = Tape::new();
        let bound = student.params.bind_where(&mut tape, |_| false);
        let batch = stage1_batch(&mut tape, student, &bound, &entries, student_inputs(ds, &keys)?, &layers, roi_out)?;
        for (s, &v) in sums.iter_mut().zip(&batch.per_layer) {
            *s += tape.value(v).item().as_f64() * chunk.len() as f64;
        }
    }
    Ok(sums.into_iter().map(|s| s / ds.len() as f64).collect())
}

/// Stage 1: feature-level transfer into the student's conv stack and `Ψ`.
pub fn run_stage1<T: Float>(
    teacher: &TeacherModel<T>,
    student: &mut StudentModel<T>,
    ds: &Dataset,
    proposals: &[ProposalSet],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<StageReport> {
    cfg.validate()?;
    check_frozen(teacher)?;
    if ds.is_empty() || proposals.len() != ds.len() {
        bail!(Input, "stage 1 needs a non-empty dataset with one proposal set per image");
    }
    let start = Instant::now();
    let layers = resolve_layers(&cfg.distill_layers, &student.cfg.backbone())?;
    let roi_out = (teacher.cfg.roi_out[0], teacher.cfg.roi_out[1]);
    let mut cache = TeacherCache::new(cfg.cache_teacher, layers.clone());
    let mut report = StageReport {
        stage: 1,
        seed,
        layers: cfg.distill_layers.clone(),
        feature_losses: vec![Vec::new(); layers.len()],
        ..Default::default()
    };
    report.initial_feature_losses = stage1_loss(teacher, student, ds, proposals, cfg, &mut cache)?;
    let initial: f64 = report.initial_feature_losses.iter().sum();
    log::info!("stage 1 initial feature loss {initial:.6e}");
    if initial < 1e-8 {
        // already at the teacher's features; nothing to transfer
        report.final_feature_losses = report.initial_feature_losses.clone();
        report.wall_time_s = start.elapsed().as_secs_f64();
        student.stage1_done = true;
        return Ok(report);
    }
    let mut sgd = Sgd::new(cfg.stage1_sgd());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5747_4531);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.stage1_max_epochs {
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; layers.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let keys = batch_keys(chunk, cfg.flip, &mut rng);
            let entries = cache.fetch(teacher, ds, proposals, &keys, cfg)?;
            let mut tape = Tape::new();
            let bound = student.params.bind_where(&mut tape, is_feature_param);
            let inputs = student_inputs(ds, &keys)?;
            let batch = stage1_batch(&mut tape, student, &bound, &entries, inputs, &layers, roi_out)?;
            tape.backward(batch.total)?;
            student.params.zero_grad();
            student.params.collect_grads(&tape, &bound);
            sgd.step(&mut student.params);
            for (s, &v) in sums.iter_mut().zip(&batch.per_layer) {
                *s += tape.value(v).item().as_f64() * chunk.len() as f64;
            }
        }
        let mut total = 0.0;
        for (series, s) in report.feature_losses.iter_mut().zip(sums) {
            series.push(s / ds.len() as f64);
            total += s / ds.len() as f64;
        }
        report.total_losses.push(total);
        report.learning_rates.push(sgd.cfg.lr);
        report.epochs = epoch + 1;
        log::info!("stage 1 epoch {} feature loss {:.6e}", epoch + 1, total);
        let w = cfg.stage1_window;
        if report.total_losses.len() > w {
            let before = report.total_losses[report.total_losses.len() - 1 - w];
            if ((before - total) / before).abs() < cfg.stage1_tol {
                break;
            }
        }
    }
    report.final_feature_losses = stage1_loss(teacher, student, ds, proposals, cfg, &mut cache)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    student.stage1_done = true;
    Ok(report)
}

/// Mean hard loss of the student over a dataset, no mirroring.
pub fn dataset_hard_loss<T: Float>(student: &StudentModel<T>, ds: &Dataset, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let xs: Vec<Tensor<T>> = chunk.iter().map(|&i| ds.images[i].to_tensor()).collect();
        let m = student.logits_batch(&xs)?;
        let labels: Vec<&[usize]> = chunk.iter().map(|&i| ds.labels[i].as_slice()).collect();
        let y = targets::<T>(&labels, student.cfg.num_classes);
        let p = m.map(|v| T::one() / (T::one() + (-v).exp()));
        total += hard_loss(&p, &y)? * chunk.len() as f64;
    }
    Ok(total / ds.len().max(1) as f64)
}

/// Stage 2: train the student (fresh head) on `L_p + λ·L_p′` together with
/// the temperatures. With `λ = 0` the teacher is not consulted and may be `None`.
#[allow(clippy::too_many_arguments)]
pub fn run_stage2<T: Float>(
    teacher: Option<&TeacherModel<T>>,
    student: &mut StudentModel<T>,
    train: &Dataset,
    proposals: &[ProposalSet],
    val: Option<&Dataset>,
    cfg: &DistillConfig,
    temps: &mut TemperatureBank<T>,
    seed: u64,
) -> Result<StageReport> {
    cfg.validate()?;
    if cfg.require_stage1 && !student.stage1_done {
        bail!(State, "stage 2 requires a stage-1 student but feature transfer has not run");
    }
    if train.is_empty() {
        bail!(Input, "stage 2 needs a non-empty training set");
    }
    let use_teacher = cfg.lambda > 0.0;
    let teacher = match (use_teacher, teacher) {
        (true, Some(t)) => {
            check_frozen(t)?;
            if proposals.len() != train.len() {
                bail!(Input, "{} proposal sets for {} images", proposals.len(), train.len());
            }
            if temps.t_d().numel() != t.cfg.top_n || temps.t_c().numel() != t.cfg.num_classes {
                bail!(Contract, "temperature bank does not match the teacher's proposal and class counts");
            }
            Some(t)
        }
        (true, None) => bail!(Contract, "lambda > 0 needs a teacher"),
        (false, _) => None,
    };
    let start = Instant::now();
    student.reinit_head(seed ^ 0x4845_4144)?;
    let k = student.cfg.num_classes;
    let mut sgd = Sgd::new(cfg.stage2_sgd());
    let mut temp_sgd = Sgd::new(SgdConfig { lr: cfg.temp_lr, momentum: cfg.momentum, weight_decay: 0.0 });
    let mut cache = TeacherCache::new(cfg.cache_teacher, Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5354_4732);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = StageReport { stage: 2, seed, ..Default::default() };
    let mut best_val = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.stage2_epochs {
        order.shuffle(&mut rng);
        let (mut hard_sum, mut soft_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let keys = batch_keys(chunk, cfg.flip, &mut rng);
            let labels: Vec<&[usize]> = chunk.iter().map(|&i| train.labels[i].as_slice()).collect();
            let y = targets::<T>(&labels, k);
            let mut tape = Tape::new();
            let bound = student.params.bind(&mut tape);
            let x = tape.constant(student_inputs(train, &keys)?);
            let vars = student.forward_tape(&mut tape, &bound, x)?;
            let p = tape.sigmoid(vars.logits)?;
            let hard = bce_loss(&mut tape, p, &y)?;
            let (loss, soft, tbound) = if let Some(teacher) = teacher {
                let entries = cache.fetch(teacher, train, proposals, &keys, cfg)?;
                let tb = temps.params.bind(&mut tape);
                let mc: Vec<&Tensor<T>> = entries.iter().map(|e| &e.m_c).collect();
                let md: Vec<&Tensor<T>> = entries.iter().map(|e| &e.m_d).collect();
                let mc = tape.constant(Tensor::stack(&mc)?);
                let md = tape.constant(Tensor::stack(&md)?);
                let (tc, td, ts) =
                    (temps.params.var(&tb, "t_c"), temps.params.var(&tb, "t_d"), temps.params.var(&tb, "t"));
                let p_t = softened_prediction_var(&mut tape, mc, md, tc, td)?;
                let p_s = tape.tempered_sigmoid(vars.logits, ts)?;
                let soft = prediction_loss_var(&mut tape, p_t, p_s)?;
                (combined_loss_var(&mut tape, hard, soft, cfg.lambda)?, Some(soft), Some(tb))
            } else {
                (hard, None, None)
            };
            tape.backward(loss)?;
            student.params.zero_grad();
            student.params.collect_grads(&tape, &bound);
            sgd.step(&mut student.params);
            if let Some(tb) = &tbound {
                temps.params.zero_grad();
                temps.params.collect_grads(&tape, tb);
                temp_sgd.step(&mut temps.params);
                temps.clamp_min(cfg.temp_min);
            }
            let n = chunk.len() as f64;
            hard_sum += tape.value(hard).item().as_f64() * n;
            soft_sum += soft.map_or(0.0, |s| tape.value(s).item().as_f64()) * n;
            total_sum += tape.value(loss).item().as_f64() * n;
        }
        let n = train.len() as f64;
        report.hard_losses.push(hard_sum / n);
        report.soft_losses.push(soft_sum / n);
        report.total_losses.push(total_sum / n);
        report.learning_rates.push(sgd.cfg.lr);
        report.epochs = epoch + 1;
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let v = dataset_hard_loss(student, val, cfg.batch_size)?;
            report.val_losses.push(v);
            if v < best_val - cfg.plateau_delta {
                best_val = v;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.plateau_patience {
                    let lr = sgd.cfg.lr * cfg.lr_decay;
                    sgd.set_lr(lr);
                    temp_sgd.set_lr(temp_sgd.cfg.lr * cfg.lr_decay);
                    stale = 0;
                    log::info!("validation loss plateaued; learning rate now {lr:e}");
                }
            }
        }
        log::info!(
            "stage 2 epoch {} hard {:.5} soft {:.6} val {:?}",
            epoch + 1,
            hard_sum / n,
            soft_sum / n,
            report.val_losses.last()
        );
    }
    if use_teacher {
        report.temperatures = Some(temps.snapshot());
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
