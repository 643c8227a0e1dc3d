//! Finite-difference checks of the distillation losses on tiny f64 networks.

use distillwsd::clsnet::{HeadPool, Psi, StudentConfig, StudentModel};
use distillwsd::distill::{
    combined_loss_var, feature_loss_var, prediction_loss_var, select_distill_proposals, DistillConfig,
};
use distillwsd::nn::{bce_loss, batch_images};
use distillwsd::regions::{generate_proposals, weighted_roi_var, BBox, ProposalConfig};
use distillwsd::tensor::{Tape, Tensor, Var};
use distillwsd::wsdnet::{softened_prediction_var, TeacherConfig, TeacherModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::random_image;

pub const LOSSES: [&str; 4] = ["feature", "prediction", "hard", "combined"];
pub const STEP: f64 = 1e-6;
/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-4;

const SIDE: usize = 16;
const BATCH: usize = 2;
const ROI_OUT: (usize, usize) = (2, 2);

/// A micro student with everything a distillation loss needs from a micro teacher.
pub struct MicroNet {
    pub student: StudentModel<f64>,
    pub inputs: Tensor<f64>,
    pub labels: Tensor<f64>,
    /// `N×R×K` teacher logits.
    pub m_c: Tensor<f64>,
    pub m_d: Tensor<f64>,
    /// `N×C×h×w` teacher conv maps.
    pub teacher_maps: Tensor<f64>,
    pub boxes: Vec<Vec<BBox>>,
    pub weights: Vec<Vec<f64>>,
    /// `t_c`, `t_d`, `t`.
    pub temps: [Tensor<f64>; 3],
    pub lambda: f64,
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

impl MicroNet {
    pub fn build(seed: u64) -> MicroNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.gen_range(2..=4);
        let r = rng.gen_range(3..=5);
        let c = rng.gen_range(3..=5);
        let psi = if rng.gen_bool(0.5) { Psi::Identity } else { Psi::Conv1x1 };
        let c2 = if psi == Psi::Identity { c } else { rng.gen_range(3..=5) };
        let tcfg = TeacherConfig {
            num_classes: k,
            channels: vec![3, 3, c],
            roi_out: [2, 2],
            fc_width: 6,
            image_size: SIDE,
            top_n: r,
            ..Default::default()
        };
        let mut teacher = TeacherModel::<f64>::new(tcfg, seed ^ 0x7e).unwrap();
        teacher.freeze();
        let scfg = StudentConfig {
            num_classes: k,
            channels: vec![3, rng.gen_range(3..=4), c2],
            hidden: rng.gen_range(4..=6),
            head_pool: if rng.gen_bool(0.5) { HeadPool::Grid } else { HeadPool::Global },
            input_size: SIDE,
            psi,
            feature_channels: c,
            roi_out: [ROI_OUT.0, ROI_OUT.1],
        };
        let student = StudentModel::<f64>::new(scfg, seed ^ 0x57).unwrap();

        let pcfg = ProposalConfig { top_n: r, ..Default::default() };
        let dcfg = DistillConfig { top_after_nms: 3, ..Default::default() };
        let images: Vec<_> = (0..BATCH).map(|_| random_image(&mut rng, SIDE)).collect();
        let props: Vec<_> = images.iter().map(|im| generate_proposals(im, "m", &pcfg).unwrap()).collect();
        let xs: Vec<Tensor<f64>> = images.iter().map(|im| im.to_tensor()).collect();
        let refs: Vec<_> = props.iter().collect();
        let out = teacher.forward_batch(&xs, &refs).unwrap();
        let (mut boxes, mut weights, mut mc, mut md, mut maps) = (vec![], vec![], vec![], vec![], vec![]);
        for ((f, bundle), p) in out.iter().zip(&props) {
            let (b, w) = select_distill_proposals(bundle, p, &dcfg).unwrap();
            boxes.push(b);
            weights.push(w);
            // an untrained teacher is close to uniform; sharpen it so the temperatures matter
            mc.push(bundle.m_c.map(|v| 4.0 * v));
            md.push(bundle.m_d.map(|v| 4.0 * v));
            maps.push(f.clone());
        }
        let stack = |ts: &[Tensor<f64>]| Tensor::stack(&ts.iter().collect::<Vec<_>>()).unwrap();
        let inputs = batch_images(&xs).unwrap();
        let (own_maps, own_logits) = {
            let mut tape = Tape::new();
            let bound = student.params.bind_where(&mut tape, |_| false);
            let x = tape.constant(inputs.clone());
            let vars = student.forward_tape(&mut tape, &bound, x).unwrap();
            (tape.value(vars.features).clone(), tape.value(vars.logits).to_f64_vec())
        };
        // Keep every loss O(1): at h = 1e-6 the central difference of a loss
        // of size L carries roundoff near 1e-10 * L. The targets are constants,
        // so moving them leaves the derivatives under test unchanged.
        let teacher_maps = stack(&maps);
        assert_eq!(teacher_maps.shape(), own_maps.shape());
        let teacher_maps = Tensor::from_f64(
            teacher_maps.shape(),
            &own_maps.to_f64_vec().iter().zip(teacher_maps.to_f64_vec()).map(|(s, t)| s + 0.2 * (t - s)).collect::<Vec<_>>(),
        )
        .unwrap();
        let labels = Tensor::from_f64(&[BATCH, k], &own_logits.iter().map(|&z| if z > 0.0 { 1.0 } else { 0.0 }).collect::<Vec<_>>()).unwrap();
        MicroNet {
            student,
            inputs,
            labels,
            m_c: stack(&mc),
            m_d: stack(&md),
            teacher_maps,
            boxes,
            weights,
            temps: [uniform(&mut rng, k, 0.5, 2.0), uniform(&mut rng, r, 0.5, 2.0), uniform(&mut rng, k, 0.5, 2.0)],
            lambda: rng.gen_range(0.2..2.0),
        }
    }

    pub fn num_params(&self) -> usize {
        self.student.params.numel()
    }

    /// All four losses recorded on `tape`, in [`LOSSES`] order.
    fn record(&self, tape: &mut Tape<f64>, student: &StudentModel<f64>, temps: &[Var; 3], bound: &distillwsd::tensor::Bound) -> [Var; 4] {
        let x = tape.constant(self.inputs.clone());
        let vars = student.forward_tape(tape, bound, x).unwrap();
        let ft = tape.constant(self.teacher_maps.clone());
        let b: Vec<&[BBox]> = self.boxes.iter().map(|b| b.as_slice()).collect();
        let w: Vec<&[f64]> = self.weights.iter().map(|w| w.as_slice()).collect();
        let f_t = weighted_roi_var(tape, ft, &b, &w, ROI_OUT, (SIDE, SIDE)).unwrap();
        let f_s = weighted_roi_var(tape, vars.features, &b, &w, ROI_OUT, (SIDE, SIDE)).unwrap();
        let feature = feature_loss_var(tape, f_t, f_s, BATCH).unwrap();
        let mc = tape.constant(self.m_c.clone());
        let md = tape.constant(self.m_d.clone());
        let p_t = softened_prediction_var(tape, mc, md, temps[0], temps[1]).unwrap();
        let p_s = tape.tempered_sigmoid(vars.logits, temps[2]).unwrap();
        let prediction = prediction_loss_var(tape, p_t, p_s).unwrap();
        let p = tape.sigmoid(vars.logits).unwrap();
        let hard = bce_loss(tape, p, &self.labels).unwrap();
        let combined = combined_loss_var(tape, hard, prediction, self.lambda).unwrap();
        [feature, prediction, hard, combined]
    }

    fn values(&self, student: &StudentModel<f64>, temps: &[Tensor<f64>; 3]) -> [f64; 4] {
        let mut tape = Tape::new();
        let bound = student.params.bind_where(&mut tape, |_| false);
        let tv = temps.clone().map(|t| tape.constant(t));
        self.record(&mut tape, student, &tv, &bound).map(|v| tape.value(v).item())
    }

    /// Autodiff gradient of loss `which`: student parameters in flat order, then `t_c`, `t_d`, `t`.
    pub fn gradient(&self, which: usize) -> Vec<f64> {
        let mut student = self.student.clone();
        let mut tape = Tape::new();
        let bound = student.params.bind(&mut tape);
        let tv = self.temps.clone().map(|t| tape.leaf(t, true));
        let losses = self.record(&mut tape, &student, &tv, &bound);
        tape.backward(losses[which]).unwrap();
        student.params.zero_grad();
        student.params.collect_grads(&tape, &bound);
        let mut g = student.params.flat_grads();
        for (v, t) in tv.iter().zip(&self.temps) {
            match tape.grad(*v) {
                Some(gt) => g.extend_from_slice(gt.data()),
                None => g.extend(std::iter::repeat(0.0).take(t.numel())),
            }
        }
        g
    }

    /// Central differences of all four losses over every coordinate.
    pub fn numeric_gradients(&self) -> [Vec<f64>; 4] {
        let mut student = self.student.clone();
        let base = student.params.flat_values();
        let p = base.len();
        let total = p + self.temps.iter().map(|t| t.numel()).sum::<usize>();
        let mut out: [Vec<f64>; 4] = Default::default();
        for i in 0..total {
            let mut eval = |delta: f64| {
                let mut temps = self.temps.clone();
                if i < p {
                    let mut v = base.clone();
                    v[i] += delta;
                    student.params.set_flat_values(&v).unwrap();
                } else {
                    student.params.set_flat_values(&base).unwrap();
                    let mut j = i - p;
                    for t in temps.iter_mut() {
                        if j < t.numel() {
                            t.data_mut()[j] += delta;
                            break;
                        }
                        j -= t.numel();
                    }
                }
                self.values(&student, &temps)
            };
            let (plus, minus) = (eval(STEP), eval(-STEP));
            for l in 0..4 {
                out[l].push((plus[l] - minus[l]) / (2.0 * STEP));
            }
        }
        out
    }

    /// Hand-derived gradient of the prediction loss with respect to `t_c`, `t_d` and `t`.
    pub fn closed_form_temperature_gradients(&self) -> [Vec<f64>; 3] {
        let logits = self.student.logits_batch(&(0..BATCH).map(|b| self.inputs.index_first(b)).collect::<Vec<_>>()).unwrap();
        let (r, k) = (self.m_c.shape()[1], self.m_c.shape()[2]);
        let (tc, td, t) = (self.temps[0].data(), self.temps[1].data(), self.temps[2].data());
        let n = BATCH as f64;
        let (mut gc, mut gd, mut gt) = (vec![0.0; k], vec![0.0; r], vec![0.0; k]);
        for b in 0..BATCH {
            let mc = |i: usize, j: usize| self.m_c.data()[(b * r + i) * k + j];
            let md = |i: usize, j: usize| self.m_d.data()[(b * r + i) * k + j];
            // class softmax per proposal, proposal softmax per class
            let mut a = vec![vec![0.0; k]; r];
            let mut d = vec![vec![0.0; k]; r];
            for i in 0..r {
                let z: f64 = (0..k).map(|j| (mc(i, j) / tc[j]).exp()).sum();
                for j in 0..k {
                    a[i][j] = (mc(i, j) / tc[j]).exp() / z;
                }
            }
            for j in 0..k {
                let z: f64 = (0..r).map(|i| (md(i, j) / td[i]).exp()).sum();
                for i in 0..r {
                    d[i][j] = (md(i, j) / td[i]).exp() / z;
                }
            }
            let p_t: Vec<f64> = (0..k).map(|j| (0..r).map(|i| a[i][j] * d[i][j]).sum()).collect();
            let m: Vec<f64> = logits.data()[b * k..(b + 1) * k].to_vec();
            let p_s: Vec<f64> = (0..k).map(|j| 1.0 / (1.0 + (-m[j] / t[j]).exp())).collect();
            // dL/dp_t and dL/dp_s
            let g: Vec<f64> = (0..k).map(|j| (p_t[j] - p_s[j]) / n).collect();
            for j in 0..k {
                gt[j] += -g[j] * p_s[j] * (1.0 - p_s[j]) * (-m[j] / (t[j] * t[j]));
            }
            for q in 0..k {
                for i in 0..r {
                    for j in 0..k {
                        let delta = if j == q { 1.0 } else { 0.0 };
                        gc[q] += g[j] * d[i][j] * a[i][j] * (delta - a[i][q]) * (-mc(i, q) / (tc[q] * tc[q]));
                    }
                }
            }
            for q in 0..r {
                for j in 0..k {
                    for i in 0..r {
                        let delta = if i == q { 1.0 } else { 0.0 };
                        gd[q] += g[j] * a[i][j] * d[i][j] * (delta - d[q][j]) * (-md(q, j) / (td[q] * td[q]));
                    }
                }
            }
        }
        [gc, gd, gt]
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub seed: u64,
    pub params: usize,
    /// Worst relative error per loss, [`LOSSES`] order.
    pub worst: [f64; 4],
    /// Largest absolute gap between the hand-derived and autodiff temperature gradients.
    pub closed_form_gap: f64,
}

pub fn run_case(seed: u64) -> CaseResult {
    let net = MicroNet::build(seed);
    let numeric = net.numeric_gradients();
    let mut worst = [0.0; 4];
    for l in 0..4 {
        let analytic = net.gradient(l);
        assert_eq!(analytic.len(), numeric[l].len());
        worst[l] = analytic.iter().zip(&numeric[l]).map(|(&a, &f)| rel_err(a, f)).fold(0.0, f64::max);
    }
    let auto = net.gradient(1);
    let p = net.num_params();
    let closed = net.closed_form_temperature_gradients();
    let closed: Vec<f64> = closed.concat();
    let closed_form_gap = auto[p..].iter().zip(&closed).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    CaseResult { seed, params: p, worst, closed_form_gap }
}
