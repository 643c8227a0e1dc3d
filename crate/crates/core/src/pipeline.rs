//! End-to-end commands: data generation, teacher training, the two
//! distillation stages, evaluation and the ablation study. The command-line
//! front end is a thin layer over these functions.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_student, load_teacher, save_student, save_teacher};
use crate::clsnet::StudentModel;
use crate::config::Config;
use crate::datagen::{class_name, generate_dataset, Dataset, Split};
use crate::distill::{run_stage1, run_stage2, StageReport, TemperatureBank};
use crate::error::{bail, Error, Result};
use crate::metrics::{evaluate, write_ap_csv, MetricsReport, PredictionRecord};
use crate::regions::ProposalSet;
use crate::wsdnet::{dataset_proposals, predict_dataset, train_teacher, TeacherModel, TrainReport};

/// Every random stream of a run, derived from one base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub teacher: u64,
    pub student: u64,
    pub stage1: u64,
    pub stage2: u64,
}

impl Seeds {
    pub fn derive(base: u64) -> Seeds {
        Seeds {
            // image i uses data + i, so bases must be spread far apart
            data: base.wrapping_mul(1_000_003),
            teacher: base.wrapping_add(101),
            student: base.wrapping_add(202),
            stage1: base.wrapping_add(303),
            stage2: base.wrapping_add(404),
        }
    }
}

pub const DATA_DIR: &str = "data";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STAGE1_CKPT: &str = "student_stage1.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!(State, "{what} not found: {}", path.display());
    }
    Ok(())
}

fn load_split(cfg: &Config, data: &Path, split: Split) -> Result<Dataset> {
    let manifest = crate::datagen::manifest_path(data, split);
    require_file(&manifest, &format!("{} manifest (run gen-data first)", split.name()))?;
    Dataset::load(data, split, cfg.data.scene.num_classes)
}

/// Write the synthetic dataset under `out/data`.
pub fn cmd_gen_data(cfg: &Config, seed: u64, out: &Path) -> Result<PathBuf> {
    let mut spec = cfg.data.scene.clone();
    spec.seed = Seeds::derive(seed).data;
    let dir = out.join(DATA_DIR);
    std::fs::create_dir_all(&dir)?;
    let manifests = generate_dataset(&spec, cfg.data.counts(), &dir)?;
    for m in &manifests {
        log::info!("{}: {} images", m.split.name(), m.entries.len());
    }
    Ok(dir)
}

pub fn cmd_train_teacher(cfg: &Config, seed: u64, data: &Path, out: &Path) -> Result<PathBuf> {
    let train = load_split(cfg, data, Split::Train)?;
    let proposals = dataset_proposals(&train, &cfg.teacher.proposal_config())?;
    let (teacher, report) = train_teacher::<f32>(&train, &proposals, &cfg.teacher, Seeds::derive(seed).teacher)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(TEACHER_CKPT);
    save_teacher(&teacher, &path)?;
    write_json(&report, &out.join("teacher_report.json"))?;
    Ok(path)
}

fn frozen_teacher(path: &Path) -> Result<TeacherModel<f32>> {
    require_file(path, "teacher checkpoint")?;
    let mut teacher = load_teacher::<f32>(path)?;
    teacher.freeze();
    Ok(teacher)
}

/// Stage 1 from a trained teacher; writes the stage-1 student and its report.
pub fn cmd_distill_stage1(cfg: &Config, seed: u64, data: &Path, teacher_ckpt: &Path, out: &Path) -> Result<PathBuf> {
    let teacher = frozen_teacher(teacher_ckpt)?;
    let train = load_split(cfg, data, Split::Train)?;
    let proposals = dataset_proposals(&train, &cfg.teacher.proposal_config())?;
    let seeds = Seeds::derive(seed);
    let mut student = StudentModel::<f32>::new(cfg.student.clone(), seeds.student)?;
    let report = run_stage1(&teacher, &mut student, &train, &proposals, &cfg.distill, seeds.stage1)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(STAGE1_CKPT);
    save_student(&student, serde_json::Value::Null, &path)?;
    write_json(&report, &out.join("stage1_report.json"))?;
    Ok(path)
}

/// Stage 2. The stage-1 student is read from `stage1_ckpt` when the config
/// requires it; the teacher is only needed when `λ > 0`.
pub fn cmd_distill_stage2(
    cfg: &Config,
    seed: u64,
    data: &Path,
    teacher_ckpt: &Path,
    stage1_ckpt: &Path,
    out: &Path,
) -> Result<PathBuf> {
    let seeds = Seeds::derive(seed);
    let mut student = if cfg.distill.require_stage1 {
        if !stage1_ckpt.is_file() {
            bail!(State, "stage 2 requires the stage-1 checkpoint {}, which does not exist", stage1_ckpt.display());
        }
        load_student::<f32>(stage1_ckpt)?
    } else if stage1_ckpt.is_file() {
        load_student::<f32>(stage1_ckpt)?
    } else {
        StudentModel::<f32>::new(cfg.student.clone(), seeds.student)?
    };
    let teacher = if cfg.distill.lambda > 0.0 { Some(frozen_teacher(teacher_ckpt)?) } else { None };
    let train = load_split(cfg, data, Split::Train)?;
    let val = load_split(cfg, data, Split::Val)?;
    let proposals = match &teacher {
        Some(_) => dataset_proposals(&train, &cfg.teacher.proposal_config())?,
        None => Vec::new(),
    };
    let mut temps = TemperatureBank::new(cfg.student.num_classes, cfg.teacher.top_n);
    let report = run_stage2(teacher.as_ref(), &mut student, &train, &proposals, Some(&val), &cfg.distill, &mut temps, seeds.stage2)?;
    std::fs::create_dir_all(out)?;
    let path = out.join(STUDENT_CKPT);
    let extra = serde_json::json!({ "temperatures": report.temperatures });
    save_student(&student, extra, &path)?;
    write_json(&report, &out.join("stage2_report.json"))?;
    Ok(path)
}

fn records(ds: &Dataset, scores: Vec<Vec<f64>>) -> Vec<PredictionRecord> {
    scores
        .into_iter()
        .enumerate()
        .map(|(i, s)| PredictionRecord::from_label_set(ds.ids[i].clone(), s, &ds.labels[i]))
        .collect()
}

pub fn student_scores(student: &StudentModel<f32>, ds: &Dataset, batch: usize) -> Result<Vec<Vec<f64>>> {
    let images: Vec<_> = ds.images.iter().collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in images.chunks(batch.max(1)) {
        out.extend(student.predict_batch(chunk)?);
    }
    Ok(out)
}

pub fn student_records(student: &StudentModel<f32>, ds: &Dataset, batch: usize) -> Result<Vec<PredictionRecord>> {
    Ok(records(ds, student_scores(student, ds, batch)?))
}

pub fn teacher_records(
    teacher: &TeacherModel<f32>,
    ds: &Dataset,
    proposals: &[ProposalSet],
    batch: usize,
) -> Result<Vec<PredictionRecord>> {
    Ok(records(ds, predict_dataset(teacher, ds, proposals, batch)?))
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionLine {
    pub image: String,
    pub scores: Vec<f64>,
}

pub fn save_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = PredictionLine { image: r.image_id.clone(), scores: r.scores.clone() };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        lines.push(parsed);
    }
    Ok(lines)
}

/// Attach ground truth from `ds` to dumped predictions, matching by image path.
pub fn join_predictions(lines: Vec<PredictionLine>, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    let index: HashMap<&str, usize> = ds.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    lines
        .into_iter()
        .map(|l| match index.get(l.image.as_str()) {
            Some(&i) => Ok(PredictionRecord::from_label_set(l.image, l.scores, &ds.labels[i])),
            None => bail!(Input, "prediction for unknown image {}", l.image),
        })
        .collect()
}

/// Where `cmd_eval` gets its scores from.
#[derive(Debug, Clone)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    Predictions { test: PathBuf, val: PathBuf },
}

/// Evaluate on the test split with the threshold tuned on validation; writes
/// `metrics.json` and `per_class_ap.csv` (and prediction dumps when scoring a checkpoint).
pub fn cmd_eval(cfg: &Config, data: &Path, source: &EvalSource, out: &Path) -> Result<MetricsReport> {
    let test = load_split(cfg, data, Split::Test)?;
    let val = load_split(cfg, data, Split::Val)?;
    std::fs::create_dir_all(out)?;
    let (test_rec, val_rec) = match source {
        EvalSource::Checkpoint(path) => {
            require_file(path, "student checkpoint")?;
            let student = load_student::<f32>(path)?;
            let t = student_records(&student, &test, cfg.eval.batch_size)?;
            let v = student_records(&student, &val, cfg.eval.batch_size)?;
            save_predictions(&t, &out.join("predictions_test.jsonl"))?;
            save_predictions(&v, &out.join("predictions_val.jsonl"))?;
            (t, v)
        }
        EvalSource::Predictions { test: tp, val: vp } => {
            (join_predictions(load_predictions(tp)?, &test)?, join_predictions(load_predictions(vp)?, &val)?)
        }
    };
    let report = evaluate(&test_rec, &val_rec, cfg.eval.topk)?;
    write_json(&report, &out.join("metrics.json"))?;
    let names: Vec<String> = (0..cfg.data.scene.num_classes).map(class_name).collect();
    write_ap_csv(&report, &names, out.join("per_class_ap.csv"))?;
    Ok(report)
}

/// The compared configurations of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// `λ = 0`, no feature transfer.
    Baseline,
    /// Prediction-level transfer only.
    ClassAware,
    /// Feature transfer followed by prediction-level transfer.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::ClassAware, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::ClassAware => "class_aware",
            Arm::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub metrics: MetricsReport,
    pub stage1: Option<StageReport>,
    pub stage2: StageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher: MetricsReport,
    pub teacher_training: TrainReport,
    pub arms: Vec<ArmResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMap {
    pub teacher: f64,
    pub baseline: f64,
    pub class_aware: f64,
    pub full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_seed: u64,
    pub config: Config,
    pub seeds: Vec<SeedResult>,
    pub mean_map: MeanMap,
}

/// Wall-clock figures, kept apart from the metrics so that reruns compare equal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTiming {
    pub started_unix_s: u64,
    pub threads: usize,
    pub total_s: f64,
    pub per_seed_s: Vec<f64>,
}

impl AblationReport {
    pub fn arm_map(&self, arm: Arm) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|s| s.arms.iter().find(|a| a.arm == arm).map_or(f64::NAN, |a| a.metrics.map))
            .collect()
    }

    /// Markdown table of mAP per seed and arm with the mean in the last row.
    pub fn table(&self) -> String {
        let mut s = String::from("| seed | teacher | baseline | class_aware | full |\n|---|---|---|---|---|\n");
        for r in &self.seeds {
            let arm = |a: Arm| r.arms.iter().find(|x| x.arm == a).map_or(f64::NAN, |x| x.metrics.map);
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:.2} | {:.2} |",
                r.seed,
                100.0 * r.teacher.map,
                100.0 * arm(Arm::Baseline),
                100.0 * arm(Arm::ClassAware),
                100.0 * arm(Arm::Full)
            );
        }
        let m = &self.mean_map;
        let _ = writeln!(
            s,
            "| mean | {:.2} | {:.2} | {:.2} | {:.2} |",
            100.0 * m.teacher,
            100.0 * m.baseline,
            100.0 * m.class_aware,
            100.0 * m.full
        );
        s
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// All arms for one seed, on data synthesized in memory.
pub fn ablate_seed(cfg: &Config, seed: u64) -> Result<SeedResult> {
    let seeds = Seeds::derive(seed);
    let mut spec = cfg.data.scene.clone();
    spec.seed = seeds.data;
    let counts = cfg.data.counts();
    let train = Dataset::synthesize(&spec, counts, Split::Train)?;
    let val = Dataset::synthesize(&spec, counts, Split::Val)?;
    let test = Dataset::synthesize(&spec, counts, Split::Test)?;
    let pcfg = cfg.teacher.proposal_config();
    let train_props = dataset_proposals(&train, &pcfg)?;
    let (mut teacher, teacher_training) = train_teacher::<f32>(&train, &train_props, &cfg.teacher, seeds.teacher)?;
    teacher.freeze();
    let b = cfg.eval.batch_size;
    let teacher_metrics = evaluate(
        &teacher_records(&teacher, &test, &dataset_proposals(&test, &pcfg)?, b)?,
        &teacher_records(&teacher, &val, &dataset_proposals(&val, &pcfg)?, b)?,
        cfg.eval.topk,
    )?;
    log::info!("seed {seed}: teacher mAP {:.4}", teacher_metrics.map);
    let mut arms = Vec::with_capacity(Arm::ALL.len());
    for arm in Arm::ALL {
        let mut dcfg = cfg.distill.clone();
        dcfg.require_stage1 = arm == Arm::Full;
        if arm == Arm::Baseline {
            dcfg.lambda = 0.0;
        }
        let mut student = StudentModel::<f32>::new(cfg.student.clone(), seeds.student)?;
        let stage1 = match arm {
            Arm::Full => Some(run_stage1(&teacher, &mut student, &train, &train_props, &dcfg, seeds.stage1)?),
            _ => None,
        };
        let mut temps = TemperatureBank::new(cfg.student.num_classes, cfg.teacher.top_n);
        let stage2 = run_stage2(Some(&teacher), &mut student, &train, &train_props, Some(&val), &dcfg, &mut temps, seeds.stage2)?;
        let metrics = evaluate(&student_records(&student, &test, b)?, &student_records(&student, &val, b)?, cfg.eval.topk)?;
        log::info!("seed {seed}: {} mAP {:.4}", arm.name(), metrics.map);
        arms.push(ArmResult { arm, metrics, stage1, stage2 });
    }
    Ok(SeedResult { seed, teacher: teacher_metrics, teacher_training, arms })
}

fn strip_wall_times(result: &mut SeedResult) {
    for a in &mut result.arms {
        a.stage2.wall_time_s = 0.0;
        if let Some(s1) = &mut a.stage1 {
            s1.wall_time_s = 0.0;
        }
    }
}

/// Run every arm for `cfg.ablate.seeds` seeds starting at `seed`. Seeds run
/// on up to `cfg.ablate.threads` worker threads; the report does not depend
/// on the thread count.
pub fn run_ablation(cfg: &Config, seed: u64) -> Result<(AblationReport, AblationTiming)> {
    cfg.validate()?;
    let started = Instant::now();
    let threads = match cfg.ablate.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(cfg.ablate.seeds);
    let seed_list: Vec<u64> = (0..cfg.ablate.seeds as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut slots: Vec<Option<(Result<SeedResult>, f64)>> = (0..seed_list.len()).map(|_| None).collect();
    for (batch_seeds, batch_slots) in seed_list.chunks(threads).zip(slots.chunks_mut(threads)) {
        std::thread::scope(|scope| {
            for (&s, slot) in batch_seeds.iter().zip(batch_slots.iter_mut()) {
                scope.spawn(move || {
                    let t0 = Instant::now();
                    let r = ablate_seed(cfg, s);
                    *slot = Some((r, t0.elapsed().as_secs_f64()));
                });
            }
        });
    }
    let mut seeds = Vec::with_capacity(slots.len());
    let mut per_seed_s = Vec::with_capacity(slots.len());
    for slot in slots {
        let (r, t) = slot.expect("every seed ran");
        let mut r = r?;
        strip_wall_times(&mut r);
        seeds.push(r);
        per_seed_s.push(t);
    }
    let mut report = AblationReport {
        base_seed: seed,
        config: cfg.clone(),
        seeds,
        mean_map: MeanMap { teacher: 0.0, baseline: 0.0, class_aware: 0.0, full: 0.0 },
    };
    report.mean_map = MeanMap {
        teacher: mean(&report.seeds.iter().map(|s| s.teacher.map).collect::<Vec<_>>()),
        baseline: mean(&report.arm_map(Arm::Baseline)),
        class_aware: mean(&report.arm_map(Arm::ClassAware)),
        full: mean(&report.arm_map(Arm::Full)),
    };
    let timing = AblationTiming {
        started_unix_s: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        threads,
        total_s: started.elapsed().as_secs_f64(),
        per_seed_s,
    };
    Ok((report, timing))
}

/// Run the ablation and write `ablation.json`, `ablation.md` and `ablation_timing.json`.
pub fn cmd_ablate(cfg: &Config, seed: u64, out: &Path) -> Result<AblationReport> {
    let (report, timing) = run_ablation(cfg, seed)?;
    std::fs::create_dir_all(out)?;
    write_json(&report, &out.join("ablation.json"))?;
    std::fs::write(out.join("ablation.md"), report.table())?;
    write_json(&timing, &out.join("ablation_timing.json"))?;
    Ok(report)
}
