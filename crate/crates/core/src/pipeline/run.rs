use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::student_loss;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::pseudolabel::{assemble_student_set, filter_pseudo, infer_teacher, PseudoLabel, StudentRecord};
use crate::Real;

use super::data::{DataConfig, Dataset, Sample};
use super::eval::{evaluate, MaskSource};
use super::train::{train_student, train_teacher, LrRescale, StepLoss, TrainedModel};
use super::TrainConfig;

/// Mean loss components over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub det: f64,
    pub nmh: f64,
    pub lrd: f64,
    pub cl: f64,
    pub total: f64,
}

pub fn epoch_means(steps: &[StepLoss]) -> Vec<EpochLoss> {
    let mut out: Vec<(EpochLoss, usize)> = Vec::new();
    for s in steps {
        if out.last().map(|(e, _)| e.epoch) != Some(s.epoch) {
            out.push((
                EpochLoss {
                    epoch: s.epoch,
                    det: 0.0,
                    nmh: 0.0,
                    lrd: 0.0,
                    cl: 0.0,
                    total: 0.0,
                },
                0,
            ));
        }
        let (e, n) = out.last_mut().expect("pushed");
        e.det += s.det;
        e.nmh += s.nmh;
        e.lrd += s.lrd;
        e.cl += s.cl;
        e.total += s.total;
        *n += 1;
    }
    out.into_iter()
        .map(|(mut e, n)| {
            let k = n as f64;
            e.det /= k;
            e.nmh /= k;
            e.lrd /= k;
            e.cl /= k;
            e.total /= k;
            e
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub teacher_epochs: Vec<EpochLoss>,
    pub student_epochs: Vec<EpochLoss>,
    pub student_steps: Vec<StepLoss>,
    pub pseudo_instances: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
    pub teacher_checksum: String,
    pub student_checksum: String,
    pub lr_rescales: Vec<LrRescale>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Largest deviation between a recorded step total and the weighted sum
    /// of its components.
    pub fn bookkeeping_error(&self) -> f64 {
        self.student_steps
            .iter()
            .map(|s| (s.total - student_loss(s.det, s.nmh, s.lrd, s.cl, &self.config.loss_weights)).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub teacher: TrainedModel,
    pub pseudo: Vec<PseudoLabel>,
    pub student: TrainedModel,
    pub record: RunRecord,
}

/// Stage 2: the frozen teacher labels every unlabeled sample.
pub fn generate_pseudo(teacher: &Model<Real>, unlabeled: &[Sample], cfg: &TrainConfig) -> Result<Vec<PseudoLabel>> {
    unlabeled
        .iter()
        .map(|s| filter_pseudo(s.id, &infer_teacher(teacher, &s.image)?, cfg.t_box, cfg.t_pix))
        .collect()
}

pub fn student_records(labeled: &[Sample], unlabeled: &[Sample], pseudo: &[PseudoLabel]) -> Result<Vec<StudentRecord>> {
    let lab = labeled.iter().map(|s| (s.id, s.image.clone(), s.labels.clone())).collect();
    let pl = unlabeled.iter().zip(pseudo).map(|(s, p)| (s.image.clone(), p.clone())).collect();
    assemble_student_set(lab, pl)
}

pub fn student_source(cfg: &TrainConfig) -> MaskSource {
    MaskSource::for_heads(cfg.heads)
}

/// Teacher, pseudo-labels, student, then evaluation of the student on the
/// val and test partitions.
pub fn run_pipeline(ds: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    cfg.validate()?;
    let teacher = train_teacher(cfg, &ds.labeled)?;
    run_from_teacher(ds, cfg, teacher, start)
}

/// Stages 2 and 3 from an already trained teacher. The teacher depends only
/// on the seed and optimiser settings, so ablation cells may share it.
pub fn run_from_teacher(ds: &Dataset, cfg: &TrainConfig, teacher: TrainedModel, start: Instant) -> Result<RunOutcome> {
    cfg.validate()?;
    let teacher_checksum = teacher.model.checksum();
    let pseudo = generate_pseudo(&teacher.model, &ds.unlabeled, cfg)?;
    let records = student_records(&ds.labeled, &ds.unlabeled, &pseudo)?;
    let student = train_student(cfg, &records, &teacher.model)?;
    let record = make_record(ds, cfg, &teacher, &pseudo, &student, teacher_checksum, start)?;
    Ok(RunOutcome {
        teacher,
        pseudo,
        student,
        record,
    })
}

/// Evaluates the student and assembles the run record.
pub fn make_record(
    ds: &Dataset,
    cfg: &TrainConfig,
    teacher: &TrainedModel,
    pseudo: &[PseudoLabel],
    student: &TrainedModel,
    teacher_checksum: String,
    start: Instant,
) -> Result<RunRecord> {
    let source = student_source(cfg);
    let val = evaluate(&student.model, &ds.val, source, cfg.t_box, cfg.t_pix)?;
    let test = evaluate(&student.model, &ds.test, source, cfg.t_box, cfg.t_pix)?;
    let mut lr_rescales = teacher.lr_rescales.clone();
    lr_rescales.extend(student.lr_rescales.iter().copied());
    Ok(RunRecord {
        config: cfg.clone(),
        data: ds.config.clone(),
        seed: cfg.seed,
        teacher_epochs: epoch_means(&teacher.steps),
        student_epochs: epoch_means(&student.steps),
        student_steps: student.steps.clone(),
        pseudo_instances: pseudo.iter().map(|p| p.instances.len()).sum(),
        val,
        test,
        teacher_checksum,
        student_checksum: student.model.checksum(),
        lr_rescales,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}
