//! Subcommand implementations. A run directory holds:
//!
//! ```text
//! config.toml          resolved configuration
//! teacher.nsck         teacher checkpoint
//! teacher_log.json     teacher step losses and lr rescales
//! pseudo/              pseudo-label store plus index.json
//! student.nsck         student checkpoint
//! student_log.json     student step losses and lr rescales
//! run_record.json      final RunRecord
//! metrics_<model>_<split>.json
//! features/<model>_<split>/<id>.nsck
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use nucseg::datagen::LabelRatio;
use nucseg::io::{load_pseudo, read_json, save_pseudo, write_json};
use nucseg::metrics::{format_table, MetricsReport};
use nucseg::model::checkpoint::{encode_archive, NamedTensor};
use nucseg::model::{image_to_input, Model};
use nucseg::pipeline::data::{load_dataset, save_dataset, Partition};
use nucseg::pipeline::eval::evaluate;
use nucseg::pipeline::run::{generate_pseudo, make_record, student_records, student_source};
use nucseg::pipeline::train::{LrRescale, StepLoss, TrainedModel};
use nucseg::pipeline::{build_dataset, train_student, train_teacher, Dataset, MaskSource, RunRecord, TrainConfig};
use nucseg::pseudolabel::PseudoLabel;
use nucseg::Error;

use crate::ablation::{format_markdown, run_ablation, AblationResult, AblationSpec, Axis, AxisValue};
use crate::config::{config_hash, RunConfig};
use crate::error::CliError;
use crate::plot::plot_ablation;

pub const TEACHER_CKPT: &str = "teacher.nsck";
pub const STUDENT_CKPT: &str = "student.nsck";
pub const RUN_RECORD: &str = "run_record.json";
const PSEUDO_INDEX: &str = "index.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageArg {
    Teacher,
    Pseudo,
    Student,
}

impl std::str::FromStr for StageArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "teacher" => Ok(StageArg::Teacher),
            "pseudo" => Ok(StageArg::Pseudo),
            "student" => Ok(StageArg::Student),
            _ => Err(format!("unknown stage {s:?} (teacher, pseudo, student)")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageLog {
    steps: Vec<StepLoss>,
    lr_rescales: Vec<LrRescale>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PseudoIndex {
    image_ids: Vec<u32>,
    t_box: f64,
    t_pix: f64,
}

pub struct GenDataArgs {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scenes: Option<usize>,
    pub ratio: Option<LabelRatio>,
    pub force: bool,
}

pub fn gen_data(cfg: &RunConfig, args: &GenDataArgs) -> Result<PathBuf> {
    let dir = args.out.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let mut data = cfg.data.clone();
    if let Some(s) = args.seed {
        data.seed = s;
    }
    if let Some(n) = args.scenes {
        data.scenes = n;
    }
    if let Some(r) = args.ratio {
        data.ratio = r;
    }
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        if !args.force {
            return Err(CliError::Exists(dir).into());
        }
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).with_context(|| format!("clearing {}", p.display()))?;
            }
        }
    }
    let ds = build_dataset(&data).map_err(CliError::from)?;
    save_dataset(&dir, &ds).map_err(CliError::from)?;
    log::info!(
        "wrote {} labeled, {} unlabeled, {} val, {} test patches to {}",
        ds.labeled.len(),
        ds.unlabeled.len(),
        ds.val.len(),
        ds.test.len(),
        dir.display()
    );
    Ok(dir)
}

pub fn open_dataset(dir: &Path) -> Result<Dataset> {
    load_dataset(dir)
        .map_err(CliError::from)
        .with_context(|| format!("loading dataset from {}", dir.display()))
}

pub fn run_dir(cfg: &RunConfig, ds: &Dataset) -> PathBuf {
    cfg.paths.out_dir.join(format!("run-{}", config_hash(&ds.config, &cfg.train)))
}

fn load_model(train: &TrainConfig, path: &Path) -> Result<Model<f32>> {
    let mut m = Model::new(train.model.clone(), 0);
    m.load_into(path)
        .map_err(CliError::from)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(m)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(anyhow::Error::from(CliError::from(Error::MissingArtifact(path.to_path_buf()))))
            .with_context(|| format!("stage {stage} needs an upstream artifact; run the earlier stage first"))
    }
}

fn stage_teacher(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<()> {
    let t = train_teacher(&cfg.train, &ds.labeled).map_err(CliError::from)?;
    t.model.save(&dir.join(TEACHER_CKPT)).map_err(CliError::from)?;
    write_json(
        &dir.join("teacher_log.json"),
        &StageLog {
            steps: t.steps,
            lr_rescales: t.lr_rescales,
        },
    )
    .map_err(CliError::from)?;
    log::info!("teacher checkpoint {}", t.model.checksum());
    Ok(())
}

fn stage_pseudo(cfg: &RunConfig, ds: &Dataset, dir: &Path) -> Result<()> {
    let ckpt = dir.join(TEACHER_CKPT);
    require(&ckpt, "pseudo")?;
    let teacher = load_model(&cfg.train, &ckpt)?;
    let pseudo = generate_pseudo(&teacher, &ds.unlabeled, &cfg.train).map_err(CliError::from)?;
    let pdir = dir.join("pseudo");
    std::fs::create_dir_all(&pdir)?;
    for (s, p) in ds.unlabeled.iter().zip(&pseudo) {
        save_pseudo(&pdir, p, s.image.height, s.image.width).map_err(CliError::from)?;
    }
    write_json(
        &pdir.join(PSEUDO_INDEX),
        &PseudoIndex {
            image_ids: pseudo.iter().map(|p| p.image_id).collect(),
            t_box: cfg.train.t_box,
            t_pix: cfg.train.t_pix,
        },
    )
    .map_err(CliError::from)?;
    log::info!(
        "{} pseudo instances on {} images",
        pseudo.iter().map(|p| p.instances.len()).sum::<usize>(),
        pseudo.len()
    );
    Ok(())
}

fn load_pseudo_store(dir: &Path) -> Result<Vec<PseudoLabel>> {
    let pdir = dir.join("pseudo");
    let index: PseudoIndex = read_json(&pdir.join(PSEUDO_INDEX)).map_err(CliError::from)?;
    index
        .image_ids
        .iter()
        .map(|&id| load_pseudo(&pdir, id).map_err(|e| CliError::from(e).into()))
        .collect()
}

fn stage_student(cfg: &RunConfig, ds: &Dataset, dir: &Path, start: Instant) -> Result<RunRecord> {
    let ckpt = dir.join(TEACHER_CKPT);
    require(&ckpt, "student")?;
    require(&dir.join("pseudo").join(PSEUDO_INDEX), "student")?;
    let teacher_model = load_model(&cfg.train, &ckpt)?;
    let tlog: StageLog = read_json(&dir.join("teacher_log.json")).map_err(CliError::from)?;
    let pseudo = load_pseudo_store(dir)?;
    let ids: Vec<u32> = ds.unlabeled.iter().map(|s| s.id).collect();
    let pids: Vec<u32> = pseudo.iter().map(|p| p.image_id).collect();
    if ids != pids {
        return Err(CliError::from(Error::InvalidArgument(
            "pseudo-label store does not match the unlabeled partition".into(),
        ))
        .into());
    }
    let records = student_records(&ds.labeled, &ds.unlabeled, &pseudo).map_err(CliError::from)?;
    let student = train_student(&cfg.train, &records, &teacher_model).map_err(CliError::from)?;
    student.model.save(&dir.join(STUDENT_CKPT)).map_err(CliError::from)?;
    write_json(
        &dir.join("student_log.json"),
        &StageLog {
            steps: student.steps.clone(),
            lr_rescales: student.lr_rescales.clone(),
        },
    )
    .map_err(CliError::from)?;
    let checksum = teacher_model.checksum();
    let teacher = TrainedModel {
        model: teacher_model,
        steps: tlog.steps,
        lr_rescales: tlog.lr_rescales,
    };
    let record = make_record(ds, &cfg.train, &teacher, &pseudo, &student, checksum, start).map_err(CliError::from)?;
    write_json(&dir.join(RUN_RECORD), &record).map_err(CliError::from)?;
    Ok(record)
}

pub struct TrainArgs {
    pub stage: Option<StageArg>,
    pub run: Option<PathBuf>,
}

/// Runs one stage, or every stage whose artifact is missing.
pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<(PathBuf, Option<RunRecord>)> {
    let start = Instant::now();
    let ds = open_dataset(&cfg.paths.data_dir)?;
    let dir = args.run.clone().unwrap_or_else(|| run_dir(cfg, &ds));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    log::info!("run directory {}", dir.display());
    match args.stage {
        Some(StageArg::Teacher) => stage_teacher(cfg, &ds, &dir).map(|_| (dir, None)),
        Some(StageArg::Pseudo) => stage_pseudo(cfg, &ds, &dir).map(|_| (dir, None)),
        Some(StageArg::Student) => stage_student(cfg, &ds, &dir, start).map(|r| (dir, Some(r))),
        None => {
            if dir.join(TEACHER_CKPT).exists() {
                log::info!("reusing {}", TEACHER_CKPT);
            } else {
                stage_teacher(cfg, &ds, &dir)?;
            }
            if dir.join("pseudo").join(PSEUDO_INDEX).exists() {
                log::info!("reusing pseudo-label store");
            } else {
                stage_pseudo(cfg, &ds, &dir)?;
            }
            let record = stage_student(cfg, &ds, &dir, start)?;
            Ok((dir, Some(record)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelArg {
    Teacher,
    Student,
}

impl std::str::FromStr for ModelArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "teacher" => Ok(ModelArg::Teacher),
            "student" => Ok(ModelArg::Student),
            _ => Err(format!("unknown model {s:?} (teacher, student)")),
        }
    }
}

pub fn parse_partition(s: &str) -> Result<Partition, String> {
    match s {
        "labeled" => Ok(Partition::Labeled),
        "unlabeled" => Ok(Partition::Unlabeled),
        "val" => Ok(Partition::Val),
        "test" => Ok(Partition::Test),
        _ => Err(format!("unknown split {s:?} (labeled, unlabeled, val, test)")),
    }
}

fn partition_name(p: Partition) -> &'static str {
    match p {
        Partition::Labeled => "labeled",
        Partition::Unlabeled => "unlabeled",
        Partition::Val => "val",
        Partition::Test => "test",
    }
}

pub struct EvalArgs {
    pub split: Partition,
    pub model: ModelArg,
    pub run: Option<PathBuf>,
    pub dump_features: bool,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<(PathBuf, MetricsReport)> {
    let ds = open_dataset(&cfg.paths.data_dir)?;
    let dir = args.run.clone().unwrap_or_else(|| run_dir(cfg, &ds));
    let (name, ckpt, source) = match args.model {
        ModelArg::Teacher => ("teacher", TEACHER_CKPT, MaskSource::Nmh),
        ModelArg::Student => ("student", STUDENT_CKPT, student_source(&cfg.train)),
    };
    let path = dir.join(ckpt);
    require(&path, "eval")?;
    let model = load_model(&cfg.train, &path)?;
    let samples = ds.partition(args.split);
    let report = evaluate(&model, samples, source, cfg.train.t_box, cfg.train.t_pix).map_err(CliError::from)?;
    let split = partition_name(args.split);
    let out = dir.join(format!("metrics_{name}_{split}.json"));
    write_json(&out, &report).map_err(CliError::from)?;
    println!("{}", format_table(&[(format!("{name} ({split})"), report.clone())]));
    if args.dump_features {
        let fdir = dir.join("features").join(format!("{name}_{split}"));
        std::fs::create_dir_all(&fdir)?;
        for s in samples {
            let bytes = dump_features(&model, &s.image).map_err(CliError::from)?;
            std::fs::write(fdir.join(format!("{:06}.nsck", s.id)), bytes)?;
        }
        log::info!("embedding grids written to {}", fdir.display());
    }
    Ok((out, report))
}

/// Per-detection `roi<k>.box` (x1, y1, x2, y2, score) and `roi<k>.embedding`
/// (14 x 14 x D) tensors in the checkpoint archive format.
pub fn dump_features(model: &Model<f32>, image: &nucseg::datagen::RgbImage) -> nucseg::Result<Vec<u8>> {
    let (features, _) = model.backbone_forward(&image_to_input(image))?;
    let mut tensors = Vec::new();
    for (k, det) in model.detect(&features, (image.height, image.width)).iter().enumerate() {
        let roi = match model.roi_align(&features, det, k) {
            Ok(r) => r,
            Err(Error::DegenerateBox(_)) => continue,
            Err(e) => return Err(e),
        };
        let emb = model.embed_head(&roi);
        let b = det.bbox;
        tensors.push(NamedTensor {
            name: format!("roi{k}.box"),
            shape: vec![5],
            data: vec![b[0] as f32, b[1] as f32, b[2] as f32, b[3] as f32, det.score as f32],
        });
        tensors.push(NamedTensor {
            name: format!("roi{k}.embedding"),
            shape: vec![emb.height, emb.width, emb.dim],
            data: emb.data,
        });
    }
    Ok(encode_archive(&tensors))
}

pub struct AblateArgs {
    pub axis: Axis,
    pub values: Option<Vec<String>>,
    pub seeds: Vec<u64>,
}

pub fn ablate(cfg: &RunConfig, args: &AblateArgs) -> Result<(PathBuf, AblationResult)> {
    let ds = open_dataset(&cfg.paths.data_dir)?;
    let mut spec = AblationSpec::new(args.axis, cfg.train.clone(), args.seeds.clone());
    if let Some(vals) = &args.values {
        spec.values = vals
            .iter()
            .map(|v| AxisValue::parse(args.axis, v))
            .collect::<nucseg::Result<_>>()
            .map_err(CliError::from)?;
    }
    spec.validate().map_err(CliError::from)?;
    let hash = config_hash(&ds.config, &cfg.train);
    let dir = cfg.paths.out_dir.join(format!("ablation-{}-{hash}", args.axis));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let res = run_ablation(&ds, &spec).map_err(CliError::from)?;
    write_json(&dir.join("results.json"), &res).map_err(CliError::from)?;
    let md = format_markdown(&res);
    std::fs::write(dir.join("table.md"), &md)?;
    plot_ablation(&res, &dir.join("plot.svg"))?;
    println!("{md}");
    Ok((dir, res))
}
