use nucseg::datagen::{InstanceLabelMap, RgbImage};
use nucseg::losses::LossWeights;
use nucseg::pipeline::data::Sample;
use nucseg::pipeline::train::tiny_model_config;
use nucseg::pipeline::{
    build_dataset, evaluate, run_pipeline, train_teacher, DataConfig, Dataset, HeadFlags, MaskSource, TrainConfig,
};
use nucseg::Model;

fn tiny_data() -> DataConfig {
    DataConfig {
        scenes: 8,
        height: 64,
        width: 64,
        nuclei_per_scene: 6,
        patch: 64,
        overlap: 0,
        ..DataConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs_teacher: 2,
        epochs_student: 2,
        t_box: 0.3,
        rois_per_image: 4,
        model: tiny_model_config(),
        ..TrainConfig::default()
    }
}

fn dataset() -> Dataset {
    build_dataset(&tiny_data()).unwrap()
}

#[test]
fn identical_config_reproduces_record() {
    let ds = dataset();
    let cfg = tiny_train();
    let a = run_pipeline(&ds, &cfg).unwrap().record;
    let b = run_pipeline(&ds, &cfg).unwrap().record;
    assert_eq!(a.teacher_checksum, b.teacher_checksum);
    assert_eq!(a.student_checksum, b.student_checksum);
    assert_eq!(a.student_steps, b.student_steps);
    assert_eq!((a.val, a.test), (b.val, b.test));
}

#[test]
fn student_stage_leaves_teacher_untouched() {
    let ds = dataset();
    let cfg = tiny_train();
    let alone = train_teacher(&cfg, &ds.labeled).unwrap().model.checksum();
    let out = run_pipeline(&ds, &cfg).unwrap();
    assert_eq!(out.teacher.model.checksum(), alone);
    assert_eq!(out.record.teacher_checksum, alone);
    assert_ne!(out.student.model.checksum(), alone);
}

#[test]
fn nmh_only_student_has_zero_lrd_and_cl() {
    let ds = dataset();
    let cfg = TrainConfig {
        heads: HeadFlags::NMH,
        ..tiny_train()
    };
    let rec = run_pipeline(&ds, &cfg).unwrap().record;
    assert!(!rec.student_steps.is_empty());
    assert!(rec.student_steps.iter().all(|s| s.lrd == 0.0 && s.cl == 0.0));
    assert!(rec.student_steps.iter().any(|s| s.nmh > 0.0));
}

#[test]
fn zero_crc_weight_matches_disabled_crc() {
    let ds = dataset();
    let off = TrainConfig {
        heads: "NMH+LRD".parse().unwrap(),
        ..tiny_train()
    };
    let zero = TrainConfig {
        heads: HeadFlags::ALL,
        loss_weights: LossWeights {
            w3: 0.0,
            ..LossWeights::default()
        },
        ..tiny_train()
    };
    let a = run_pipeline(&ds, &off).unwrap().record;
    let b = run_pipeline(&ds, &zero).unwrap().record;
    assert_eq!(a.student_checksum, b.student_checksum);
    assert_eq!(a.test, b.test);
}

#[test]
fn step_totals_match_weighted_components() {
    let ds = dataset();
    let cfg = TrainConfig {
        loss_weights: LossWeights {
            w1: 0.7,
            w2: 1.3,
            w3: 0.4,
            tau: 0.1,
        },
        ..tiny_train()
    };
    let rec = run_pipeline(&ds, &cfg).unwrap().record;
    assert!(rec.bookkeeping_error() < 1e-9, "{}", rec.bookkeeping_error());
    assert_eq!(rec.student_epochs.len(), cfg.epochs_student);
    assert_eq!(rec.teacher_epochs.len(), cfg.epochs_teacher);
}

#[test]
fn initial_mask_loss_is_near_ln2() {
    let ds = dataset();
    let cfg = TrainConfig {
        epochs_teacher: 1,
        ..tiny_train()
    };
    let t = train_teacher(&cfg, &ds.labeled).unwrap();
    let first = t.steps[0].nmh;
    assert!((first - 2f64.ln()).abs() < 0.05, "{first}");
}

#[test]
fn blank_scene_scores_perfectly_when_nothing_is_predicted() {
    let blank = Sample {
        id: 1,
        scene_id: 1,
        image: RgbImage::filled(64, 64, [235.0, 225.0, 230.0]),
        labels: InstanceLabelMap::new(64, 64),
    };
    let model = Model::new(tiny_model_config(), 0);
    let r = evaluate(&model, &[blank], MaskSource::Nmh, 0.7, 0.5).unwrap();
    assert_eq!((r.dice, r.aji, r.pq), (100.0, 100.0, 100.0));
}

#[test]
fn evaluation_ignores_sample_order() {
    let ds = dataset();
    let cfg = tiny_train();
    let teacher = train_teacher(&cfg, &ds.labeled).unwrap().model;
    let mut samples: Vec<Sample> = ds.val.iter().chain(&ds.test).cloned().collect();
    let a = evaluate(&teacher, &samples, MaskSource::Nmh, cfg.t_box, cfg.t_pix).unwrap();
    samples.reverse();
    let b = evaluate(&teacher, &samples, MaskSource::Nmh, cfg.t_box, cfg.t_pix).unwrap();
    assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
    for (x, y) in [(a.dice, b.dice), (a.aji, b.aji), (a.pq, b.pq)] {
        assert!((x - y).abs() < 1e-9);
    }
}
