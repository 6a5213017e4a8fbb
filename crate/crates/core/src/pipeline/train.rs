//! Teacher and student optimisation loops.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crc::{crc_pair, pair_rois, CrcInput, Provenance};
use crate::datagen::{InstanceLabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{boundary_weight_map, downsample_majority, BinaryMask};
use crate::losses::{det_loss_grad, seg_loss_grad, student_loss, teacher_loss};
use crate::model::detection::{BoxXyxy, DetOutput};
use crate::model::roi_align::{roi_align_backward, roi_align_with, roi_plan, RoiPlan, ROI_SIZE};
use crate::model::{image_to_input, EmbedCache, EmbeddingGrid, Model, ModelConfig, MASK_SIZE, STRIDE};
use crate::pseudolabel::StudentRecord;
use crate::tensor::FeatureMap;
use crate::Real;

use super::data::Sample;
use super::optim::Sgd;
use super::{derive_seed, HeadFlags, StudentInit, TrainConfig};

/// Loss components of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub det: f64,
    pub nmh: f64,
    pub lrd: f64,
    pub cl: f64,
    pub total: f64,
    pub rois: usize,
    pub pairs: usize,
    pub skipped_pairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrRescale {
    pub stage: Stage,
    pub step: usize,
    pub from: f64,
    pub to: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Teacher,
    Student,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Student => "student",
        }
    }

    fn streams(self) -> (u64, u64) {
        match self {
            Stage::Teacher => (10, 11),
            Stage::Student => (20, 21),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model<Real>,
    pub steps: Vec<StepLoss>,
    pub lr_rescales: Vec<LrRescale>,
}

/// Borrowed training example.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub image: &'a RgbImage,
    pub labels: &'a InstanceLabelMap,
    pub provenance: Provenance,
}

/// Trains the teacher with `seg(NMH) + det` on human-labeled samples.
pub fn train_teacher(cfg: &TrainConfig, labeled: &[Sample]) -> Result<TrainedModel> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("teacher needs at least one labeled sample".into()));
    }
    let items: Vec<TrainItem> = labeled
        .iter()
        .map(|s| TrainItem {
            image: &s.image,
            labels: &s.labels,
            provenance: Provenance::Human,
        })
        .collect();
    let init = Model::new(cfg.model.clone(), derive_seed(cfg.seed, Stage::Teacher.streams().0));
    train_guarded(&init, &items, cfg, Stage::Teacher, HeadFlags::NMH, cfg.epochs_teacher)
}

/// Trains the student on `D_L ∪ D_U` with the composite loss. The teacher is
/// only read (for optional initialisation).
pub fn train_student(cfg: &TrainConfig, records: &[StudentRecord], teacher: &Model<Real>) -> Result<TrainedModel> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("student needs at least one record".into()));
    }
    let items: Vec<TrainItem> = records
        .iter()
        .map(|r| TrainItem {
            image: &r.image,
            labels: &r.labels,
            provenance: r.provenance,
        })
        .collect();
    let init = match cfg.student_init {
        StudentInit::Scratch => Model::new(cfg.model.clone(), derive_seed(cfg.seed, Stage::Student.streams().0)),
        StudentInit::Teacher => teacher.clone(),
    };
    train_guarded(&init, &items, cfg, Stage::Student, cfg.heads, cfg.epochs_student)
}

/// Restarts the stage with a tenfold smaller learning rate when the loss or
/// gradients become non-finite; gives up after three attempts.
pub fn train_guarded(
    init: &Model<Real>,
    items: &[TrainItem],
    cfg: &TrainConfig,
    stage: Stage,
    heads: HeadFlags,
    epochs: usize,
) -> Result<TrainedModel> {
    let mut lr = cfg.lr;
    let mut rescales = Vec::new();
    let mut last = Error::InvalidArgument("no attempt".into());
    for _ in 0..3 {
        let mut model = init.clone();
        match run_stage(&mut model, items, cfg, stage, heads, epochs, lr) {
            Ok(steps) => {
                return Ok(TrainedModel {
                    model,
                    steps,
                    lr_rescales: rescales,
                })
            }
            Err(Error::Diverged { step, .. }) => {
                log::warn!("{} diverged at step {step} with lr {lr}; restarting with lr {}", stage.name(), lr * 0.1);
                rescales.push(LrRescale {
                    stage,
                    step,
                    from: lr,
                    to: lr * 0.1,
                });
                last = Error::Diverged {
                    stage: stage.name(),
                    step,
                    lr,
                };
                lr *= 0.1;
            }
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

struct ImageWork {
    bcache: crate::model::StackCache<Real>,
    dcache: crate::model::StackCache<Real>,
    feat_hw: (usize, usize),
    det_grad: DetOutput<Real>,
    dfeat: FeatureMap<Real>,
}

struct RoiWork {
    image: usize,
    plan: RoiPlan,
    feature: FeatureMap<Real>,
    mask28: BinaryMask,
    mask14: BinaryMask,
    provenance: Provenance,
}

fn augment(item: &TrainItem, flip: bool, rng: &mut ChaCha8Rng) -> (RgbImage, InstanceLabelMap) {
    let (mut img, mut lab) = (item.image.clone(), item.labels.clone());
    if flip {
        if rng.random_bool(0.5) {
            img = img.flip_horizontal();
            lab = lab.flip_horizontal();
        }
        if rng.random_bool(0.5) {
            img = img.flip_vertical();
            lab = lab.flip_vertical();
        }
    }
    (img, lab)
}

fn label_boxes(labels: &InstanceLabelMap) -> Vec<(u32, BoxXyxy)> {
    labels
        .bounding_boxes()
        .into_iter()
        .enumerate()
        .filter_map(|(k, b)| b.map(|b| (k as u32 + 1, b.map(|v| v as f64))))
        .collect()
}

/// Jitters each edge by up to `jitter` of the box extent, enforces a minimum
/// side of one feature cell and clips to the image.
pub fn jitter_box(b: &BoxXyxy, jitter: f64, hw: (usize, usize), rng: &mut impl Rng) -> BoxXyxy {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let mut j = |v: f64, ext: f64| {
        if jitter > 0.0 {
            v + rng.random_range(-jitter..jitter) * ext
        } else {
            v
        }
    };
    let mut out = [j(b[0], w), j(b[1], h), j(b[2], w), j(b[3], h)];
    let min = STRIDE as f64;
    for (lo, hi, limit) in [(0, 2, hw.1 as f64), (1, 3, hw.0 as f64)] {
        if out[hi] - out[lo] < min {
            let c = 0.5 * (out[lo] + out[hi]);
            out[lo] = c - min / 2.0;
            out[hi] = c + min / 2.0;
        }
        if out[lo] < 0.0 {
            out[hi] -= out[lo];
            out[lo] = 0.0;
        }
        if out[hi] > limit {
            out[lo] -= out[hi] - limit;
            out[hi] = limit;
        }
        out[lo] = out[lo].max(0.0);
    }
    out
}

/// Instance `id` sampled at the centres of a `size x size` grid over `bbox`.
pub fn mask_target(labels: &InstanceLabelMap, id: u32, bbox: &BoxXyxy, size: usize) -> BinaryMask {
    let (bw, bh) = ((bbox[2] - bbox[0]) / size as f64, (bbox[3] - bbox[1]) / size as f64);
    BinaryMask::from_fn(size, size, |r, c| {
        let y = bbox[1] + (r as f64 + 0.5) * bh;
        let x = bbox[0] + (c as f64 + 0.5) * bw;
        let row = (y.floor().max(0.0) as usize).min(labels.height - 1);
        let col = (x.floor().max(0.0) as usize).min(labels.width - 1);
        labels.get(row, col) == id
    })
}

fn scale_det(g: &mut DetOutput<Real>, s: Real) {
    for v in &mut g.logits {
        *v *= s;
    }
    for o in &mut g.offsets {
        for v in o.iter_mut() {
            *v *= s;
        }
    }
}

fn grads_finite(model: &Model<Real>) -> bool {
    model.params().iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut Model<Real>,
    items: &[TrainItem],
    cfg: &TrainConfig,
    stage: Stage,
    heads: HeadFlags,
    epochs: usize,
    lr: f64,
) -> Result<Vec<StepLoss>> {
    let mut opt = Sgd::new(model, lr, cfg.momentum, cfg.weight_decay);
    let data_seed = derive_seed(cfg.seed, stage.streams().1);
    let crc_seed = derive_seed(cfg.seed, stage.streams().1 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    let crc_params = cfg.crc_params();
    let w = cfg.loss_weights;
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let step = steps.len();
            model.zero_grad();
            let b = batch.len();
            let mut images: Vec<ImageWork> = Vec::with_capacity(b);
            let mut rois: Vec<RoiWork> = Vec::new();
            let mut det_sum = 0.0f64;
            for &i in batch {
                let (image, labels) = augment(&items[i], cfg.flip_augment, &mut rng);
                let (feat, bcache) = model.backbone_forward(&image_to_input(&image))?;
                let (out, dcache) = model.det_forward(&feat);
                let boxes = label_boxes(&labels);
                let targets: Vec<BoxXyxy> = boxes.iter().map(|(_, b)| *b).collect();
                let anchors = model.anchors(feat.height, feat.width);
                let mut dl = det_loss_grad(&out, &anchors, &targets)?;
                det_sum += dl.total as f64;
                scale_det(&mut dl.grad, 1.0 / b as Real);
                let k = boxes.len().min(cfg.rois_per_image);
                let mut chosen: Vec<usize> = index::sample(&mut rng, boxes.len(), k).into_vec();
                chosen.sort_unstable();
                for bi in chosen {
                    let (id, gt) = boxes[bi];
                    let bbox = jitter_box(&gt, cfg.box_jitter, (image.height, image.width), &mut rng);
                    let plan = match roi_plan(feat.height, feat.width, STRIDE, &bbox) {
                        Ok(p) => p,
                        Err(Error::DegenerateBox(_)) => continue,
                        Err(e) => return Err(e),
                    };
                    let mask28 = mask_target(&labels, id, &bbox, MASK_SIZE);
                    rois.push(RoiWork {
                        image: images.len(),
                        feature: roi_align_with(&feat, &plan),
                        plan,
                        mask14: downsample_majority(&mask28, ROI_SIZE, ROI_SIZE),
                        mask28,
                        provenance: items[i].provenance,
                    });
                }
                images.push(ImageWork {
                    bcache,
                    dcache,
                    feat_hw: (feat.height, feat.width),
                    det_grad: dl.grad,
                    dfeat: FeatureMap::zeros(feat.channels, feat.height, feat.width),
                });
            }

            let r = rois.len();
            let (mut nmh_sum, mut lrd_sum) = (0.0f64, 0.0f64);
            let mut droi: Vec<FeatureMap<Real>> = rois
                .iter()
                .map(|x| FeatureMap::zeros(x.feature.channels, ROI_SIZE, ROI_SIZE))
                .collect();
            let w_nmh = match stage {
                Stage::Teacher => 1.0,
                Stage::Student => w.w1,
            };
            for (k, roi) in rois.iter().enumerate() {
                if heads.nmh {
                    let (logits, cache) = model.nmh_forward(&roi.feature);
                    let (l, mut g) = seg_loss_grad(&logits, &roi.mask28, None)?;
                    nmh_sum += l as f64;
                    let s = (w_nmh / r as f64) as Real;
                    g.data.iter_mut().for_each(|v| *v *= s);
                    droi[k].add_assign(&model.nmh_backward(&cache, &g));
                }
                if heads.lrd {
                    let (logits, cache) = model.lrd_forward(&roi.feature);
                    let weights =
                        boundary_weight_map::<Real>(&roi.mask14, cfg.lrd_band, cfg.lrd_w_boundary as Real, cfg.lrd_w_interior as Real);
                    let (l, mut g) = seg_loss_grad(&logits, &roi.mask14, Some(&weights))?;
                    lrd_sum += l as f64;
                    let s = (w.w2 / r as f64) as Real;
                    g.data.iter_mut().for_each(|v| *v *= s);
                    droi[k].add_assign(&model.lrd_backward(&cache, &g));
                }
            }

            let (mut cl, mut pairs, mut skipped) = (0.0f64, 0usize, 0usize);
            if heads.crc && r > 0 {
                let embeds: Vec<(EmbeddingGrid<Real>, EmbedCache<Real>)> =
                    rois.iter().map(|x| model.embed_forward(&x.feature)).collect();
                let want_grad = w.w3 != 0.0;
                let mut demb: Vec<EmbeddingGrid<Real>> =
                    embeds.iter().map(|(e, _)| EmbeddingGrid::zeros(e.height, e.width, e.dim)).collect();
                let pair_seed = derive_seed(crc_seed, step as u64);
                let mut cl_sum = 0.0f64;
                for (i, j) in pair_rois(r, pair_seed) {
                    let input = |k: usize| CrcInput {
                        roi_id: k,
                        embeddings: &embeds[k].0,
                        mask: &rois[k].mask14,
                        provenance: rois[k].provenance,
                    };
                    let out = crc_pair(&input(i), &input(j), &crc_params, pair_seed, want_grad)?;
                    if out.skipped {
                        skipped += 1;
                        continue;
                    }
                    pairs += 1;
                    cl_sum += out.loss as f64;
                    if let Some([gi, gj]) = out.grads {
                        for (dst, src) in [(i, gi), (j, gj)] {
                            for (a, b) in demb[dst].data.iter_mut().zip(&src.data) {
                                *a += *b;
                            }
                        }
                    }
                }
                if pairs > 0 {
                    cl = cl_sum / pairs as f64;
                    if want_grad {
                        let s = (w.w3 / pairs as f64) as Real;
                        for (k, (_, cache)) in embeds.iter().enumerate() {
                            demb[k].data.iter_mut().for_each(|v| *v *= s);
                            droi[k].add_assign(&model.embed_backward(cache, &demb[k]));
                        }
                    }
                }
            }

            for (roi, g) in rois.iter().zip(&droi) {
                roi_align_backward(&mut images[roi.image].dfeat, &roi.plan, g);
            }
            for img in &mut images {
                let dfeat_det = model.det_backward(&img.dcache, &img.det_grad, img.feat_hw);
                img.dfeat.add_assign(&dfeat_det);
                model.backbone_backward(&img.bcache, &img.dfeat, false);
            }

            let det = det_sum / b as f64;
            let nmh = if r > 0 { nmh_sum / r as f64 } else { 0.0 };
            let lrd = if r > 0 { lrd_sum / r as f64 } else { 0.0 };
            let total = match stage {
                Stage::Teacher => teacher_loss(nmh, det),
                Stage::Student => student_loss(det, nmh, lrd, cl, &w),
            };
            if !total.is_finite() || !grads_finite(model) {
                return Err(Error::Diverged {
                    stage: stage.name(),
                    step,
                    lr,
                });
            }
            opt.step(model);
            steps.push(StepLoss {
                step,
                epoch,
                det,
                nmh,
                lrd,
                cl,
                total,
                rois: r,
                pairs,
                skipped_pairs: skipped,
            });
        }
    }
    Ok(steps)
}

/// Model configuration used by the small tests in this crate.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        stem: [8, 16],
        channels: 32,
        det_hidden: 16,
        head_hidden: 16,
        embed_dim: 16,
        ..ModelConfig::default()
    }
}
