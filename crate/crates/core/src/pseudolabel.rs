//! Teacher inference, confidence filtering and student-set assembly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::crc::Provenance;
use crate::datagen::{InstanceLabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{downsample_majority, BinaryMask};
use crate::model::detection::{BoxXyxy, Detection};
use crate::model::roi_align::ROI_SIZE;
use crate::model::{image_to_input, Model, MASK_SIZE};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Grid;

/// One teacher detection with its 28x28 foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInstance {
    pub detection: Detection,
    pub probs: Grid<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoInstance {
    pub detection: Detection,
    pub mask28: BinaryMask,
    pub mask14: BinaryMask,
}

impl PseudoInstance {
    pub fn score(&self) -> f64 {
        self.detection.score
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub image_id: u32,
    pub instances: Vec<PseudoInstance>,
    pub t_box: f64,
    pub t_pix: f64,
}

impl PseudoLabel {
    /// The retained instances as hard 0/1 probability grids.
    pub fn to_raw(&self) -> Vec<RawInstance> {
        self.instances
            .iter()
            .map(|inst| RawInstance {
                detection: inst.detection,
                probs: Grid::from_vec(
                    MASK_SIZE,
                    MASK_SIZE,
                    inst.mask28.as_slice().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
                ),
            })
            .collect()
    }

    /// Full-resolution instance map with higher-scoring instances on top.
    pub fn label_map(&self, height: usize, width: usize) -> InstanceLabelMap {
        let grids: Vec<_> = self.to_raw();
        paste_instances(height, width, &grids, 0.5)
    }
}

/// `detect -> roi_align -> mask heads`, returning sigmoid probabilities of
/// the naive head. Proposals too small to align are dropped.
pub fn infer_teacher<T: Scalar>(teacher: &Model<T>, image: &RgbImage) -> Result<Vec<RawInstance>> {
    let (features, _) = teacher.backbone_forward(&image_to_input(image))?;
    let dets = teacher.detect(&features, (image.height, image.width));
    let mut out = Vec::with_capacity(dets.len());
    for (id, det) in dets.iter().enumerate() {
        let roi = match teacher.roi_align(&features, det, id) {
            Ok(r) => r,
            Err(Error::DegenerateBox(_)) => continue,
            Err(e) => return Err(e),
        };
        let (logits, _) = teacher.nmh_forward(&roi.values);
        out.push(RawInstance {
            detection: *det,
            probs: Grid::from_vec(
                logits.height,
                logits.width,
                logits.data.iter().map(|&v| sigmoid(v).as_f64()).collect(),
            ),
        });
    }
    Ok(out)
}

pub fn binarize(probs: &Grid<f64>, t_pix: f64) -> BinaryMask {
    BinaryMask::from_vec(probs.height, probs.width, probs.data.iter().map(|&p| p >= t_pix).collect())
}

/// Keeps detections scoring at least `t_box` whose mask, binarised at
/// `t_pix`, is non-empty.
pub fn filter_pseudo(image_id: u32, raw: &[RawInstance], t_box: f64, t_pix: f64) -> Result<PseudoLabel> {
    if !(0.0..=1.0).contains(&t_box) || !(0.0..=1.0).contains(&t_pix) {
        return Err(Error::InvalidArgument(format!("thresholds must lie in [0, 1]: {t_box}, {t_pix}")));
    }
    let instances = raw
        .iter()
        .filter(|r| r.detection.score >= t_box)
        .filter_map(|r| {
            let mask28 = binarize(&r.probs, t_pix);
            (!mask28.is_empty()).then(|| PseudoInstance {
                detection: r.detection,
                mask14: downsample_majority(&mask28, ROI_SIZE, ROI_SIZE),
                mask28,
            })
        })
        .collect();
    Ok(PseudoLabel {
        image_id,
        instances,
        t_box,
        t_pix,
    })
}

/// Maps image pixel `(row, col)` into continuous grid coordinates of a
/// `size x size` grid spanning `bbox`.
fn to_grid(bbox: &BoxXyxy, size: usize, row: usize, col: usize) -> (f64, f64) {
    let s = size as f64;
    let u = ((col as f64 + 0.5) - bbox[0]) / (bbox[2] - bbox[0]) * s - 0.5;
    let v = ((row as f64 + 0.5) - bbox[1]) / (bbox[3] - bbox[1]) * s - 0.5;
    (v, u)
}

/// Composites per-RoI probability grids into an instance map. Instances are
/// painted in ascending score order so the highest score wins overlaps; a
/// pixel joins an instance when the bilinearly resampled probability is at
/// least `t_pix`. Ids are consecutive in paint order among instances that
/// keep at least one pixel.
pub fn paste_instances(height: usize, width: usize, instances: &[RawInstance], t_pix: f64) -> InstanceLabelMap {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[a].detection.score.total_cmp(&instances[b].detection.score));
    let mut map = InstanceLabelMap::new(height, width);
    for (k, &i) in order.iter().enumerate() {
        let inst = &instances[i];
        let b = inst.detection.bbox;
        let size = inst.probs.height;
        let r0 = b[1].floor().max(0.0) as usize;
        let r1 = (b[3].ceil().max(0.0) as usize).min(height);
        let c0 = b[0].floor().max(0.0) as usize;
        let c1 = (b[2].ceil().max(0.0) as usize).min(width);
        for r in r0..r1 {
            let y = r as f64 + 0.5;
            if y < b[1] || y >= b[3] {
                continue;
            }
            for c in c0..c1 {
                let x = c as f64 + 0.5;
                if x < b[0] || x >= b[2] {
                    continue;
                }
                let (gv, gu) = to_grid(&b, size, r, c);
                if inst.probs.sample(gv, gu) >= t_pix {
                    map.set(r, c, k as u32 + 1);
                }
            }
        }
    }
    map.relabel_consecutive();
    map
}

/// One training image for the student.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentRecord {
    pub image_id: u32,
    pub image: RgbImage,
    pub labels: InstanceLabelMap,
    pub provenance: Provenance,
}

/// `D_L ∪ D_U`: human-labeled records followed by pseudo-labeled ones.
pub fn assemble_student_set(
    labeled: Vec<(u32, RgbImage, InstanceLabelMap)>,
    pseudo: Vec<(RgbImage, PseudoLabel)>,
) -> Result<Vec<StudentRecord>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(labeled.len() + pseudo.len());
    for (id, image, labels) in labeled {
        if !seen.insert(id) {
            return Err(Error::DuplicateImage(id.to_string()));
        }
        out.push(StudentRecord {
            image_id: id,
            image,
            labels,
            provenance: Provenance::Human,
        });
    }
    for (image, pl) in pseudo {
        if !seen.insert(pl.image_id) {
            return Err(Error::DuplicateImage(pl.image_id.to_string()));
        }
        out.push(StudentRecord {
            image_id: pl.image_id,
            labels: pl.label_map(image.height, image.width),
            image,
            provenance: Provenance::Pseudo,
        });
    }
    Ok(out)
}

/// JSON sidecar entry for one retained instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoBox {
    pub bbox: BoxXyxy,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSidecar {
    pub image_id: u32,
    pub t_box: f64,
    pub t_pix: f64,
    pub instances: Vec<PseudoBox>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(score: f64, p: f64) -> RawInstance {
        RawInstance {
            detection: Detection {
                bbox: [0.0, 0.0, 28.0, 28.0],
                score,
            },
            probs: Grid::filled(28, 28, p),
        }
    }

    #[test]
    fn box_threshold() {
        let r = vec![raw(0.9, 0.8), raw(0.6, 0.8), raw(0.3, 0.8)];
        assert_eq!(filter_pseudo(0, &r, 0.7, 0.5).unwrap().instances.len(), 1);
    }

    #[test]
    fn empty_masks_are_dropped() {
        assert!(filter_pseudo(0, &[raw(0.9, 0.4)], 0.7, 0.5).unwrap().instances.is_empty());
    }

    #[test]
    fn zero_thresholds_keep_everything() {
        let r = vec![raw(0.9, 0.0), raw(0.01, 0.3)];
        let pl = filter_pseudo(0, &r, 0.0, 0.0).unwrap();
        assert_eq!(pl.instances.len(), 2);
        assert!(pl.instances.iter().all(|i| i.mask28.count() == 784 && i.mask14.count() == 196));
    }

    #[test]
    fn refiltering_is_identity() {
        let r = vec![raw(0.9, 0.8), raw(0.75, 0.6), raw(0.2, 0.9)];
        let pl = filter_pseudo(4, &r, 0.7, 0.5).unwrap();
        assert_eq!(filter_pseudo(4, &pl.to_raw(), 0.7, 0.5).unwrap(), pl);
    }

    #[test]
    fn pasting_puts_higher_score_on_top() {
        let mut lo = raw(0.5, 1.0);
        lo.detection.bbox = [0.0, 0.0, 8.0, 8.0];
        let mut hi = raw(0.9, 1.0);
        hi.detection.bbox = [4.0, 4.0, 12.0, 12.0];
        let map = paste_instances(16, 16, &[hi, lo], 0.5);
        assert_eq!(map.get(5, 5), 2);
        assert_eq!(map.get(1, 1), 1);
        assert_eq!(map.get(13, 13), 0);
        assert_eq!(map.instance_mask(2).count(), 64);
        assert_eq!(map.instance_mask(1).count(), 48);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let img = RgbImage::filled(8, 8, [0.5; 3]);
        let pl = PseudoLabel {
            image_id: 1,
            instances: vec![],
            t_box: 0.7,
            t_pix: 0.5,
        };
        let labeled = vec![(1, img.clone(), InstanceLabelMap::new(8, 8))];
        assert!(matches!(
            assemble_student_set(labeled, vec![(img, pl)]),
            Err(Error::DuplicateImage(_))
        ));
    }
}
