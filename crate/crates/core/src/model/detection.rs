//! Anchor grid, box coding and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::scalar::{sigmoid, Scalar};
use crate::tensor::FeatureMap;

/// `(x1, y1, x2, y2)` in image pixels.
pub type BoxXyxy = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoxXyxy,
    pub score: f64,
}

pub fn box_area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn clip_box(b: &BoxXyxy, height: usize, width: usize) -> BoxXyxy {
    [
        b[0].clamp(0.0, width as f64),
        b[1].clamp(0.0, height as f64),
        b[2].clamp(0.0, width as f64),
        b[3].clamp(0.0, height as f64),
    ]
}

/// Greedy NMS: detections sorted by descending score (ties keep input order);
/// a box is suppressed when its IoU with a kept box exceeds `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64, top_k: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() == top_k {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// One square anchor per scale centred on every feature cell.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub feat_h: usize,
    pub feat_w: usize,
    pub stride: usize,
    pub scales: Vec<f64>,
}

impl AnchorGrid {
    pub fn new(feat_h: usize, feat_w: usize, stride: usize, scales: &[f64]) -> Self {
        Self {
            feat_h,
            feat_w,
            stride,
            scales: scales.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.feat_h * self.feat_w * self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len()
    }

    /// Anchor index `((row * feat_w) + col) * per_cell + scale`.
    pub fn anchor(&self, index: usize) -> BoxXyxy {
        let a = index % self.per_cell();
        let cell = index / self.per_cell();
        let (row, col) = (cell / self.feat_w, cell % self.feat_w);
        let s = self.stride as f64;
        let cx = (col as f64 + 0.5) * s;
        let cy = (row as f64 + 0.5) * s;
        let half = self.scales[a] / 2.0;
        [cx - half, cy - half, cx + half, cy + half]
    }
}

/// Largest log-scale offset accepted when decoding.
pub const MAX_LOG_SCALE: f64 = 4.135;

/// Regression target of `gt` relative to `anchor`: `(dx, dy, dw, dh)`.
pub fn encode(anchor: &BoxXyxy, gt: &BoxXyxy) -> [f64; 4] {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let (gw, gh) = (gt[2] - gt[0], gt[3] - gt[1]);
    let (gx, gy) = (gt[0] + gw / 2.0, gt[1] + gh / 2.0);
    [(gx - ax) / aw, (gy - ay) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

pub fn decode(anchor: &BoxXyxy, t: [f64; 4]) -> BoxXyxy {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (ax, ay) = (anchor[0] + aw / 2.0, anchor[1] + ah / 2.0);
    let cx = ax + t[0] * aw;
    let cy = ay + t[1] * ah;
    let w = aw * t[2].min(MAX_LOG_SCALE).exp();
    let h = ah * t[3].min(MAX_LOG_SCALE).exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

/// Raw per-anchor detection head output.
#[derive(Clone, Debug, PartialEq)]
pub struct DetOutput<T> {
    pub logits: Vec<T>,
    pub offsets: Vec<[T; 4]>,
}

impl<T: Scalar> DetOutput<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            logits: vec![T::zero(); n],
            offsets: vec![[T::zero(); 4]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Unpacks a head map with `per_cell * 5` channels laid out as
    /// `[logit, dx, dy, dw, dh]` per anchor.
    pub fn from_head_map(map: &FeatureMap<T>, per_cell: usize) -> Self {
        assert_eq!(map.channels, per_cell * 5, "detection head channels");
        let cells = map.plane();
        let mut out = Self::zeros(cells * per_cell);
        for cell in 0..cells {
            for a in 0..per_cell {
                let i = cell * per_cell + a;
                out.logits[i] = map.data[(a * 5) * cells + cell];
                for k in 0..4 {
                    out.offsets[i][k] = map.data[(a * 5 + 1 + k) * cells + cell];
                }
            }
        }
        out
    }

    /// Inverse of [`DetOutput::from_head_map`], used for gradients.
    pub fn to_head_map(&self, per_cell: usize, h: usize, w: usize) -> FeatureMap<T> {
        let cells = h * w;
        let mut map = FeatureMap::zeros(per_cell * 5, h, w);
        for cell in 0..cells {
            for a in 0..per_cell {
                let i = cell * per_cell + a;
                map.data[(a * 5) * cells + cell] = self.logits[i];
                for k in 0..4 {
                    map.data[(a * 5 + 1 + k) * cells + cell] = self.offsets[i][k];
                }
            }
        }
        map
    }

    pub fn scores(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l).as_f64()).collect()
    }
}

/// Post-processing knobs for turning raw head output into detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub score_floor: f64,
    pub pre_nms: usize,
    pub nms_iou: f64,
    pub top_k: usize,
    pub min_size: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            score_floor: 0.05,
            pre_nms: 1000,
            nms_iou: 0.5,
            top_k: 100,
            min_size: 4.0,
        }
    }
}

pub fn postprocess<T: Scalar>(
    raw: &DetOutput<T>,
    anchors: &AnchorGrid,
    image_hw: (usize, usize),
    params: &DetectParams,
) -> Vec<Detection> {
    let scores = raw.scores();
    let mut order: Vec<usize> = (0..raw.len()).filter(|&i| scores[i] >= params.score_floor).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(params.pre_nms);
    let candidates = order
        .into_iter()
        .filter_map(|i| {
            let t = raw.offsets[i].map(|v| v.as_f64());
            let b = clip_box(&decode(&anchors.anchor(i), t), image_hw.0, image_hw.1);
            let ok = b[2] - b[0] >= params.min_size && b[3] - b[1] >= params.min_size;
            ok.then_some(Detection {
                bbox: b,
                score: scores[i],
            })
        })
        .collect();
    nms(candidates, params.nms_iou, params.top_k)
}
