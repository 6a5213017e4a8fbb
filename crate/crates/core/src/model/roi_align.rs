//! Bilinear RoI alignment onto a fixed `14 x 14` grid.
//!
//! Feature cell `k` covers image pixels `[k*stride, (k+1)*stride)`; its value
//! sits at the cell centre. Each output bin takes one bilinear sample at its
//! centre, so a box aligned to 14 feature cells reproduces an exact crop.

use crate::error::{Error, Result};
use crate::model::detection::{BoxXyxy, Detection};
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

pub const ROI_SIZE: usize = 14;

/// Aligned per-RoI features, `channels x 14 x 14`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeature<T> {
    pub values: FeatureMap<T>,
    pub roi_id: usize,
    pub source_box: Detection,
}

/// Separable bilinear taps along one axis: `(lo, hi, w_lo, w_hi)` per bin.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisPlan(Vec<(usize, usize, f64, f64)>);

impl AxisPlan {
    fn new(lo: f64, hi: f64, stride: f64, len: usize, bins: usize) -> Self {
        let step = (hi - lo) / bins as f64;
        AxisPlan(
            (0..bins)
                .map(|b| {
                    let centre = lo + (b as f64 + 0.5) * step;
                    let f = (centre / stride - 0.5).clamp(0.0, (len - 1) as f64);
                    let i0 = f.floor() as usize;
                    let i1 = (i0 + 1).min(len - 1);
                    let t = f - i0 as f64;
                    (i0, i1, 1.0 - t, t)
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiPlan {
    rows: AxisPlan,
    cols: AxisPlan,
}

pub fn roi_plan(feat_h: usize, feat_w: usize, stride: usize, bbox: &BoxXyxy) -> Result<RoiPlan> {
    let s = stride as f64;
    let (w, h) = ((bbox[2] - bbox[0]) / s, (bbox[3] - bbox[1]) / s);
    if !(w > 0.0 && h > 0.0 && w * h >= 1.0) || bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateBox(*bbox));
    }
    Ok(RoiPlan {
        rows: AxisPlan::new(bbox[1], bbox[3], s, feat_h, ROI_SIZE),
        cols: AxisPlan::new(bbox[0], bbox[2], s, feat_w, ROI_SIZE),
    })
}

pub fn roi_align_with<T: Scalar>(features: &FeatureMap<T>, plan: &RoiPlan) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(features.channels, ROI_SIZE, ROI_SIZE);
    for c in 0..features.channels {
        for (oy, &(r0, r1, wr0, wr1)) in plan.rows.0.iter().enumerate() {
            for (ox, &(c0, c1, wc0, wc1)) in plan.cols.0.iter().enumerate() {
                let v = features.get(c, r0, c0) * T::lit(wr0 * wc0)
                    + features.get(c, r0, c1) * T::lit(wr0 * wc1)
                    + features.get(c, r1, c0) * T::lit(wr1 * wc0)
                    + features.get(c, r1, c1) * T::lit(wr1 * wc1);
                out.set(c, oy, ox, v);
            }
        }
    }
    out
}

/// Scatters the gradient of an aligned RoI back onto the feature map.
pub fn roi_align_backward<T: Scalar>(grad_features: &mut FeatureMap<T>, plan: &RoiPlan, dout: &FeatureMap<T>) {
    for c in 0..grad_features.channels {
        for (oy, &(r0, r1, wr0, wr1)) in plan.rows.0.iter().enumerate() {
            for (ox, &(c0, c1, wc0, wc1)) in plan.cols.0.iter().enumerate() {
                let g = dout.get(c, oy, ox);
                if g == T::zero() {
                    continue;
                }
                for (r, wr) in [(r0, wr0), (r1, wr1)] {
                    for (cc, wc) in [(c0, wc0), (c1, wc1)] {
                        let i = grad_features.idx(c, r, cc);
                        grad_features.data[i] += g * T::lit(wr * wc);
                    }
                }
            }
        }
    }
}

pub fn roi_align<T: Scalar>(
    features: &FeatureMap<T>,
    stride: usize,
    det: &Detection,
    roi_id: usize,
) -> Result<RoiFeature<T>> {
    let plan = roi_plan(features.height, features.width, stride, &det.bbox)?;
    Ok(RoiFeature {
        values: roi_align_with(features, &plan),
        roi_id,
        source_box: *det,
    })
}
