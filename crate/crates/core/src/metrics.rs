//! Dice, Aggregated Jaccard Index and Panoptic Quality over instance maps.
//!
//! All matching decisions compare integer pixel counts exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::InstanceLabelMap;
use crate::error::{Error, Result};

/// Pixel-overlap statistics between two instance maps.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapTable {
    pub pred_ids: Vec<u32>,
    pub gt_ids: Vec<u32>,
    pub pred_area: Vec<u64>,
    pub gt_area: Vec<u64>,
    /// `inter[p * gt_ids.len() + g]`
    pub inter: Vec<u64>,
}

impl OverlapTable {
    pub fn new(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let index = |m: &InstanceLabelMap| -> BTreeMap<u32, usize> {
            let mut ids: Vec<u32> = m.data.iter().copied().filter(|&v| v != 0).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
        };
        let (pi, gi) = (index(pred), index(gt));
        let (np, ng) = (pi.len(), gi.len());
        let mut t = OverlapTable {
            pred_ids: pi.keys().copied().collect(),
            gt_ids: gi.keys().copied().collect(),
            pred_area: vec![0; np],
            gt_area: vec![0; ng],
            inter: vec![0; np * ng],
        };
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            let pk = (p != 0).then(|| pi[&p]);
            let gk = (g != 0).then(|| gi[&g]);
            if let Some(pk) = pk {
                t.pred_area[pk] += 1;
            }
            if let Some(gk) = gk {
                t.gt_area[gk] += 1;
            }
            if let (Some(pk), Some(gk)) = (pk, gk) {
                t.inter[pk * ng + gk] += 1;
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn intersection(&self, p: usize, g: usize) -> u64 {
        self.inter[p * self.gt_ids.len() + g]
    }

    #[inline]
    pub fn union(&self, p: usize, g: usize) -> u64 {
        self.pred_area[p] + self.gt_area[g] - self.intersection(p, g)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Sum of IoU over matched pairs.
    pub iou_sum: f64,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }

    /// `(pq, sq, rq)` in percent; no instances on either side gives 100s.
    pub fn scores(&self) -> (f64, f64, f64) {
        if self.tp + self.fp + self.fn_ == 0 {
            return (100.0, 100.0, 100.0);
        }
        if self.tp == 0 {
            return (0.0, 0.0, 0.0);
        }
        let sq = 100.0 * self.iou_sum / self.tp as f64;
        let rq = 100.0 * self.tp as f64 / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64);
        (sq * rq / 100.0, sq, rq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub aji: f64,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn dice(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape("dice: map shapes differ".into()));
    }
    let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += (a != 0) as u64;
        g += (b != 0) as u64;
        both += (a != 0 && b != 0) as u64;
    }
    Ok(if p + g == 0 {
        100.0
    } else {
        100.0 * 2.0 * both as f64 / (p + g) as f64
    })
}

/// `true` when pair `a = (inter, union)` is a strictly better match than `b`:
/// higher IoU, then larger intersection, then smaller union.
fn better(a: (u64, u64), b: (u64, u64)) -> bool {
    let lhs = a.0 as u128 * b.1 as u128;
    let rhs = b.0 as u128 * a.1 as u128;
    lhs > rhs || (lhs == rhs && (a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)))
}

pub fn aji(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<f64> {
    Ok(aji_from_table(&OverlapTable::new(pred, gt)?))
}

/// Greedy AJI: each ground-truth instance takes its best-IoU prediction
/// (predictions may be reused); predictions never chosen add their area to
/// the union.
pub fn aji_from_table(t: &OverlapTable) -> f64 {
    let (np, ng) = (t.pred_ids.len(), t.gt_ids.len());
    if np == 0 && ng == 0 {
        return 100.0;
    }
    let (mut c, mut u) = (0u64, 0u64);
    let mut used = vec![false; np];
    for g in 0..ng {
        let mut best: Option<(usize, (u64, u64))> = None;
        for p in 0..np {
            let i = t.intersection(p, g);
            if i == 0 {
                continue;
            }
            let cand = (i, t.union(p, g));
            if best.is_none_or(|(_, b)| better(cand, b)) {
                best = Some((p, cand));
            }
        }
        match best {
            Some((p, (i, un))) => {
                c += i;
                u += un;
                used[p] = true;
            }
            None => u += t.gt_area[g],
        }
    }
    u += (0..np).filter(|&p| !used[p]).map(|p| t.pred_area[p]).sum::<u64>();
    100.0 * c as f64 / u as f64
}

pub fn pq_stats(t: &OverlapTable) -> PqStats {
    let (np, ng) = (t.pred_ids.len(), t.gt_ids.len());
    let mut s = PqStats::default();
    for p in 0..np {
        for g in 0..ng {
            let (i, u) = (t.intersection(p, g), t.union(p, g));
            // IoU > 0.5  <=>  2 * inter > union
            if 2 * i > u {
                s.tp += 1;
                s.iou_sum += i as f64 / u as f64;
            }
        }
    }
    s.fp = np - s.tp;
    s.fn_ = ng - s.tp;
    s
}

/// `(pq, sq, rq, tp, fp, fn)`
pub fn pq(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<(f64, f64, f64, usize, usize, usize)> {
    let s = pq_stats(&OverlapTable::new(pred, gt)?);
    let (pq, sq, rq) = s.scores();
    Ok((pq, sq, rq, s.tp, s.fp, s.fn_))
}

/// Per-image scores ready for aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub aji: f64,
    pub pq: PqStats,
}

pub fn image_metrics(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<ImageMetrics> {
    let t = OverlapTable::new(pred, gt)?;
    Ok(ImageMetrics {
        dice: dice(pred, gt)?,
        aji: aji_from_table(&t),
        pq: pq_stats(&t),
    })
}

/// Dice and AJI are averaged over images; PQ pools match counts and IoU
/// sums over the whole set so that `pq = sq * rq / 100` holds exactly.
pub fn aggregate(images: &[ImageMetrics]) -> MetricsReport {
    let n = images.len().max(1) as f64;
    let mut pooled = PqStats::default();
    for m in images {
        pooled.merge(&m.pq);
    }
    let (pq, sq, rq) = pooled.scores();
    let mean = |f: fn(&ImageMetrics) -> f64| {
        if images.is_empty() {
            100.0
        } else {
            images.iter().map(f).sum::<f64>() / n
        }
    };
    MetricsReport {
        dice: mean(|m| m.dice),
        aji: mean(|m| m.aji),
        pq,
        sq,
        rq,
        tp: pooled.tp,
        fp: pooled.fp,
        fn_: pooled.fn_,
    }
}

/// Markdown table with one row per labelled report.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("| Method | Dice | AJI | PQ |\n|---|---:|---:|---:|\n");
    for (name, r) in rows {
        s.push_str(&format!("| {name} | {:.2} | {:.2} | {:.2} |\n", r.dice, r.aji, r.pq));
    }
    s
}
