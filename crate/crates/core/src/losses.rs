//! Training objectives: pixel BCE, anchor detection loss, InfoNCE over
//! cosine similarities, the four-term cross-RoI combination, and the teacher
//! and student composites.
//!
//! Each differentiable loss has a `*_grad` form returning the value together
//! with gradients of the inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BinaryMask, WeightMap};
use crate::model::detection::{encode, iou, AnchorGrid, BoxXyxy, DetOutput};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.w1, self.w2, self.w3].iter().all(|w| w.is_finite() && *w >= 0.0);
        if !ok || !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

pub fn teacher_loss<T: Scalar>(seg: T, det: T) -> T {
    seg + det
}

pub fn student_loss<T: Scalar>(det: T, nmh: T, lrd: T, cl: T, w: &LossWeights) -> T {
    det + T::lit(w.w1) * nmh + T::lit(w.w2) * lrd + T::lit(w.w3) * cl
}

// ---------------------------------------------------------------- seg_loss

pub fn seg_loss<T: Scalar>(logits: &Grid<T>, target: &BinaryMask, weights: Option<&WeightMap<T>>) -> Result<T> {
    seg_loss_grad(logits, target, weights).map(|(l, _)| l)
}

/// Weighted mean binary cross-entropy on `sigmoid(logits)` and its gradient
/// with respect to the logits.
pub fn seg_loss_grad<T: Scalar>(
    logits: &Grid<T>,
    target: &BinaryMask,
    weights: Option<&WeightMap<T>>,
) -> Result<(T, Grid<T>)> {
    let (h, w) = (logits.height, logits.width);
    if target.shape() != (h, w) {
        return Err(Error::Shape(format!("seg_loss: logits {h}x{w}, target {:?}", target.shape())));
    }
    if let Some(wm) = weights {
        if (wm.height, wm.width) != (h, w) {
            return Err(Error::Shape(format!("seg_loss: logits {h}x{w}, weights {}x{}", wm.height, wm.width)));
        }
    }
    let n = T::of_usize(h * w);
    let mut total = T::zero();
    let mut grad = Grid::zeros(h, w);
    for (i, (&x, &y)) in logits.data.iter().zip(target.as_slice()).enumerate() {
        let wt = weights.map_or(T::one(), |wm| wm.values[i]);
        let y = if y { T::one() } else { T::zero() };
        // BCE(sigmoid(x), y) = softplus(x) - y x
        total += wt * (softplus(x) - y * x);
        grad.data[i] = wt * (sigmoid(x) - y) / n;
    }
    Ok((total / n, grad))
}

// ---------------------------------------------------------------- det_loss

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU-based anchor assignment. Besides every anchor with IoU >= 0.5, the
/// best-overlapping anchor of each target is positive so that small targets
/// always receive supervision.
pub fn match_anchors(anchors: &AnchorGrid, targets: &[BoxXyxy]) -> Vec<AnchorLabel> {
    let n = anchors.len();
    let mut best = vec![(0.0f64, usize::MAX); n];
    let mut best_for_target = vec![(0.0f64, usize::MAX); targets.len()];
    for a in 0..n {
        let ab = anchors.anchor(a);
        for (t, tb) in targets.iter().enumerate() {
            let v = iou(&ab, tb);
            if v > best[a].0 {
                best[a] = (v, t);
            }
            if v > best_for_target[t].0 {
                best_for_target[t] = (v, a);
            }
        }
    }
    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|&(v, t)| {
            if v >= POSITIVE_IOU {
                AnchorLabel::Positive(t)
            } else if v < NEGATIVE_IOU {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for (t, &(v, a)) in best_for_target.iter().enumerate() {
        if v > 0.0 {
            labels[a] = AnchorLabel::Positive(t);
        }
    }
    labels
}

#[inline]
fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetLoss<T> {
    pub cls: T,
    pub reg: T,
    pub total: T,
    pub grad: DetOutput<T>,
}

pub fn det_loss<T: Scalar>(pred: &DetOutput<T>, anchors: &AnchorGrid, targets: &[BoxXyxy]) -> Result<T> {
    det_loss_grad(pred, anchors, targets).map(|l| l.total)
}

/// `cls + reg`: `cls` is the mean BCE over positive anchors plus the mean BCE
/// over negative anchors; `reg` is the smooth-L1 (beta 1) offset error summed
/// over the four coordinates and averaged over positives.
pub fn det_loss_grad<T: Scalar>(pred: &DetOutput<T>, anchors: &AnchorGrid, targets: &[BoxXyxy]) -> Result<DetLoss<T>> {
    if pred.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "det_loss: {} predictions for {} anchors",
            pred.len(),
            anchors.len()
        )));
    }
    let labels = match_anchors(anchors, targets);
    let n_pos = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count();
    let n_neg = labels.iter().filter(|l| **l == AnchorLabel::Negative).count();
    let mut grad = DetOutput::zeros(pred.len());
    let (mut cls_pos, mut cls_neg, mut reg) = (T::zero(), T::zero(), 0.0f64);
    let inv_pos = if n_pos > 0 { T::one() / T::of_usize(n_pos) } else { T::zero() };
    let inv_neg = if n_neg > 0 { T::one() / T::of_usize(n_neg) } else { T::zero() };
    for (a, label) in labels.iter().enumerate() {
        let x = pred.logits[a];
        match *label {
            AnchorLabel::Positive(t) => {
                cls_pos += softplus(x) - x;
                grad.logits[a] = (sigmoid(x) - T::one()) * inv_pos;
                let target = encode(&anchors.anchor(a), &targets[t]);
                for k in 0..4 {
                    let (v, g) = smooth_l1(pred.offsets[a][k].as_f64() - target[k]);
                    reg += v;
                    grad.offsets[a][k] = T::lit(g) * inv_pos;
                }
            }
            AnchorLabel::Negative => {
                cls_neg += softplus(x);
                grad.logits[a] = sigmoid(x) * inv_neg;
            }
            AnchorLabel::Ignore => {}
        }
    }
    let cls = cls_pos * inv_pos + cls_neg * inv_neg;
    let reg = T::lit(reg) * inv_pos;
    Ok(DetLoss {
        cls,
        reg,
        total: cls + reg,
        grad,
    })
}

// ---------------------------------------------------------------- cl_term

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn checked_norm<T: Scalar>(v: &[T]) -> Result<T> {
    let n = dot(v, v).sqrt();
    if n > T::zero() && n.is_finite() {
        Ok(n)
    } else {
        Err(Error::ZeroNorm)
    }
}

/// Gradients of one contrastive term.
#[derive(Clone, Debug, PartialEq)]
pub struct ClGrad<T> {
    pub loss: T,
    pub dq: Vec<T>,
    pub dpos: Vec<Vec<T>>,
    pub dneg: Vec<Vec<T>>,
}

/// Cosine similarity with cached norms; `acc_cos_grad` pushes `g * dcos` into both arguments.
struct Unit<'a, T> {
    v: &'a [T],
    norm: T,
}

impl<'a, T: Scalar> Unit<'a, T> {
    fn new(v: &'a [T]) -> Result<Self> {
        Ok(Self { v, norm: checked_norm(v)? })
    }
}

fn cosine<T: Scalar>(a: &Unit<T>, b: &Unit<T>) -> T {
    dot(a.v, b.v) / (a.norm * b.norm)
}

fn acc_cos_grad<T: Scalar>(g: T, cos: T, a: &Unit<T>, b: &Unit<T>, da: &mut [T], db: &mut [T]) {
    // d cos / d a = b / (|a||b|) - cos * a / |a|^2
    let ab = a.norm * b.norm;
    let aa = a.norm * a.norm;
    let bb = b.norm * b.norm;
    for k in 0..a.v.len() {
        da[k] += g * (b.v[k] / ab - cos * a.v[k] / aa);
        db[k] += g * (a.v[k] / ab - cos * b.v[k] / bb);
    }
}

pub fn cl_term<T: Scalar>(q: &[T], positives: &[Vec<T>], negatives: &[Vec<T>], tau: T) -> Result<T> {
    cl_term_grad(q, positives, negatives, tau).map(|g| g.loss)
}

/// Mean over positives `k+` of
/// `-log(exp(cos(q,k+)/tau) / (exp(cos(q,k+)/tau) + sum_i exp(cos(q,k-_i)/tau)))`.
pub fn cl_term_grad<T: Scalar>(q: &[T], positives: &[Vec<T>], negatives: &[Vec<T>], tau: T) -> Result<ClGrad<T>> {
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    let dim = q.len();
    if positives.iter().chain(negatives).any(|k| k.len() != dim) {
        return Err(Error::Shape(format!("cl_term: vectors must all have dimension {dim}")));
    }
    if !(tau > T::zero()) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let qu = Unit::new(q)?;
    let pu = positives.iter().map(|k| Unit::new(k)).collect::<Result<Vec<_>>>()?;
    let nu = negatives.iter().map(|k| Unit::new(k)).collect::<Result<Vec<_>>>()?;
    let mut out = ClGrad {
        loss: T::zero(),
        dq: vec![T::zero(); dim],
        dpos: vec![vec![T::zero(); dim]; positives.len()],
        dneg: vec![vec![T::zero(); dim]; negatives.len()],
    };
    if negatives.is_empty() {
        return Ok(out);
    }
    let neg_cos: Vec<T> = nu.iter().map(|k| cosine(&qu, k)).collect();
    let neg_s: Vec<T> = neg_cos.iter().map(|&c| c / tau).collect();
    let m = neg_s.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = neg_s.iter().map(|&s| (s - m).exp()).sum();
    let lse = m + sum.ln();
    let softmax: Vec<T> = neg_s.iter().map(|&s| (s - lse).exp()).collect();
    let inv_p = T::one() / T::of_usize(positives.len());
    // total weight flowing into the negatives' log-sum-exp
    let mut neg_weight = T::zero();
    for (i, k) in pu.iter().enumerate() {
        let c = cosine(&qu, k);
        let z = lse - c / tau;
        out.loss += softplus(z);
        let sz = sigmoid(z) * inv_p;
        neg_weight += sz;
        let g = -sz / tau;
        let (dq, dk) = (&mut out.dq, &mut out.dpos[i]);
        acc_cos_grad(g, c, &qu, k, dq, dk);
    }
    out.loss *= inv_p;
    for (i, k) in nu.iter().enumerate() {
        let g = neg_weight * softmax[i] / tau;
        acc_cos_grad(g, neg_cos[i], &qu, k, &mut out.dq, &mut out.dneg[i]);
    }
    Ok(out)
}

// ---------------------------------------------------------------- crc_loss

/// Key sets pooled across both RoIs of a pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CrcKeys<T> {
    pub back: Vec<Vec<T>>,
    pub out: Vec<Vec<T>>,
    pub fore: Vec<Vec<T>>,
    pub inn: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrcGrad<T> {
    pub loss: T,
    /// Number of the four terms that were evaluated.
    pub terms: usize,
    pub dq_b: Vec<T>,
    pub dq_f: Vec<T>,
    pub dkeys: CrcKeys<T>,
}

pub fn crc_loss<T: Scalar>(q_b: &[T], q_f: &[T], keys: &CrcKeys<T>, tau: T) -> Result<T> {
    crc_loss_grad(q_b, q_f, keys, tau, false).map(|g| g.loss)
}

/// `CL(q_b, back, fore) + CL(q_b, out, inn) + CL(q_f, fore, back) + CL(q_f, inn, out)`.
///
/// With `skip_empty`, terms whose positive set is empty are left out instead
/// of failing.
pub fn crc_loss_grad<T: Scalar>(
    q_b: &[T],
    q_f: &[T],
    keys: &CrcKeys<T>,
    tau: T,
    skip_empty: bool,
) -> Result<CrcGrad<T>> {
    let dim = q_b.len();
    let zeros = |v: &Vec<Vec<T>>| vec![vec![T::zero(); dim]; v.len()];
    let mut out = CrcGrad {
        loss: T::zero(),
        terms: 0,
        dq_b: vec![T::zero(); dim],
        dq_f: vec![T::zero(); dim],
        dkeys: CrcKeys {
            back: zeros(&keys.back),
            out: zeros(&keys.out),
            fore: zeros(&keys.fore),
            inn: zeros(&keys.inn),
        },
    };
    #[derive(Clone, Copy)]
    enum Set {
        Back,
        Out,
        Fore,
        Inn,
    }
    let get = |s: Set| match s {
        Set::Back => &keys.back,
        Set::Out => &keys.out,
        Set::Fore => &keys.fore,
        Set::Inn => &keys.inn,
    };
    let plan = [
        (true, Set::Back, Set::Fore),
        (true, Set::Out, Set::Inn),
        (false, Set::Fore, Set::Back),
        (false, Set::Inn, Set::Out),
    ];
    for (is_b, pos, neg) in plan {
        let q = if is_b { q_b } else { q_f };
        if skip_empty && get(pos).is_empty() {
            continue;
        }
        let g = cl_term_grad(q, get(pos), get(neg), tau)?;
        out.loss += g.loss;
        out.terms += 1;
        let dq = if is_b { &mut out.dq_b } else { &mut out.dq_f };
        add_into(dq, &g.dq);
        for (s, d) in [(pos, &g.dpos), (neg, &g.dneg)] {
            let dst = match s {
                Set::Back => &mut out.dkeys.back,
                Set::Out => &mut out.dkeys.out,
                Set::Fore => &mut out.dkeys.fore,
                Set::Inn => &mut out.dkeys.inn,
            };
            for (a, b) in dst.iter_mut().zip(d) {
                add_into(a, b);
            }
        }
    }
    Ok(out)
}

fn add_into<T: Scalar>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn seg_loss_examples() {
        let target = BinaryMask::from_ascii(&["#.", ".."]);
        let sat = Grid::from_vec(2, 2, vec![20.0, -20.0, -20.0, -20.0]);
        assert!(seg_loss(&sat, &target, None).unwrap() < 1e-8);
        let zero = Grid::<f64>::zeros(2, 2);
        assert!((seg_loss(&zero, &target, None).unwrap() - LN2).abs() < 1e-15);
        let w = WeightMap {
            height: 2,
            width: 2,
            values: vec![0.2, 1.0, 1.0, 1.0],
        };
        let l = seg_loss(&zero, &target, Some(&w)).unwrap();
        assert!((l - 0.8 * LN2).abs() < 1e-15);
        assert!(seg_loss(&Grid::<f64>::zeros(3, 2), &target, None).is_err());
    }

    #[test]
    fn det_loss_examples() {
        let anchors = AnchorGrid::new(4, 4, 4, &[8.0]);
        let mut pred = DetOutput::<f64>::zeros(16);
        pred.logits.fill(-20.0);
        assert!(det_loss(&pred, &anchors, &[]).unwrap() < 1e-8);

        // target equal to anchor 5: one positive, everything else negative
        let gt = anchors.anchor(5);
        let labels = match_anchors(&anchors, &[gt]);
        assert_eq!(labels[5], AnchorLabel::Positive(0));
        assert_eq!(labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count(), 1);
        let l = det_loss_grad(&pred, &anchors, &[gt]).unwrap();
        assert_eq!(l.reg, 0.0);
        pred.offsets[5] = [0.5; 4];
        let l = det_loss_grad(&pred, &anchors, &[gt]).unwrap();
        assert!((l.reg - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cl_term_closed_forms() {
        let q = e(0, 3);
        assert_eq!(cl_term(&q, &[e(0, 3)], &[], 1.0).unwrap(), 0.0);
        let neg = vec![-1.0, 0.0, 0.0];
        let v = cl_term(&q, &[e(0, 3)], &[neg], 1.0).unwrap();
        assert!((v - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        let v = cl_term(&q, &[e(1, 3)], &[e(2, 3)], 1.0).unwrap();
        assert!((v - LN2).abs() < 1e-12);
    }

    #[test]
    fn cl_term_errors() {
        let q = e(0, 2);
        assert!(matches!(cl_term(&q, &[], &[e(1, 2)], 1.0), Err(Error::EmptyPositives)));
        assert!(matches!(cl_term(&q, &[vec![0.0, 0.0]], &[], 1.0), Err(Error::ZeroNorm)));
    }

    #[test]
    fn crc_loss_closed_forms() {
        let (u, v) = (e(0, 4), e(1, 4));
        let keys = CrcKeys {
            back: vec![u.clone()],
            out: vec![u.clone()],
            fore: vec![v.clone()],
            inn: vec![v.clone()],
        };
        let l = crc_loss(&u, &v, &keys, 1.0).unwrap();
        assert!((l - 4.0 * (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);

        // identical keys everywhere: each term is log(1 + N)
        let n = 3;
        let w = vec![0.3, -0.2, 0.5, 0.1];
        let same = CrcKeys {
            back: vec![w.clone(); n],
            out: vec![w.clone(); n],
            fore: vec![w.clone(); n],
            inn: vec![w.clone(); n],
        };
        let l = crc_loss(&u, &v, &same, 0.1).unwrap();
        assert!((l - 4.0 * ((1 + n) as f64).ln()).abs() < 1e-10);
    }

    #[test]
    fn composites() {
        let w = LossWeights::default();
        assert_eq!(teacher_loss(0.3, 0.2), 0.5);
        assert_eq!(student_loss(1.0, 1.0, 1.0, 1.0, &w), 4.0);
        let w = LossWeights {
            w1: 2.0,
            w2: 0.0,
            w3: 1.0,
            tau: 0.1,
        };
        assert!((student_loss(0.5, 0.2, 0.1, 0.3, &w) - 1.2f64).abs() < 1e-15);
    }
}
