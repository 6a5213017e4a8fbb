//! Cross-RoI boundary contrastive learning.
//!
//! For a pair of RoIs, pixel embeddings are sampled from the deep background,
//! outer band, deep foreground and inner band of each RoI mask (at 14x14
//! scale), pooled across the pair, summarised into a background and a
//! foreground query, and scored with the four-term contrastive loss.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compute_bands, BinaryMask, Pixel};
use crate::losses::{crc_loss_grad, CrcKeys};
use crate::model::roi_align::RoiFeature;
use crate::model::{EmbeddingGrid, Model};
use crate::scalar::Scalar;

/// Where a mask used for supervision came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Pseudo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrcParams {
    /// Band half-width in 14x14 cells.
    pub d: f64,
    /// Fraction of each region that is sampled.
    pub alpha: f64,
    pub tau: f64,
}

impl Default for CrcParams {
    fn default() -> Self {
        Self {
            d: 4.0,
            alpha: 0.7,
            tau: 0.1,
        }
    }
}

impl CrcParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidArgument(format!("d must be >= 0, got {}", self.d)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// `max(1, floor(alpha * len))` for a non-empty region, 0 otherwise.
pub fn sample_count(len: usize, alpha: f64) -> usize {
    if len == 0 {
        0
    } else {
        ((alpha * len as f64 + 1e-9).floor() as usize).clamp(1, len)
    }
}

fn pick(region: &[Pixel], alpha: f64, rng: &mut ChaCha8Rng) -> Vec<Pixel> {
    let k = sample_count(region.len(), alpha);
    index::sample(rng, region.len(), k).into_iter().map(|i| region[i]).collect()
}

/// Seeded uniform sampling without replacement from `region`.
pub fn sample_region<T: Scalar>(grid: &EmbeddingGrid<T>, region: &[Pixel], alpha: f64, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pick(region, alpha, &mut rng)
        .into_iter()
        .map(|(r, c)| grid.vector(r, c).to_vec())
        .collect()
}

/// Normalised arithmetic mean.
pub fn mean_direction<T: Scalar>(vectors: &[&[T]]) -> Result<Vec<T>> {
    let first = vectors.first().ok_or(Error::EmptySide("query"))?;
    let mut m = vec![T::zero(); first.len()];
    for v in vectors {
        for (a, &b) in m.iter_mut().zip(v.iter()) {
            *a += b;
        }
    }
    let n: T = m.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(n > T::zero()) {
        return Err(Error::ZeroNorm);
    }
    Ok(m.into_iter().map(|v| v / n).collect())
}

/// `(q_b, q_f)` from the pooled key sets: the background query averages
/// `back ∪ out`, the foreground query `fore ∪ inn`.
pub fn make_queries<T: Scalar>(keys: &CrcKeys<T>) -> Result<(Vec<T>, Vec<T>)> {
    let bg: Vec<&[T]> = keys.back.iter().chain(&keys.out).map(|v| v.as_slice()).collect();
    let fg: Vec<&[T]> = keys.fore.iter().chain(&keys.inn).map(|v| v.as_slice()).collect();
    if bg.is_empty() {
        return Err(Error::EmptySide("background"));
    }
    if fg.is_empty() {
        return Err(Error::EmptySide("foreground"));
    }
    Ok((mean_direction(&bg)?, mean_direction(&fg)?))
}

/// Seeded shuffle, then consecutive pairs; an odd leftover pairs with itself.
pub fn pair_rois(n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(2).map(|c| (c[0], *c.get(1).unwrap_or(&c[0]))).collect()
}

/// One side of a contrastive pair.
#[derive(Clone, Copy, Debug)]
pub struct CrcInput<'a, T> {
    pub roi_id: usize,
    pub embeddings: &'a EmbeddingGrid<T>,
    /// Supervision mask at embedding resolution.
    pub mask: &'a BinaryMask,
    pub provenance: Provenance,
}

/// Sampled pixel coordinates of the four regions of one RoI.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiSamples {
    pub back: Vec<Pixel>,
    pub out: Vec<Pixel>,
    pub fore: Vec<Pixel>,
    pub inn: Vec<Pixel>,
}

impl RoiSamples {
    fn draw(mask: &BinaryMask, roi_id: usize, p: &CrcParams, seed: u64) -> Self {
        let bands = compute_bands(mask, p.d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut region = |set: &[Pixel], k: u64| {
            rng.set_stream(((roi_id as u64) << 2) | k);
            rng.set_word_pos(0);
            pick(set, p.alpha, &mut rng)
        };
        Self {
            back: region(&bands.p_back_out, 0),
            out: region(&bands.p_out, 1),
            fore: region(&bands.p_fore_inn, 2),
            inn: region(&bands.p_inn, 3),
        }
    }
}

/// Sampled embeddings of a pair, pooled in canonical (ascending RoI id)
/// order, plus their queries.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T> {
    pub samples: [RoiSamples; 2],
    pub keys: CrcKeys<T>,
    pub q_b: Vec<T>,
    pub q_f: Vec<T>,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrcPairOutput<T> {
    pub loss: T,
    /// True when one side of the pair had no pixels; the loss is then 0.
    pub skipped: bool,
    /// Number of contrastive terms evaluated (terms with no positives are left out).
    pub terms: usize,
    /// `mean cos(q_f, k_fore) - mean cos(q_f, k_back)` when both sets are non-empty.
    pub margin: Option<f64>,
    pub provenance: [Provenance; 2],
    /// Embedding gradients for the inputs in the order they were passed. For a
    /// self-pair the whole gradient sits in the first slot.
    pub grads: Option<[EmbeddingGrid<T>; 2]>,
}

fn gather<T: Scalar>(grid: &EmbeddingGrid<T>, coords: &[Pixel]) -> Vec<Vec<T>> {
    coords.iter().map(|&(r, c)| grid.vector(r, c).to_vec()).collect()
}

fn mean_cos<T: Scalar>(q: &[T], keys: &[Vec<T>]) -> f64 {
    let s: f64 = keys
        .iter()
        .map(|k| {
            let d: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
            let n: T = k.iter().map(|&v| v * v).sum::<T>().sqrt();
            (d / n).as_f64()
        })
        .sum();
    s / keys.len() as f64
}

/// Backprop of `q = m / |m|`, `m = mean(v)`, into each pooled vector.
fn query_backward<T: Scalar>(q: &[T], dq: &[T], vectors: &[&[T]]) -> Vec<T> {
    let dim = q.len();
    let mut m = vec![T::zero(); dim];
    for v in vectors {
        for k in 0..dim {
            m[k] += v[k];
        }
    }
    let n = T::of_usize(vectors.len());
    let norm: T = m.iter().map(|&x| (x / n) * (x / n)).sum::<T>().sqrt();
    let qd: T = q.iter().zip(dq).map(|(&a, &b)| a * b).sum();
    (0..dim).map(|k| (dq[k] - q[k] * qd) / (norm * n)).collect()
}

impl<'a, T: Scalar> CrcInput<'a, T> {
    fn check(&self) -> Result<()> {
        if self.mask.shape() != (self.embeddings.height, self.embeddings.width) {
            return Err(Error::Shape(format!(
                "mask {:?} vs embedding grid {}x{}",
                self.mask.shape(),
                self.embeddings.height,
                self.embeddings.width
            )));
        }
        Ok(())
    }
}

/// Samples and pools a pair; `None` when the pooled foreground or background side is empty.
pub fn build_batch<T: Scalar>(
    a: &CrcInput<T>,
    b: &CrcInput<T>,
    p: &CrcParams,
    seed: u64,
) -> Result<Option<EmbeddingBatch<T>>> {
    p.validate()?;
    a.check()?;
    b.check()?;
    let (first, second) = if b.roi_id < a.roi_id { (b, a) } else { (a, b) };
    // a self-pair contributes its samples once: k^i ∪ k^i = k^i
    let samples = [
        RoiSamples::draw(first.mask, first.roi_id, p, seed),
        if a.roi_id == b.roi_id {
            RoiSamples::default()
        } else {
            RoiSamples::draw(second.mask, second.roi_id, p, seed)
        },
    ];
    let mut keys = CrcKeys::default();
    for (s, inp) in samples.iter().zip([first, second]) {
        keys.back.extend(gather(inp.embeddings, &s.back));
        keys.out.extend(gather(inp.embeddings, &s.out));
        keys.fore.extend(gather(inp.embeddings, &s.fore));
        keys.inn.extend(gather(inp.embeddings, &s.inn));
    }
    match make_queries(&keys) {
        Ok((q_b, q_f)) => Ok(Some(EmbeddingBatch {
            samples,
            keys,
            q_b,
            q_f,
            alpha: p.alpha,
            seed,
        })),
        Err(Error::EmptySide(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Loss (and optionally embedding gradients) for one RoI pair.
pub fn crc_pair<T: Scalar>(
    a: &CrcInput<T>,
    b: &CrcInput<T>,
    p: &CrcParams,
    seed: u64,
    want_grad: bool,
) -> Result<CrcPairOutput<T>> {
    let provenance = [a.provenance, b.provenance];
    let zero_grads = || {
        [a, b].map(|x| EmbeddingGrid::zeros(x.embeddings.height, x.embeddings.width, x.embeddings.dim))
    };
    let Some(batch) = build_batch(a, b, p, seed)? else {
        return Ok(CrcPairOutput {
            loss: T::zero(),
            skipped: true,
            terms: 0,
            margin: None,
            provenance,
            grads: want_grad.then(zero_grads),
        });
    };
    let g = crc_loss_grad(&batch.q_b, &batch.q_f, &batch.keys, T::lit(p.tau), true)?;
    let margin = (!batch.keys.fore.is_empty() && !batch.keys.back.is_empty())
        .then(|| mean_cos(&batch.q_f, &batch.keys.fore) - mean_cos(&batch.q_f, &batch.keys.back));
    let grads = want_grad.then(|| {
        let keys = &batch.keys;
        let mut dk = g.dkeys.clone();
        let bg: Vec<&[T]> = keys.back.iter().chain(&keys.out).map(|v| v.as_slice()).collect();
        let fg: Vec<&[T]> = keys.fore.iter().chain(&keys.inn).map(|v| v.as_slice()).collect();
        let gb = query_backward(&batch.q_b, &g.dq_b, &bg);
        let gf = query_backward(&batch.q_f, &g.dq_f, &fg);
        for v in dk.back.iter_mut().chain(dk.out.iter_mut()) {
            for (x, &y) in v.iter_mut().zip(&gb) {
                *x += y;
            }
        }
        for v in dk.fore.iter_mut().chain(dk.inn.iter_mut()) {
            for (x, &y) in v.iter_mut().zip(&gf) {
                *x += y;
            }
        }
        // scatter back in canonical order, then restore caller order
        let swapped = b.roi_id < a.roi_id;
        let mut out = zero_grads();
        let (ia, ib) = if swapped { (1, 0) } else { (0, 1) };
        let mut cursor = [0usize; 4];
        for (slot, s) in [ia, ib].into_iter().zip(&batch.samples) {
            let grid = &mut out[slot];
            for (set, (coords, grads)) in [
                (&s.back, &dk.back),
                (&s.out, &dk.out),
                (&s.fore, &dk.fore),
                (&s.inn, &dk.inn),
            ]
            .into_iter()
            .enumerate()
            {
                for &(r, c) in coords {
                    let gv = &grads[cursor[set]];
                    cursor[set] += 1;
                    for (x, &y) in grid.vector_mut(r, c).iter_mut().zip(gv) {
                        *x += y;
                    }
                }
            }
        }
        out
    });
    Ok(CrcPairOutput {
        loss: g.loss,
        skipped: false,
        terms: g.terms,
        margin,
        provenance,
        grads,
    })
}

/// One RoI with its supervision mask, ready for [`crc_step`].
#[derive(Clone, Debug)]
pub struct CrcRoi<T> {
    pub feature: RoiFeature<T>,
    pub mask14: BinaryMask,
    pub provenance: Provenance,
}

/// Embeds both RoIs with the model's embedding head and evaluates the pair loss.
pub fn crc_step<T: Scalar>(
    model: &Model<T>,
    roi_i: &CrcRoi<T>,
    roi_j: &CrcRoi<T>,
    p: &CrcParams,
    seed: u64,
) -> Result<CrcPairOutput<T>> {
    let ei = model.embed_head(&roi_i.feature);
    let ej = model.embed_head(&roi_j.feature);
    let a = CrcInput {
        roi_id: roi_i.feature.roi_id,
        embeddings: &ei,
        mask: &roi_i.mask14,
        provenance: roi_i.provenance,
    };
    let b = CrcInput {
        roi_id: roi_j.feature.roi_id,
        embeddings: &ej,
        mask: &roi_j.mask14,
        provenance: roi_j.provenance,
    };
    crc_pair(&a, &b, p, seed, false)
}
