//! Synthetic nuclei scenes with exact instance masks, dataset splits and
//! overlapping patch cropping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Interleaved RGB image, values in `[0, 1]`, stored row-major `(row, col, channel)`.
///
/// Generated images are quantised to multiples of `1/255` so that an 8-bit
/// PNG round trip is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Self { height, width, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let src = (r * self.width + (self.width - 1 - c)) * 3;
                let dst = (r * self.width + c) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        let row = self.width * 3;
        for r in 0..self.height {
            let src = (self.height - 1 - r) * row;
            out.data[r * row..(r + 1) * row].copy_from_slice(&self.data[src..src + row]);
        }
        out
    }
}

/// Per-pixel instance ids; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InstanceLabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u32>) -> Self {
        assert_eq!(data.len(), height * width, "label buffer length");
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, id: u32) {
        self.data[r * self.width + c] = id;
    }

    pub fn max_id(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct nonzero ids.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask::from_vec(
            self.height,
            self.width,
            self.data.iter().map(|&v| v != 0).collect(),
        )
    }

    pub fn instance_mask(&self, id: u32) -> BinaryMask {
        BinaryMask::from_vec(
            self.height,
            self.width,
            self.data.iter().map(|&v| v == id).collect(),
        )
    }

    /// Tight pixel bounding box `(x1, y1, x2, y2)` (exclusive upper corner)
    /// of every id `1..=max_id`; `None` for ids without pixels.
    pub fn bounding_boxes(&self) -> Vec<Option<[usize; 4]>> {
        let n = self.max_id() as usize;
        let mut boxes: Vec<Option<[usize; 4]>> = vec![None; n];
        for r in 0..self.height {
            for c in 0..self.width {
                let id = self.get(r, c) as usize;
                if id == 0 {
                    continue;
                }
                let b = boxes[id - 1].get_or_insert([c, r, c + 1, r + 1]);
                b[0] = b[0].min(c);
                b[1] = b[1].min(r);
                b[2] = b[2].max(c + 1);
                b[3] = b[3].max(r + 1);
            }
        }
        boxes
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Self { height, width, data }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + c] = self.data[r * self.width + self.width - 1 - c];
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            let src = (self.height - 1 - r) * self.width;
            out.data[r * self.width..(r + 1) * self.width]
                .copy_from_slice(&self.data[src..src + self.width]);
        }
        out
    }

    /// Renumbers ids to `1..=K` in ascending order of the old ids. Returns the
    /// old id for each new id.
    pub fn relabel_consecutive(&mut self) -> Vec<u32> {
        let old = self.ids();
        let mut lut = vec![0u32; self.max_id() as usize + 1];
        for (i, &id) in old.iter().enumerate() {
            lut[id as usize] = i as u32 + 1;
        }
        for v in &mut self.data {
            *v = lut[*v as usize];
        }
        old
    }
}

/// One rendered nucleus. Coordinates are continuous pixels `(x, y)` with
/// pixel `(row, col)` centred at `(col + 0.5, row + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub rotation: f64,
    pub intensity: f64,
}

impl Nucleus {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let u = (dx * c + dy * s) / self.radii.0;
        let v = (-dx * s + dy * c) / self.radii.1;
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub labels: InstanceLabelMap,
    /// Entry `k` describes label id `k + 1`.
    pub nuclei: Vec<Nucleus>,
}

/// Rendering knobs for [`generate_scene_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneStyle {
    pub background: [f32; 3],
    /// Darkening of nuclei relative to the background, per channel scale.
    pub contrast: f32,
    pub tint: [f32; 3],
    pub major_radius: (f64, f64),
    pub aspect: (f64, f64),
    /// Minimum centre distance as a fraction of the summed major radii.
    pub separation: f64,
    pub attempts_per_nucleus: usize,
}

impl Default for SceneStyle {
    fn default() -> Self {
        Self {
            background: [0.86, 0.72, 0.80],
            contrast: 0.15,
            tint: [1.0, 1.15, 0.7],
            major_radius: (4.0, 9.0),
            aspect: (0.6, 1.0),
            separation: 0.9,
            attempts_per_nucleus: 200,
        }
    }
}

pub fn generate_scene(
    seed: u64,
    height: usize,
    width: usize,
    n_nuclei: usize,
    texture_noise: f64,
) -> Result<SyntheticScene> {
    generate_scene_with(&SceneStyle::default(), seed, height, width, n_nuclei, texture_noise)
}

pub fn generate_scene_with(
    style: &SceneStyle,
    seed: u64,
    height: usize,
    width: usize,
    n_nuclei: usize,
    texture_noise: f64,
) -> Result<SyntheticScene> {
    if height < 64 || width < 64 {
        return Err(Error::InvalidArgument(format!(
            "scene must be at least 64x64, got {height}x{width}"
        )));
    }
    if !(texture_noise >= 0.0) {
        return Err(Error::InvalidArgument("texture noise must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nuclei = place_nuclei(style, &mut rng, height, width, n_nuclei)?;

    let mut labels = InstanceLabelMap::new(height, width);
    for (k, n) in nuclei.iter().enumerate() {
        let reach = n.radii.0.max(n.radii.1);
        let r0 = (n.center.1 - reach).floor().max(0.0) as usize;
        let r1 = ((n.center.1 + reach).ceil() as usize).min(height);
        let c0 = (n.center.0 - reach).floor().max(0.0) as usize;
        let c1 = ((n.center.0 + reach).ceil() as usize).min(width);
        for r in r0..r1 {
            for c in c0..c1 {
                if n.contains(c as f64 + 0.5, r as f64 + 0.5) {
                    labels.set(r, c, k as u32 + 1);
                }
            }
        }
    }
    // Separation guarantees every nucleus keeps its centre pixel.
    debug_assert_eq!(labels.ids().len(), nuclei.len());

    let noise = Normal::new(0.0f64, texture_noise).expect("finite std-dev");
    let mut image = RgbImage::filled(height, width, style.background);
    for r in 0..height {
        for c in 0..width {
            let id = labels.get(r, c);
            let base = if id == 0 {
                style.background
            } else {
                let n = &nuclei[id as usize - 1];
                let depth = style.contrast * (0.75 + 0.5 * n.intensity as f32);
                let mut px = style.background;
                for ch in 0..3 {
                    px[ch] -= depth * style.tint[ch];
                }
                px
            };
            let i = (r * width + c) * 3;
            for ch in 0..3 {
                let jitter = if texture_noise > 0.0 {
                    noise.sample(&mut rng) as f32
                } else {
                    0.0
                };
                image.data[i + ch] = quantize(base[ch] + jitter);
            }
        }
    }
    Ok(SyntheticScene {
        image,
        labels,
        nuclei,
    })
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn place_nuclei(
    style: &SceneStyle,
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
    n: usize,
) -> Result<Vec<Nucleus>> {
    let budget = style.attempts_per_nucleus * n.max(1);
    let mut placed: Vec<Nucleus> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        if attempts == budget {
            return Err(Error::OverDense {
                requested: n,
                placed: placed.len(),
                attempts,
            });
        }
        attempts += 1;
        let major = rng.random_range(style.major_radius.0..=style.major_radius.1);
        let minor = major * rng.random_range(style.aspect.0..=style.aspect.1);
        let x = rng.random_range(major..width as f64 - major);
        let y = rng.random_range(major..height as f64 - major);
        let rotation = rng.random_range(0.0..std::f64::consts::PI);
        let intensity = rng.random_range(0.0..=1.0);
        let clear = placed.iter().all(|p| {
            let dx = p.center.0 - x;
            let dy = p.center.1 - y;
            (dx * dx + dy * dy).sqrt() >= style.separation * (p.radii.0 + major)
        });
        if clear {
            placed.push(Nucleus {
                center: (x, y),
                radii: (major, minor),
                rotation,
                intensity,
            });
        }
    }
    Ok(placed)
}

/// A cropped patch and its top-left corner `(row, col)` in the source scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: (usize, usize),
    pub scene: SyntheticScene,
}

/// Patch start offsets along one axis; the last patch is clamped to the border.
pub fn patch_starts(len: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let mut starts = vec![0];
    loop {
        let last = *starts.last().unwrap();
        if last + patch >= len {
            break;
        }
        starts.push((last + stride).min(len - patch));
    }
    starts
}

pub fn crop_patches(scene: &SyntheticScene, patch: usize, overlap: usize) -> Result<Vec<Patch>> {
    let (h, w) = (scene.labels.height, scene.labels.width);
    if patch == 0 || patch > h.min(w) || overlap >= patch {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} / overlap {overlap} invalid for {h}x{w} scene"
        )));
    }
    let rows = patch_starts(h, patch, overlap);
    let cols = patch_starts(w, patch, overlap);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &top in &rows {
        for &left in &cols {
            let mut labels = scene.labels.crop(top, left, patch, patch);
            let kept = labels.relabel_consecutive();
            let nuclei = kept
                .iter()
                .map(|&id| {
                    let mut n = scene.nuclei[id as usize - 1].clone();
                    n.center.0 -= left as f64;
                    n.center.1 -= top as f64;
                    n
                })
                .collect();
            out.push(Patch {
                origin: (top, left),
                scene: SyntheticScene {
                    image: scene.image.crop(top, left, patch, patch),
                    labels,
                    nuclei,
                },
            });
        }
    }
    Ok(out)
}

/// Fraction of the training pool that carries human labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRatio {
    #[serde(rename = "1/8")]
    Eighth,
    #[serde(rename = "1/4")]
    Quarter,
    #[serde(rename = "1/2")]
    Half,
}

impl LabelRatio {
    pub fn value(self) -> f64 {
        match self {
            LabelRatio::Eighth => 0.125,
            LabelRatio::Quarter => 0.25,
            LabelRatio::Half => 0.5,
        }
    }
}

impl std::str::FromStr for LabelRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/8" | "0.125" => Ok(LabelRatio::Eighth),
            "1/4" | "0.25" => Ok(LabelRatio::Quarter),
            "1/2" | "0.5" => Ok(LabelRatio::Half),
            other => Err(Error::InvalidArgument(format!(
                "label ratio must be one of 1/8, 1/4, 1/2; got {other}"
            ))),
        }
    }
}

impl std::fmt::Display for LabelRatio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelRatio::Eighth => "1/8",
            LabelRatio::Quarter => "1/4",
            LabelRatio::Half => "1/2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<u32>,
    pub unlabeled: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub ratio: LabelRatio,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn train(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.labeled.iter().chain(&self.unlabeled).copied().collect();
        t.sort_unstable();
        t
    }
}

/// 6:2:2 train/val/test, then the training pool split into labeled and
/// unlabeled with `round(train * ratio)` labeled scenes, clamped to
/// `[1, train - 1]`.
pub fn make_split(scene_ids: &[u32], ratio: LabelRatio, seed: u64) -> Result<DatasetSplit> {
    let n = scene_ids.len();
    if n < 8 {
        return Err(Error::InvalidArgument(format!(
            "need at least 8 scenes to split, got {n}"
        )));
    }
    let mut ids = scene_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != n {
        return Err(Error::InvalidArgument("scene ids must be unique".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_val = (n as f64 * 0.2).round() as usize;
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    let n_labeled = ((n_train as f64 * ratio.value()).round() as usize).clamp(1, n_train - 1);

    let sorted = |s: &[u32]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        val: sorted(&ids[..n_val]),
        test: sorted(&ids[n_val..n_val + n_test]),
        labeled: sorted(&ids[n_val + n_test..n_val + n_test + n_labeled]),
        unlabeled: sorted(&ids[n_val + n_test + n_labeled..]),
        ratio,
        seed,
    })
}
