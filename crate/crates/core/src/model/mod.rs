//! Compact RoI-based instance segmentation network.
//!
//! A four-layer stride-4 backbone feeds a single-level anchor detection head
//! and three parallel per-RoI heads operating on `14 x 14` aligned features:
//! the high-resolution naive mask head (28x28 logits), the low-resolution
//! denoising head (14x14 logits) and the contrastive embedding head.
//!
//! Every sub-network exposes a `*_forward` returning a cache and a matching
//! `*_backward` that accumulates parameter gradients and returns the gradient
//! with respect to its input.

pub mod checkpoint;
pub mod detection;
pub mod layers;
pub mod roi_align;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::RgbImage;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Grid};

use self::detection::{postprocess, AnchorGrid, DetOutput, DetectParams, Detection};
use self::layers::{relu_backward, relu_inplace, Conv2d, ConvCache, Deconv2x2, DeconvCache, Param};
use self::roi_align::{RoiFeature, ROI_SIZE};

/// Backbone output stride in pixels.
pub const STRIDE: usize = 4;
/// Side of the naive mask head output.
pub const MASK_SIZE: usize = 2 * ROI_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Widths of the two stride-2 stem convolutions.
    pub stem: [usize; 2],
    /// Backbone output channels (RoI feature channels).
    pub channels: usize,
    pub det_hidden: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
    pub anchor_scales: Vec<f64>,
    pub detect: DetectParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem: [16, 32],
            channels: 64,
            det_hidden: 32,
            head_hidden: 32,
            embed_dim: 32,
            anchor_scales: vec![10.0, 18.0],
            detect: DetectParams::default(),
        }
    }
}

/// Conv layers applied in sequence, each optionally followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<T> {
    pub layers: Vec<(Conv2d<T>, bool)>,
}

pub struct StackCache<T> {
    caches: Vec<ConvCache<T>>,
    outputs: Vec<FeatureMap<T>>,
}

impl<T: Scalar> ConvStack<T> {
    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, StackCache<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur: Option<FeatureMap<T>> = None;
        for (conv, relu) in &self.layers {
            let (mut y, cache) = conv.forward(cur.as_ref().unwrap_or(x));
            if *relu {
                relu_inplace(&mut y);
            }
            caches.push(cache);
            if let Some(prev) = cur.replace(y.clone()) {
                outputs.push(prev);
            }
        }
        let y = cur.expect("non-empty stack");
        outputs.push(y.clone());
        (y, StackCache { caches, outputs })
    }

    pub fn backward(&mut self, cache: &StackCache<T>, dy: &FeatureMap<T>, need_dx: bool) -> Option<FeatureMap<T>> {
        let mut grad = dy.clone();
        for i in (0..self.layers.len()).rev() {
            let (conv, relu) = &mut self.layers[i];
            if *relu {
                relu_backward(&cache.outputs[i], &mut grad);
            }
            match conv.backward(&cache.caches[i], &grad, i > 0 || need_dx) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|(c, _)| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|(c, _)| c.params_mut()).collect()
    }
}

/// Naive high-resolution mask head: two 3x3 convs, 2x transposed-conv
/// upsampling, 1x1 predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct NaiveMaskHead<T> {
    pub trunk: ConvStack<T>,
    pub up: Deconv2x2<T>,
    pub predictor: Conv2d<T>,
}

pub struct NaiveMaskCache<T> {
    trunk: StackCache<T>,
    up: DeconvCache<T>,
    up_out: FeatureMap<T>,
    pred: ConvCache<T>,
}

/// Low-resolution denoising head: two 3x3 convs and a 1x1 predictor at the
/// native RoI resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LowResHead<T> {
    pub stack: ConvStack<T>,
}

/// 1x1 projection followed by per-pixel L2 normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedHead<T> {
    pub proj: Conv2d<T>,
}

pub struct EmbedCache<T> {
    proj: ConvCache<T>,
    norms: Vec<T>,
    unit: EmbeddingGrid<T>,
}

/// Unit-norm pixel embeddings stored pixel-major: `data[(r*w + c)*dim + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid<T> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> EmbeddingGrid<T> {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![T::zero(); height * width * dim],
        }
    }

    #[inline]
    pub fn vector(&self, r: usize, c: usize) -> &[T] {
        let i = (r * self.width + c) * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    pub fn vector_mut(&mut self, r: usize, c: usize) -> &mut [T] {
        let i = (r * self.width + c) * self.dim;
        &mut self.data[i..i + self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction<T> {
    /// 28x28 logits from the naive head.
    pub high_res: Grid<T>,
    /// 14x14 logits from the low-resolution head.
    pub low_res: Grid<T>,
}

/// Norm floor for embedding normalisation.
const EMBED_EPS: f64 = 1e-12;

#[derive(Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub backbone: ConvStack<T>,
    pub det: ConvStack<T>,
    pub nmh: NaiveMaskHead<T>,
    pub lrd: LowResHead<T>,
    pub embed: EmbedHead<T>,
    backbone_calls: AtomicUsize,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            backbone: self.backbone.clone(),
            det: self.det.clone(),
            nmh: self.nmh.clone(),
            lrd: self.lrd.clone(),
            embed: self.embed.clone(),
            backbone_calls: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let c = config.channels;
        let [s1, s2] = config.stem;
        let hh = config.head_hidden;
        let backbone = ConvStack {
            layers: vec![
                (Conv2d::new("backbone.conv1", 3, s1, 3, 2, 1, r), true),
                (Conv2d::new("backbone.conv2", s1, s2, 3, 2, 1, r), true),
                (Conv2d::new("backbone.conv3", s2, c, 3, 1, 1, r), true),
                (Conv2d::new("backbone.conv4", c, c, 3, 1, 1, r), true),
            ],
        };
        let per_cell = config.anchor_scales.len();
        let det = ConvStack {
            layers: vec![
                (Conv2d::new("det.conv", c, config.det_hidden, 3, 1, 1, r), true),
                (
                    Conv2d::with_std("det.pred", config.det_hidden, per_cell * 5, 1, 1, 0, 0.01, r),
                    false,
                ),
            ],
        };
        let nmh = NaiveMaskHead {
            trunk: ConvStack {
                layers: vec![
                    (Conv2d::new("nmh.conv1", c, hh, 3, 1, 1, r), true),
                    (Conv2d::new("nmh.conv2", hh, hh, 3, 1, 1, r), true),
                ],
            },
            up: Deconv2x2::new("nmh.up", hh, hh, r),
            predictor: Conv2d::with_std("nmh.pred", hh, 1, 1, 1, 0, 0.01, r),
        };
        let lrd = LowResHead {
            stack: ConvStack {
                layers: vec![
                    (Conv2d::new("lrd.conv1", c, hh, 3, 1, 1, r), true),
                    (Conv2d::new("lrd.conv2", hh, hh, 3, 1, 1, r), true),
                    (Conv2d::with_std("lrd.pred", hh, 1, 1, 1, 0, 0.01, r), false),
                ],
            },
        };
        let embed = EmbedHead {
            proj: Conv2d::with_std("embed.proj", c, config.embed_dim, 1, 1, 0, (1.0 / c as f64).sqrt(), r),
        };
        Self {
            config,
            backbone,
            det,
            nmh,
            lrd,
            embed,
            backbone_calls: AtomicUsize::new(0),
        }
    }

    pub fn anchors(&self, feat_h: usize, feat_w: usize) -> AnchorGrid {
        AnchorGrid::new(feat_h, feat_w, STRIDE, &self.config.anchor_scales)
    }

    /// Number of backbone forward passes since construction.
    pub fn backbone_calls(&self) -> usize {
        self.backbone_calls.load(Ordering::Relaxed)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.backbone.params();
        v.extend(self.det.params());
        v.extend(self.nmh.trunk.params());
        v.extend(self.nmh.up.params());
        v.extend(self.nmh.predictor.params());
        v.extend(self.lrd.stack.params());
        v.extend(self.embed.proj.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.backbone.params_mut();
        v.extend(self.det.params_mut());
        v.extend(self.nmh.trunk.params_mut());
        v.extend(self.nmh.up.params_mut());
        v.extend(self.nmh.predictor.params_mut());
        v.extend(self.lrd.stack.params_mut());
        v.extend(self.embed.proj.params_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Sets every parameter of the mask heads to zero.
    pub fn zero_mask_heads(&mut self) {
        for p in self.params_mut() {
            if p.name.starts_with("nmh.") || p.name.starts_with("lrd.") {
                p.value.fill(T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.config.clone(), 0);
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, &s) in dst.value.iter_mut().zip(&src.value) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }

    // ---- backbone ----

    pub fn backbone_forward(&self, input: &FeatureMap<T>) -> Result<(FeatureMap<T>, StackCache<T>)> {
        if input.height % STRIDE != 0 || input.width % STRIDE != 0 || input.channels != 3 {
            return Err(Error::Shape(format!(
                "backbone input must be 3 x H x W with H, W divisible by {STRIDE}; got {:?}",
                input.shape()
            )));
        }
        self.backbone_calls.fetch_add(1, Ordering::Relaxed);
        Ok(self.backbone.forward(input))
    }

    pub fn backbone_backward(
        &mut self,
        cache: &StackCache<T>,
        dfeat: &FeatureMap<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        self.backbone.backward(cache, dfeat, need_input_grad)
    }

    pub fn forward_backbone(&self, image: &RgbImage) -> Result<FeatureMap<T>> {
        Ok(self.backbone_forward(&image_to_input(image))?.0)
    }

    // ---- detection ----

    pub fn det_forward(&self, features: &FeatureMap<T>) -> (DetOutput<T>, StackCache<T>) {
        let (map, cache) = self.det.forward(features);
        (DetOutput::from_head_map(&map, self.config.anchor_scales.len()), cache)
    }

    pub fn det_backward(&mut self, cache: &StackCache<T>, grad: &DetOutput<T>, feat_hw: (usize, usize)) -> FeatureMap<T> {
        let map = grad.to_head_map(self.config.anchor_scales.len(), feat_hw.0, feat_hw.1);
        self.det.backward(cache, &map, true).expect("input gradient requested")
    }

    pub fn raw_detect(&self, features: &FeatureMap<T>) -> DetOutput<T> {
        self.det_forward(features).0
    }

    pub fn detect(&self, features: &FeatureMap<T>, image_hw: (usize, usize)) -> Vec<Detection> {
        let raw = self.raw_detect(features);
        let anchors = self.anchors(features.height, features.width);
        postprocess(&raw, &anchors, image_hw, &self.config.detect)
    }

    pub fn roi_align(&self, features: &FeatureMap<T>, det: &Detection, roi_id: usize) -> Result<RoiFeature<T>> {
        roi_align::roi_align(features, STRIDE, det, roi_id)
    }

    // ---- naive mask head ----

    pub fn nmh_forward(&self, roi: &FeatureMap<T>) -> (Grid<T>, NaiveMaskCache<T>) {
        let (t, trunk) = self.nmh.trunk.forward(roi);
        let (mut u, up) = self.nmh.up.forward(&t);
        relu_inplace(&mut u);
        let (y, pred) = self.nmh.predictor.forward(&u);
        let grid = Grid::from_vec(y.height, y.width, y.data);
        (
            grid,
            NaiveMaskCache {
                trunk,
                up,
                up_out: u,
                pred,
            },
        )
    }

    pub fn nmh_backward(&mut self, cache: &NaiveMaskCache<T>, dlogits: &Grid<T>) -> FeatureMap<T> {
        let dy = FeatureMap::from_vec(1, dlogits.height, dlogits.width, dlogits.data.clone());
        let mut du = self.nmh.predictor.backward(&cache.pred, &dy, true).expect("dx");
        relu_backward(&cache.up_out, &mut du);
        let dt = self.nmh.up.backward(&cache.up, &du, true).expect("dx");
        self.nmh.trunk.backward(&cache.trunk, &dt, true).expect("dx")
    }

    // ---- low-resolution head ----

    pub fn lrd_forward(&self, roi: &FeatureMap<T>) -> (Grid<T>, StackCache<T>) {
        let (y, cache) = self.lrd.stack.forward(roi);
        (Grid::from_vec(y.height, y.width, y.data), cache)
    }

    pub fn lrd_backward(&mut self, cache: &StackCache<T>, dlogits: &Grid<T>) -> FeatureMap<T> {
        let dy = FeatureMap::from_vec(1, dlogits.height, dlogits.width, dlogits.data.clone());
        self.lrd.stack.backward(cache, &dy, true).expect("dx")
    }

    pub fn mask_heads(&self, roi: &RoiFeature<T>) -> MaskPrediction<T> {
        MaskPrediction {
            high_res: self.nmh_forward(&roi.values).0,
            low_res: self.lrd_forward(&roi.values).0,
        }
    }

    // ---- embedding head ----

    pub fn embed_forward(&self, roi: &FeatureMap<T>) -> (EmbeddingGrid<T>, EmbedCache<T>) {
        let (z, proj) = self.embed.proj.forward(roi);
        let (d, h, w) = z.shape();
        let plane = h * w;
        let mut unit = EmbeddingGrid::zeros(h, w, d);
        let mut norms = Vec::with_capacity(plane);
        let eps = T::lit(EMBED_EPS);
        for p in 0..plane {
            let mut ss = T::zero();
            for k in 0..d {
                let v = z.data[k * plane + p];
                ss += v * v;
            }
            let n = ss.sqrt().max(eps);
            norms.push(n);
            for k in 0..d {
                unit.data[p * d + k] = z.data[k * plane + p] / n;
            }
        }
        let cache = EmbedCache {
            proj,
            norms,
            unit: unit.clone(),
        };
        (unit, cache)
    }

    pub fn embed_backward(&mut self, cache: &EmbedCache<T>, dunit: &EmbeddingGrid<T>) -> FeatureMap<T> {
        let (h, w, d) = (dunit.height, dunit.width, dunit.dim);
        let plane = h * w;
        let mut dz = FeatureMap::zeros(d, h, w);
        for p in 0..plane {
            let u = &cache.unit.data[p * d..(p + 1) * d];
            let g = &dunit.data[p * d..(p + 1) * d];
            let dot: T = u.iter().zip(g).map(|(&a, &b)| a * b).sum();
            let n = cache.norms[p];
            for k in 0..d {
                dz.data[k * plane + p] = (g[k] - u[k] * dot) / n;
            }
        }
        self.embed.proj.backward(&cache.proj, &dz, true).expect("dx")
    }

    pub fn embed_head(&self, roi: &RoiFeature<T>) -> EmbeddingGrid<T> {
        self.embed_forward(&roi.values).0
    }
}

/// Normalises an 8-bit-range RGB image into backbone input.
pub fn image_to_input<T: Scalar>(image: &RgbImage) -> FeatureMap<T> {
    let (h, w) = (image.height, image.width);
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = T::lit(((image.data[p * 3 + ch] - 0.7) * 5.0) as f64);
        }
    }
    FeatureMap::from_vec(3, h, w, data)
}
