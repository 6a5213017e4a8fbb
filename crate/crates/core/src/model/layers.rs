//! Convolution layers with explicit forward caches and backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn normal(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in &mut p.value {
            *v = T::lit(dist.sample(rng));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Square-kernel 2-D convolution, lowered to im2col + GEMM.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<T> {
    cols: Option<Vec<T>>,
    input: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self::with_std(name, cin, cout, kernel, stride, pad, (2.0 / fan_in).sqrt(), rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![cout, cin, kernel, kernel], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![T::zero(); self.cin * k * k * p];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = x.idx(ci, iy as usize, 0);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * ow + ox] = x.data[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize) -> FeatureMap<T> {
        let k = self.kernel;
        let p = oh * ow;
        let mut dx = FeatureMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = dx.idx(ci, iy as usize, 0);
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx.data[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.cin, "{}: input channels", self.weight.name);
        let (oh, ow) = self.out_hw(x.height, x.width);
        let p = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let mut y = FeatureMap::zeros(self.cout, oh, ow);
        for (co, chunk) in y.data.chunks_mut(p).enumerate() {
            chunk.fill(self.bias.value[co]);
        }
        let cols = if self.is_pointwise() {
            None
        } else {
            Some(self.im2col(x, oh, ow))
        };
        let b: &[T] = cols.as_deref().unwrap_or(&x.data);
        T::gemm(
            self.cout,
            kk,
            p,
            T::one(),
            &self.weight.value,
            kk as isize,
            1,
            b,
            p as isize,
            1,
            T::one(),
            &mut y.data,
            p as isize,
            1,
        );
        let cache = ConvCache {
            cols: if self.is_pointwise() {
                Some(x.data.clone())
            } else {
                cols
            },
            input: x.shape(),
            out_hw: (oh, ow),
        };
        (y, cache)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let (oh, ow) = cache.out_hw;
        let p = oh * ow;
        let kk = self.cin * self.kernel * self.kernel;
        let cols = cache.cols.as_ref().expect("conv cache");
        for (co, chunk) in dy.data.chunks(p).enumerate() {
            let s: T = chunk.iter().copied().sum();
            self.bias.grad[co] += s;
        }
        // dW (cout x kk) += dy (cout x p) * cols^T (p x kk)
        T::gemm(
            self.cout,
            p,
            kk,
            T::one(),
            &dy.data,
            p as isize,
            1,
            cols,
            1,
            p as isize,
            T::one(),
            &mut self.weight.grad,
            kk as isize,
            1,
        );
        if !need_dx {
            return None;
        }
        // dcols (kk x p) = W^T (kk x cout) * dy (cout x p)
        let mut dcols = vec![T::zero(); kk * p];
        T::gemm(
            kk,
            self.cout,
            p,
            T::one(),
            &self.weight.value,
            1,
            kk as isize,
            &dy.data,
            p as isize,
            1,
            T::zero(),
            &mut dcols,
            p as isize,
            1,
        );
        let (c, h, w) = cache.input;
        if self.is_pointwise() {
            return Some(FeatureMap::from_vec(c, h, w, dcols));
        }
        Some(self.col2im(&dcols, h, w, oh, ow))
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv2x2<T> {
    /// Shape `[cin, cout, 2, 2]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
}

pub struct DeconvCache<T> {
    input: FeatureMap<T>,
}

impl<T: Scalar> Deconv2x2<T> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / cin as f64).sqrt();
        Self {
            weight: Param::normal(format!("{name}.weight"), vec![cin, cout, 2, 2], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![cout]),
            cin,
            cout,
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, DeconvCache<T>) {
        assert_eq!(x.channels, self.cin, "{}: input channels", self.weight.name);
        let (h, w) = (x.height, x.width);
        let p = h * w;
        let m = self.cout * 4;
        // z (cout*4 x p) = W^T (cout*4 x cin) * x (cin x p)
        let mut z = vec![T::zero(); m * p];
        T::gemm(
            m,
            self.cin,
            p,
            T::one(),
            &self.weight.value,
            1,
            m as isize,
            &x.data,
            p as isize,
            1,
            T::zero(),
            &mut z,
            p as isize,
            1,
        );
        let mut y = FeatureMap::zeros(self.cout, 2 * h, 2 * w);
        for co in 0..self.cout {
            let b = self.bias.value[co];
            for a in 0..2 {
                for bb in 0..2 {
                    let src = &z[(co * 4 + a * 2 + bb) * p..][..p];
                    for i in 0..h {
                        for j in 0..w {
                            let at = y.idx(co, 2 * i + a, 2 * j + bb);
                            y.data[at] = src[i * w + j] + b;
                        }
                    }
                }
            }
        }
        (y, DeconvCache { input: x.clone() })
    }

    pub fn backward(
        &mut self,
        cache: &DeconvCache<T>,
        dy: &FeatureMap<T>,
        need_dx: bool,
    ) -> Option<FeatureMap<T>> {
        let x = &cache.input;
        let (h, w) = (x.height, x.width);
        let p = h * w;
        let m = self.cout * 4;
        let mut dz = vec![T::zero(); m * p];
        for co in 0..self.cout {
            let mut bsum = T::zero();
            for a in 0..2 {
                for bb in 0..2 {
                    let dst = &mut dz[(co * 4 + a * 2 + bb) * p..][..p];
                    for i in 0..h {
                        for j in 0..w {
                            let g = dy.get(co, 2 * i + a, 2 * j + bb);
                            dst[i * w + j] = g;
                            bsum += g;
                        }
                    }
                }
            }
            self.bias.grad[co] += bsum;
        }
        // dW (cin x m) += x (cin x p) * dz^T (p x m)
        T::gemm(
            self.cin,
            p,
            m,
            T::one(),
            &x.data,
            p as isize,
            1,
            &dz,
            1,
            p as isize,
            T::one(),
            &mut self.weight.grad,
            m as isize,
            1,
        );
        if !need_dx {
            return None;
        }
        let mut dx = FeatureMap::zeros(self.cin, h, w);
        T::gemm(
            self.cin,
            m,
            p,
            T::one(),
            &self.weight.value,
            m as isize,
            1,
            &dz,
            p as isize,
            1,
            T::zero(),
            &mut dx.data,
            p as isize,
            1,
        );
        Some(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut FeatureMap<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by `y > 0`, where `y` is the ReLU output.
pub fn relu_backward<T: Scalar>(y: &FeatureMap<T>, dy: &mut FeatureMap<T>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}
