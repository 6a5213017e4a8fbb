//! Mask geometry: contours, inner/outer contour bands, boundary weight maps
//! and majority downsampling.
//!
//! Pixels are addressed as `(row, col)`. All pixel lists are returned in
//! row-major order so downstream sampling is reproducible.

use crate::scalar::Scalar;

pub type Pixel = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn filled(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask buffer length");
        Self { height, width, data }
    }

    /// Parses rows of `#` (foreground) and `.` (background). Handy in tests.
    pub fn from_ascii(rows: &[&str]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        Self::from_fn(height, width, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn foreground(&self) -> Vec<Pixel> {
        self.pixels_where(true)
    }

    pub fn background(&self) -> Vec<Pixel> {
        self.pixels_where(false)
    }

    fn pixels_where(&self, value: bool) -> Vec<Pixel> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) == value {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// The four region sets around one instance contour, plus the contour itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourBands {
    /// Foreground pixels within `d` of the contour.
    pub p_inn: Vec<Pixel>,
    /// Background pixels within `d` of the contour.
    pub p_out: Vec<Pixel>,
    /// Foreground minus `p_inn`.
    pub p_fore_inn: Vec<Pixel>,
    /// Background minus `p_out`.
    pub p_back_out: Vec<Pixel>,
    pub contour: Vec<Pixel>,
    pub d: f64,
}

/// Per-pixel loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> WeightMap<T> {
    pub fn uniform(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.width + c]
    }
}

/// Foreground pixels with at least one background 4-neighbour. Foreground
/// pixels on the image border count as contour.
pub fn extract_contour(mask: &BinaryMask) -> Vec<Pixel> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let on_border = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
            if on_border
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1)
            {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest seed
/// pixel (Felzenszwalb–Huttenlocher lower envelope, rows then columns).
/// Returns `f64::INFINITY` everywhere when there are no seeds.
pub fn squared_distance_transform(height: usize, width: usize, seeds: &[Pixel]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; height * width];
    for &(r, c) in seeds {
        grid[r * width + c] = 0.0;
    }
    if seeds.is_empty() {
        return grid;
    }
    let n = height.max(width);
    let mut line = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut scratch = Envelope::with_capacity(n);
    for c in 0..width {
        for r in 0..height {
            line[r] = grid[r * width + c];
        }
        scratch.transform(&line[..height], &mut out[..height]);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        line[..width].copy_from_slice(&grid[r * width..(r + 1) * width]);
        scratch.transform(&line[..width], &mut out[..width]);
        grid[r * width..(r + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let mut sites = (0..n).filter(|&q| f[q].is_finite());
        let Some(first) = sites.next() else {
            out.fill(f64::INFINITY);
            return;
        };
        let parabola = |q: usize| f[q] + (q * q) as f64;
        let mut k = 0usize;
        self.v[0] = first;
        self.z[0] = f64::NEG_INFINITY;
        self.z[1] = f64::INFINITY;
        for q in sites {
            let mut s;
            loop {
                let p = self.v[k];
                s = (parabola(q) - parabola(p)) / (2.0 * (q as f64 - p as f64));
                if s <= self.z[k] {
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            self.v[k] = q;
            self.z[k] = s;
            self.z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let dq = q as f64 - p as f64;
            *o = dq * dq + f[p];
        }
    }
}

/// Splits foreground and background into contour bands of half-width `d`.
///
/// Membership uses the Euclidean distance to the nearest contour pixel,
/// `dist <= d`. `d == 0` produces empty bands.
pub fn compute_bands(mask: &BinaryMask, d: f64) -> ContourBands {
    assert!(d >= 0.0, "band distance must be non-negative");
    let (h, w) = mask.shape();
    let contour = extract_contour(mask);
    let dist2 = squared_distance_transform(h, w, &contour);
    let limit = d * d;
    let mut bands = ContourBands {
        p_inn: Vec::new(),
        p_out: Vec::new(),
        p_fore_inn: Vec::new(),
        p_back_out: Vec::new(),
        contour,
        d,
    };
    for r in 0..h {
        for c in 0..w {
            let near = d > 0.0 && dist2[r * w + c] <= limit;
            match (mask.get(r, c), near) {
                (true, true) => bands.p_inn.push((r, c)),
                (true, false) => bands.p_fore_inn.push((r, c)),
                (false, true) => bands.p_out.push((r, c)),
                (false, false) => bands.p_back_out.push((r, c)),
            }
        }
    }
    bands
}

/// Pixels within `band` of the contour (either side) get `w_boundary`, all
/// others `w_interior`.
pub fn boundary_weight_map<T: Scalar>(
    mask: &BinaryMask,
    band: f64,
    w_boundary: T,
    w_interior: T,
) -> WeightMap<T> {
    assert!(band >= 0.0, "band must be non-negative");
    assert!(
        T::zero() <= w_boundary && w_boundary <= w_interior,
        "weights must satisfy 0 <= w_boundary <= w_interior"
    );
    let (h, w) = mask.shape();
    let contour = extract_contour(mask);
    let dist2 = squared_distance_transform(h, w, &contour);
    let limit = band * band;
    WeightMap {
        height: h,
        width: w,
        values: dist2
            .iter()
            .map(|&d2| if d2 <= limit { w_boundary } else { w_interior })
            .collect(),
    }
}

/// Area-interpolation downsampling with a strict majority vote.
///
/// Output cell `(i, j)` covers the input rectangle
/// `[i*H/out_h, (i+1)*H/out_h) x [j*W/out_w, (j+1)*W/out_w)`, with partial
/// pixels weighted by their covered area. A cell is foreground iff its
/// foreground fraction is strictly above one half.
pub fn downsample_majority(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (h, w) = mask.shape();
    assert!(
        out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w,
        "downsample target {out_h}x{out_w} must fit in {h}x{w}"
    );
    let rows = overlap_table(h, out_h);
    let cols = overlap_table(w, out_w);
    let mut out = BinaryMask::new(out_h, out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let mut fg: u64 = 0;
            let mut total: u64 = 0;
            for &(r, wr) in &rows[i] {
                for &(c, wc) in &cols[j] {
                    let a = wr * wc;
                    total += a;
                    if mask.get(r, c) {
                        fg += a;
                    }
                }
            }
            out.set(i, j, 2 * fg > total);
        }
    }
    out
}

/// For each output index, the input indices it overlaps and the overlap
/// length in units of `1 / (n_in * n_out)` (exact integers).
fn overlap_table(n_in: usize, n_out: usize) -> Vec<Vec<(usize, u64)>> {
    (0..n_out)
        .map(|i| {
            // Output cell spans [i*n_in, (i+1)*n_in) on the common grid;
            // input pixel r spans [r*n_out, (r+1)*n_out).
            let lo = i * n_in;
            let hi = (i + 1) * n_in;
            let first = lo / n_out;
            let last = (hi - 1) / n_out;
            (first..=last)
                .map(|r| {
                    let a = lo.max(r * n_out);
                    let b = hi.min((r + 1) * n_out);
                    (r, (b - a) as u64)
                })
                .collect()
        })
        .collect()
}
