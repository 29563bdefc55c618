//! Single-channel feature maps built from multi-channel block outputs.
//!
//! Every pixel looks at the nine channel vectors of its zero-padded 3x3
//! neighbourhood, forms their covariance `B` (mean-subtracted, divisor 9) and
//! reports how dominant the leading eigenvalue is relative to the trace.
//! The dense path uses the row-sum bound
//!
//! ```text
//! (max_m Σ_n B[m][n] + min_m Σ_n B[m][n]) / (2 · trace B)
//! ```
//!
//! whose row sums reduce to `(1/9) Σ_k d_k[m] · Σ_n d_k[n]` for centered
//! vectors `d_k`, so a pixel costs O(9·C) instead of O(9·C²). The exact
//! eigenvalue ratio is kept as an oracle.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Traces at or below this are treated as flat patches.
pub const TRACE_EPS: f64 = 1e-8;

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Covariance of the nine channel vectors around one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCovariance {
    pub matrix: DMatrix<f64>,
}

impl LocalCovariance {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::Shape(format!(
                "covariance must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn channels(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.matrix.row_iter().map(|r| r.sum()).collect()
    }
}

/// Neighbourhood vectors of pixel `(i, j)` (row, column); outside taps are
/// zero vectors.
fn patch_vectors<T: Real>(data: &[T], h: usize, w: usize, c: usize, i: usize, j: usize, out: &mut [T]) {
    for (k, (dy, dx)) in TAPS.iter().enumerate() {
        let y = i as isize + dy;
        let x = j as isize + dx;
        let dst = &mut out[k * c..(k + 1) * c];
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            let base = (y as usize * w + x as usize) * c;
            dst.copy_from_slice(&data[base..base + c]);
        } else {
            dst.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

fn center<T: Real>(vectors: &mut [T], c: usize, mean: &mut [T]) {
    mean.iter_mut().for_each(|m| *m = T::zero());
    for k in 0..9 {
        for n in 0..c {
            mean[n] += vectors[k * c + n];
        }
    }
    let ninth = T::c(1.0 / 9.0);
    mean.iter_mut().for_each(|m| *m *= ninth);
    for k in 0..9 {
        for n in 0..c {
            vectors[k * c + n] -= mean[n];
        }
    }
}

pub fn patch_covariance<T: Real>(block: &Tensor<T>, i: usize, j: usize) -> Result<LocalCovariance> {
    let (h, w, c) = block.hwc()?;
    if i >= h || j >= w {
        return Err(Error::Shape(format!("pixel ({i}, {j}) outside {h}x{w}")));
    }
    let mut v = vec![T::zero(); 9 * c];
    let mut mean = vec![T::zero(); c];
    patch_vectors(block.data(), h, w, c, i, j, &mut v);
    center(&mut v, c, &mut mean);
    let mut m = DMatrix::<f64>::zeros(c, c);
    for k in 0..9 {
        for a in 0..c {
            for b in 0..c {
                m[(a, b)] += v[k * c + a].as_f64() * v[k * c + b].as_f64();
            }
        }
    }
    LocalCovariance::new(m / 9.0)
}

/// `λ_max / trace`, via a symmetric eigen-decomposition.
pub fn eigen_ratio_exact(cov: &LocalCovariance) -> f64 {
    let trace = cov.trace();
    if trace <= TRACE_EPS {
        return 1.0 / cov.channels() as f64;
    }
    let eig = SymmetricEigen::new(cov.matrix.clone());
    let lmax = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    lmax / trace
}

/// Row-sum bound on `λ_max / trace`.
pub fn eigen_ratio_bound(cov: &LocalCovariance) -> f64 {
    let trace = cov.trace();
    if trace <= TRACE_EPS {
        return 1.0 / cov.channels() as f64;
    }
    let sums = cov.row_sums();
    let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
    (max + min) / (2.0 * trace)
}

/// Index of the first maximum and first minimum.
#[inline]
fn arg_extremes<T: Real>(values: &[T]) -> (usize, usize) {
    let (mut amax, mut amin) = (0, 0);
    for (m, &v) in values.iter().enumerate().skip(1) {
        if v > values[amax] {
            amax = m;
        }
        if v < values[amin] {
            amin = m;
        }
    }
    (amax, amin)
}

/// Per-pixel scratch buffers.
struct Scratch<T> {
    d: Vec<T>,
    mean: Vec<T>,
    s: [T; 9],
    rows: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(c: usize) -> Self {
        Self {
            d: vec![T::zero(); 9 * c],
            mean: vec![T::zero(); c],
            s: [T::zero(); 9],
            rows: vec![T::zero(); c],
        }
    }

    /// Loads and centers pixel `(i, j)`; returns the trace.
    fn load(&mut self, data: &[T], h: usize, w: usize, c: usize, i: usize, j: usize) -> T {
        patch_vectors(data, h, w, c, i, j, &mut self.d);
        center(&mut self.d, c, &mut self.mean);
        let ninth = T::c(1.0 / 9.0);
        let mut trace = T::zero();
        self.rows.iter_mut().for_each(|r| *r = T::zero());
        for k in 0..9 {
            let dk = &self.d[k * c..(k + 1) * c];
            let mut sk = T::zero();
            for &v in dk {
                sk += v;
                trace += v * v;
            }
            self.s[k] = sk;
            for (r, &v) in self.rows.iter_mut().zip(dk) {
                *r += v * sk;
            }
        }
        self.rows.iter_mut().for_each(|r| *r *= ninth);
        trace * ninth
    }
}

/// Dense row-sum-bound feature map of an `[h, w, c]` block: `[h, w, 1]`.
pub(crate) fn dlkfm_forward<T: Real>(block: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = block.hwc()?;
    let fallback = T::c(1.0 / c as f64);
    let mut scratch = Scratch::new(c);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let trace = scratch.load(block.data(), h, w, c, i, j);
            if trace <= T::c(TRACE_EPS) {
                out.push(fallback);
                continue;
            }
            let (amax, amin) = arg_extremes(&scratch.rows);
            out.push((scratch.rows[amax] + scratch.rows[amin]) / (T::c(2.0) * trace));
        }
    }
    Tensor::new(vec![h, w, 1], out)
}

/// Accumulates `∂L/∂block` given `∂L/∂map`.
pub(crate) fn dlkfm_backward<T: Real>(block: &Tensor<T>, grad_out: &[T], grad_block: &mut [T]) -> Result<()> {
    let (h, w, c) = block.hwc()?;
    let mut scratch = Scratch::new(c);
    let mut gd = vec![T::zero(); 9 * c];
    let ninth = T::c(1.0 / 9.0);
    let two = T::c(2.0);
    for i in 0..h {
        for j in 0..w {
            let g = grad_out[i * w + j];
            if g == T::zero() {
                continue;
            }
            let trace = scratch.load(block.data(), h, w, c, i, j);
            if trace <= T::c(TRACE_EPS) {
                continue;
            }
            let (amax, amin) = arg_extremes(&scratch.rows);
            let value = (scratch.rows[amax] + scratch.rows[amin]) / (two * trace);
            // ∂value/∂rows[m] for m in {amax, amin}; both land on the same
            // row when c == 1.
            let w_row = g / (two * trace);
            let g_trace = -g * value / trace;
            let d = &scratch.d;
            for k in 0..9 {
                let dk = &d[k * c..(k + 1) * c];
                // Σ_m w_m d_k[m]
                let proj = w_row * (dk[amax] + dk[amin]);
                let sk = scratch.s[k];
                let gk = &mut gd[k * c..(k + 1) * c];
                for n in 0..c {
                    gk[n] = ninth * (proj + two * g_trace * dk[n]);
                }
                gk[amax] += ninth * w_row * sk;
                gk[amin] += ninth * w_row * sk;
            }
            // Undo centering: subtract the mean over taps.
            for n in 0..c {
                let mut m = T::zero();
                for k in 0..9 {
                    m += gd[k * c + n];
                }
                m *= ninth;
                for k in 0..9 {
                    gd[k * c + n] -= m;
                }
            }
            for (k, (dy, dx)) in TAPS.iter().enumerate() {
                let y = i as isize + dy;
                let x = j as isize + dx;
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    let base = (y as usize * w + x as usize) * c;
                    for n in 0..c {
                        grad_block[base + n] += gd[k * c + n];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Pyramid level of a feature map relative to the full-resolution image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scale {
    Full,
    Half,
    Quarter,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Full, Scale::Half, Scale::Quarter];

    pub fn factor(self) -> f64 {
        match self {
            Scale::Full => 1.0,
            Scale::Half => 0.5,
            Scale::Quarter => 0.25,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Scale::Full => 0,
            Scale::Half => 1,
            Scale::Quarter => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Full => "full",
            Scale::Half => "half",
            Scale::Quarter => "quarter",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor<f32>,
    pub scale: Scale,
}

impl FeatureMap {
    pub fn new(values: Tensor<f32>, scale: Scale) -> Result<Self> {
        let (_, _, c) = values.hwc()?;
        if c != 1 {
            return Err(Error::Shape(format!("feature map must have one channel, got {c}")));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { values, scale })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Min-max normalized 8-bit rendering.
    pub fn to_gray8(&self) -> image::GrayImage {
        let data = self.values.data();
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (h, w) = (self.height() as u32, self.width() as u32);
        image::GrayImage::from_fn(w, h, |x, y| {
            let v = (data[(y * w + x) as usize] - lo) / span;
            image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<()> {
        self.to_gray8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Feature maps of one image at full, half and quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [FeatureMap; 3],
}

impl FeaturePyramid {
    pub fn new(levels: [FeatureMap; 3]) -> Result<Self> {
        for (map, scale) in levels.iter().zip(Scale::ALL) {
            if map.scale != scale {
                return Err(Error::Shape(format!(
                    "pyramid level {} tagged {:?}",
                    scale.name(),
                    map.scale
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn level(&self, scale: Scale) -> &FeatureMap {
        &self.levels[scale.index()]
    }

    /// Raw-intensity pyramid of a single-channel image. Level pixel `y`
    /// corresponds to full-resolution pixel `2y`, matching the strided
    /// convolutions, and each level is a `[1, 2, 1]` binomial blur of the
    /// previous one sampled at even pixels.
    pub fn from_intensity(image: &Tensor<f32>) -> Result<Self> {
        let full = image.clone();
        let half = downsample(&full)?;
        let quarter = downsample(&half)?;
        Self::new([
            FeatureMap::new(full, Scale::Full)?,
            FeatureMap::new(half, Scale::Half)?,
            FeatureMap::new(quarter, Scale::Quarter)?,
        ])
    }
}

/// `[1, 2, 1] / 4` separable blur with replicated borders, then keep even
/// pixels.
pub fn downsample(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w, c) = image.hwc()?;
    if c != 1 {
        return Err(Error::Shape("downsample expects a single-channel image".into()));
    }
    let src = image.data();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[y * w + x]
    };
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let k = [0.25f32, 0.5, 0.25];
    Ok(Tensor::image(oh, ow, |oy, ox| {
        let (cy, cx) = (2 * oy as isize, 2 * ox as isize);
        let mut acc = 0.0;
        for (a, ka) in k.iter().enumerate() {
            for (b, kb) in k.iter().enumerate() {
                acc += ka * kb * at(cy + a as isize - 1, cx + b as isize - 1);
            }
        }
        acc
    }))
}
