//! Bilinear resampling of single-channel images under a homography.
//!
//! Taps that fall outside the source read as zero. A sample is *covered*
//! when its coordinates lie within `[0, w-1] x [0, h-1]`; uncovered samples
//! are excluded from both the training objective and the solver.

use crate::error::{Error, Result};
use crate::geometry::{HomographyParams, DENOMINATOR_EPS};
use crate::tensor::{Real, Tensor};

/// Source-frame coordinates `(u, v)` and perspective denominator of the
/// output pixel `(x, y)`.
#[inline]
pub(crate) fn project<T: Real>(h: &[T], x: T, y: T) -> Result<(T, T, T)> {
    let d = h[6] * x + h[7] * y + T::one();
    if d.is_nan() || d.abs() <= T::c(DENOMINATOR_EPS) {
        return Err(Error::Numeric(format!(
            "perspective denominator {:e} at output pixel ({}, {})",
            d.as_f64(),
            x.as_f64(),
            y.as_f64()
        )));
    }
    let u = (h[0] * x + h[1] * y + h[2]) / d;
    let v = (h[3] * x + h[4] * y + h[5]) / d;
    Ok((u, v, d))
}

/// Bilinear interpolation cell: top-left tap and fractional offsets.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell<T> {
    pub x0: isize,
    pub y0: isize,
    pub fx: T,
    pub fy: T,
}

impl<T: Real> Cell<T> {
    #[inline]
    pub fn new(u: T, v: T) -> Self {
        let xf = u.floor();
        let yf = v.floor();
        Cell {
            x0: xf.to_isize().unwrap_or(isize::MIN / 4),
            y0: yf.to_isize().unwrap_or(isize::MIN / 4),
            fx: u - xf,
            fy: v - yf,
        }
    }

    /// Tap values `(a, b, c, d)` at `(x0, y0)`, `(x0+1, y0)`, `(x0, y0+1)`,
    /// `(x0+1, y0+1)`; out-of-range taps read zero.
    #[inline]
    pub fn taps(&self, src: &[T], h: usize, w: usize) -> [T; 4] {
        let read = |x: isize, y: isize| {
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                src[y as usize * w + x as usize]
            } else {
                T::zero()
            }
        };
        [
            read(self.x0, self.y0),
            read(self.x0 + 1, self.y0),
            read(self.x0, self.y0 + 1),
            read(self.x0 + 1, self.y0 + 1),
        ]
    }

    #[inline]
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.fx) * (one - self.fy),
            self.fx * (one - self.fy),
            (one - self.fx) * self.fy,
            self.fx * self.fy,
        ]
    }

    #[inline]
    pub fn interpolate(&self, taps: &[T; 4]) -> T {
        let w = self.weights();
        w[0] * taps[0] + w[1] * taps[1] + w[2] * taps[2] + w[3] * taps[3]
    }

    /// `(∂/∂u, ∂/∂v)` of the interpolated value.
    #[inline]
    pub fn gradient(&self, taps: &[T; 4]) -> (T, T) {
        let one = T::one();
        let [a, b, c, d] = *taps;
        (
            (one - self.fy) * (b - a) + self.fy * (d - c),
            (one - self.fx) * (c - a) + self.fx * (d - b),
        )
    }
}

#[inline]
pub(crate) fn covered<T: Real>(u: T, v: T, h: usize, w: usize) -> bool {
    u >= T::zero() && v >= T::zero() && u <= T::c((w - 1) as f64) && v <= T::c((h - 1) as f64)
}

fn params_as<T: Real>(hom: &HomographyParams) -> [T; 8] {
    hom.p.map(T::c)
}

fn single_channel<T: Real>(src: &Tensor<T>) -> Result<(usize, usize)> {
    let (h, w, c) = src.hwc()?;
    if c != 1 {
        return Err(Error::Shape(format!("warp source must be single-channel, got {c} channels")));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("warp source is empty".into()));
    }
    Ok((h, w))
}

/// `out[y, x] = src(H · (x, y, 1))`, a plain (non-differentiable) warp.
pub fn warp_image<T: Real>(
    src: &Tensor<T>,
    hom: &HomographyParams,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (h, w) = single_channel(src)?;
    let p = params_as::<T>(hom);
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let (u, v, _) = project(&p, T::c(x as f64), T::c(y as f64))?;
            let cell = Cell::new(u, v);
            out.push(cell.interpolate(&cell.taps(src.data(), h, w)));
        }
    }
    Tensor::new(vec![out_h, out_w, 1], out)
}

/// Coverage of each output pixel (row-major) when sampling a
/// `src_h x src_w` source.
pub fn coverage_mask(
    hom: &HomographyParams,
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let (u, v, _) = project(&hom.p, x as f64, y as f64)?;
            mask.push(covered(u, v, src_h, src_w));
        }
    }
    Ok(mask)
}

/// Forward pass of the differentiable warp; `hom` holds the 8 parameters.
pub(crate) fn warp_forward<T: Real>(
    src: &Tensor<T>,
    hom: &[T],
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (h, w) = single_channel(src)?;
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        for x in 0..out_w {
            let (u, v, _) = project(hom, T::c(x as f64), T::c(y as f64))?;
            let cell = Cell::new(u, v);
            out.push(cell.interpolate(&cell.taps(src.data(), h, w)));
        }
    }
    Tensor::new(vec![out_h, out_w, 1], out)
}

/// Backward pass: accumulates into the source gradient and/or the
/// homography gradient.
pub(crate) fn warp_backward<T: Real>(
    src: &Tensor<T>,
    hom: &[T],
    grad_out: &Tensor<T>,
    mut grad_src: Option<&mut [T]>,
    grad_hom: Option<&mut [T]>,
) -> Result<()> {
    let (h, w) = single_channel(src)?;
    let (out_h, out_w, _) = grad_out.hwc()?;
    let g = grad_out.data();
    let mut acc_hom = [T::zero(); 8];
    for y in 0..out_h {
        for x in 0..out_w {
            let go = g[y * out_w + x];
            if go == T::zero() {
                continue;
            }
            let (xf, yf) = (T::c(x as f64), T::c(y as f64));
            let (u, v, d) = project(hom, xf, yf)?;
            let cell = Cell::new(u, v);
            if let Some(gs) = grad_src.as_deref_mut() {
                let wts = cell.weights();
                let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
                for (k, (dx, dy)) in offsets.iter().enumerate() {
                    let (tx, ty) = (cell.x0 + dx, cell.y0 + dy);
                    if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                        gs[ty as usize * w + tx as usize] += go * wts[k];
                    }
                }
            }
            if grad_hom.is_some() {
                let taps = cell.taps(src.data(), h, w);
                let (du, dv) = cell.gradient(&taps);
                let (gu, gv) = (go * du / d, go * dv / d);
                acc_hom[0] += gu * xf;
                acc_hom[1] += gu * yf;
                acc_hom[2] += gu;
                acc_hom[3] += gv * xf;
                acc_hom[4] += gv * yf;
                acc_hom[5] += gv;
                acc_hom[6] -= (gu * u + gv * v) * xf;
                acc_hom[7] -= (gu * u + gv * v) * yf;
            }
        }
    }
    if let Some(gh) = grad_hom {
        for (a, b) in gh.iter_mut().zip(acc_hom) {
            *a += b;
        }
    }
    Ok(())
}
