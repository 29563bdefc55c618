//! Inverse-compositional Gauss-Newton alignment, coarse to fine.
//!
//! The template Jacobian and its Gauss-Newton matrix are computed once per
//! level. Each iteration drops the rows of template pixels whose warped
//! position leaves the input, solves the Jacobi-scaled, damped normal
//! equations and composes the inverted increment onto the current warp.

use std::fmt::Write as _;

use nalgebra::{Cholesky, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, FeaturePyramid, Scale};
use crate::geometry::{corner_error, dlt_from_corners, warp_jacobian, CornerSet, HomographyParams, Point};
use crate::warp::{covered, project, Cell};

type Mat8 = SMatrix<f64, 8, 8>;
type Vec8 = SVector<f64, 8>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Stop thresholds on the corner step, `[coarse, mid, fine]`, in each
    /// level's own pixels.
    pub thresholds: [f64; 3],
    pub max_iterations: usize,
    /// Relative Tikhonov damping on the Jacobi-scaled normal equations.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            thresholds: [1.0, 0.1, 0.01],
            max_iterations: 30,
            damping: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("solver.{field}"),
                message,
            })
        };
        let t = self.thresholds;
        if t.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return bad("thresholds", format!("must be positive, got {t:?}"));
        }
        if t[1] > t[0] || t[2] > t[1] {
            return bad("thresholds", format!("must not increase from coarse to fine, got {t:?}"));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations", "must be at least 1".into());
        }
        if self.damping < 0.0 || !self.damping.is_finite() {
            return bad("damping", format!("must be finite and >= 0, got {}", self.damping));
        }
        Ok(())
    }

    pub fn threshold(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Quarter => self.thresholds[0],
            Scale::Half => self.thresholds[1],
            Scale::Full => self.thresholds[2],
        }
    }
}

/// Precomputed per-level quantities of the template.
#[derive(Clone, Debug)]
pub struct TemplateSystem {
    height: usize,
    width: usize,
    scale: Scale,
    values: Vec<f64>,
    rows: Vec<[f64; 8]>,
    hessian: Mat8,
}

fn central_gradient(values: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            gx[y * w + x] = (values[y * w + xr] - values[y * w + xl]) / 2.0;
            gy[y * w + x] = (values[yd * w + x] - values[yu * w + x]) / 2.0;
        }
    }
    (gx, gy)
}

impl TemplateSystem {
    pub fn precompute(feat_t: &FeatureMap) -> Result<Self> {
        if !feat_t.values.is_finite() {
            return Err(Error::NonFinite("template features"));
        }
        let (h, w) = (feat_t.height(), feat_t.width());
        let values: Vec<f64> = feat_t.values.data().iter().map(|&v| v as f64).collect();
        let (gx, gy) = central_gradient(&values, h, w);
        let mut rows = Vec::with_capacity(h * w);
        let mut hessian = Mat8::zeros();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let jac = warp_jacobian(Point::new(x as f64, y as f64));
                let row: [f64; 8] = std::array::from_fn(|k| gx[i] * jac[0][k] + gy[i] * jac[1][k]);
                let v = Vec8::from(row);
                hessian += v * v.transpose();
                rows.push(row);
            }
        }
        if hessian.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate("template has no gradient".into()));
        }
        let system = Self {
            height: h,
            width: w,
            scale: feat_t.scale,
            values,
            rows,
            hessian,
        };
        // Full-support solve must succeed for the template to be usable.
        system.solve(&system.hessian, &Vec8::zeros(), 1e-6)?;
        Ok(system)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    /// Jacobian row of template pixel `(x, y)`.
    pub fn row(&self, x: usize, y: usize) -> &[f64; 8] {
        &self.rows[y * self.width + x]
    }

    /// `JᵀJ` over every template pixel.
    pub fn hessian(&self) -> [[f64; 8]; 8] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.hessian[(i, j)]))
    }

    fn solve(&self, hessian: &Mat8, b: &Vec8, damping: f64) -> Result<Vec8> {
        let d = Vec8::from_fn(|i, _| {
            let h = hessian[(i, i)];
            if h > 0.0 {
                1.0 / h.sqrt()
            } else {
                0.0
            }
        });
        let mut a = Mat8::from_fn(|i, j| d[i] * hessian[(i, j)] * d[j]);
        let eps = damping * a.trace() / 8.0;
        for i in 0..8 {
            a[(i, i)] += eps;
        }
        let rhs = b.component_mul(&d);
        let chol = Cholesky::new(a)
            .ok_or_else(|| Error::Degenerate("normal equations are not positive definite".into()))?;
        let x = chol.solve(&rhs).component_mul(&d);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("normal equations produced a non-finite step".into()));
        }
        Ok(x)
    }
}

/// Residuals `W(G, P) - F` over template pixels; `None` marks pixels that
/// sample outside the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub values: Vec<Option<f64>>,
}

impl Residual {
    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }

    /// Residuals of the covered pixels in row-major order.
    pub fn compact(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// Root mean square over covered pixels.
    pub fn rms(&self) -> f64 {
        let n = self.valid_count();
        if n == 0 {
            return 0.0;
        }
        (self.values.iter().flatten().map(|r| r * r).sum::<f64>() / n as f64).sqrt()
    }
}

pub fn residual(system: &TemplateSystem, feat_i: &FeatureMap, p: &HomographyParams) -> Result<Residual> {
    if feat_i.scale != system.scale {
        return Err(Error::Shape(format!(
            "input features at {} scale, template at {}",
            feat_i.scale.name(),
            system.scale.name()
        )));
    }
    let (ih, iw) = (feat_i.height(), feat_i.width());
    let src = feat_i.values.data();
    let mut values = Vec::with_capacity(system.values.len());
    for y in 0..system.height {
        for x in 0..system.width {
            let (u, v, _) = project(&p.p, x as f64, y as f64)?;
            if !covered(u, v, ih, iw) {
                values.push(None);
                continue;
            }
            let cell = Cell::new(u as f32, v as f32);
            let sample = cell.interpolate(&cell.taps(src, ih, iw)) as f64;
            values.push(Some(sample - system.values[y * system.width + x]));
        }
    }
    Ok(Residual { values })
}

/// Gauss-Newton increment from the covered residuals.
pub fn lk_step(system: &TemplateSystem, r: &Residual, damping: f64) -> Result<[f64; 8]> {
    if r.values.len() != system.rows.len() {
        return Err(Error::Shape(format!(
            "{} residuals for a {}-pixel template",
            r.values.len(),
            system.rows.len()
        )));
    }
    let n = r.valid_count();
    if n < 8 {
        return Err(Error::InsufficientSupport { got: n, need: 8 });
    }
    let mut hessian = system.hessian;
    let mut b = Vec8::zeros();
    for (row, res) in system.rows.iter().zip(&r.values) {
        let j = Vec8::from(*row);
        match res {
            Some(res) => b += j * *res,
            None => hessian -= j * j.transpose(),
        }
    }
    let x = system.solve(&hessian, &b, damping)?;
    Ok(std::array::from_fn(|i| x[i]))
}

/// One row of the iteration trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub level: Scale,
    pub iteration: usize,
    /// Corner displacement of the step, in level pixels.
    pub e_c_step: f64,
    /// RMS residual before the step.
    pub residual_norm: f64,
    /// Full-scale corner error against ground truth after the step.
    pub corner_error: Option<f64>,
    pub threshold: f64,
    pub max_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    IterationCap,
    Failed,
}

#[derive(Clone, Debug)]
pub struct LevelResult {
    /// Warp at the level's scale.
    pub p: HomographyParams,
    pub trace: Vec<IterationRecord>,
    pub stop: StopReason,
    pub error: Option<String>,
}

/// Iterates at one level starting from `p0` (expressed at that level).
pub fn solve_level(
    system: &TemplateSystem,
    feat_i: &FeatureMap,
    p0: &HomographyParams,
    cfg: &SolverConfig,
    ground_truth: Option<(&HomographyParams, &CornerSet)>,
) -> LevelResult {
    let level = system.scale;
    let threshold = cfg.threshold(level);
    let corners = CornerSet::rectangle(system.width, system.height);
    let mut p = *p0;
    let mut trace = Vec::new();
    let fail = |p, trace, e: Error| LevelResult {
        p,
        trace,
        stop: StopReason::Failed,
        error: Some(e.to_string()),
    };
    for iteration in 1..=cfg.max_iterations {
        let step = (|| -> Result<(HomographyParams, f64, f64)> {
            let r = residual(system, feat_i, &p)?;
            let delta = lk_step(system, &r, cfg.damping)?;
            let next = p.ic_update(&HomographyParams::from_delta(&delta))?;
            if !next.is_finite() {
                return Err(Error::NonFinite("warp update"));
            }
            let e_c = corner_error(&next, &p, &corners)?;
            Ok((next, e_c, r.rms()))
        })();
        let (next, e_c, rms) = match step {
            Ok(s) => s,
            Err(e) => return fail(p, trace, e),
        };
        let corner_err = ground_truth.and_then(|(gt, full_corners)| {
            corner_error(&next.rescale(1.0 / level.factor()), gt, full_corners).ok()
        });
        trace.push(IterationRecord {
            level,
            iteration,
            e_c_step: e_c,
            residual_norm: rms,
            corner_error: corner_err,
            threshold,
            max_iterations: cfg.max_iterations,
        });
        p = next;
        if e_c < threshold {
            return LevelResult {
                p,
                trace,
                stop: StopReason::Converged,
                error: None,
            };
        }
    }
    LevelResult {
        p,
        trace,
        stop: StopReason::IterationCap,
        error: None,
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    /// Full-scale estimate; the last good warp when `diverged` is set.
    pub p: HomographyParams,
    pub trace: Vec<IterationRecord>,
    /// Stop reason per level, coarse first.
    pub stops: Vec<(Scale, StopReason)>,
    pub diverged: bool,
    pub error: Option<String>,
}

/// Coarse-to-fine solve from a full-scale initial warp.
pub fn solve_pyramid(
    pyr_t: &FeaturePyramid,
    pyr_i: &FeaturePyramid,
    p0: &HomographyParams,
    cfg: &SolverConfig,
    ground_truth: Option<&HomographyParams>,
) -> Result<SolveResult> {
    cfg.validate()?;
    let full = pyr_t.level(Scale::Full);
    let full_corners = CornerSet::rectangle(full.width(), full.height());
    let gt = ground_truth.map(|g| (g, &full_corners));
    let mut p = *p0;
    let mut trace = Vec::new();
    let mut stops = Vec::new();
    for scale in [Scale::Quarter, Scale::Half, Scale::Full] {
        let s = scale.factor();
        let system = match TemplateSystem::precompute(pyr_t.level(scale)) {
            Ok(sys) => sys,
            Err(e) => {
                stops.push((scale, StopReason::Failed));
                return Ok(SolveResult {
                    p,
                    trace,
                    stops,
                    diverged: true,
                    error: Some(e.to_string()),
                });
            }
        };
        let result = solve_level(&system, pyr_i.level(scale), &p.rescale(s), cfg, gt);
        trace.extend(result.trace);
        stops.push((scale, result.stop));
        p = result.p.rescale(1.0 / s);
        if result.stop == StopReason::Failed {
            return Ok(SolveResult {
                p,
                trace,
                stops,
                diverged: true,
                error: result.error,
            });
        }
    }
    Ok(SolveResult {
        p,
        trace,
        stops,
        diverged: false,
        error: None,
    })
}

pub const TRACE_CSV_HEADER: &str = "level,iteration,e_c_step,residual_norm,corner_error,threshold,max_iterations";

pub fn trace_csv(trace: &[IterationRecord]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in trace {
        let err = r.corner_error.map(|e| format!("{e:e}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{},{},{}",
            r.level.name(),
            r.iteration,
            r.e_c_step,
            r.residual_norm,
            err,
            r.threshold,
            r.max_iterations
        );
    }
    out
}

/// Fixed start placing the template centrally in the input; `(31, 31)` to
/// `(159, 159)` for a 128 template in a 192 input.
pub fn vanilla_initial(template: (usize, usize), input: (usize, usize)) -> Result<HomographyParams> {
    let (tw, th) = template;
    let (iw, ih) = input;
    if tw < 2 || th < 2 || iw < tw + 2 || ih < th + 2 {
        return Err(Error::Usage(format!(
            "input {iw}x{ih} cannot hold template {tw}x{th} with a border"
        )));
    }
    let ox = ((iw - tw) / 2 - 1) as f64;
    let oy = ((ih - th) / 2 - 1) as f64;
    let (ex, ey) = (ox + tw as f64, oy + th as f64);
    let dst = CornerSet([
        Point::new(ox, oy),
        Point::new(ox, ey),
        Point::new(ex, ey),
        Point::new(ex, oy),
    ]);
    dlt_from_corners(&CornerSet::rectangle(tw, th), &dst)
}
