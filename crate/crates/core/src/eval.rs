//! Pair alignment, corner-error evaluation and objective landscapes.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::AlignmentSample;
use crate::error::{Error, Result};
use crate::feature::{FeaturePyramid, Scale};
use crate::geometry::{corner_error, CornerSet, HomographyParams};
use crate::loss::{objective_e, Normalization};
use crate::network::{Branch, NetworkParams};
use crate::solver::{solve_pyramid, vanilla_initial, SolveResult, SolverConfig};
use crate::tensor::Tensor;

/// What the solver aligns.
#[derive(Clone, Copy, Debug)]
pub enum Features<'a> {
    /// Blurred intensity pyramids.
    Intensity,
    /// Learned feature maps from both branches.
    Learned(&'a NetworkParams),
}

impl Features<'_> {
    pub fn pyramids(&self, template: &Tensor<f32>, input: &Tensor<f32>) -> Result<(FeaturePyramid, FeaturePyramid)> {
        match self {
            Features::Intensity => Ok((
                FeaturePyramid::from_intensity(template)?,
                FeaturePyramid::from_intensity(input)?,
            )),
            Features::Learned(params) => Ok((
                params.template.feature_pyramid(template)?,
                params.input.feature_pyramid(input)?,
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Features::Intensity => "intensity",
            Features::Learned(_) => "dlkfm",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initial {
    #[default]
    Vanilla,
    External(HomographyParams),
}

impl Initial {
    pub fn resolve(&self, template: &Tensor<f32>, input: &Tensor<f32>) -> Result<HomographyParams> {
        match self {
            Initial::Vanilla => {
                let (th, tw, _) = template.hwc()?;
                let (ih, iw, _) = input.hwc()?;
                vanilla_initial((tw, th), (iw, ih))
            }
            Initial::External(p) => Ok(*p),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignOutput {
    pub initial: HomographyParams,
    pub solve: SolveResult,
    /// Corner errors before and after, when ground truth is known.
    pub errors: Option<(f64, f64)>,
    /// Set when the solver failed or the final error exceeds the initial one.
    pub diverged: bool,
}

impl AlignOutput {
    pub fn p(&self) -> &HomographyParams {
        &self.solve.p
    }
}

fn check_sizes(template: &Tensor<f32>, input: &Tensor<f32>) -> Result<()> {
    let (th, tw, tc) = template.hwc()?;
    let (ih, iw, ic) = input.hwc()?;
    if tc != 1 || ic != 1 {
        return Err(Error::Shape("alignment needs single-channel images".into()));
    }
    if th % 4 != 0 || tw % 4 != 0 || ih % 4 != 0 || iw % 4 != 0 {
        return Err(Error::Shape(format!(
            "image sizes must be divisible by 4, got template {tw}x{th} and input {iw}x{ih}"
        )));
    }
    Ok(())
}

pub fn align(
    template: &Tensor<f32>,
    input: &Tensor<f32>,
    features: Features<'_>,
    initial: &Initial,
    cfg: &SolverConfig,
    ground_truth: Option<&HomographyParams>,
) -> Result<AlignOutput> {
    check_sizes(template, input)?;
    let p0 = initial.resolve(template, input)?;
    let (pt, pi) = features.pyramids(template, input)?;
    let solve = solve_pyramid(&pt, &pi, &p0, cfg, ground_truth)?;
    let errors = match ground_truth {
        Some(gt) => {
            let (th, tw, _) = template.hwc()?;
            let corners = CornerSet::rectangle(tw, th);
            let e0 = corner_error(&p0, gt, &corners)?;
            let e1 = corner_error(&solve.p, gt, &corners).unwrap_or(f64::INFINITY);
            Some((e0, e1))
        }
        None => None,
    };
    let diverged = solve.diverged || errors.is_some_and(|(e0, e1)| e1.is_nan() || e1 > e0);
    Ok(AlignOutput {
        initial: p0,
        solve,
        errors,
        diverged,
    })
}

/// Writes the six feature maps as `{branch}_{scale}.png`.
pub fn dump_features(params: &NetworkParams, template: &Tensor<f32>, input: &Tensor<f32>, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(6);
    for (branch, image) in [(Branch::Template, template), (Branch::Input, input)] {
        let pyr = params.branch(branch).feature_pyramid(image)?;
        for scale in Scale::ALL {
            let path = dir.join(format!("{}_{}.png", branch.name(), scale.name()));
            pyr.level(scale).save_png(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub iterations: usize,
    pub diverged: bool,
}

pub const CURVE_STEP: f64 = 0.25;
pub const CURVE_MAX: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<SampleRecord>,
    /// `(error, fraction)` pairs; the last bin also counts every larger
    /// error so the curve ends at 1.
    pub curve: Vec<(f64, f64)>,
    pub pct_under_3: f64,
    pub pct_under_10: f64,
    pub diverged: usize,
    pub median_initial: f64,
    pub median_final: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    pub fn from_records(records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset(std::path::PathBuf::from("<records>")));
        }
        let n = records.len() as f64;
        let finals: Vec<f64> = records.iter().map(|r| r.final_error).collect();
        let initials: Vec<f64> = records.iter().map(|r| r.initial_error).collect();
        let bins = (CURVE_MAX / CURVE_STEP).round() as usize;
        let curve = (0..=bins)
            .map(|k| {
                let t = k as f64 * CURVE_STEP;
                let count = if k == bins {
                    records.len()
                } else {
                    finals.iter().filter(|&&e| e <= t).count()
                };
                (t, count as f64 / n)
            })
            .collect();
        let pct = |t: f64| 100.0 * finals.iter().filter(|&&e| e < t).count() as f64 / n;
        Ok(Self {
            pct_under_3: pct(3.0),
            pct_under_10: pct(10.0),
            diverged: records.iter().filter(|r| r.diverged).count(),
            median_initial: median(&initials),
            median_final: median(&finals),
            curve,
            records,
        })
    }

    pub fn samples_csv(&self) -> String {
        let mut out = String::from("id,initial_error,final_error,iterations,diverged\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:06},{:.6},{:.6},{},{}",
                r.id, r.initial_error, r.final_error, r.iterations, r.diverged as u8
            );
        }
        out
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("error_px,fraction\n");
        for (t, f) in &self.curve {
            let _ = writeln!(out, "{t:.2},{f:.6}");
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "samples": self.records.len(),
            "pct_under_3": self.pct_under_3,
            "pct_under_10": self.pct_under_10,
            "diverged": self.diverged,
            "median_initial": self.median_initial,
            "median_final": self.median_final,
        })
    }
}

/// Aligns every sample; records come back in sample order.
pub fn evaluate(
    samples: &[AlignmentSample],
    features: Features<'_>,
    initial: &Initial,
    cfg: &SolverConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset(std::path::PathBuf::from("<samples>")));
    }
    let records = samples
        .par_iter()
        .map(|s| {
            let out = align(&s.template, &s.input, features, initial, cfg, Some(&s.gt))?;
            let (e0, e1) = out.errors.expect("ground truth given");
            Ok(SampleRecord {
                id: s.id,
                initial_error: e0,
                final_error: e1,
                iterations: out.solve.trace.len(),
                diverged: out.diverged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeAxes {
    /// p13 and p23, in pixels.
    #[default]
    Translation,
    /// p11 and p22.
    Scale,
}

impl LandscapeAxes {
    fn indices(self) -> (usize, usize) {
        match self {
            LandscapeAxes::Translation => (2, 5),
            LandscapeAxes::Scale => (0, 4),
        }
    }

    pub fn default_range(self) -> f64 {
        match self {
            LandscapeAxes::Translation => 10.0,
            LandscapeAxes::Scale => 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landscape {
    pub axes: LandscapeAxes,
    pub offsets: Vec<f64>,
    /// Row-major `steps x steps`, first axis along rows; `None` marks cells
    /// whose warp could not be evaluated.
    pub learned: Option<Vec<Option<f64>>>,
    pub intensity: Vec<Option<f64>>,
}

fn grid_values(
    ft: &crate::feature::FeatureMap,
    fi: &crate::feature::FeatureMap,
    gt: &HomographyParams,
    axes: LandscapeAxes,
    offsets: &[f64],
) -> Vec<Option<f64>> {
    let (a, b) = axes.indices();
    let mut out = Vec::with_capacity(offsets.len() * offsets.len());
    for &da in offsets {
        for &db in offsets {
            let mut p = *gt;
            p.p[a] += da;
            p.p[b] += db;
            out.push(objective_e(ft, fi, &p, Normalization::Mean).ok().filter(|v| v.is_finite()));
        }
    }
    out
}

/// Objective on the finest level over a grid of additive perturbations of
/// two parameters of `gt`.
pub fn landscape_probe(
    template: &Tensor<f32>,
    input: &Tensor<f32>,
    gt: &HomographyParams,
    params: Option<&NetworkParams>,
    axes: LandscapeAxes,
    range: f64,
    steps: usize,
) -> Result<Landscape> {
    if steps < 1 || range.is_nan() || range < 0.0 {
        return Err(Error::Usage(format!("invalid landscape grid: {steps} steps over ±{range}")));
    }
    check_sizes(template, input)?;
    let offsets: Vec<f64> = if steps == 1 {
        vec![0.0]
    } else {
        (0..steps)
            .map(|k| -range + 2.0 * range * k as f64 / (steps - 1) as f64)
            .collect()
    };
    let (rt, ri) = Features::Intensity.pyramids(template, input)?;
    let intensity = grid_values(rt.level(Scale::Full), ri.level(Scale::Full), gt, axes, &offsets);
    let learned = match params {
        Some(p) => {
            let (lt, li) = Features::Learned(p).pyramids(template, input)?;
            Some(grid_values(lt.level(Scale::Full), li.level(Scale::Full), gt, axes, &offsets))
        }
        None => None,
    };
    Ok(Landscape {
        axes,
        offsets,
        learned,
        intensity,
    })
}

/// Whether the center cell holds the smallest value of the grid.
pub fn center_is_minimum(values: &[Option<f64>], steps: usize) -> bool {
    let c = (steps / 2) * steps + steps / 2;
    let Some(center) = values.get(c).copied().flatten() else {
        return false;
    };
    values.iter().enumerate().all(|(i, v)| i == c || v.is_none_or(|v| v >= center))
}

impl Landscape {
    pub fn steps(&self) -> usize {
        self.offsets.len()
    }

    pub fn csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let (a, b) = match self.axes {
            LandscapeAxes::Translation => ("d_p13", "d_p23"),
            LandscapeAxes::Scale => ("d_p11", "d_p22"),
        };
        let mut out = format!("row,col,{a},{b},e_dlkfm,e_intensity\n");
        let n = self.steps();
        for (i, &da) in self.offsets.iter().enumerate() {
            for (j, &db) in self.offsets.iter().enumerate() {
                let k = i * n + j;
                let learned = self.learned.as_ref().and_then(|l| l[k]);
                let _ = writeln!(out, "{i},{j},{da},{db},{},{}", fmt(learned), fmt(self.intensity[k]));
            }
        }
        out
    }
}
