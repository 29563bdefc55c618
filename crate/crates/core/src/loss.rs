//! Training objective: brightness consistency plus the two convergence
//! conditions, evaluated on all three pyramid levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, FeaturePyramid, Scale};
use crate::geometry::HomographyParams;
use crate::tensor::{Real, Tensor};
use crate::warp::{coverage_mask, warp_image};

/// How the squared error is normalized over valid template pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Perturbations sampled per batch.
    #[serde(alias = "M")]
    pub m: usize,
    /// Half-width for p13 and p23, in pixels.
    pub translation: f64,
    /// Half-width for p11, p12, p21, p22.
    pub affine: f64,
    /// Half-width for p31 and p32, in 1/pixels.
    pub perspective: f64,
    pub normalization: Normalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda: 0.8,
            m: 4,
            translation: 8.0,
            affine: 0.05,
            perspective: 1e-4,
            normalization: Normalization::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("loss.{field}"),
                message,
            })
        };
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad("lambda", format!("must lie in (0, 1), got {}", self.lambda));
        }
        if self.m == 0 {
            return bad("m", "must be at least 1".into());
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return bad("gamma", format!("must be finite and >= 0, got {}", self.gamma));
        }
        for (name, v) in [
            ("translation", self.translation),
            ("affine", self.affine),
            ("perspective", self.perspective),
        ] {
            if v < 0.0 || !v.is_finite() {
                return bad(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    fn scale_of(&self, index: usize) -> f64 {
        match index {
            2 | 5 => self.translation,
            6 | 7 => self.perspective,
            _ => self.affine,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationSample {
    pub dp: [f64; 8],
    /// `P̄ ∘ (I + dP)`.
    pub perturbed: HomographyParams,
}

impl PerturbationSample {
    pub fn norm_sq(&self) -> f64 {
        self.dp.iter().map(|d| d * d).sum()
    }
}

/// Draws `m` uniform offsets from a generator seeded with `seed`.
pub fn sample_offsets(m: usize, cfg: &LossConfig, seed: u64) -> Vec<[f64; 8]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let mut dp = [0.0; 8];
            for (i, d) in dp.iter_mut().enumerate() {
                let s = cfg.scale_of(i);
                // Always draw so that sequences do not depend on which scales are zero.
                let u: f64 = rng.random_range(-1.0..=1.0);
                *d = u * s;
            }
            dp
        })
        .collect()
}

/// Applies offsets to a ground-truth homography.
pub fn perturb(p_bar: &HomographyParams, offsets: &[[f64; 8]]) -> Result<Vec<PerturbationSample>> {
    offsets
        .iter()
        .map(|dp| {
            Ok(PerturbationSample {
                dp: *dp,
                perturbed: p_bar.compose(&HomographyParams::from_delta(dp))?,
            })
        })
        .collect()
}

pub fn sample_perturbations(
    p_bar: &HomographyParams,
    m: usize,
    cfg: &LossConfig,
    seed: u64,
) -> Result<Vec<PerturbationSample>> {
    if m == 0 {
        return Err(Error::Usage("at least one perturbation is required".into()));
    }
    perturb(p_bar, &sample_offsets(m, cfg, seed))
}

fn scaled_offset(dp: &[f64; 8], factor: f64) -> [f64; 8] {
    dp.map(|d| d * factor)
}

/// Scalar loss terms, averaged over the pyramid levels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub l_bc: f64,
    pub l_con1: f64,
    pub l_con2: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.l_bc.is_finite() && self.l_con1.is_finite() && self.l_con2.is_finite() && self.total.is_finite()
    }

    pub fn mean(terms: &[LossTerms]) -> LossTerms {
        let n = terms.len().max(1) as f64;
        let mut acc = LossTerms::default();
        for t in terms {
            acc.l_bc += t.l_bc;
            acc.l_con1 += t.l_con1;
            acc.l_con2 += t.l_con2;
            acc.total += t.total;
        }
        LossTerms {
            l_bc: acc.l_bc / n,
            l_con1: acc.l_con1 / n,
            l_con2: acc.l_con2 / n,
            total: acc.total / n,
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,l_bc,l_con1,l_con2,total";

pub fn loss_csv_row(epoch: usize, step: usize, t: &LossTerms) -> String {
    format!("{epoch},{step},{:e},{:e},{:e},{:e}", t.l_bc, t.l_con1, t.l_con2, t.total)
}

/// `-(1/M) Σ min(0, E(P̄∘dP) - E(P̄) - |dP|²)`.
pub fn condition1_value(e_bar: f64, e_perturbed: &[f64], dp_norm_sq: &[f64]) -> f64 {
    let m = e_perturbed.len() as f64;
    -e_perturbed
        .iter()
        .zip(dp_norm_sq)
        .map(|(&e, &n)| (e - e_bar - n).min(0.0))
        .sum::<f64>()
        / m
}

/// `-(1/M) Σ min(0, E(P̄∘dP) - E(P̄∘λdP) - (1-λ²)|dP|²)`.
pub fn condition2_value(e_perturbed: &[f64], e_lambda: &[f64], dp_norm_sq: &[f64], lambda: f64) -> f64 {
    let m = e_perturbed.len() as f64;
    let k = 1.0 - lambda * lambda;
    -e_perturbed
        .iter()
        .zip(e_lambda)
        .zip(dp_norm_sq)
        .map(|((&e, &el), &n)| (e - el - k * n).min(0.0))
        .sum::<f64>()
        / m
}

/// Graph nodes of one sample's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_bc: Var,
    pub l_con1: Var,
    pub l_con2: Var,
    pub total: Var,
}

impl LossVars {
    pub fn terms<T: Real>(&self, g: &Graph<T>) -> Result<LossTerms> {
        Ok(LossTerms {
            l_bc: g.value(self.l_bc).item()?.as_f64(),
            l_con1: g.value(self.l_con1).item()?.as_f64(),
            l_con2: g.value(self.l_con2).item()?.as_f64(),
            total: g.value(self.total).item()?.as_f64(),
        })
    }
}

/// Objective node `E(P)` between template features `f` and input features
/// `gi`, with `p` already expressed at their scale.
pub fn objective_var<T: Real>(
    g: &mut Graph<T>,
    f: Var,
    gi: Var,
    p: &HomographyParams,
    normalization: Normalization,
) -> Result<Var> {
    let (th, tw, _) = g.value(f).hwc()?;
    let (ih, iw, _) = g.value(gi).hwc()?;
    let mask = coverage_mask(p, ih, iw, th, tw)?;
    let valid = mask.iter().filter(|&&m| m).count();
    let w = match normalization {
        Normalization::Mean if valid > 0 => T::c(1.0 / valid as f64),
        _ => T::one(),
    };
    let weights = mask.iter().map(|&m| if m { w } else { T::zero() }).collect();
    let hom = g.constant(Tensor::new(vec![8], p.p.map(T::c).to_vec())?)?;
    let warped = g.bilinear_warp(gi, hom, th, tw)?;
    g.weighted_sse(f, warped, weights)
}

fn minus_const<T: Real>(g: &mut Graph<T>, x: Var, c: f64) -> Result<Var> {
    let k = g.constant(Tensor::scalar(T::c(c)))?;
    g.sub(x, k)
}

/// Builds the scale-averaged loss of one sample. `feats_t[i]` and
/// `feats_i[i]` are single-channel feature nodes at [`Scale::ALL`]`[i]`;
/// `offsets` are the batch's shared perturbation offsets.
pub fn sample_loss<T: Real>(
    g: &mut Graph<T>,
    feats_t: &[Var; 3],
    feats_i: &[Var; 3],
    p_bar: &HomographyParams,
    offsets: &[[f64; 8]],
    cfg: &LossConfig,
) -> Result<LossVars> {
    cfg.validate()?;
    if offsets.is_empty() {
        return Err(Error::Usage("at least one perturbation is required".into()));
    }
    let perturbed = perturb(p_bar, offsets)?;
    let lambda_offsets: Vec<[f64; 8]> = offsets.iter().map(|dp| scaled_offset(dp, cfg.lambda)).collect();
    let damped = perturb(p_bar, &lambda_offsets)?;
    let inv_m = T::c(1.0 / offsets.len() as f64);
    let margin2 = 1.0 - cfg.lambda * cfg.lambda;

    let (mut bcs, mut c1s, mut c2s) = (Vec::new(), Vec::new(), Vec::new());
    for scale in Scale::ALL {
        let (f, gi) = (feats_t[scale.index()], feats_i[scale.index()]);
        let s = scale.factor();
        let e_bar = objective_var(g, f, gi, &p_bar.rescale(s), cfg.normalization)?;
        let mut c1_terms = Vec::with_capacity(offsets.len());
        let mut c2_terms = Vec::with_capacity(offsets.len());
        for (pert, damp) in perturbed.iter().zip(&damped) {
            let n = pert.norm_sq();
            let e_p = objective_var(g, f, gi, &pert.perturbed.rescale(s), cfg.normalization)?;
            let e_l = objective_var(g, f, gi, &damp.perturbed.rescale(s), cfg.normalization)?;
            let gap1 = g.sub(e_p, e_bar)?;
            let gap1 = minus_const(g, gap1, n)?;
            c1_terms.push(g.min_zero(gap1)?);
            let gap2 = g.sub(e_p, e_l)?;
            let gap2 = minus_const(g, gap2, margin2 * n)?;
            c2_terms.push(g.min_zero(gap2)?);
        }
        let c1 = g.add_all(&c1_terms)?;
        let c2 = g.add_all(&c2_terms)?;
        bcs.push(e_bar);
        c1s.push(g.scale(c1, -inv_m)?);
        c2s.push(g.scale(c2, -inv_m)?);
    }
    let third = T::c(1.0 / 3.0);
    let l_bc = g.add_all(&bcs)?;
    let l_bc = g.scale(l_bc, third)?;
    let l_con1 = g.add_all(&c1s)?;
    let l_con1 = g.scale(l_con1, third)?;
    let l_con2 = g.add_all(&c2s)?;
    let l_con2 = g.scale(l_con2, third)?;
    let cons = g.add(l_con1, l_con2)?;
    let cons = g.scale(cons, T::c(cfg.gamma))?;
    let total = g.add(l_bc, cons)?;
    Ok(LossVars {
        l_bc,
        l_con1,
        l_con2,
        total,
    })
}

/// `E(P)` on fixed feature maps; `p` is at the maps' scale.
pub fn objective_e(feat_t: &FeatureMap, feat_i: &FeatureMap, p: &HomographyParams, normalization: Normalization) -> Result<f64> {
    if feat_t.scale != feat_i.scale {
        return Err(Error::Shape(format!(
            "feature scales differ: {} vs {}",
            feat_t.scale.name(),
            feat_i.scale.name()
        )));
    }
    let t = feat_t.values.cast::<f64>();
    let src = feat_i.values.cast::<f64>();
    let (th, tw) = (feat_t.height(), feat_t.width());
    let warped = warp_image(&src, p, th, tw)?;
    let mask = coverage_mask(p, feat_i.height(), feat_i.width(), th, tw)?;
    let mut sum = 0.0;
    let mut valid = 0usize;
    for ((a, b), m) in t.data().iter().zip(warped.data()).zip(mask) {
        if m {
            sum += (a - b) * (a - b);
            valid += 1;
        }
    }
    Ok(match normalization {
        Normalization::Mean if valid > 0 => sum / valid as f64,
        _ => sum,
    })
}

/// Loss terms of one pair of fixed pyramids.
pub fn pyramid_loss(
    pyr_t: &FeaturePyramid,
    pyr_i: &FeaturePyramid,
    p_bar: &HomographyParams,
    offsets: &[[f64; 8]],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let mut g = Graph::<f64>::new();
    let mut ft = Vec::with_capacity(3);
    let mut fi = Vec::with_capacity(3);
    for scale in Scale::ALL {
        ft.push(g.constant(pyr_t.level(scale).values.cast())?);
        fi.push(g.constant(pyr_i.level(scale).values.cast())?);
    }
    let vars = sample_loss(
        &mut g,
        &[ft[0], ft[1], ft[2]],
        &[fi[0], fi[1], fi[2]],
        p_bar,
        offsets,
        cfg,
    )?;
    vars.terms(&g)
}

/// Mean of [`pyramid_loss`] over a batch sharing one set of offsets.
pub fn batch_loss(
    batch: &[(FeaturePyramid, FeaturePyramid, HomographyParams)],
    offsets: &[[f64; 8]],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let terms = batch
        .iter()
        .map(|(t, i, p)| pyramid_loss(t, i, p, offsets, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossTerms::mean(&terms))
}
