//! Synthetic alignment pairs.
//!
//! A 192x192 input is cut from a source image (a file from a folder, or a
//! procedurally generated scene), four corner points are drawn in the 64x64
//! boxes at the input's corners, and the 128x128 template is the input
//! warped onto those points. A modality transform is then applied to the
//! template only.
//!
//! On disk a split is a flat directory of `{id}_input.png`,
//! `{id}_template.png` and `{id}_gt.json` triples with zero-padded ids.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dlt_from_corners, CornerSet, HomographyParams, Point};
use crate::network::write_atomic;
use crate::tensor::Tensor;
use crate::warp::warp_image;

pub const INPUT_SIZE: usize = 192;
pub const TEMPLATE_SIZE: usize = 128;
pub const BOX_SIZE: f64 = 64.0;
pub const SIDECAR_VERSION: u32 = 1;
const MAX_RETRIES: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    #[default]
    Identity,
    Invert,
    GammaPalette,
    EdgeRender,
    Quantize,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 5] = [
        ModalityKind::Identity,
        ModalityKind::Invert,
        ModalityKind::GammaPalette,
        ModalityKind::EdgeRender,
        ModalityKind::Quantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Identity => "identity",
            ModalityKind::Invert => "invert",
            ModalityKind::GammaPalette => "gamma_palette",
            ModalityKind::EdgeRender => "edge_render",
            ModalityKind::Quantize => "quantize",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown modality `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    /// Posterization levels for `quantize`.
    pub levels: u32,
    /// Gain applied to the gradient magnitude for `edge_render`.
    pub edge_gain: f32,
    /// Seed of the `gamma_palette` lookup table.
    pub seed: u64,
}

impl Default for ModalitySpec {
    fn default() -> Self {
        Self {
            kind: ModalityKind::Identity,
            levels: 4,
            edge_gain: 4.0,
            seed: 0,
        }
    }
}

impl ModalitySpec {
    pub fn new(kind: ModalityKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

fn quantize_255(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Seeded non-monotone 256-entry palette.
fn palette(seed: u64) -> [f32; 256] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma: f32 = rng.random_range(0.4..2.5);
    let waves: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..4.0f32),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.3..1.0f32),
            )
        })
        .collect();
    let raw: Vec<f32> = (0..256)
        .map(|k| {
            let x = (k as f32 / 255.0).powf(gamma);
            waves
                .iter()
                .map(|&(f, ph, a)| a * (std::f32::consts::TAU * f * x + ph).sin())
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = raw.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    std::array::from_fn(|k| (raw[k] - lo) / span)
}

/// Applies a modality to a single-channel image with values in `[0, 1]`.
pub fn apply_modality(image: &Tensor<f32>, spec: &ModalitySpec) -> Result<Tensor<f32>> {
    let (h, w, c) = image.hwc()?;
    if c != 1 {
        return Err(Error::Shape(format!("modalities need one channel, got {c}")));
    }
    let out = match spec.kind {
        ModalityKind::Identity => image.clone(),
        ModalityKind::Invert => image.map(|v| 1.0 - v),
        ModalityKind::GammaPalette => {
            let lut = palette(spec.seed);
            image.map(|v| lut[(v.clamp(0.0, 1.0) * 255.0).round() as usize])
        }
        ModalityKind::Quantize => {
            if spec.levels < 2 {
                return Err(Error::Usage(format!("quantize needs at least 2 levels, got {}", spec.levels)));
            }
            let k = (spec.levels - 1) as f32;
            image.map(|v| (v.clamp(0.0, 1.0) * k).round() / k)
        }
        ModalityKind::EdgeRender => {
            let d = image.data();
            let at = |y: usize, x: usize| d[y * w + x];
            Tensor::image(h, w, |y, x| {
                let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) / 2.0;
                let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) / 2.0;
                (spec.edge_gain * (gx * gx + gy * gy).sqrt()).min(1.0)
            })
        }
    };
    Ok(out)
}

/// Where input images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Procedural,
    Folder(Vec<PathBuf>),
}

impl ImageSource {
    /// Image files (png, jpg, jpeg) in `dir`, sorted by name.
    pub fn folder(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        Ok(ImageSource::Folder(files))
    }

    fn input_image(&self, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
        match self {
            ImageSource::Procedural => Ok(procedural_scene(rng, INPUT_SIZE, INPUT_SIZE)),
            ImageSource::Folder(files) => {
                let path = &files[rng.random_range(0..files.len())];
                let img = image::open(path)
                    .map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?
                    .to_luma8();
                Ok(crop_to_input(&img, rng))
            }
        }
    }
}

/// Scales the shorter side to the input size and cuts a random square.
fn crop_to_input(img: &GrayImage, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let s = INPUT_SIZE as f64 / w.min(h) as f64;
    let nw = ((w as f64 * s).round() as u32).max(INPUT_SIZE as u32);
    let nh = ((h as f64 * s).round() as u32).max(INPUT_SIZE as u32);
    let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
    let x0 = rng.random_range(0..=nw - INPUT_SIZE as u32);
    let y0 = rng.random_range(0..=nh - INPUT_SIZE as u32);
    Tensor::image(INPUT_SIZE, INPUT_SIZE, |y, x| {
        resized.get_pixel(x0 + x as u32, y0 + y as u32)[0] as f32 / 255.0
    })
}

fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y / cell;
        let ty = smooth((y % cell) as f32 / cell as f32);
        for x in 0..w {
            let gx = x / cell;
            let tx = smooth((x % cell) as f32 / cell as f32);
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(gx, gy) * (1.0 - tx) + g(gx + 1, gy) * tx;
            let bottom = g(gx, gy + 1) * (1.0 - tx) + g(gx + 1, gy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Layered noise with random rectangles, ellipses and stripes, normalized
/// to `[0, 1]` and quantized to 8 bits.
pub fn procedural_scene(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    let mut img = vec![0.0f32; h * w];
    for (cell, amp) in [(48, 1.0), (24, 0.5), (12, 0.3), (6, 0.15)] {
        for (p, n) in img.iter_mut().zip(value_noise(rng, h, w, cell)) {
            *p += amp * n;
        }
    }
    let shapes = rng.random_range(25..45);
    for _ in 0..shapes {
        let kind = rng.random_range(0..3);
        let cx = rng.random_range(-16.0..(w as f32 + 16.0));
        let cy = rng.random_range(-16.0..(h as f32 + 16.0));
        let rx = rng.random_range(4.0..36.0f32);
        let ry = rng.random_range(4.0..36.0f32);
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        let level = rng.random_range(0.0..2.0f32);
        let alpha = rng.random_range(0.4..1.0f32);
        let (sa, ca) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                let u = ca * dx + sa * dy;
                let v = -sa * dx + ca * dy;
                let inside = match kind {
                    0 => u.abs() <= rx && v.abs() <= ry,
                    1 => (u / rx).powi(2) + (v / ry).powi(2) <= 1.0,
                    _ => u.abs() <= rx * 2.0 && (v / 3.0).rem_euclid(2.0) < 1.0 && v.abs() <= ry,
                };
                if inside {
                    let p = &mut img[y * w + x];
                    *p = (1.0 - alpha) * *p + alpha * level;
                }
            }
        }
    }
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    Tensor::image(h, w, |y, x| quantize_255((img[y * w + x] - lo) / span))
}

/// Corner placement for generated pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerSampling {
    /// Uniform in the 64x64 box at each input corner.
    #[default]
    Boxes,
    /// Uniform within `±radius` per axis of the vanilla corners, clipped to
    /// the boxes.
    Jitter { radius: f64 },
}

fn box_ranges() -> [((f64, f64), (f64, f64)); 4] {
    let lo = (0.0, BOX_SIZE - 1.0);
    let hi = (INPUT_SIZE as f64 - BOX_SIZE, INPUT_SIZE as f64 - 1.0);
    [(lo, lo), (lo, hi), (hi, hi), (hi, lo)]
}

/// Draws one corner set in the input frame, ordered like the template
/// corners.
pub fn sample_corners(rng: &mut ChaCha8Rng, sampling: CornerSampling) -> CornerSet {
    let boxes = box_ranges();
    let vanilla = [(31.0, 31.0), (31.0, 159.0), (159.0, 159.0), (159.0, 31.0)];
    CornerSet(std::array::from_fn(|i| {
        let ((x0, x1), (y0, y1)) = boxes[i];
        match sampling {
            CornerSampling::Boxes => Point::new(rng.random_range(x0..=x1), rng.random_range(y0..=y1)),
            CornerSampling::Jitter { radius } => {
                let r = radius.max(0.0);
                let (vx, vy) = vanilla[i];
                let dx = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
                let dy = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
                Point::new((vx + dx).clamp(x0, x1), (vy + dy).clamp(y0, y1))
            }
        }
    }))
}

/// Whether every corner lies in its designated box.
pub fn corners_in_boxes(corners: &CornerSet) -> bool {
    corners.points().iter().zip(box_ranges()).all(|(p, ((x0, x1), (y0, y1)))| {
        p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSample {
    pub id: usize,
    pub input: Tensor<f32>,
    pub template: Tensor<f32>,
    /// Template to input.
    pub gt: HomographyParams,
    /// Template corners mapped into the input.
    pub corners: CornerSet,
    pub modality: ModalityKind,
}

/// Builds the geometry of a pair from a given input image.
pub fn pair_from_input(
    input: Tensor<f32>,
    rng: &mut ChaCha8Rng,
    sampling: CornerSampling,
) -> Result<(Tensor<f32>, HomographyParams, CornerSet)> {
    let (h, w, _) = input.hwc()?;
    if h != INPUT_SIZE || w != INPUT_SIZE {
        return Err(Error::Shape(format!("input must be {INPUT_SIZE}x{INPUT_SIZE}, got {w}x{h}")));
    }
    let src = CornerSet::rectangle(TEMPLATE_SIZE, TEMPLATE_SIZE);
    let mut last = None;
    for _ in 0..MAX_RETRIES {
        let corners = sample_corners(rng, sampling);
        match dlt_from_corners(&src, &corners) {
            Ok(gt) => {
                let template = warp_image(&input, &gt, TEMPLATE_SIZE, TEMPLATE_SIZE)?.map(quantize_255);
                return Ok((template, gt, corners));
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate("corner sampling failed".into())))
}

/// One pair from `seed`; reproducible given `(source, seed, modality)`.
pub fn synthesize_pair(
    source: &ImageSource,
    seed: u64,
    id: usize,
    modality: &ModalitySpec,
    sampling: CornerSampling,
) -> Result<AlignmentSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let input = source.input_image(&mut rng)?;
    let (template, gt, corners) = pair_from_input(input.clone(), &mut rng, sampling)?;
    let template = apply_modality(&template, modality)?.map(quantize_255);
    Ok(AlignmentSample {
        id,
        input,
        template,
        gt,
        corners,
        modality: modality.kind,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub count: usize,
    pub first_id: usize,
    pub seed: u64,
    pub modality: ModalitySpec,
    pub sampling: CornerSampling,
    pub source: ImageSource,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            count: 500,
            first_id: 0,
            seed: 0,
            modality: ModalitySpec::default(),
            sampling: CornerSampling::Boxes,
            source: ImageSource::Procedural,
        }
    }
}

pub fn generate(cfg: &GenerateConfig) -> Result<Vec<AlignmentSample>> {
    (cfg.first_id..cfg.first_id + cfg.count)
        .into_par_iter()
        .map(|id| synthesize_pair(&cfg.source, cfg.seed, id, &cfg.modality, cfg.sampling))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    p: [f64; 8],
    corners: [[f64; 2]; 4],
    modality: ModalityKind,
    version: u32,
    input_size: [usize; 2],
    template_size: [usize; 2],
}

fn sample_paths(dir: &Path, id: &str) -> [PathBuf; 3] {
    [
        dir.join(format!("{id}_input.png")),
        dir.join(format!("{id}_template.png")),
        dir.join(format!("{id}_gt.json")),
    ]
}

pub fn sample_name(id: usize) -> String {
    format!("{id:06}")
}

fn png_bytes(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, _) = t.hwc()?;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(t.data()[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|source| Error::Image {
        path: PathBuf::from("<memory>"),
        source,
    })?;
    Ok(buf.into_inner())
}

/// Reads an 8-bit grayscale image as `[h, w, 1]` values in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::image(h as usize, w as usize, |y, x| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    }))
}

pub fn write_sample(sample: &AlignmentSample, dir: &Path) -> Result<()> {
    let [input, template, gt] = sample_paths(dir, &sample_name(sample.id));
    let (ih, iw, _) = sample.input.hwc()?;
    let (th, tw, _) = sample.template.hwc()?;
    let sidecar = Sidecar {
        p: sample.gt.p,
        corners: sample.corners.points().map(|p| [p.x, p.y]),
        modality: sample.modality,
        version: SIDECAR_VERSION,
        input_size: [iw, ih],
        template_size: [tw, th],
    };
    write_atomic(&input, &png_bytes(&sample.input)?)?;
    write_atomic(&template, &png_bytes(&sample.template)?)?;
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    write_atomic(&gt, &json)
}

pub fn write_dataset(samples: &[AlignmentSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    samples.par_iter().try_for_each(|s| write_sample(s, dir))
}

/// Sample ids present in `dir`, found through their input images.
pub fn list_samples(dir: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_input.png"))
                .map(str::to_owned)
        })
        .collect();
    ids.sort();
    Ok(ids)
}

pub fn read_sample(dir: &Path, id: &str) -> Result<AlignmentSample> {
    let paths = sample_paths(dir, id);
    for p in &paths {
        if !p.exists() {
            return Err(Error::MissingFile {
                id: id.to_owned(),
                path: p.clone(),
            });
        }
    }
    let [input_path, template_path, gt_path] = paths;
    let text = fs::read(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", gt_path.display())))?;
    if sidecar.version != SIDECAR_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported version {}",
            gt_path.display(),
            sidecar.version
        )));
    }
    let input = read_gray(&input_path)?;
    let template = read_gray(&template_path)?;
    for (t, [w, h], path) in [
        (&input, sidecar.input_size, &input_path),
        (&template, sidecar.template_size, &template_path),
    ] {
        let (th, tw, _) = t.hwc()?;
        if (tw, th) != (w, h) {
            return Err(Error::Format(format!(
                "{} is {tw}x{th}, sidecar says {w}x{h}",
                path.display()
            )));
        }
    }
    let numeric_id = id
        .parse()
        .map_err(|_| Error::Format(format!("sample id `{id}` is not numeric")))?;
    Ok(AlignmentSample {
        id: numeric_id,
        input,
        template,
        gt: HomographyParams::new(sidecar.p),
        corners: CornerSet(sidecar.corners.map(|[x, y]| Point::new(x, y))),
        modality: sidecar.modality,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AlignmentSample>> {
    let ids = list_samples(dir)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    ids.par_iter().map(|id| read_sample(dir, id)).collect()
}
