//! Two-branch convolutional feature network and its checkpoint format.
//!
//! Each branch is a stack of blocks. Inside a block the first layer may be
//! strided and changes the channel count, the second layer is a plain
//! convolution, and every following pair of layers is wrapped in an identity
//! shortcut. ReLU follows every convolution except the one producing the
//! block output, which feeds the feature constructor unrectified.
//!
//! Checkpoint layout: 8-byte magic, little-endian `u64` header length, a
//! JSON header (version, architecture, tensor manifest with shapes and byte
//! offsets) and the raw little-endian `f32` blobs in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, FeaturePyramid, Scale};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DLKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub num_layers: usize,
    pub filters: usize,
    pub first_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Architecture {
    fn uniform(layers: usize, filters: usize) -> Self {
        Self {
            in_channels: 1,
            blocks: [1, 2, 2]
                .into_iter()
                .map(|first_stride| BlockSpec {
                    num_layers: layers,
                    filters,
                    first_stride,
                })
                .collect(),
        }
    }

    /// Three blocks of eight 64-filter layers.
    pub fn full() -> Self {
        Self::uniform(8, 64)
    }

    /// Three blocks of four 16-filter layers, the CPU default.
    pub fn desk() -> Self {
        Self::uniform(4, 16)
    }

    /// Three blocks with `layers` layers of `filters` filters each.
    pub fn small(layers: usize, filters: usize) -> Self {
        Self::uniform(layers, filters)
    }

    pub fn with_in_channels(mut self, channels: usize) -> Self {
        self.in_channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config {
            field: "architecture".into(),
            message: msg,
        });
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one block is required".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.num_layers < 2 || b.num_layers % 2 != 0 {
                return bad(format!("block {i}: num_layers must be even and >= 2, got {}", b.num_layers));
            }
            if b.filters == 0 {
                return bad(format!("block {i}: filters must be >= 1"));
            }
            if b.first_stride != 1 && b.first_stride != 2 {
                return bad(format!("block {i}: first_stride must be 1 or 2, got {}", b.first_stride));
            }
        }
        Ok(())
    }

    /// Product of all strides; input sizes must be divisible by it.
    pub fn total_stride(&self) -> usize {
        self.blocks.iter().map(|b| b.first_stride).product()
    }

    /// `(in_channels, out_channels, stride)` per layer, per block.
    pub fn layer_shapes(&self) -> Vec<Vec<(usize, usize, usize)>> {
        let mut cin = self.in_channels;
        self.blocks
            .iter()
            .map(|b| {
                let layers = (0..b.num_layers)
                    .map(|l| {
                        if l == 0 {
                            (cin, b.filters, b.first_stride)
                        } else {
                            (b.filters, b.filters, 1)
                        }
                    })
                    .collect();
                cin = b.filters;
                layers
            })
            .collect()
    }

    /// Scalars per branch.
    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .flatten()
            .map(|&(ci, co, _)| 9 * ci * co + co)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Template,
    Input,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Template => "template",
            Branch::Input => "input",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    pub branch: Branch,
    pub blocks: Vec<Vec<ConvLayer>>,
}

/// Graph handles for one branch's parameters.
#[derive(Clone, Debug)]
pub struct BranchVars {
    layers: Vec<Vec<(Var, Var, usize)>>,
}

impl BranchVars {
    /// Kernel and bias handles in [`BranchParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|&(k, b, _)| [k, b])
            .collect()
    }
}

impl BranchParams {
    fn init(arch: &Architecture, branch: Branch, rng: &mut ChaCha8Rng) -> Self {
        let blocks = arch
            .layer_shapes()
            .into_iter()
            .map(|layers| {
                layers
                    .into_iter()
                    .map(|(ci, co, stride)| {
                        let std = (2.0 / (9 * ci) as f64).sqrt();
                        let normal = Normal::new(0.0, std).expect("finite std");
                        let kernel = Tensor::from_fn(&[3, 3, ci, co], |_| normal.sample(rng) as f32);
                        ConvLayer {
                            kernel,
                            bias: Tensor::zeros(&[co]),
                            stride,
                        }
                    })
                    .collect()
            })
            .collect();
        Self { branch, blocks }
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, layer) in block.iter().enumerate() {
                let prefix = format!("{}.b{b}.l{l}", self.branch.name());
                out.push((format!("{prefix}.kernel"), &layer.kernel));
                out.push((format!("{prefix}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.blocks
            .iter_mut()
            .flatten()
            .flat_map(|layer| [&mut layer.kernel, &mut layer.bias])
            .collect()
    }

    /// Adds the parameters to `g`, as leaves when `trainable`, otherwise as
    /// constants.
    pub fn register<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Result<BranchVars> {
        let values: Vec<Tensor<T>> = self.tensors().into_iter().map(|(_, t)| t.cast()).collect();
        self.register_values(g, values, trainable)
    }

    /// Like [`register`](Self::register) but with replacement values, given
    /// in [`tensors`](Self::tensors) order.
    pub fn register_values<T: Real>(
        &self,
        g: &mut Graph<T>,
        values: Vec<Tensor<T>>,
        trainable: bool,
    ) -> Result<BranchVars> {
        let expected = self.tensors();
        if values.len() != expected.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors given, branch has {}",
                values.len(),
                expected.len()
            )));
        }
        for ((name, t), v) in expected.iter().zip(&values) {
            if t.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, value has {:?}",
                    t.shape(),
                    v.shape()
                )));
            }
        }
        let mut values = values.into_iter();
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut vars = Vec::with_capacity(block.len());
            for layer in block {
                let (k, b) = (values.next().expect("checked"), values.next().expect("checked"));
                let (k, b) = if trainable {
                    (g.leaf(k)?, g.leaf(b)?)
                } else {
                    (g.constant(k)?, g.constant(b)?)
                };
                vars.push((k, b, layer.stride));
            }
            layers.push(vars);
        }
        Ok(BranchVars { layers })
    }

    /// Single-channel DLKFM pyramid of `image` (inference only).
    pub fn feature_pyramid(&self, image: &Tensor<f32>) -> Result<FeaturePyramid> {
        let mut g = Graph::<f32>::new();
        let vars = self.register(&mut g, false)?;
        let x = g.constant(image.clone())?;
        let blocks = forward_blocks(&mut g, &vars, x)?;
        if blocks.len() != 3 {
            return Err(Error::ArchitectureMismatch(format!(
                "a feature pyramid needs 3 blocks, architecture has {}",
                blocks.len()
            )));
        }
        let mut maps = Vec::with_capacity(3);
        for (block, scale) in blocks.into_iter().zip(Scale::ALL) {
            let m = g.dlkfm(block)?;
            maps.push(FeatureMap::new(g.value(m).clone(), scale)?);
        }
        let [a, b, c]: [FeatureMap; 3] = maps.try_into().expect("three maps");
        FeaturePyramid::new([a, b, c])
    }
}

/// Runs a branch and returns one output per block.
pub fn forward_blocks<T: Real>(g: &mut Graph<T>, vars: &BranchVars, image: Var) -> Result<Vec<Var>> {
    let (h, w, _) = g.value(image).hwc()?;
    let total_stride: usize = vars
        .layers
        .iter()
        .map(|block| block.first().map_or(1, |l| l.2))
        .product();
    if h % total_stride != 0 || w % total_stride != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by the network stride {total_stride}"
        )));
    }
    let mut x = image;
    let mut outputs = Vec::with_capacity(vars.layers.len());
    for block in &vars.layers {
        let n = block.len();
        let last = n - 1;
        let conv = |g: &mut Graph<T>, input: Var, l: usize| {
            let (k, b, s) = block[l];
            g.conv2d(input, k, b, s)
        };
        let mut h = conv(g, x, 0)?;
        h = g.relu(h)?;
        h = conv(g, h, 1)?;
        if last != 1 {
            h = g.relu(h)?;
        }
        let mut l = 2;
        while l + 1 < n {
            let y = conv(g, h, l)?;
            let y = g.relu(y)?;
            let y = conv(g, y, l + 1)?;
            h = g.add(y, h)?;
            if l + 1 != last {
                h = g.relu(h)?;
            }
            l += 2;
        }
        outputs.push(h);
        x = h;
    }
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub template: BranchParams,
    pub input: BranchParams,
}

impl NetworkParams {
    /// He-normal kernels, zero biases. The two branches draw from separate
    /// streams of one seeded generator.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let template = BranchParams::init(arch, Branch::Template, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let input = BranchParams::init(arch, Branch::Input, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            template,
            input,
        })
    }

    pub fn branch(&self, branch: Branch) -> &BranchParams {
        match branch {
            Branch::Template => &self.template,
            Branch::Input => &self.input,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut t = self.template.tensors();
        t.extend(self.input.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut t = self.template.tensors_mut();
        t.extend(self.input.tensors_mut());
        t
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Training progress stored alongside the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub epoch: usize,
    pub step: usize,
    /// Extra named tensors, e.g. optimizer moments.
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProgressHeader {
    epoch: usize,
    step: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<ProgressHeader>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut named: Vec<(String, &Tensor<f32>)> = self.params.tensors();
        if let Some(state) = &self.training {
            named.extend(state.tensors.iter().map(|(n, t)| (n.clone(), t)));
        }
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(named.len());
        for (name, t) in &named {
            let len = (t.len() * 4) as u64;
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            architecture: self.params.arch.clone(),
            training: self.training.as_ref().map(|s| ProgressHeader {
                epoch: s.epoch,
                step: s.step,
            }),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        header.architecture.validate()?;
        let blob = &bytes[body..];

        let read = |entry: &TensorEntry| -> Result<Tensor<f32>> {
            let start = entry.offset as usize;
            let end = start
                .checked_add(entry.len as usize)
                .filter(|&e| e <= blob.len())
                .ok_or_else(|| Error::Format(format!("truncated data for tensor `{}`", entry.name)))?;
            if entry.len as usize != entry.shape.iter().product::<usize>() * 4 {
                return Err(Error::Format(format!("tensor `{}` length disagrees with shape", entry.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(entry.shape.clone(), data)
        };

        let mut params = NetworkParams::init(&header.architecture, 0)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if header.tensors.len() < expected.len() {
            return Err(Error::Format("checkpoint is missing parameter tensors".into()));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::Format(format!(
                    "expected tensor `{name}` {shape:?}, found `{}` {:?}",
                    entry.name, entry.shape
                )));
            }
            loaded.push(read(entry)?);
        }
        for (slot, t) in params.tensors_mut().into_iter().zip(loaded) {
            *slot = t;
        }
        let extra = header.tensors[expected.len()..]
            .iter()
            .map(|e| Ok((e.name.clone(), read(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let training = match header.training {
            Some(p) => Some(TrainingState {
                epoch: p.epoch,
                step: p.step,
                tensors: extra,
            }),
            None if extra.is_empty() => None,
            None => return Err(Error::Format("extra tensors without training state".into())),
        };
        Ok(Self { params, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    Checkpoint {
        params: params.clone(),
        training: None,
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    Ok(Checkpoint::load(path)?.params)
}

/// Loads a checkpoint that must match `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &Architecture) -> Result<NetworkParams> {
    let params = load_checkpoint(path)?;
    if &params.arch != expected {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            params.arch, expected
        )));
    }
    Ok(params)
}

/// Write through a temporary sibling and rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
