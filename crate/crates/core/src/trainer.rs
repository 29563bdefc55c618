//! Adam training of both branches against the total loss.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datagen::{read_dataset, AlignmentSample};
use crate::error::{Error, Result};
use crate::geometry::HomographyParams;
use crate::loss::{loss_csv_row, sample_loss, sample_offsets, LossConfig, LossTerms, LossVars, LOSS_CSV_HEADER};
use crate::network::{forward_blocks, Architecture, Checkpoint, NetworkParams, TrainingState};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train_dir: PathBuf,
    /// Receives checkpoints and `loss.csv`.
    pub out_dir: PathBuf,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub architecture: Architecture,
    /// Extra checkpoint every this many steps; 0 keeps only the per-epoch
    /// and final ones.
    pub checkpoint_every: usize,
    /// Worker threads for per-sample gradients; 0 uses every core.
    pub threads: usize,
    /// Use only the first `max_samples` pairs of the training set.
    pub max_samples: Option<usize>,
    /// Checkpoint with training state to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_dir: PathBuf::from("data/train"),
            out_dir: PathBuf::from("runs/default"),
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            loss: LossConfig::default(),
            architecture: Architecture::desk(),
            checkpoint_every: 0,
            threads: 1,
            max_samples: None,
            resume: None,
        }
    }
}

fn config_error(path: String, message: String) -> Error {
    Error::Config {
        field: if path.is_empty() || path == "." { "<root>".into() } else { path },
        message,
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| config_error(e.path().to_string(), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| config_error(String::new(), e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| config_error(e.path().to_string(), e.inner().message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.toml` file as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(config_error(field.into(), message));
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, format!("must lie in [0, 1), got {b}"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon", format!("must be positive, got {}", self.epsilon));
        }
        if self.max_samples == Some(0) {
            return bad("max_samples", "must be at least 1".into());
        }
        self.loss.validate()?;
        self.architecture.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First and second moments plus the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &NetworkParams) -> Self {
        let tensors = params.tensors();
        let shapes: Vec<&[usize]> = tensors.iter().map(|(_, t)| t.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() || p.shape() != state.v[i].shape() {
            return Err(Error::Shape(format!(
                "adam: tensor {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gj = gj as f64;
            let mn = b1 * *mj as f64 + (1.0 - b1) * gj;
            let vn = b2 * *vj as f64 + (1.0 - b2) * gj * gj;
            *mj = mn as f32;
            *vj = vn as f32;
            let update = cfg.learning_rate * (mn / c1) / ((vn / c2).sqrt() + cfg.epsilon);
            *pj = (*pj as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Mixes `(seed, epoch, step)` into one generator seed.
pub fn derive_seed(seed: u64, epoch: u64, step: u64) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(mix(mix(seed) ^ epoch) ^ step)
}

/// Builds the loss of one pair on `g`. `values` replaces the parameters,
/// in [`NetworkParams::tensors`] order; the returned handles follow the
/// same order.
#[allow(clippy::too_many_arguments)]
pub fn pair_loss<T: Real>(
    g: &mut Graph<T>,
    params: &NetworkParams,
    values: Vec<Tensor<T>>,
    template: &Tensor<f32>,
    input: &Tensor<f32>,
    gt: &HomographyParams,
    offsets: &[[f64; 8]],
    cfg: &LossConfig,
) -> Result<(LossVars, Vec<Var>)> {
    let n_t = params.template.tensors().len();
    let mut values = values;
    let input_values = values.split_off(n_t.min(values.len()));
    let vt = params.template.register_values(g, values, true)?;
    let vi = params.input.register_values(g, input_values, true)?;
    let xt = g.constant(template.cast())?;
    let xi = g.constant(input.cast())?;
    let bt = forward_blocks(g, &vt, xt)?;
    let bi = forward_blocks(g, &vi, xi)?;
    if bt.len() != 3 || bi.len() != 3 {
        return Err(Error::ArchitectureMismatch("training needs exactly 3 blocks".into()));
    }
    let mut ft = [bt[0]; 3];
    let mut fi = [bi[0]; 3];
    for k in 0..3 {
        ft[k] = g.dlkfm(bt[k])?;
        fi[k] = g.dlkfm(bi[k])?;
    }
    let vars = sample_loss(g, &ft, &fi, gt, offsets, cfg)?;
    let mut handles = vt.vars();
    handles.extend(vi.vars());
    Ok((vars, handles))
}

/// Loss terms and parameter gradients of one pair.
pub fn pair_gradients(
    params: &NetworkParams,
    sample: &AlignmentSample,
    offsets: &[[f64; 8]],
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<Tensor<f32>>)> {
    let mut g = Graph::<f32>::new();
    let values = params.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let (vars, handles) = pair_loss(&mut g, params, values, &sample.template, &sample.input, &sample.gt, offsets, cfg)?;
    g.backward(vars.total)?;
    let terms = vars.terms(&g)?;
    let grads = handles
        .iter()
        .map(|&h| g.grad(h).cloned().ok_or(Error::NonFinite("missing parameter gradient")))
        .collect::<Result<Vec<_>>>()?;
    Ok((terms, grads))
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub terms: LossTerms,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<LossRow>,
    pub final_checkpoint: PathBuf,
}

fn adam_tensors(state: &AdamState) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::with_capacity(2 * state.m.len());
    for (i, m) in state.m.iter().enumerate() {
        out.push((format!("adam.m.{i}"), m.clone()));
    }
    for (i, v) in state.v.iter().enumerate() {
        out.push((format!("adam.v.{i}"), v.clone()));
    }
    out
}

fn save_state(params: &NetworkParams, adam: &AdamState, epoch: usize, path: &Path) -> Result<()> {
    Checkpoint {
        params: params.clone(),
        training: Some(TrainingState {
            epoch,
            step: adam.t as usize,
            tensors: adam_tensors(adam),
        }),
    }
    .save(path)
}

fn restore(path: &Path, arch: &Architecture) -> Result<(NetworkParams, AdamState)> {
    let ck = Checkpoint::load(path)?;
    if &ck.params.arch != arch {
        return Err(Error::ArchitectureMismatch(format!(
            "resume checkpoint has {:?}, config has {:?}",
            ck.params.arch, arch
        )));
    }
    let mut adam = AdamState::for_params(&ck.params);
    let state = ck
        .training
        .ok_or_else(|| Error::Format(format!("{} has no training state", path.display())))?;
    let n = adam.m.len();
    if state.tensors.len() != 2 * n {
        return Err(Error::Format(format!(
            "{} holds {} optimizer tensors, expected {}",
            path.display(),
            state.tensors.len(),
            2 * n
        )));
    }
    let mut it = state.tensors.into_iter().map(|(_, t)| t);
    for slot in adam.m.iter_mut().chain(adam.v.iter_mut()) {
        let t = it.next().expect("counted");
        if t.shape() != slot.shape() {
            return Err(Error::Format("optimizer tensor shape mismatch".into()));
        }
        *slot = t;
    }
    adam.t = state.step as u64;
    Ok((ck.params, adam))
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("step_{step:06}.ckpt"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ckpt")
}

/// Trains on the pairs in `cfg.train_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut samples = read_dataset(&cfg.train_dir)?;
    if let Some(n) = cfg.max_samples {
        samples.truncate(n);
    }
    train_on(cfg, &samples)
}

/// Trains on in-memory pairs; `cfg.train_dir` is ignored.
pub fn train_on(cfg: &TrainConfig, samples: &[AlignmentSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset(cfg.train_dir.clone()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let (mut params, mut adam) = match &cfg.resume {
        Some(path) => restore(path, &cfg.architecture)?,
        None => {
            let p = NetworkParams::init(&cfg.architecture, cfg.seed)?;
            let a = AdamState::for_params(&p);
            (p, a)
        }
    };
    let adam_cfg = AdamConfig::from(cfg);
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let done = adam.t as usize;
    let csv_path = cfg.out_dir.join("loss.csv");
    let mut csv = if done > 0 && csv_path.exists() {
        OpenOptions::new().append(true).open(&csv_path)
    } else {
        fs::File::create(&csv_path).and_then(|mut f| writeln!(f, "{LOSS_CSV_HEADER}").map(|_| f))
    }
    .map_err(|e| Error::io(&csv_path, e))?;

    let mut log = Vec::new();
    for epoch in done / steps_per_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX)));
        let first = if epoch == done / steps_per_epoch { done % steps_per_epoch } else { 0 };
        for (b, batch) in order.chunks(cfg.batch_size).enumerate().skip(first) {
            let step = epoch * steps_per_epoch + b + 1;
            let offsets = sample_offsets(cfg.loss.m, &cfg.loss, derive_seed(cfg.seed, epoch as u64, step as u64));
            let results: Vec<Result<(LossTerms, Vec<Tensor<f32>>)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| pair_gradients(&params, &samples[i], &offsets, &cfg.loss))
                    .collect()
            });
            let diverged = |message: String, params: &NetworkParams, adam: &AdamState| {
                let path = cfg.out_dir.join("last_good.ckpt");
                match save_state(params, adam, epoch, &path) {
                    Ok(()) => Error::Diverged {
                        epoch,
                        step,
                        message: format!("{message}; last good checkpoint at {}", path.display()),
                    },
                    Err(e) => e,
                }
            };
            let scale = 1.0 / batch.len() as f32;
            let mut terms = Vec::with_capacity(batch.len());
            let mut grads: Option<Vec<Tensor<f32>>> = None;
            for r in results {
                let (t, g) = match r {
                    Ok(x) => x,
                    Err(e @ (Error::Numeric(_) | Error::NonFinite(_))) => {
                        return Err(diverged(e.to_string(), &params, &adam))
                    }
                    Err(e) => return Err(e),
                };
                terms.push(t);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                }
            }
            let mut grads = grads.expect("non-empty batch");
            grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            let mean = LossTerms::mean(&terms);
            if !mean.is_finite() || grads.iter().any(|t| !t.is_finite()) {
                return Err(diverged("non-finite loss or gradient".into(), &params, &adam));
            }
            adam_step(&mut params.tensors_mut(), &grads, &mut adam, &adam_cfg)?;
            writeln!(csv, "{}", loss_csv_row(epoch, step, &mean)).map_err(|e| Error::io(&csv_path, e))?;
            log.push(LossRow {
                epoch,
                step,
                terms: mean,
            });
            if cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every) {
                save_state(&params, &adam, epoch, &checkpoint_path(&cfg.out_dir, step))?;
            }
        }
        save_state(&params, &adam, epoch + 1, &cfg.out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let final_checkpoint = final_checkpoint_path(&cfg.out_dir);
    save_state(&params, &adam, cfg.epochs, &final_checkpoint)?;
    Ok(TrainOutcome {
        params,
        log,
        final_checkpoint,
    })
}
