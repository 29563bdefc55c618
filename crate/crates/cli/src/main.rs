use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deeplk::datagen::{
    self, read_dataset, read_gray, read_sample, sample_name, write_dataset, CornerSampling, GenerateConfig, ImageSource,
    ModalityKind, ModalitySpec,
};
use deeplk::eval::{align, center_is_minimum, dump_features, evaluate, landscape_probe, Features, Initial, LandscapeAxes};
use deeplk::network::load_checkpoint;
use deeplk::solver::{trace_csv, SolverConfig};
use deeplk::trainer::{derive_seed, train, TrainConfig};
use deeplk::{Error, HomographyParams, NetworkParams, Result};

#[derive(Parser)]
#[command(name = "deeplk", version, about = "Homography alignment with inverse-compositional Lucas-Kanade on learned feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train and test splits of image pairs.
    Generate(GenerateArgs),
    /// Train both network branches from a JSON or TOML config.
    Train(TrainArgs),
    /// Align one template to one input image.
    Align(AlignArgs),
    /// Evaluate corner errors over a dataset split.
    Eval(EvalArgs),
    /// Tabulate the objective around the ground truth of one pair.
    Landscape(LandscapeArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output root; receives `train/` and `test/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Template modality: identity, invert, gamma_palette, edge_render, quantize.
    #[arg(long, default_value = "identity")]
    modality: String,
    /// Folder of source images; procedural scenes when omitted.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Keep corners within this many pixels of the vanilla corners instead
    /// of anywhere in their boxes.
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON, or TOML when the extension is `.toml`.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `resume` from the config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct FeatureArgs {
    /// Trained checkpoint.
    #[arg(long, env = "DLKFM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Align blurred intensities instead of learned feature maps.
    #[arg(long)]
    intensity: bool,
    /// Initial homography as JSON (`{"p": [...]}`); the vanilla start when omitted.
    #[arg(long)]
    initial: Option<PathBuf>,
    /// Solver settings as JSON.
    #[arg(long)]
    solver: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    /// Ground-truth JSON, used for error reporting only.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the iteration trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the six feature maps as PNGs into this directory.
    #[arg(long)]
    dump_features: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    features: FeatureArgs,
    /// Receives `samples.csv`, `curve.csv` and `summary.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxesArg {
    Translation,
    Scale,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    /// Sample id within the split.
    #[arg(long)]
    id: usize,
    /// Trained checkpoint; intensity only when omitted.
    #[arg(long, env = "DLKFM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "translation")]
    axes: AxesArg,
    /// Half-width of the grid; 10 px for translation, 0.2 for scale by default.
    #[arg(long)]
    range: Option<f64>,
    #[arg(long, default_value_t = 21)]
    steps: usize,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_params(checkpoint: Option<&Path>) -> Result<NetworkParams> {
    let path = checkpoint.ok_or_else(|| {
        Error::Usage("a checkpoint is required (--checkpoint or DLKFM_CHECKPOINT), or pass --intensity".into())
    })?;
    load_checkpoint(path)
}

struct Resolved {
    params: Option<NetworkParams>,
    initial: Initial,
    solver: SolverConfig,
}

impl Resolved {
    fn new(args: &FeatureArgs) -> Result<Self> {
        let params = if args.intensity {
            None
        } else {
            Some(load_params(args.checkpoint.as_deref())?)
        };
        let initial = match &args.initial {
            Some(path) => Initial::External(read_json::<HomographyParams>(path)?),
            None => Initial::Vanilla,
        };
        let solver: SolverConfig = match &args.solver {
            Some(path) => read_json(path)?,
            None => SolverConfig::default(),
        };
        solver.validate()?;
        Ok(Self { params, initial, solver })
    }

    fn features(&self) -> Features<'_> {
        match &self.params {
            Some(p) => Features::Learned(p),
            None => Features::Intensity,
        }
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let kind: ModalityKind = args.modality.parse()?;
    let source = match &args.source {
        Some(dir) => ImageSource::folder(dir)?,
        None => ImageSource::Procedural,
    };
    let sampling = match args.jitter {
        Some(radius) => CornerSampling::Jitter { radius },
        None => CornerSampling::Boxes,
    };
    let modality = ModalitySpec {
        seed: args.seed,
        ..ModalitySpec::new(kind)
    };
    for (split, count, seed) in [
        ("train", args.train, args.seed),
        ("test", args.test, derive_seed(args.seed, 1, 0)),
    ] {
        if count == 0 {
            continue;
        }
        let cfg = GenerateConfig {
            count,
            first_id: 0,
            seed,
            modality,
            sampling,
            source: source.clone(),
        };
        let samples = datagen::generate(&cfg)?;
        write_dataset(&samples, &args.out.join(split))?;
        println!("{split}: {count} pairs in {}", args.out.join(split).display());
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(resume) = args.resume {
        cfg.resume = Some(resume);
    }
    let outcome = train(&cfg)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "step {} total {:.6} l_bc {:.6}; checkpoint {}",
            last.step,
            last.terms.total,
            last.terms.l_bc,
            outcome.final_checkpoint.display()
        );
    }
    Ok(())
}

fn align_cmd(args: AlignArgs) -> Result<()> {
    let resolved = Resolved::new(&args.features)?;
    let template = read_gray(&args.template)?;
    let input = read_gray(&args.input)?;
    let gt = match &args.gt {
        Some(path) => Some(read_json::<HomographyParams>(path)?),
        None => None,
    };
    let out = align(&template, &input, resolved.features(), &resolved.initial, &resolved.solver, gt.as_ref())?;
    if let Some(dir) = &args.dump_features {
        let params = resolved
            .params
            .as_ref()
            .ok_or_else(|| Error::Usage("--dump-features needs a checkpoint".into()))?;
        dump_features(params, &template, &input, dir)?;
    }
    if let Some(path) = &args.trace {
        write(path, &trace_csv(&out.solve.trace))?;
    }
    let mut json = serde_json::json!({
        "homography": out.p(),
        "initial": out.initial,
        "iterations": out.solve.trace.len(),
        "diverged": out.diverged,
        "features": resolved.features().name(),
    });
    if let Some((e0, e1)) = out.errors {
        json["initial_error"] = e0.into();
        json["final_error"] = e1.into();
    }
    if let Some(msg) = &out.solve.error {
        json["solver_error"] = msg.clone().into();
    }
    let text = serde_json::to_string_pretty(&json)? + "\n";
    match &args.out {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let resolved = Resolved::new(&args.features)?;
    let samples = read_dataset(&args.data)?;
    let report = evaluate(&samples, resolved.features(), &resolved.initial, &resolved.solver)?;
    write(&args.out.join("samples.csv"), &report.samples_csv())?;
    write(&args.out.join("curve.csv"), &report.curve_csv())?;
    let summary = serde_json::to_string_pretty(&report.summary_json())? + "\n";
    write(&args.out.join("summary.json"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn landscape_cmd(args: LandscapeArgs) -> Result<()> {
    let params = match &args.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let sample = read_sample(&args.data, &sample_name(args.id))?;
    let axes = match args.axes {
        AxesArg::Translation => LandscapeAxes::Translation,
        AxesArg::Scale => LandscapeAxes::Scale,
    };
    let range = args.range.unwrap_or(axes.default_range());
    let l = landscape_probe(&sample.template, &sample.input, &sample.gt, params.as_ref(), axes, range, args.steps)?;
    write(&args.out, &l.csv())?;
    let n = l.steps();
    let mut json = serde_json::json!({
        "cells": n * n,
        "intensity_center_is_minimum": center_is_minimum(&l.intensity, n),
    });
    if let Some(learned) = &l.learned {
        json["dlkfm_center_is_minimum"] = center_is_minimum(learned, n).into();
    }
    println!("{json}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train_cmd(a),
        Command::Align(a) => align_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Landscape(a) => landscape_cmd(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
