use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use layerforge_core::bench::{benchmark, render_table, BenchOptions};
use layerforge_core::blend::{compose, BlendMode};
use layerforge_core::error::{Error, Result};
use layerforge_core::flow::{gradcheck, load_token_dataset, noise, train, LossProbe, TokenTriplet, TrainConfig};
use layerforge_core::image::{AlphaMap, LayerImage};
use layerforge_core::inverse::{invert_background, invert_foreground, DEFAULT_EPS};
use layerforge_core::model::{load_checkpoint, LpecMode, ModelConfig, ModelState};
use layerforge_core::pipeline::{run_pipeline, validate_config, PipelineOptions, StageStatus};
use layerforge_core::sampler::{sample, SamplerConfig, SamplerMethod};
use layerforge_core::seed;
use layerforge_core::synth::{build_dataset, load_manifest, Source, Split, Subtask, SynthSpec};

const SEED_ENV: &str = "LAYERFORGE_SEED";

#[derive(Parser)]
#[command(name = "layerforge", version, about = "Layer decomposition toolkit: blend algebra, synthesis, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a (foreground, background, composite) triplet dataset.
    Synth(SynthArgs),
    /// Blend an RGBA foreground over an RGB background.
    Compose(ComposeArgs),
    /// Recover one layer analytically from the composite and the other layer.
    Invert(InvertArgs),
    /// Train the decomposition model on a dataset manifest.
    Train(TrainArgs),
    /// Decompose one composite with a trained checkpoint.
    Sample(SampleArgs),
    /// Benchmark model, analytic oracle and identity baseline on a test split.
    Eval(EvalArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run synth, train, sample and eval from one config file.
    Pipeline(PipelineArgs),
    /// Check a pipeline config file and list every violation.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    subtask: Subtask,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long = "train", default_value_t = 256)]
    count_train: usize,
    #[arg(long = "test", default_value_t = 32)]
    count_test: usize,
    #[arg(long)]
    alpha_min: Option<f64>,
    #[arg(long)]
    alpha_max: Option<f64>,
    /// Directory of foreground images; procedural when omitted.
    #[arg(long)]
    fg_dir: Option<PathBuf>,
    /// Directory of background images; procedural when omitted.
    #[arg(long)]
    bg_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    fg: PathBuf,
    #[arg(long)]
    bg: PathBuf,
    #[arg(long)]
    mode: BlendMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InvertArgs {
    /// Composite image.
    #[arg(long)]
    comp: PathBuf,
    #[arg(long)]
    mode: BlendMode,
    /// Known RGBA foreground; recovers the background.
    #[arg(long, conflicts_with = "bg")]
    fg: Option<PathBuf>,
    /// Known background; recovers the foreground (requires --alpha).
    #[arg(long, requires = "alpha")]
    bg: Option<PathBuf>,
    /// Foreground alpha map (grayscale).
    #[arg(long)]
    alpha: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long)]
    out: PathBuf,
    /// Optional black/white validity mask output.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 2)]
    mlp_ratio: usize,
    #[arg(long, default_value_t = 4)]
    patch: usize,
    #[arg(long, default_value_t = 4)]
    prompt_tokens: usize,
    /// Ablation: give every stream its own positional frame.
    #[arg(long)]
    no_lpec: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    adam_eps: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Loss trace CSV (step,t,loss,grad_norm).
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value = "euler")]
    method: SamplerMethod,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            method: self.method,
            steps: self.steps,
            eta: self.eta,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Composite image.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    subtask: Subtask,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Output directory for foreground.png and background.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Write 0 instead of wall-clock seconds into the CSVs.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Checkpoint to probe; a random small model when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Blocks of the random model (0 gives a linear probe).
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 1000)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    fd_step: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Fail when the maximum relative error exceeds this.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Re-run stages whose outputs already exist.
    #[arg(long)]
    force: bool,
    /// Root seed; overrides the config file.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("ERROR args: {}", msg.trim_start_matches("error: ").trim_end());
            return ExitCode::from(2);
        }
    };
    let stage = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Compose(_) => "compose",
        Command::Invert(_) => "invert",
        Command::Train(_) => "train",
        Command::Sample(_) => "sample",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
        Command::Pipeline(_) => "pipeline",
        Command::Validate(_) => "validate",
    };
    let result = match cli.command {
        Command::Pipeline(a) => return cmd_pipeline(a),
        Command::Validate(a) => return cmd_validate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Invert(a) => cmd_invert(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {stage}: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.subtask, a.width, a.height, a.count_train, a.count_test, a.seed);
    spec.patch = a.patch;
    let (lo, hi) = spec.alpha_range;
    spec.alpha_range = (a.alpha_min.unwrap_or(lo), a.alpha_max.unwrap_or(hi));
    if a.fg_dir.is_some() || a.bg_dir.is_some() {
        spec.source = Source::Corpus {
            fg_dir: a.fg_dir,
            bg_dir: a.bg_dir,
        };
    }
    let s = build_dataset(&spec, &a.out)?;
    println!(
        "wrote {} train + {} test triplets ({} bytes) to {}",
        s.n_train,
        s.n_test,
        s.bytes,
        a.out.display()
    );
    Ok(())
}

fn cmd_compose(a: ComposeArgs) -> Result<()> {
    let fg = LayerImage::load(&a.fg, 4)?;
    let bg = LayerImage::load(&a.bg, 3)?;
    compose(&fg, &bg, a.mode)?.quantized().save_png(&a.out)
}

fn save_mask(path: &Path, like: &LayerImage, mask: &[bool]) -> Result<()> {
    let data = mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    LayerImage::new(like.width(), like.height(), 1, data)
        .or_else(|_| {
            let rgb = mask.iter().flat_map(|&v| [if v { 1.0 } else { 0.0 }; 3]).collect();
            LayerImage::new(like.width(), like.height(), 3, rgb)
        })?
        .save_png(path)
}

fn cmd_invert(a: InvertArgs) -> Result<()> {
    let comp = LayerImage::load(&a.comp, 3)?;
    let result = match (&a.fg, &a.bg) {
        (Some(fg), None) => invert_background(&comp, &LayerImage::load(fg, 4)?, a.mode, a.eps)?,
        (None, Some(bg)) => {
            let alpha = AlphaMap::load(a.alpha.as_ref().expect("clap enforces --alpha"))?;
            invert_foreground(&comp, &LayerImage::load(bg, 3)?, &alpha, a.mode, a.eps)?
        }
        _ => return Err(Error::InvalidInput("pass exactly one of --fg or --bg".into())),
    };
    result.recovered.quantized().save_png(&a.out)?;
    if let Some(mask) = &a.mask {
        save_mask(mask, &result.recovered, &result.valid_mask)?;
    }
    println!(
        "valid pixels: {}/{}  ambiguous: {}  residual: {:.3e}",
        result.valid_count(),
        result.valid_mask.len(),
        result.ambiguous_mask.iter().filter(|&&v| v).count(),
        result.residual
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let records = load_manifest(&a.manifest)?;
    let first = records
        .iter()
        .find(|r| r.split == Split::Train)
        .ok_or_else(|| Error::InvalidInput("manifest has no train records".into()))?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let probe = first.load(base)?;
    let config = ModelConfig {
        d: a.model.d,
        heads: a.model.heads,
        blocks: a.model.blocks,
        mlp_ratio: a.model.mlp_ratio,
        patch: a.model.patch,
        prompt_tokens: a.model.prompt_tokens,
        width: probe.comp.width(),
        height: probe.comp.height(),
        lpec: if a.model.no_lpec { LpecMode::Off } else { LpecMode::Clone },
        seed: seed::derive(a.seed, "model"),
        ..ModelConfig::default()
    };
    let state = ModelState::init(config)?;
    println!("model parameters: {}", state.parameter_count());
    let data = load_token_dataset(&a.manifest, Split::Train, a.model.patch)?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.adam_eps,
        seed: seed::derive(a.seed, "train"),
        loss_log: a.loss_log,
        checkpoint_every: a.checkpoint_every,
        checkpoint_path: Some(a.out.clone()),
    };
    let out = train(state, &data, &cfg)?;
    let mean = |recs: &[layerforge_core::flow::TrainStepRecord]| {
        recs.iter().map(|r| r.loss).sum::<f64>() / recs.len().max(1) as f64
    };
    let k = out.trace.len().min(100);
    println!(
        "first {k} steps mean loss {:.5}, last {k} steps mean loss {:.5}; checkpoint {}",
        mean(&out.trace[..k]),
        mean(&out.trace[out.trace.len() - k..]),
        a.out.display()
    );
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?.state;
    let z = LayerImage::load(&a.input, 3)?;
    let layers = sample(&state, &z, a.subtask, &a.sampler.config())?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    if let Some(fg) = layers.foreground {
        fg.save_png(&a.out.join("foreground.png"))?;
    }
    if let Some(bg) = layers.background {
        bg.save_png(&a.out.join("background.png"))?;
    }
    println!("wrote layers to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?.state;
    let opts = BenchOptions {
        timing_in_csv: !a.no_timing,
        ..BenchOptions::default()
    };
    let report = benchmark(&a.manifest, Some(&state), &a.sampler.config(), &a.out, &opts)?;
    print!("{}", render_table(&report));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let state = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.state,
        None => ModelState::init_random(
            ModelConfig {
                d: 16,
                heads: 2,
                blocks: a.blocks,
                patch: 2,
                prompt_tokens: 2,
                time_dim: 8,
                width: 8,
                height: 8,
                seed: a.seed,
                ..ModelConfig::default()
            },
            1.0,
        )?,
    };
    let cfg = &state.config;
    let mut rng = seed::rng(seed::derive(a.seed, "probe"));
    let n = cfg.tokens_per_stream();
    let sample = TokenTriplet {
        id: "probe".into(),
        subtask: Subtask::Occlusion,
        z: noise(&mut rng, (n, cfg.z_dim())),
        x: noise(&mut rng, (n, cfg.x_dim())),
        y: noise(&mut rng, (n, cfg.y_dim())),
    };
    let probe = LossProbe::draw(sample, &mut rng);
    let err = gradcheck(&state, &probe, a.coords, a.fd_step, a.seed)?;
    println!("max relative error over {} coordinates: {err:.3e}", a.coords);
    if err > a.tol {
        return Err(Error::Model(format!("gradient check exceeded tolerance {}", a.tol)));
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> ExitCode {
    let opts = PipelineOptions {
        force: a.force,
        seed_override: a.seed,
    };
    match run_pipeline(&a.config, &opts) {
        Ok(out) => {
            for (stage, status) in &out.stages {
                let s = match status {
                    StageStatus::Ran => "ran",
                    StageStatus::Skipped => "skipped (outputs exist)",
                };
                println!("{stage}: {s}");
            }
            if let Some(report) = &out.report {
                print!("{}", render_table(report));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_validate(a: ValidateArgs) -> ExitCode {
    match validate_config(&a.config) {
        Ok(v) if v.is_empty() => {
            println!("{}: ok", a.config.display());
            ExitCode::SUCCESS
        }
        Ok(v) => {
            for msg in v {
                eprintln!("ERROR validate: {msg}");
            }
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("ERROR validate: {e}");
            ExitCode::FAILURE
        }
    }
}
