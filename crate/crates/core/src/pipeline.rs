//! End-to-end orchestration: synth → train → sample → eval, driven by one
//! TOML file. All stage seeds derive from the root seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{benchmark, BenchOptions, EvalReport};
use crate::error::{Error, Result};
use crate::flow::{load_token_dataset, train, TrainConfig};
use crate::inverse::DEFAULT_EPS;
use crate::model::{load_checkpoint, LpecMode, ModelConfig, ModelState};
use crate::sampler::{sample, SamplerConfig};
use crate::seed;
use crate::synth::{build_dataset, load_manifest, split_records, Source, Split, Subtask, SynthSpec, MANIFEST_NAME};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Relative paths below are resolved against this directory.
    pub workdir: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub samples: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("runs/default"),
            dataset: PathBuf::from("dataset"),
            checkpoints: PathBuf::from("checkpoints"),
            samples: PathBuf::from("samples"),
            reports: PathBuf::from("reports"),
        }
    }
}

impl Paths {
    fn resolve(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    pub fn manifest(&self) -> PathBuf {
        self.resolve(&self.dataset).join(MANIFEST_NAME)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.resolve(&self.checkpoints).join("model.ckpt")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.resolve(&self.reports).join("loss.csv")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.resolve(&self.samples)
    }

    pub fn samples_index(&self) -> PathBuf {
        self.samples_dir().join("index.txt")
    }

    pub fn report(&self) -> PathBuf {
        self.resolve(&self.reports).join("report.csv")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub subtask: Subtask,
    pub width: usize,
    pub height: usize,
    pub count_train: usize,
    pub count_test: usize,
    pub alpha_range: Option<(f64, f64)>,
    pub fg_size_range: Option<(f64, f64)>,
    pub fg_dir: Option<PathBuf>,
    pub bg_dir: Option<PathBuf>,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            subtask: Subtask::Occlusion,
            width: 32,
            height: 32,
            count_train: 256,
            count_test: 32,
            alpha_range: None,
            fg_size_range: None,
            fg_dir: None,
            bg_dir: None,
        }
    }
}

/// Architecture knobs; resolution comes from `[synth]` and the seed from
/// the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub prompt_tokens: usize,
    pub time_dim: usize,
    pub predict_foreground: bool,
    pub predict_background: bool,
    pub lpec: LpecMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d: m.d,
            heads: m.heads,
            blocks: m.blocks,
            mlp_ratio: m.mlp_ratio,
            patch: m.patch,
            prompt_tokens: m.prompt_tokens,
            time_dim: m.time_dim,
            predict_foreground: m.predict_foreground,
            predict_background: m.predict_background,
            lpec: m.lpec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Write wall-clock seconds into the report CSVs. Off by default so
    /// that reports are byte-reproducible.
    pub timing_in_csv: bool,
    pub oracle_eps: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            timing_in_csv: false,
            oracle_eps: DEFAULT_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.synth;
        let mut spec = SynthSpec::new(
            s.subtask,
            s.width,
            s.height,
            s.count_train,
            s.count_test,
            seed::derive(self.seed, "synth"),
        );
        if let Some(r) = s.alpha_range {
            spec.alpha_range = r;
        }
        if let Some(r) = s.fg_size_range {
            spec.fg_size_range = r;
        }
        if s.fg_dir.is_some() || s.bg_dir.is_some() {
            spec.source = Source::Corpus {
                fg_dir: s.fg_dir.clone(),
                bg_dir: s.bg_dir.clone(),
            };
        }
        spec.patch = self.model.patch;
        spec
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            d: m.d,
            heads: m.heads,
            blocks: m.blocks,
            mlp_ratio: m.mlp_ratio,
            patch: m.patch,
            prompt_tokens: m.prompt_tokens,
            time_dim: m.time_dim,
            width: self.synth.width,
            height: self.synth.height,
            predict_foreground: m.predict_foreground,
            predict_background: m.predict_background,
            lpec: m.lpec,
            seed: seed::derive(self.seed, "model"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: seed::derive(self.seed, "train"),
            loss_log: Some(self.paths.loss_log()),
            checkpoint_path: Some(self.paths.checkpoint()),
            ..self.train.clone()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            seed: seed::derive(self.seed, "sampler"),
            ..self.sampler.clone()
        }
    }

    /// Every violated invariant, named by its `section.field` path.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut spec = self.synth_spec();
        // Divisibility is reported once below, naming both sections.
        spec.patch = 1;
        out.extend(spec.violations().into_iter().map(|v| format!("synth.{v}")));
        let patch = self.model.patch;
        if patch == 0 || self.synth.width % patch.max(1) != 0 || self.synth.height % patch.max(1) != 0 {
            out.push(format!(
                "model.patch, synth.width/synth.height: patch {patch} does not divide resolution {}x{}",
                self.synth.width, self.synth.height
            ));
        }
        out.extend(
            self.model_config()
                .violations()
                .into_iter()
                .filter(|v| !v.starts_with("patch:"))
                .map(|v| format!("model.{v}")),
        );
        if self.model.blocks == 0 {
            out.push("model.blocks: must be at least 1".into());
        }
        if !self.model.predict_background {
            out.push("model.predict_background: the benchmark scores backgrounds, must be true".into());
        }
        if self.synth.width.min(self.synth.height) < crate::metrics::SSIM_WINDOW {
            out.push(format!(
                "synth.width/synth.height: SSIM needs at least {0}x{0}",
                crate::metrics::SSIM_WINDOW
            ));
        }
        out.extend(self.train.violations().into_iter().map(|v| format!("train.{v}")));
        out.extend(self.sampler.violations().into_iter().map(|v| format!("sampler.{v}")));
        if !(self.eval.oracle_eps > 0.0) {
            out.push(format!("eval.oracle_eps: must be > 0, got {}", self.eval.oracle_eps));
        }
        if self.paths.workdir.as_os_str().is_empty() {
            out.push("paths.workdir: must not be empty".into());
        }
        out
    }
}

/// Parses and checks a config file. Parse failures come back as a single
/// violation; only an unreadable file is an error.
pub fn validate_config(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(match PipelineConfig::from_toml(&text) {
        Ok(cfg) => cfg.violations(),
        Err(e) => vec![format!("parse: {e}")],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Synth,
    Train,
    Sample,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Config => "config",
            Self::Synth => "synth",
            Self::Train => "train",
            Self::Sample => "sample",
            Self::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage failure. Displays as `ERROR <stage>: <cause>`.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ERROR {}: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    pub force: bool,
    /// Replaces the root seed from the file.
    pub seed_override: Option<u64>,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub config: PipelineConfig,
    pub stages: Vec<(Stage, StageStatus)>,
    /// Present when the eval stage ran.
    pub report: Option<EvalReport>,
}

fn at<T>(stage: Stage, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage, source })
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn run_pipeline(path: &Path, opts: &PipelineOptions) -> std::result::Result<PipelineOutcome, StageError> {
    let cfg = at(Stage::Config, PipelineConfig::load(path))?;
    run_pipeline_config(cfg, opts)
}

pub fn run_pipeline_config(
    mut cfg: PipelineConfig,
    opts: &PipelineOptions,
) -> std::result::Result<PipelineOutcome, StageError> {
    if let Some(s) = opts.seed_override {
        cfg.seed = s;
    }
    let violations = cfg.violations();
    if !violations.is_empty() {
        return Err(StageError {
            stage: Stage::Config,
            source: Error::Config(violations.join("; ")),
        });
    }
    let paths = cfg.paths.clone();
    let mut stages = Vec::new();

    // synth
    let manifest = paths.manifest();
    if opts.force || !manifest.exists() {
        let spec = cfg.synth_spec();
        at(Stage::Synth, build_dataset(&spec, manifest.parent().expect("manifest has a parent")))?;
        stages.push((Stage::Synth, StageStatus::Ran));
    } else {
        stages.push((Stage::Synth, StageStatus::Skipped));
    }

    // train
    let ckpt = paths.checkpoint();
    if opts.force || !ckpt.exists() || !paths.loss_log().exists() {
        at(Stage::Train, run_train(&cfg))?;
        stages.push((Stage::Train, StageStatus::Ran));
    } else {
        stages.push((Stage::Train, StageStatus::Skipped));
    }

    // sample
    if opts.force || !paths.samples_index().exists() {
        at(Stage::Sample, run_sample(&cfg))?;
        stages.push((Stage::Sample, StageStatus::Ran));
    } else {
        stages.push((Stage::Sample, StageStatus::Skipped));
    }

    // eval
    let mut report = None;
    if opts.force || !paths.report().exists() {
        report = Some(at(Stage::Eval, run_eval(&cfg))?);
        stages.push((Stage::Eval, StageStatus::Ran));
    } else {
        stages.push((Stage::Eval, StageStatus::Skipped));
    }

    Ok(PipelineOutcome {
        config: cfg,
        stages,
        report,
    })
}

fn load_state(cfg: &PipelineConfig) -> Result<ModelState> {
    let ck = load_checkpoint(&cfg.paths.checkpoint())?;
    let mut expect = cfg.model_config();
    expect.seed = ck.state.config.seed;
    if ck.state.config != expect {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different model configuration",
            cfg.paths.checkpoint().display()
        )));
    }
    Ok(ck.state)
}

fn run_train(cfg: &PipelineConfig) -> Result<()> {
    let paths = &cfg.paths;
    ensure_dir(&paths.resolve(&paths.checkpoints))?;
    ensure_dir(&paths.resolve(&paths.reports))?;
    let data = load_token_dataset(&paths.manifest(), Split::Train, cfg.model.patch)?;
    let state = ModelState::init(cfg.model_config())?;
    train(state, &data, &cfg.train_config())?;
    Ok(())
}

fn run_sample(cfg: &PipelineConfig) -> Result<()> {
    let paths = &cfg.paths;
    let state = load_state(cfg)?;
    let manifest = paths.manifest();
    let base = manifest.parent().expect("manifest has a parent");
    let dir = paths.samples_dir();
    ensure_dir(&dir)?;
    let sampler = cfg.sampler_config();
    let mut index = String::new();
    for rec in split_records(&load_manifest(&manifest)?, Split::Test) {
        let tri = rec.load(base)?;
        let run = SamplerConfig {
            seed: seed::derive(sampler.seed, &rec.id),
            ..sampler.clone()
        };
        let layers = sample(&state, &tri.comp, rec.subtask, &run).map_err(|e| Error::Record {
            id: rec.id.clone(),
            reason: e.to_string(),
        })?;
        for (kind, img) in [("fg", &layers.foreground), ("bg", &layers.background)] {
            if let Some(img) = img {
                let name = format!("{}_{kind}.png", rec.id);
                img.save_png(&dir.join(&name))?;
                index.push_str(&name);
                index.push('\n');
            }
        }
    }
    let idx = paths.samples_index();
    fs::write(&idx, index).map_err(|e| Error::io(&idx, e))
}

fn run_eval(cfg: &PipelineConfig) -> Result<EvalReport> {
    let state = load_state(cfg)?;
    let opts = BenchOptions {
        timing_in_csv: cfg.eval.timing_in_csv,
        oracle_eps: cfg.eval.oracle_eps,
        ..BenchOptions::default()
    };
    benchmark(&cfg.paths.manifest(), Some(&state), &cfg.sampler_config(), &cfg.paths.report(), &opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
[paths]
workdir = "out"
[synth]
subtask = "occlusion"
width = 16
height = 16
count_train = 4
count_test = 2
[model]
d = 16
heads = 2
blocks = 1
[train]
steps = 5
lr = 1e-3
[sampler]
steps = 4
"#;

    #[test]
    fn sample_config_is_valid() {
        let cfg = PipelineConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.violations(), Vec::<String>::new());
        assert_eq!(cfg.model_config().width, 16);
        assert_ne!(cfg.train_config().seed, cfg.sampler_config().seed);
    }

    #[test]
    fn patch_mismatch_is_one_violation_naming_both_fields() {
        let text = SAMPLE.replace("blocks = 1", "blocks = 1\npatch = 5");
        let v = PipelineConfig::from_toml(&text).unwrap().violations();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("model.patch") && v[0].contains("synth.width"));
    }

    #[test]
    fn negative_learning_rate_is_one_violation() {
        let text = SAMPLE.replace("lr = 1e-3", "lr = -1e-3");
        let v = PipelineConfig::from_toml(&text).unwrap().violations();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].starts_with("train.lr"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, SAMPLE.replace("[sampler]", "[sampler]\nbogus = 1")).unwrap();
        let v = validate_config(&path).unwrap();
        assert_eq!(v.len(), 1);
        assert!(v[0].starts_with("parse:"));
        assert!(validate_config(&dir.path().join("missing.toml")).is_err());
    }

    #[test]
    fn stage_error_display_is_greppable() {
        let e = StageError {
            stage: Stage::Eval,
            source: Error::Config("x".into()),
        };
        assert!(e.to_string().starts_with("ERROR eval: "));
    }
}
