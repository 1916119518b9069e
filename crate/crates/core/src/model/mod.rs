//! Toy in-context decomposition transformer.
//!
//! The clean composite tokens, the noisy foreground and background tokens
//! and a few learned per-subtask prompt tokens are concatenated into one
//! sequence and processed by full bidirectional attention. Velocities are
//! read out only at the noisy-stream positions.
//!
//! Everything runs in `f64` with hand-written gradients; see [`dit`].

mod checkpoint;
pub mod dit;
pub mod layers;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::synth::Subtask;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dit::{Inputs, Trace, Upstream, Velocities};

/// How positional encodings are assigned to the three image streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpecMode {
    /// Background and composite share the composite frame; foreground tokens
    /// live in a horizontally shifted, disjoint frame.
    #[default]
    Clone,
    /// Background and composite share the composite frame; foreground tokens
    /// get no positional encoding at all.
    ZeroForeground,
    /// Ablation: no cloning. Each stream gets its own disjoint frame.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub prompt_tokens: usize,
    pub time_dim: usize,
    pub width: usize,
    pub height: usize,
    pub predict_foreground: bool,
    pub predict_background: bool,
    pub lpec: LpecMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            blocks: 2,
            mlp_ratio: 2,
            patch: 4,
            prompt_tokens: 4,
            time_dim: 32,
            width: 32,
            height: 32,
            predict_foreground: true,
            predict_background: true,
            lpec: LpecMode::Clone,
            seed: 0,
        }
    }
}

pub const COMPOSITE_CHANNELS: usize = 3;
pub const FOREGROUND_CHANNELS: usize = 4;
pub const BACKGROUND_CHANNELS: usize = 3;

impl ModelConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_stream(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn z_dim(&self) -> usize {
        self.patch * self.patch * COMPOSITE_CHANNELS
    }

    pub fn x_dim(&self) -> usize {
        self.patch * self.patch * FOREGROUND_CHANNELS
    }

    pub fn y_dim(&self) -> usize {
        self.patch * self.patch * BACKGROUND_CHANNELS
    }

    /// Every violated invariant as `field: message`. `blocks = 0` is accepted
    /// here (it gives a linear probe model) and rejected by the pipeline
    /// config validator.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d == 0 || self.d % 2 != 0 {
            out.push(format!("d: must be positive and even, got {}", self.d));
        }
        if self.heads == 0 || self.d % self.heads.max(1) != 0 {
            out.push(format!("heads: {} must divide d = {}", self.heads, self.d));
        }
        if self.mlp_ratio == 0 {
            out.push("mlp_ratio: must be positive".into());
        }
        if self.prompt_tokens == 0 {
            out.push("prompt_tokens: must be at least 1".into());
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            out.push("time_dim: must be positive and even".into());
        }
        if self.patch == 0 || self.width % self.patch.max(1) != 0 || self.height % self.patch.max(1) != 0 {
            out.push(format!(
                "patch: {} does not divide resolution {}x{}",
                self.patch, self.width, self.height
            ));
        }
        if !self.predict_foreground && !self.predict_background {
            out.push("streams: at least one of foreground/background must be predicted".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub modulation_w: usize,
    pub modulation_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
}

/// Indices of each named parameter inside [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub embed_z: (usize, usize),
    pub embed_x: (usize, usize),
    pub embed_y: (usize, usize),
    pub prompt: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_w: usize,
    pub final_b: usize,
    pub head_x: (usize, usize),
    pub head_y: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zero,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn,
    Normal(f64),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name.into());
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let d = cfg.d;
    let hidden = d * cfg.mlp_ratio;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let embed_z = (
        b.push("embed.z.w", (cfg.z_dim(), d), Init::FanIn),
        b.push("embed.z.b", (1, d), Init::Zero),
    );
    let embed_x = (
        b.push("embed.x.w", (cfg.x_dim(), d), Init::FanIn),
        b.push("embed.x.b", (1, d), Init::Zero),
    );
    let embed_y = (
        b.push("embed.y.w", (cfg.y_dim(), d), Init::FanIn),
        b.push("embed.y.b", (1, d), Init::Zero),
    );
    let prompt = b.push("prompt.table", (Subtask::ALL.len() * cfg.prompt_tokens, d), Init::Normal(0.5));
    let time_w1 = b.push("time.w1", (cfg.time_dim, d), Init::FanIn);
    let time_b1 = b.push("time.b1", (1, d), Init::Zero);
    let time_w2 = b.push("time.w2", (d, d), Init::FanIn);
    let time_b2 = b.push("time.b2", (1, d), Init::Zero);
    let blocks = (0..cfg.blocks)
        .map(|i| BlockLayout {
            modulation_w: b.push(format!("blocks.{i}.modulation.w"), (d, 4 * d), Init::Zero),
            modulation_b: b.push(format!("blocks.{i}.modulation.b"), (1, 4 * d), Init::Zero),
            wq: b.push(format!("blocks.{i}.attn.wq"), (d, d), Init::FanIn),
            wk: b.push(format!("blocks.{i}.attn.wk"), (d, d), Init::FanIn),
            wv: b.push(format!("blocks.{i}.attn.wv"), (d, d), Init::FanIn),
            wo: b.push(format!("blocks.{i}.attn.wo"), (d, d), Init::FanIn),
            bo: b.push(format!("blocks.{i}.attn.bo"), (1, d), Init::Zero),
            mlp_w1: b.push(format!("blocks.{i}.mlp.w1"), (d, hidden), Init::FanIn),
            mlp_b1: b.push(format!("blocks.{i}.mlp.b1"), (1, hidden), Init::Zero),
            mlp_w2: b.push(format!("blocks.{i}.mlp.w2"), (hidden, d), Init::FanIn),
            mlp_b2: b.push(format!("blocks.{i}.mlp.b2"), (1, d), Init::Zero),
        })
        .collect();
    let final_w = b.push("final.modulation.w", (d, 2 * d), Init::Zero);
    let final_b = b.push("final.modulation.b", (1, 2 * d), Init::Zero);
    let head_x = (
        b.push("head.x.w", (d, cfg.x_dim()), Init::Zero),
        b.push("head.x.b", (1, cfg.x_dim()), Init::Zero),
    );
    let head_y = (
        b.push("head.y.w", (d, cfg.y_dim()), Init::Zero),
        b.push("head.y.b", (1, cfg.y_dim()), Init::Zero),
    );
    let layout = Layout {
        embed_z,
        embed_x,
        embed_y,
        prompt,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        blocks,
        final_w,
        final_b,
        head_x,
        head_y,
    };
    (layout, b)
}

/// Named parameter arrays plus the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
    pub(crate) layout: Layout,
}

impl ModelState {
    /// Fresh model: fan-in scaled weights, identity modulation, zero output
    /// heads. The untrained model therefore predicts a zero velocity field.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        let mut rng = seed::rng(seed::derive(config.seed, "init"));
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(&(r, c), &init)| match init {
                Init::Zero => Array2::zeros((r, c)),
                Init::FanIn => random_normal(&mut rng, (r, c), 1.0 / (r as f64).sqrt()),
                Init::Normal(std) => random_normal(&mut rng, (r, c), std),
            })
            .collect();
        Ok(Self {
            config,
            names: b.names,
            params,
            layout,
        })
    }

    /// Every parameter drawn at random, including modulation and heads.
    /// Used to probe gradients and conditioning away from the zero-head
    /// fixed point.
    pub fn init_random(config: ModelConfig, scale: f64) -> Result<Self> {
        let mut state = Self::init(config)?;
        let mut rng = seed::rng(seed::derive(state.config.seed, "probe"));
        for p in &mut state.params {
            let std = scale / (p.nrows() as f64).sqrt();
            *p = random_normal(&mut rng, p.dim(), std);
        }
        Ok(state)
    }

    pub(crate) fn from_parts(config: ModelConfig, named: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut state = Self::init(config)?;
        if named.len() != state.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                state.params.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            if name != state.names[i] || value.dim() != state.params[i].dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    state.names[i],
                    state.params[i].dim(),
                    value.dim()
                )));
            }
            state.params[i] = value;
        }
        Ok(state)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| Array2::zeros(p.dim())).collect()
    }

    pub(crate) fn p(&self, i: usize) -> &Array2<f64> {
        &self.params[i]
    }
}

fn random_normal<R: Rng>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_fits_the_budget() {
        let state = ModelState::init(ModelConfig::default()).unwrap();
        assert!(state.parameter_count() <= 150_000, "{}", state.parameter_count());
        assert!(state.param("head.x.w").unwrap().iter().all(|&v| v == 0.0));
        assert!(state.param("blocks.0.modulation.w").unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(state.config.tokens_per_stream(), 64);
    }

    #[test]
    fn config_violations() {
        let cfg = ModelConfig {
            d: 30,
            heads: 4,
            patch: 5,
            ..ModelConfig::default()
        };
        let v = cfg.violations();
        assert_eq!(v.len(), 2, "{v:?}");
        assert!(ModelState::init(cfg).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::init(ModelConfig::default()).unwrap();
        let b = ModelState::init(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_ne!(a, c);
    }
}
