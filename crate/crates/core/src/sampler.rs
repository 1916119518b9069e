//! Inference: Euler integration of the learned velocity field, and a
//! literal DDIM-style variant with a cosine ᾱ schedule.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, Stream, TokenSequence};
use crate::error::{Error, Result};
use crate::flow::noise;
use crate::image::LayerImage;
use crate::model::{Inputs, ModelState, Velocities};
use crate::seed;
use crate::synth::Subtask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    #[default]
    Euler,
    Algorithm1,
}

impl fmt::Display for SamplerMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Euler => "euler",
            Self::Algorithm1 => "algorithm1",
        })
    }
}

impl FromStr for SamplerMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Self::Euler),
            "algorithm1" | "ddim" => Ok(Self::Algorithm1),
            other => Err(Error::InvalidInput(format!("unknown sampler method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub steps: usize,
    /// Stochasticity of the DDIM-style update; unused by Euler.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: SamplerMethod::Euler,
            steps: 20,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.steps == 0 {
            v.push("steps: must be >= 1".to_string());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            v.push(format!("eta: must be finite and >= 0, got {}", self.eta));
        }
        v
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

pub const ALPHA_BAR_MIN: f64 = 1e-4;
const COSINE_OFFSET: f64 = 0.008;

/// Cosine schedule at `n + 1` points: entry `k` is ᾱ at `t = k / n`, with
/// ᾱ₀ = 1, strictly decreasing and clamped below at [`ALPHA_BAR_MIN`].
pub fn alpha_bar_schedule(n: usize) -> Vec<f64> {
    let f = |s: f64| ((s + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let f0 = f(0.0);
    (0..=n)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                (f(k as f64 / n as f64) / f0).clamp(ALPHA_BAR_MIN, 1.0)
            }
        })
        .collect()
}

/// Noise scale of one DDIM-style step:
/// σ² = η · √((1 − ᾱ_prev) / (1 − ᾱ_t)) · (1 − ᾱ_t / ᾱ_prev).
pub fn sigma_t(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    let var = eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt() * (1.0 - alpha_bar_t / alpha_bar_prev);
    var.max(0.0).sqrt()
}

/// Sampled latents for each predicted stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub x: Option<Array2<f64>>,
    pub y: Option<Array2<f64>>,
}

/// Initial noise for the predicted streams, one independent draw each.
pub fn initial_noise(state: &ModelState, seed_: u64) -> Latents {
    let cfg = &state.config;
    let n = cfg.tokens_per_stream();
    Latents {
        x: cfg
            .predict_foreground
            .then(|| noise(&mut seed::rng(seed::derive(seed_, "noise.x")), (n, cfg.x_dim()))),
        y: cfg
            .predict_background
            .then(|| noise(&mut seed::rng(seed::derive(seed_, "noise.y")), (n, cfg.y_dim()))),
    }
}

fn finite(l: &Latents) -> bool {
    l.x.iter().chain(l.y.iter()).all(|a| a.iter().all(|v| v.is_finite()))
}

fn step_pair(
    latent: &mut Option<Array2<f64>>,
    v: &Option<Array2<f64>>,
    mut f: impl FnMut(&mut Array2<f64>, &Array2<f64>),
) {
    if let (Some(l), Some(v)) = (latent.as_mut(), v) {
        f(l, v);
    }
}

/// Integrates from `t = 1` down to `t = 0` with any velocity function,
/// starting from `init`.
pub fn integrate<F>(mut velocity: F, init: Latents, cfg: &SamplerConfig) -> Result<Latents>
where
    F: FnMut(&Latents, f64) -> Result<Velocities>,
{
    cfg.validate()?;
    let n = cfg.steps;
    let mut lat = init;
    match cfg.method {
        SamplerMethod::Euler => {
            let h = 1.0 / n as f64;
            for k in (1..=n).rev() {
                let v = velocity(&lat, k as f64 / n as f64)?;
                step_pair(&mut lat.x, &v.x, |l, v| l.scaled_add(-h, v));
                step_pair(&mut lat.y, &v.y, |l, v| l.scaled_add(-h, v));
                if !finite(&lat) {
                    return Err(Error::SamplerNonFinite(k));
                }
            }
        }
        SamplerMethod::Algorithm1 => {
            let ab = alpha_bar_schedule(n);
            let mut rng_x = seed::rng(seed::derive(cfg.seed, "ddim.x"));
            let mut rng_y = seed::rng(seed::derive(cfg.seed, "ddim.y"));
            for k in (1..=n).rev() {
                let (a_t, a_prev) = (ab[k], ab[k - 1]);
                let sigma = sigma_t(a_t, a_prev, cfg.eta);
                let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
                let v = velocity(&lat, k as f64 / n as f64)?;
                // Noise is drawn every step, even when σ = 0, so the stream
                // position does not depend on η.
                let update = |l: &mut Array2<f64>, v: &Array2<f64>, xi: Array2<f64>| {
                    let x0 = (&*l - &(v * (1.0 - a_t).sqrt())) / a_t.sqrt();
                    *l = x0 * a_prev.sqrt() + v * dir + xi * sigma;
                };
                if let (Some(l), Some(v)) = (lat.x.as_mut(), &v.x) {
                    let xi = noise(&mut rng_x, l.dim());
                    update(l, v, xi);
                }
                if let (Some(l), Some(v)) = (lat.y.as_mut(), &v.y) {
                    let xi = noise(&mut rng_y, l.dim());
                    update(l, v, xi);
                }
                if !finite(&lat) {
                    return Err(Error::SamplerNonFinite(k));
                }
            }
        }
    }
    Ok(lat)
}

/// Samples layer latents for a composite given as tokens.
pub fn sample_tokens(state: &ModelState, z: &Array2<f64>, subtask: Subtask, cfg: &SamplerConfig) -> Result<Latents> {
    let init = initial_noise(state, cfg.seed);
    let empty = Array2::zeros((0, 0));
    integrate(
        |lat, t| {
            state.forward(&Inputs {
                z,
                x_t: lat.x.as_ref().unwrap_or(&empty),
                y_t: lat.y.as_ref().unwrap_or(&empty),
                t,
                subtask,
            })
        },
        init,
        cfg,
    )
}

/// Decoded layers: RGBA foreground and RGB background, when predicted.
#[derive(Debug, Clone)]
pub struct SampledLayers {
    pub foreground: Option<LayerImage>,
    pub background: Option<LayerImage>,
}

pub fn decode_latents(state: &ModelState, lat: &Latents) -> Result<SampledLayers> {
    let codec = LatentCodec::new(state.config.patch);
    let grid = Some(state.config.grid());
    let dec = |a: &Option<Array2<f64>>, stream| -> Result<Option<LayerImage>> {
        a.as_ref()
            .map(|a| codec.decode(&TokenSequence::new(stream, grid, a.clone())?))
            .transpose()
    };
    Ok(SampledLayers {
        foreground: dec(&lat.x, Stream::Foreground)?,
        background: dec(&lat.y, Stream::Background)?,
    })
}

pub fn sample(state: &ModelState, z: &LayerImage, subtask: Subtask, cfg: &SamplerConfig) -> Result<SampledLayers> {
    let mc = &state.config;
    if (z.width(), z.height()) != (mc.width, mc.height) {
        return Err(Error::Dimension(format!(
            "composite is {}x{}, model expects {}x{}",
            z.width(),
            z.height(),
            mc.width,
            mc.height
        )));
    }
    let z_tokens = LatentCodec::new(mc.patch).encode(&z.rgb(), Stream::Composite)?.tokens;
    let lat = sample_tokens(state, &z_tokens, subtask, cfg)?;
    decode_latents(state, &lat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            blocks: 1,
            patch: 2,
            prompt_tokens: 2,
            time_dim: 8,
            width: 8,
            height: 8,
            ..ModelConfig::default()
        }
    }

    fn composite() -> LayerImage {
        LayerImage::new(8, 8, 3, (0..192).map(|i| (i % 17) as f64 / 16.0).collect()).unwrap()
    }

    #[test]
    fn zero_model_euler_returns_decoded_noise() {
        let state = ModelState::init(tiny()).unwrap();
        let cfg = SamplerConfig {
            steps: 7,
            seed: 3,
            ..SamplerConfig::default()
        };
        let out = sample(&state, &composite(), Subtask::Occlusion, &cfg).unwrap();
        let expect = decode_latents(&state, &initial_noise(&state, 3)).unwrap();
        assert_eq!(out.background.unwrap(), expect.background.unwrap());
        assert_eq!(out.foreground.unwrap(), expect.foreground.unwrap());
    }

    #[test]
    fn single_euler_step_with_constant_velocity() {
        let eps = Array2::from_elem((2, 3), 0.4);
        let v = Array2::from_elem((2, 3), 1.5);
        let out = integrate(
            |_, _| {
                Ok(Velocities {
                    x: Some(v.clone()),
                    y: None,
                })
            },
            Latents {
                x: Some(eps.clone()),
                y: None,
            },
            &SamplerConfig {
                steps: 1,
                ..SamplerConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.x.unwrap(), &eps - &v);
    }

    #[test]
    fn schedule_is_monotone_in_unit_interval() {
        for n in [1, 2, 10, 50] {
            let ab = alpha_bar_schedule(n);
            assert_eq!(ab.len(), n + 1);
            assert_eq!(ab[0], 1.0);
            for w in ab.windows(2) {
                assert!(w[1] < w[0] || w[1] == ALPHA_BAR_MIN);
                assert!(w[1] >= ALPHA_BAR_MIN && w[1] <= 1.0);
            }
        }
    }

    #[test]
    fn sigma_vanishes_without_eta() {
        let ab = alpha_bar_schedule(25);
        for k in 1..=25 {
            assert_eq!(sigma_t(ab[k], ab[k - 1], 0.0), 0.0);
            if k > 1 {
                assert!(sigma_t(ab[k], ab[k - 1], 1.0) > 0.0);
            }
        }
        // Direct evaluation at a hand-picked pair.
        let (at, ap) = (0.25, 0.64);
        let expect = (0.5 * (0.36f64 / 0.75).sqrt() * (1.0 - 0.25 / 0.64)).sqrt();
        assert!((sigma_t(at, ap, 0.5) - expect).abs() < 1e-15);
    }

    #[test]
    fn algorithm1_determinism_and_seed_dependence() {
        let state = ModelState::init_random(tiny(), 0.5).unwrap();
        let z = composite();
        let run = |eta, seed| {
            let cfg = SamplerConfig {
                method: SamplerMethod::Algorithm1,
                steps: 6,
                eta,
                seed,
            };
            sample(&state, &z, Subtask::Occlusion, &cfg).unwrap().background.unwrap()
        };
        assert_eq!(run(0.0, 1), run(0.0, 1));
        assert_ne!(run(0.5, 1), run(0.5, 2));
    }

    #[test]
    fn euler_error_shrinks_with_steps() {
        let state = ModelState::init_random(tiny(), 0.3).unwrap();
        let z = LatentCodec::new(2).encode(&composite(), Stream::Composite).unwrap().tokens;
        let run = |steps| {
            let cfg = SamplerConfig {
                steps,
                seed: 4,
                ..SamplerConfig::default()
            };
            sample_tokens(&state, &z, Subtask::Glass, &cfg).unwrap()
        };
        let reference = run(512);
        let err = |l: &Latents| {
            let d = l.y.as_ref().unwrap() - reference.y.as_ref().unwrap();
            d.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let errs: Vec<f64> = [4, 8, 16, 32].iter().map(|&n| err(&run(n))).collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
    }

    #[test]
    fn rejects_wrong_resolution_and_bad_config() {
        let state = ModelState::init(tiny()).unwrap();
        let z = LayerImage::filled(16, 8, 3, 0.5).unwrap();
        assert!(sample(&state, &z, Subtask::Glass, &SamplerConfig::default()).is_err());
        let bad = SamplerConfig {
            steps: 0,
            eta: -1.0,
            ..SamplerConfig::default()
        };
        assert_eq!(bad.violations().len(), 2);
        assert_eq!("ALGORITHM1".parse::<SamplerMethod>().unwrap(), SamplerMethod::Algorithm1);
    }
}
