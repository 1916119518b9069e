//! Rectified-flow training: path sampling, the joint velocity loss, Adam,
//! the training loop and a finite-difference gradient check.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, Stream};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Checkpoint, Inputs, ModelState, Upstream, Velocities};
use crate::seed;
use crate::synth::{load_manifest, split_records, Split, Subtask};

/// One training example in token space.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTriplet {
    pub id: String,
    pub subtask: Subtask,
    pub z: Array2<f64>,
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

/// Encodes one split of a manifest. Record failures carry the record id.
pub fn load_token_dataset(manifest: &Path, split: Split, patch: usize) -> Result<Vec<TokenTriplet>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let codec = LatentCodec::new(patch);
    split_records(&load_manifest(manifest)?, split)
        .iter()
        .map(|rec| {
            let tri = rec.load(base)?;
            let enc = |img, stream| {
                codec.encode(img, stream).map(|s| s.tokens).map_err(|e| Error::Record {
                    id: rec.id.clone(),
                    reason: e.to_string(),
                })
            };
            Ok(TokenTriplet {
                id: rec.id.clone(),
                subtask: rec.subtask,
                z: enc(&tri.comp, Stream::Composite)?,
                x: enc(&tri.fg, Stream::Foreground)?,
                y: enc(&tri.bg, Stream::Background)?,
            })
        })
        .collect()
}

/// Point on the straight path from data (`t = 0`) to noise (`t = 1`) and
/// the constant target velocity along it.
pub fn flow_sample(x0: &Array2<f64>, eps: &Array2<f64>, t: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    if x0.dim() != eps.dim() {
        return Err(Error::Dimension(format!("data {:?} vs noise {:?}", x0.dim(), eps.dim())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("t = {t} outside [0, 1]")));
    }
    let xt = x0 * (1.0 - t) + eps * t;
    Ok((xt, eps - x0))
}

/// A fully specified loss evaluation: clean tokens, time and both noises.
#[derive(Debug, Clone)]
pub struct LossProbe {
    pub sample: TokenTriplet,
    pub t: f64,
    pub eps_x: Array2<f64>,
    pub eps_y: Array2<f64>,
}

impl LossProbe {
    pub fn draw<R: Rng>(sample: TokenTriplet, rng: &mut R) -> Self {
        let t = rng.gen::<f64>();
        let eps_x = noise(rng, sample.x.dim());
        let eps_y = noise(rng, sample.y.dim());
        Self { sample, t, eps_x, eps_y }
    }
}

pub fn noise<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Per-stream mean squared error, summed over the predicted streams.
/// Returns the loss and its gradient with respect to each velocity.
pub fn velocity_loss(
    pred: &Velocities,
    target_x: &Array2<f64>,
    target_y: &Array2<f64>,
) -> Result<(f64, Option<Array2<f64>>, Option<Array2<f64>>)> {
    let mut loss = 0.0;
    let mut term = |v: &Option<Array2<f64>>, u: &Array2<f64>| -> Result<Option<Array2<f64>>> {
        let Some(v) = v else { return Ok(None) };
        if v.dim() != u.dim() {
            return Err(Error::Dimension(format!("velocity {:?} vs target {:?}", v.dim(), u.dim())));
        }
        let diff = v - u;
        let n = diff.len() as f64;
        loss += diff.iter().map(|d| d * d).sum::<f64>() / n;
        Ok(Some(diff * (2.0 / n)))
    };
    let gx = term(&pred.x, target_x)?;
    let gy = term(&pred.y, target_y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    Ok((loss, gx, gy))
}

fn probe_inputs<'a>(p: &'a LossProbe, xt: &'a Array2<f64>, yt: &'a Array2<f64>) -> Inputs<'a> {
    Inputs {
        z: &p.sample.z,
        x_t: xt,
        y_t: yt,
        t: p.t,
        subtask: p.sample.subtask,
    }
}

pub fn loss_lce(state: &ModelState, probe: &LossProbe) -> Result<f64> {
    let (xt, ux) = flow_sample(&probe.sample.x, &probe.eps_x, probe.t)?;
    let (yt, uy) = flow_sample(&probe.sample.y, &probe.eps_y, probe.t)?;
    let v = state.forward(&probe_inputs(probe, &xt, &yt))?;
    Ok(velocity_loss(&v, &ux, &uy)?.0)
}

/// Loss and parameter gradients, with the gradients scaled by `weight`.
pub fn loss_and_grad(state: &ModelState, probe: &LossProbe, weight: f64) -> Result<(f64, Vec<Array2<f64>>)> {
    let (xt, ux) = flow_sample(&probe.sample.x, &probe.eps_x, probe.t)?;
    let (yt, uy) = flow_sample(&probe.sample.y, &probe.eps_y, probe.t)?;
    let inputs = probe_inputs(probe, &xt, &yt);
    let trace = state.forward_trace(&inputs)?;
    let (loss, gx, gy) = velocity_loss(&trace.velocities, &ux, &uy)?;
    let gx = gx.map(|g| g * weight);
    let gy = gy.map(|g| g * weight);
    let grads = state.backward_from_trace(
        &inputs,
        &trace,
        &Upstream {
            x: gx.as_ref(),
            y: gy.as_ref(),
        },
    )?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss_log: Option<PathBuf>,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 4,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            loss_log: None,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.steps == 0 {
            v.push("steps: must be > 0".to_string());
        }
        if self.batch == 0 {
            v.push("batch: must be > 0".to_string());
        }
        // Zero is accepted as a degenerate "frozen" run.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            v.push(format!("lr: must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name}: must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("eps: must be > 0, got {}", self.eps));
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

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStepRecord {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,t,loss,grad_norm";

impl TrainStepRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.t, self.loss, self.grad_norm)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(state: &ModelState, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: state.zeros_like(),
            v: state.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Draws of one optimisation step: record indices, times and noises.
pub struct StepDraws {
    pub probes: Vec<LossProbe>,
}

/// Deterministic stream of training draws.
pub struct DrawGenerator {
    rng: ChaCha8Rng,
}

impl DrawGenerator {
    pub fn new(train_seed: u64) -> Self {
        Self {
            rng: seed::rng(seed::derive(train_seed, "draws")),
        }
    }

    pub fn next(&mut self, data: &[TokenTriplet], batch: usize) -> StepDraws {
        let probes = (0..batch)
            .map(|_| {
                let i = self.rng.gen_range(0..data.len());
                LossProbe::draw(data[i].clone(), &mut self.rng)
            })
            .collect();
        StepDraws { probes }
    }
}

pub struct TrainOutcome {
    pub state: ModelState,
    pub trace: Vec<TrainStepRecord>,
    pub optimizer: Adam,
}

fn write_checkpoint(path: &Path, state: &ModelState, opt: &Adam) -> Result<()> {
    save_checkpoint(
        path,
        &Checkpoint {
            state: state.clone(),
            step: opt.step,
            moments: Some((opt.m.clone(), opt.v.clone())),
        },
    )
}

/// Runs Adam on the flow-matching loss. Each step draws `batch` records
/// with independent times and per-stream noises; gradients are averaged in
/// draw order. The logged `t` is that of the first batch element.
///
/// A non-finite loss aborts with [`Error::Diverged`]; the last periodic
/// checkpoint on disk is left untouched.
pub fn train(mut state: ModelState, data: &[TokenTriplet], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let mut log = match &cfg.loss_log {
        Some(path) => {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(path, e))?;
            Some((path.clone(), w))
        }
        None => None,
    };

    let mut opt = Adam::new(&state, cfg);
    let mut draws = DrawGenerator::new(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    let weight = 1.0 / cfg.batch as f64;
    for step in 0..cfg.steps {
        let StepDraws { probes } = draws.next(data, cfg.batch);
        let mut total = state.zeros_like();
        let mut loss = 0.0;
        for probe in &probes {
            let (l, grads) = match loss_and_grad(&state, probe, weight) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) | Err(Error::Model(_)) => {
                    return Err(Error::Diverged { step, loss: f64::NAN })
                }
                Err(e) => return Err(e),
            };
            loss += l * weight;
            for (acc, g) in total.iter_mut().zip(&grads) {
                *acc += g;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad_norm = total.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        opt.update(state.params_mut(), &total, cfg.lr);
        let rec = TrainStepRecord {
            step,
            t: probes[0].t,
            loss,
            grad_norm,
        };
        if let Some((path, w)) = &mut log {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        trace.push(rec);
        if let Some(path) = &cfg.checkpoint_path {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                write_checkpoint(path, &state, &opt)?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(path) = &cfg.checkpoint_path {
        write_checkpoint(path, &state, &opt)?;
    }
    Ok(TrainOutcome {
        state,
        trace,
        optimizer: opt,
    })
}

/// Relative error used by [`gradcheck`]. The floor keeps coordinates whose
/// true derivative is essentially zero from dividing rounding noise by zero.
pub const GRADCHECK_FLOOR: f64 = 1e-10;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares analytic gradients of [`loss_lce`] against central differences
/// on `n` parameter coordinates drawn uniformly from all parameters.
/// Returns the maximum relative error.
pub fn gradcheck(state: &ModelState, probe: &LossProbe, n: usize, fd_step: f64, seed_: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("gradcheck needs at least one coordinate".into()));
    }
    if !(fd_step > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be > 0, got {fd_step}")));
    }
    let (_, grads) = loss_and_grad(state, probe, 1.0)?;
    let sizes: Vec<usize> = state.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = seed::rng(seed::derive(seed_, "gradcheck"));
    let mut work = state.clone();
    let mut worst = 0.0f64;
    for _ in 0..n {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let cols = state.params()[which].ncols();
        let idx = [flat / cols, flat % cols];
        let orig = state.params()[which][idx];
        work.params_mut()[which][idx] = orig + fd_step;
        let plus = loss_lce(&work, probe)?;
        work.params_mut()[which][idx] = orig - fd_step;
        let minus = loss_lce(&work, probe)?;
        work.params_mut()[which][idx] = orig;
        let numeric = (plus - minus) / (2.0 * fd_step);
        worst = worst.max(relative_error(grads[which][idx], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            patch: 2,
            prompt_tokens: 2,
            time_dim: 8,
            width: 8,
            height: 8,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn random_data(cfg: &ModelConfig, n: usize, s: u64) -> Vec<TokenTriplet> {
        let mut rng = seed::rng(s);
        let k = cfg.tokens_per_stream();
        (0..n)
            .map(|i| TokenTriplet {
                id: format!("r{i}"),
                subtask: Subtask::Occlusion,
                z: noise(&mut rng, (k, cfg.z_dim())) * 0.5,
                x: noise(&mut rng, (k, cfg.x_dim())) * 0.5,
                y: noise(&mut rng, (k, cfg.y_dim())) * 0.5,
            })
            .collect()
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let x0 = Array2::from_elem((2, 3), 0.3);
        let eps = Array2::from_elem((2, 3), -1.1);
        let (xt, u) = flow_sample(&x0, &eps, 0.0).unwrap();
        assert_eq!(xt, x0);
        assert_eq!(u, &eps - &x0);
        let (xt, _) = flow_sample(&x0, &eps, 1.0).unwrap();
        assert_eq!(xt, eps);
        let (xt, u) = flow_sample(&Array2::zeros((1, 1)), &Array2::from_elem((1, 1), 2.0), 0.5).unwrap();
        assert_eq!((xt[[0, 0]], u[[0, 0]]), (1.0, 2.0));
        assert!(flow_sample(&x0, &Array2::zeros((3, 2)), 0.5).is_err());
    }

    #[test]
    fn zero_model_loss_is_mean_square_target() {
        let cfg = tiny_config();
        let state = ModelState::init(cfg.clone()).unwrap();
        let mut rng = seed::rng(3);
        let probe = LossProbe::draw(random_data(&cfg, 1, 1).remove(0), &mut rng);
        let ux = &probe.eps_x - &probe.sample.x;
        let uy = &probe.eps_y - &probe.sample.y;
        let mean_sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        let loss = loss_lce(&state, &probe).unwrap();
        assert_abs_diff_eq!(loss, mean_sq(&ux) + mean_sq(&uy), epsilon = 1e-12);

        // Scaling data and noise scales the target, so sqrt(loss) doubles.
        let mut doubled = probe.clone();
        doubled.sample.x *= 2.0;
        doubled.sample.y *= 2.0;
        doubled.eps_x *= 2.0;
        doubled.eps_y *= 2.0;
        assert_abs_diff_eq!(loss_lce(&state, &doubled).unwrap().sqrt(), 2.0 * loss.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        let u = Array2::from_elem((4, 3), 0.7);
        let v = Velocities {
            x: Some(u.clone()),
            y: Some(u.clone()),
        };
        let (loss, gx, _) = velocity_loss(&v, &u, &u).unwrap();
        assert_eq!(loss, 0.0);
        assert!(gx.unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradcheck_random_model() {
        let cfg = tiny_config();
        let state = ModelState::init_random(cfg.clone(), 1.0).unwrap();
        let mut rng = seed::rng(11);
        let probe = LossProbe::draw(random_data(&cfg, 1, 2).remove(0), &mut rng);
        let err = gradcheck(&state, &probe, 300, 1e-4, 5).unwrap();
        assert!(err <= 1e-3, "max relative error {err}");
        assert!(gradcheck(&state, &probe, 0, 1e-4, 5).is_err());
    }

    #[test]
    fn gradcheck_linear_probe() {
        let cfg = ModelConfig { blocks: 0, ..tiny_config() };
        let state = ModelState::init_random(cfg.clone(), 1.0).unwrap();
        let mut rng = seed::rng(12);
        let probe = LossProbe::draw(random_data(&cfg, 1, 3).remove(0), &mut rng);
        let err = gradcheck(&state, &probe, 300, 1e-4, 6).unwrap();
        assert!(err <= 1e-6, "max relative error {err}");
    }

    #[test]
    fn training_is_deterministic_and_lr_zero_freezes() {
        let cfg = tiny_config();
        let data = random_data(&cfg, 4, 4);
        let state = ModelState::init(cfg.clone()).unwrap();
        let tc = TrainConfig {
            steps: 5,
            batch: 2,
            lr: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(state.clone(), &data, &tc).unwrap();
        let b = train(state.clone(), &data, &tc).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_ne!(a.state, state);

        let frozen = train(state.clone(), &data, &TrainConfig { lr: 0.0, ..tc.clone() }).unwrap();
        assert_eq!(frozen.state, state);
        // Each logged loss equals the loss of the untouched model on the same draws.
        let mut draws = DrawGenerator::new(tc.seed);
        for rec in &frozen.trace {
            let probes = draws.next(&data, tc.batch).probes;
            let expect: f64 = probes.iter().map(|p| loss_lce(&state, p).unwrap() * 0.5).sum();
            assert_eq!(rec.loss, expect);
        }
    }

    #[test]
    fn sampled_times_are_uniform() {
        let data = random_data(&ModelConfig { width: 2, height: 2, patch: 2, ..tiny_config() }, 1, 5);
        let mut draws = DrawGenerator::new(21);
        let n = 10_000;
        let mean = (0..n).map(|_| draws.next(&data, 1).probes[0].t).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() <= 0.02, "mean t {mean}");
    }

    #[test]
    fn loss_log_and_checkpoint_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let data = random_data(&cfg, 2, 6);
        let tc = TrainConfig {
            steps: 3,
            batch: 1,
            lr: 1e-3,
            loss_log: Some(dir.path().join("loss.csv")),
            checkpoint_every: 2,
            checkpoint_path: Some(dir.path().join("model.ckpt")),
            ..TrainConfig::default()
        };
        let out = train(ModelState::init(cfg).unwrap(), &data, &tc).unwrap();
        let log = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        let lines: Vec<_> = log.lines().collect();
        assert_eq!(lines[0], LOSS_LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], out.trace[0].csv_row());
        let ck = crate::model::load_checkpoint(&dir.path().join("model.ckpt")).unwrap();
        assert_eq!(ck.step, 3);
    }

    #[test]
    fn rejects_invalid_config() {
        let bad = TrainConfig {
            steps: 0,
            lr: -1.0,
            ..TrainConfig::default()
        };
        assert_eq!(bad.violations().len(), 2);
    }
}
