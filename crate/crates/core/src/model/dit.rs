//! Forward pass and exact analytic backward pass.
//!
//! Sequence layout is `[composite; foreground; background; prompt]`. Each
//! block applies timestep-modulated layer norm, attention, a second
//! modulated layer norm and a SiLU MLP, with residual connections around
//! attention and MLP. With zero blocks the model reduces to embeddings,
//! positional encodings and linear heads.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis};

use super::layers::{
    all_finite, attention_backward, attention_forward, layer_norm, layer_norm_backward, silu, silu_grad,
    timestep_embedding, AttentionCache, AttentionWeights,
};
use super::{LpecMode, ModelState};
use crate::codec::{foreground_frame, make_pe, FRAME_GAP};
use crate::error::{Error, Result};
use crate::synth::Subtask;

/// Latent token matrices for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Inputs<'a> {
    /// Clean composite tokens, `n × z_dim`.
    pub z: &'a Array2<f64>,
    /// Noisy foreground tokens, `n × x_dim`. Ignored when the foreground is
    /// not predicted.
    pub x_t: &'a Array2<f64>,
    /// Noisy background tokens, `n × y_dim`. Ignored when the background is
    /// not predicted.
    pub y_t: &'a Array2<f64>,
    pub t: f64,
    pub subtask: Subtask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Velocities {
    pub x: Option<Array2<f64>>,
    pub y: Option<Array2<f64>>,
}

/// Gradients of a scalar objective with respect to the predicted velocities.
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a> {
    pub x: Option<&'a Array2<f64>>,
    pub y: Option<&'a Array2<f64>>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    normed1: Array2<f64>,
    sigma1: Array1<f64>,
    mod_in1: Array2<f64>,
    attn: AttentionCache,
    normed2: Array2<f64>,
    sigma2: Array1<f64>,
    mod_in2: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    scale1: Array1<f64>,
    scale2: Array1<f64>,
}

#[derive(Debug, Clone)]
struct FinalCache {
    normed: Array2<f64>,
    sigma: Array1<f64>,
    scale: Array1<f64>,
}

#[derive(Debug, Clone)]
struct Segments {
    z: Range<usize>,
    x: Option<Range<usize>>,
    y: Option<Range<usize>>,
    prompt: Range<usize>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    segments: Segments,
    subtask: Subtask,
    time_features: Array1<f64>,
    time_pre: Array1<f64>,
    time_hidden: Array1<f64>,
    cond: Array1<f64>,
    cond_act: Array1<f64>,
    blocks: Vec<BlockCache>,
    final_norm: Option<FinalCache>,
    features: Array2<f64>,
    pub velocities: Velocities,
}

impl Trace {
    /// Softmax probability matrices of every head in every block.
    pub fn attention_probs(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.blocks.iter().flat_map(|b| b.attn.probs.iter())
    }

    pub fn sequence_len(&self) -> usize {
        self.segments.prompt.end
    }
}

/// Positional encodings added to each image stream.
#[derive(Debug, Clone)]
pub struct StreamEncodings {
    pub z: Array2<f64>,
    /// `None` leaves foreground tokens without encoding.
    pub x: Option<Array2<f64>>,
    pub y: Array2<f64>,
}

pub fn stream_encodings(grid: (usize, usize), d: usize, mode: LpecMode) -> Result<StreamEncodings> {
    let pe_z = make_pe(grid, d, (0, 0))?.values;
    let pe_x = make_pe(grid, d, foreground_frame(grid.1))?.values;
    Ok(match mode {
        LpecMode::Clone => StreamEncodings {
            y: pe_z.clone(),
            z: pe_z,
            x: Some(pe_x),
        },
        LpecMode::ZeroForeground => StreamEncodings {
            y: pe_z.clone(),
            z: pe_z,
            x: None,
        },
        LpecMode::Off => StreamEncodings {
            y: make_pe(grid, d, (0, 2 * (grid.1 + FRAME_GAP)))?.values,
            z: pe_z,
            x: Some(pe_x),
        },
    })
}

fn row(a: &Array2<f64>) -> Array1<f64> {
    a.row(0).to_owned()
}

fn check(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if all_finite(a.view()) {
        Ok(())
    } else {
        Err(Error::Model(format!("{} produced non-finite activations", what())))
    }
}

fn modulate(normed: &Array2<f64>, shift: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let gain = scale.mapv(|v| 1.0 + v);
    normed * &gain + shift
}

impl ModelState {
    fn check_inputs(&self, inputs: &Inputs<'_>) -> Result<()> {
        let cfg = &self.config;
        let n = cfg.tokens_per_stream();
        let mut want = vec![("z", inputs.z, cfg.z_dim())];
        if cfg.predict_foreground {
            want.push(("x_t", inputs.x_t, cfg.x_dim()));
        }
        if cfg.predict_background {
            want.push(("y_t", inputs.y_t, cfg.y_dim()));
        }
        for (name, a, dim) in want {
            if a.dim() != (n, dim) {
                return Err(Error::Dimension(format!(
                    "{name}: expected {n}x{dim} tokens, got {}x{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            check(a, || format!("input {name}"))?;
        }
        if !(0.0..=1.0).contains(&inputs.t) {
            return Err(Error::InvalidInput(format!("t = {} outside [0, 1]", inputs.t)));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &Inputs<'_>) -> Result<Velocities> {
        Ok(self.forward_trace(inputs)?.velocities)
    }

    pub fn forward_trace(&self, inputs: &Inputs<'_>) -> Result<Trace> {
        self.check_inputs(inputs)?;
        let cfg = &self.config;
        let l = &self.layout;
        let n = cfg.tokens_per_stream();
        let d = cfg.d;
        let p_tokens = cfg.prompt_tokens;
        let pe = stream_encodings(cfg.grid(), d, cfg.lpec)?;

        let mut offset = 0;
        let mut take = |len: usize| {
            let r = offset..offset + len;
            offset += len;
            r
        };
        let z_rng = take(n);
        let x_rng = cfg.predict_foreground.then(|| take(n));
        let y_rng = cfg.predict_background.then(|| take(n));
        let prompt_rng = take(p_tokens);
        let total = prompt_rng.end;

        let mut h = Array2::zeros((total, d));
        let emb_z = inputs.z.dot(self.p(l.embed_z.0)) + self.p(l.embed_z.1) + &pe.z;
        h.slice_mut(s![z_rng.clone(), ..]).assign(&emb_z);
        if let Some(r) = &x_rng {
            let mut emb = inputs.x_t.dot(self.p(l.embed_x.0)) + self.p(l.embed_x.1);
            if let Some(pe_x) = &pe.x {
                emb += pe_x;
            }
            h.slice_mut(s![r.clone(), ..]).assign(&emb);
        }
        if let Some(r) = &y_rng {
            let emb = inputs.y_t.dot(self.p(l.embed_y.0)) + self.p(l.embed_y.1) + &pe.y;
            h.slice_mut(s![r.clone(), ..]).assign(&emb);
        }
        let first = inputs.subtask.index() * p_tokens;
        h.slice_mut(s![prompt_rng.clone(), ..])
            .assign(&self.p(l.prompt).slice(s![first..first + p_tokens, ..]));
        check(&h, || "embedding".into())?;

        let time_features = timestep_embedding(inputs.t, cfg.time_dim);
        let time_pre = time_features.dot(self.p(l.time_w1)) + row(self.p(l.time_b1));
        let time_hidden = time_pre.mapv(silu);
        let cond = time_hidden.dot(self.p(l.time_w2)) + row(self.p(l.time_b2));
        let cond_act = cond.mapv(silu);

        let mut blocks = Vec::with_capacity(cfg.blocks);
        for (bi, bl) in l.blocks.iter().enumerate() {
            let m = cond_act.dot(self.p(bl.modulation_w)) + row(self.p(bl.modulation_b));
            let shift1 = m.slice(s![0..d]).to_owned();
            let scale1 = m.slice(s![d..2 * d]).to_owned();
            let shift2 = m.slice(s![2 * d..3 * d]).to_owned();
            let scale2 = m.slice(s![3 * d..4 * d]).to_owned();

            let (normed1, sigma1) = layer_norm(&h);
            let mod_in1 = modulate(&normed1, &shift1, &scale1);
            let weights = AttentionWeights {
                wq: self.p(bl.wq),
                wk: self.p(bl.wk),
                wv: self.p(bl.wv),
                wo: self.p(bl.wo),
                bo: self.p(bl.bo),
                heads: cfg.heads,
            };
            let attn = attention_forward(&mod_in1, &weights);
            check(&attn.output, || format!("blocks.{bi}.attn"))?;
            h += &attn.output;

            let (normed2, sigma2) = layer_norm(&h);
            let mod_in2 = modulate(&normed2, &shift2, &scale2);
            let pre_act = mod_in2.dot(self.p(bl.mlp_w1)) + self.p(bl.mlp_b1);
            let act = pre_act.mapv(silu);
            let mlp_out = act.dot(self.p(bl.mlp_w2)) + self.p(bl.mlp_b2);
            check(&mlp_out, || format!("blocks.{bi}.mlp"))?;
            h += &mlp_out;

            blocks.push(BlockCache {
                normed1,
                sigma1,
                mod_in1,
                attn,
                normed2,
                sigma2,
                mod_in2,
                pre_act,
                act,
                scale1,
                scale2,
            });
        }

        let (features, final_norm) = if cfg.blocks == 0 {
            (h, None)
        } else {
            let m = cond_act.dot(self.p(l.final_w)) + row(self.p(l.final_b));
            let shift = m.slice(s![0..d]).to_owned();
            let scale = m.slice(s![d..2 * d]).to_owned();
            let (normed, sigma) = layer_norm(&h);
            let features = modulate(&normed, &shift, &scale);
            (features, Some(FinalCache { normed, sigma, scale }))
        };
        check(&features, || "final".into())?;

        let vx = x_rng.as_ref().map(|r| {
            features.slice(s![r.clone(), ..]).dot(self.p(l.head_x.0)) + self.p(l.head_x.1)
        });
        let vy = y_rng.as_ref().map(|r| {
            features.slice(s![r.clone(), ..]).dot(self.p(l.head_y.0)) + self.p(l.head_y.1)
        });
        for (name, v) in [("head.x", &vx), ("head.y", &vy)] {
            if let Some(v) = v {
                check(v, || name.into())?;
            }
        }

        Ok(Trace {
            segments: Segments {
                z: z_rng,
                x: x_rng,
                y: y_rng,
                prompt: prompt_rng,
            },
            subtask: inputs.subtask,
            time_features,
            time_pre,
            time_hidden,
            cond,
            cond_act,
            blocks,
            final_norm,
            features,
            velocities: Velocities { x: vx, y: vy },
        })
    }

    /// Recomputes the forward pass and returns parameter gradients.
    pub fn backward(&self, inputs: &Inputs<'_>, upstream: &Upstream<'_>) -> Result<Vec<Array2<f64>>> {
        let trace = self.forward_trace(inputs)?;
        self.backward_from_trace(inputs, &trace, upstream)
    }

    pub fn backward_from_trace(
        &self,
        inputs: &Inputs<'_>,
        trace: &Trace,
        upstream: &Upstream<'_>,
    ) -> Result<Vec<Array2<f64>>> {
        let cfg = &self.config;
        let l = &self.layout;
        let d = cfg.d;
        let seg = &trace.segments;
        let mut grads = self.zeros_like();
        let outer = |a: &Array1<f64>, b: &Array1<f64>| {
            a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
        };

        let mut dfeat = Array2::<f64>::zeros(trace.features.dim());
        for (range, up, head, vel) in [
            (&seg.x, upstream.x, l.head_x, &trace.velocities.x),
            (&seg.y, upstream.y, l.head_y, &trace.velocities.y),
        ] {
            let (Some(r), Some(g)) = (range, up) else { continue };
            let v = vel.as_ref().expect("velocity present for every segment");
            if g.dim() != v.dim() {
                return Err(Error::Dimension(format!(
                    "upstream gradient {:?} vs velocity {:?}",
                    g.dim(),
                    v.dim()
                )));
            }
            let f = trace.features.slice(s![r.clone(), ..]);
            grads[head.0] += &f.t().dot(g);
            grads[head.1] += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
            dfeat.slice_mut(s![r.clone(), ..]).assign(&g.dot(&self.p(head.0).t()));
        }

        let mut dcond_act = Array1::<f64>::zeros(d);
        let mut dh = match &trace.final_norm {
            None => dfeat,
            Some(fc) => {
                let dshift = dfeat.sum_axis(Axis(0));
                let dscale = (&dfeat * &fc.normed).sum_axis(Axis(0));
                let gain = fc.scale.mapv(|v| 1.0 + v);
                let dnormed = &dfeat * &gain;
                let mut dm = Array1::zeros(2 * d);
                dm.slice_mut(s![0..d]).assign(&dshift);
                dm.slice_mut(s![d..2 * d]).assign(&dscale);
                grads[l.final_w] += &outer(&trace.cond_act, &dm);
                grads[l.final_b] += &dm.view().insert_axis(Axis(0));
                dcond_act += &self.p(l.final_w).dot(&dm);
                layer_norm_backward(&dnormed, &fc.normed, &fc.sigma)
            }
        };

        for (bl, cache) in l.blocks.iter().zip(&trace.blocks).rev() {
            // MLP branch.
            let dact = dh.dot(&self.p(bl.mlp_w2).t());
            grads[bl.mlp_w2] += &cache.act.t().dot(&dh);
            grads[bl.mlp_b2] += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dpre = &dact * &cache.pre_act.mapv(silu_grad);
            grads[bl.mlp_w1] += &cache.mod_in2.t().dot(&dpre);
            grads[bl.mlp_b1] += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dmod2 = dpre.dot(&self.p(bl.mlp_w1).t());
            let dshift2 = dmod2.sum_axis(Axis(0));
            let dscale2 = (&dmod2 * &cache.normed2).sum_axis(Axis(0));
            let dnormed2 = &dmod2 * &cache.scale2.mapv(|v| 1.0 + v);
            dh += &layer_norm_backward(&dnormed2, &cache.normed2, &cache.sigma2);

            // Attention branch.
            let weights = AttentionWeights {
                wq: self.p(bl.wq),
                wk: self.p(bl.wk),
                wv: self.p(bl.wv),
                wo: self.p(bl.wo),
                bo: self.p(bl.bo),
                heads: cfg.heads,
            };
            let ag = attention_backward(&dh, &cache.mod_in1, &weights, &cache.attn);
            grads[bl.wq] += &ag.dwq;
            grads[bl.wk] += &ag.dwk;
            grads[bl.wv] += &ag.dwv;
            grads[bl.wo] += &ag.dwo;
            grads[bl.bo] += &ag.dbo;
            let dshift1 = ag.du.sum_axis(Axis(0));
            let dscale1 = (&ag.du * &cache.normed1).sum_axis(Axis(0));
            let dnormed1 = &ag.du * &cache.scale1.mapv(|v| 1.0 + v);
            dh += &layer_norm_backward(&dnormed1, &cache.normed1, &cache.sigma1);

            let mut dm = Array1::zeros(4 * d);
            dm.slice_mut(s![0..d]).assign(&dshift1);
            dm.slice_mut(s![d..2 * d]).assign(&dscale1);
            dm.slice_mut(s![2 * d..3 * d]).assign(&dshift2);
            dm.slice_mut(s![3 * d..4 * d]).assign(&dscale2);
            grads[bl.modulation_w] += &outer(&trace.cond_act, &dm);
            grads[bl.modulation_b] += &dm.view().insert_axis(Axis(0));
            dcond_act += &self.p(bl.modulation_w).dot(&dm);
        }

        // Timestep MLP.
        let dcond = &dcond_act * &trace.cond.mapv(silu_grad);
        grads[l.time_w2] += &outer(&trace.time_hidden, &dcond);
        grads[l.time_b2] += &dcond.view().insert_axis(Axis(0));
        let dhidden = self.p(l.time_w2).dot(&dcond);
        let dpre = &dhidden * &trace.time_pre.mapv(silu_grad);
        grads[l.time_w1] += &outer(&trace.time_features, &dpre);
        grads[l.time_b1] += &dpre.view().insert_axis(Axis(0));

        // Embeddings and prompt rows. Positional encodings are constants.
        let dz = dh.slice(s![seg.z.clone(), ..]);
        grads[l.embed_z.0] += &inputs.z.t().dot(&dz);
        grads[l.embed_z.1] += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        if let Some(r) = &seg.x {
            let dx = dh.slice(s![r.clone(), ..]);
            grads[l.embed_x.0] += &inputs.x_t.t().dot(&dx);
            grads[l.embed_x.1] += &dx.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if let Some(r) = &seg.y {
            let dy = dh.slice(s![r.clone(), ..]);
            grads[l.embed_y.0] += &inputs.y_t.t().dot(&dy);
            grads[l.embed_y.1] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let first = trace.subtask.index() * cfg.prompt_tokens;
        let mut prompt_grad = grads[l.prompt].slice_mut(s![first..first + cfg.prompt_tokens, ..]);
        prompt_grad += &dh.slice(s![seg.prompt.clone(), ..]);

        for (name, g) in self.names().iter().zip(&grads) {
            if !all_finite(g.view()) {
                return Err(Error::Model(format!("non-finite gradient for {name}")));
            }
        }
        Ok(grads)
    }
}
