//! Patch codec and positional encodings.
//!
//! Images become token grids by space-to-depth patch extraction followed by
//! a linear projection. The codec used for diffusion latents is lossless:
//! patches are mapped affinely from `[0, 1]` to `[-1, 1]` and back.
//!
//! Positional encodings are 2-D sinusoids evaluated in a coordinate frame.
//! Background and composite tokens share the composite's frame; foreground
//! tokens are either shifted to a disjoint frame or left without encoding.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LayerImage;

/// Gap (in columns) between the composite frame and the foreground frame.
pub const FRAME_GAP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Composite,
    Foreground,
    Background,
    Prompt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub stream: Stream,
    /// `(rows, cols)` of the patch grid; `None` for prompt tokens.
    pub grid: Option<(usize, usize)>,
    /// One token per row, row-major over the grid.
    pub tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn new(stream: Stream, grid: Option<(usize, usize)>, tokens: Array2<f64>) -> Result<Self> {
        if let Some((r, c)) = grid {
            if r * c != tokens.nrows() {
                return Err(Error::Dimension(format!(
                    "{r}x{c} grid needs {} tokens, got {}",
                    r * c,
                    tokens.nrows()
                )));
            }
        }
        Ok(Self {
            stream,
            grid,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Grid coordinate of token `i`.
    pub fn coord(&self, i: usize) -> Option<(usize, usize)> {
        self.grid.map(|(_, cols)| (i / cols, i % cols))
    }
}

/// Affine map `x ↦ x·W + b` applied to row vectors, with an optional known
/// inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    weight: Array2<f64>,
    bias: Array1<f64>,
    inverse_weight: Option<Array2<f64>>,
}

impl Projection {
    pub fn identity(n: usize) -> Self {
        Self {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
            inverse_weight: Some(Array2::eye(n)),
        }
    }

    /// Element-wise `x ↦ scale·x + shift`.
    pub fn scaled(n: usize, scale: f64, shift: f64) -> Self {
        assert!(scale != 0.0, "scale must be non-zero");
        Self {
            weight: Array2::eye(n) * scale,
            bias: Array1::from_elem(n, shift),
            inverse_weight: Some(Array2::eye(n) / scale),
        }
    }

    /// Random orthogonal map (Gram–Schmidt on a Gaussian matrix); its inverse
    /// is the transpose.
    pub fn orthogonal<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut q = Array2::<f64>::zeros((n, n));
        let mut row = 0;
        while row < n {
            let mut v: Array1<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for k in 0..row {
                let qk = q.row(k);
                let dot = v.dot(&qk);
                v.scaled_add(-dot, &qk);
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-8 {
                continue;
            }
            q.row_mut(row).assign(&(v / norm));
            row += 1;
        }
        Self {
            inverse_weight: Some(q.t().to_owned()),
            weight: q,
            bias: Array1::zeros(n),
        }
    }

    /// General affine map without a stored inverse.
    pub fn dense(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() != bias.len() {
            return Err(Error::Dimension("projection bias length".into()));
        }
        Ok(Self {
            weight,
            bias,
            inverse_weight: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn inverse(&self) -> Option<Projection> {
        let inv = self.inverse_weight.as_ref()?;
        Some(Projection {
            bias: -self.bias.dot(inv),
            weight: inv.clone(),
            inverse_weight: Some(self.weight.clone()),
        })
    }
}

fn check_patch(width: usize, height: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || width % patch != 0 || height % patch != 0 {
        return Err(Error::Dimension(format!(
            "patch {patch} does not divide {width}x{height}"
        )));
    }
    Ok((height / patch, width / patch))
}

/// Raw space-to-depth patch vectors, one row per patch. Within a patch the
/// layout is `(dy, dx, channel)`.
pub fn raw_patches(img: &LayerImage, patch: usize) -> Result<Array2<f64>> {
    let (rows, cols) = check_patch(img.width(), img.height(), patch)?;
    let ch = img.channels();
    let dim = patch * patch * ch;
    let mut out = Array2::zeros((rows * cols, dim));
    for gr in 0..rows {
        for gc in 0..cols {
            let mut tok = out.row_mut(gr * cols + gc);
            let mut k = 0;
            for dy in 0..patch {
                let start = img.index(gc * patch, gr * patch + dy, 0);
                for &v in &img.data()[start..start + patch * ch] {
                    tok[k] = v;
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn patchify(img: &LayerImage, patch: usize, proj: &Projection, stream: Stream) -> Result<TokenSequence> {
    let raw = raw_patches(img, patch)?;
    if proj.input_dim() != raw.ncols() {
        return Err(Error::Dimension(format!(
            "projection expects {} inputs, patch vectors have {}",
            proj.input_dim(),
            raw.ncols()
        )));
    }
    let (rows, cols) = (img.height() / patch, img.width() / patch);
    TokenSequence::new(stream, Some((rows, cols)), proj.apply(&raw))
}

/// Inverse of [`patchify`]. Decoded values are clamped into `[0, 1]`, which
/// is a no-op whenever the tokens came from a real image.
pub fn unpatchify(seq: &TokenSequence, patch: usize, inv_proj: &Projection) -> Result<LayerImage> {
    let (rows, cols) = seq
        .grid
        .ok_or_else(|| Error::Dimension("token sequence has no grid".into()))?;
    if rows * cols != seq.len() || patch == 0 {
        return Err(Error::Dimension("token sequence does not tile its grid".into()));
    }
    if inv_proj.input_dim() != seq.dim() {
        return Err(Error::Dimension("inverse projection input dimension".into()));
    }
    let raw = inv_proj.apply(&seq.tokens);
    let dim = raw.ncols();
    if dim % (patch * patch) != 0 {
        return Err(Error::Dimension(format!(
            "token dimension {dim} is not a multiple of patch area {}",
            patch * patch
        )));
    }
    let ch = dim / (patch * patch);
    let (w, h) = (cols * patch, rows * patch);
    let mut data = vec![0.0; w * h * ch];
    for gr in 0..rows {
        for gc in 0..cols {
            let tok = raw.row(gr * cols + gc);
            let mut k = 0;
            for dy in 0..patch {
                let start = ((gr * patch + dy) * w + gc * patch) * ch;
                for v in &mut data[start..start + patch * ch] {
                    *v = tok[k];
                    k += 1;
                }
            }
        }
    }
    LayerImage::from_clamped(w, h, ch, data)
}

/// Lossless latent codec: patch vectors rescaled from `[0, 1]` to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentCodec {
    pub patch: usize,
}

impl LatentCodec {
    pub fn new(patch: usize) -> Self {
        Self { patch }
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }

    pub fn encode(&self, img: &LayerImage, stream: Stream) -> Result<TokenSequence> {
        let dim = self.token_dim(img.channels());
        patchify(img, self.patch, &Projection::scaled(dim, 2.0, -1.0), stream)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<LayerImage> {
        let inv = Projection::scaled(seq.dim(), 2.0, -1.0)
            .inverse()
            .expect("scaled projection is invertible");
        unpatchify(seq, self.patch, &inv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosEncoding {
    pub rows: usize,
    pub cols: usize,
    pub frame_offset: (usize, usize),
    /// `(rows·cols) × d`, row-major over the grid.
    pub values: Array2<f64>,
}

/// Fills `out` with a 1-D sinusoidal encoding of `pos`: channel `c` uses
/// frequency `10000^(−2⌊c/2⌋/n)`, sine on even channels and cosine on odd.
fn encode_axis(pos: f64, out: &mut [f64]) {
    let n = out.len() as f64;
    for (c, v) in out.iter_mut().enumerate() {
        let k = (c / 2) as f64;
        let freq = 10000f64.powf(-2.0 * k / n);
        *v = if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        };
    }
}

/// 2-D sinusoidal encoding: the first `d/2` channels encode the row, the rest
/// the column, both measured in the frame shifted by `frame_offset`.
pub fn make_pe(grid: (usize, usize), d: usize, frame_offset: (usize, usize)) -> Result<PosEncoding> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "positional encoding dimension must be even, got {d}"
        )));
    }
    let (rows, cols) = grid;
    let half = d / 2;
    let mut values = Array2::zeros((rows * cols, d));
    for r in 0..rows {
        for c in 0..cols {
            let mut v = values.row_mut(r * cols + c);
            let slice = v.as_slice_mut().expect("row of a standard-layout array");
            encode_axis((r + frame_offset.0) as f64, &mut slice[..half]);
            encode_axis((c + frame_offset.1) as f64, &mut slice[half..]);
        }
    }
    Ok(PosEncoding {
        rows,
        cols,
        frame_offset,
        values,
    })
}

/// Frame offset that keeps the foreground grid disjoint from the composite's.
pub fn foreground_frame(cols: usize) -> (usize, usize) {
    (0, cols + FRAME_GAP)
}

fn add_pe(seq: &TokenSequence, pe: &PosEncoding, what: &str) -> Result<TokenSequence> {
    if seq.grid != Some((pe.rows, pe.cols)) || seq.dim() != pe.values.ncols() {
        return Err(Error::Dimension(format!(
            "{what}: token grid {:?}x{} does not match encoding {}x{}x{}",
            seq.grid,
            seq.dim(),
            pe.rows,
            pe.cols,
            pe.values.ncols()
        )));
    }
    Ok(TokenSequence {
        tokens: &seq.tokens + &pe.values,
        ..seq.clone()
    })
}

/// Clones the composite's encoding onto background and composite tokens.
/// Foreground tokens get `pe_x` when given and are returned untouched
/// otherwise.
pub fn apply_lpec(
    c_y: &TokenSequence,
    c_z: &TokenSequence,
    c_x: &TokenSequence,
    pe_z: &PosEncoding,
    pe_x: Option<&PosEncoding>,
) -> Result<(TokenSequence, TokenSequence, TokenSequence)> {
    let y = add_pe(c_y, pe_z, "background")?;
    let z = add_pe(c_z, pe_z, "composite")?;
    let x = match pe_x {
        Some(pe) => add_pe(c_x, pe, "foreground")?,
        None => c_x.clone(),
    };
    Ok((y, z, x))
}

/// Mean of the token rows.
pub fn token_mean(seq: &TokenSequence) -> Array1<f64> {
    seq.tokens.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(seq.dim()))
}

/// Splits a stacked token matrix back into the given row counts.
pub fn split_rows(m: &Array2<f64>, counts: &[usize]) -> Vec<Array2<f64>> {
    let mut out = Vec::with_capacity(counts.len());
    let mut start = 0;
    for &n in counts {
        out.push(m.slice(s![start..start + n, ..]).to_owned());
        start += n;
    }
    out
}
