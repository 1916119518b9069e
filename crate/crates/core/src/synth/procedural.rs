//! Procedural stand-ins for natural backgrounds and subtask foregrounds.
//!
//! None of these try to be photorealistic. They only need the statistical
//! traits each subtask relies on: smooth multi-scale backgrounds with hard
//! edges, sparse glyphs for watermarks, full-frame veils for fog and flare.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Placement, Subtask};
use crate::image::LayerImage;
use crate::seed;

/// Parameters shared by the foreground generators.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundParams {
    pub alpha_range: (f64, f64),
    /// Element size as a fraction of the image width.
    pub size_range: (f64, f64),
    /// Forces the number of shapes (cells, tools, blobs) when set.
    pub shape_count: Option<usize>,
}

impl ForegroundParams {
    pub fn for_subtask(subtask: Subtask) -> Self {
        Self {
            alpha_range: subtask.default_alpha_range(),
            size_range: subtask.default_size_range(),
            shape_count: None,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]`, one plane of `w·h` values.
pub(crate) fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cells: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut total = 0.0;
    for (octave, &n) in cells.iter().enumerate() {
        let weight = 0.5f64.powi(octave as i32);
        total += weight;
        let lattice: Vec<f64> = (0..(n + 1) * (n + 1)).map(|_| rng.gen::<f64>()).collect();
        for y in 0..h {
            let fy = y as f64 / h as f64 * n as f64;
            let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / w as f64 * n as f64;
                let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                let l = |i: usize, j: usize| lattice[j * (n + 1) + i];
                let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                out[y * w + x] += weight * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)]
}

/// Smooth value-noise gradient with two to five solid shapes on top.
pub fn gen_procedural_background(seed: u64, (w, h): (usize, usize)) -> LayerImage {
    let mut rng = seed::rng(seed);
    let mut data = vec![0.0; w * h * 3];
    let base = random_color(&mut rng, 0.15, 0.85);
    for c in 0..3 {
        let noise = value_noise(&mut rng, w, h, &[2, 4, 8]);
        for (i, n) in noise.iter().enumerate() {
            data[i * 3 + c] = (base[c] + 0.7 * (n - 0.5)).clamp(0.0, 1.0);
        }
    }

    let shapes = rng.gen_range(2..=5);
    for _ in 0..shapes {
        let color = random_color(&mut rng, 0.0, 1.0);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx = rng.gen_range(0.08..0.25) * w as f64;
        let ry = rng.gen_range(0.08..0.25) * h as f64;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let inside = if disc {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    data[(y * w + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }
    LayerImage::new(w, h, 3, data).expect("generated values are clamped")
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<f64>,
    alpha: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize, fill: [f64; 3]) -> Self {
        Self {
            w,
            h,
            rgb: fill.iter().copied().cycle().take(w * h * 3).collect(),
            alpha: vec![0.0; w * h],
        }
    }

    fn paint(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let i = y * self.w + x;
        if alpha > self.alpha[i] {
            self.alpha[i] = alpha;
            self.rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
        }
    }

    fn finish(self) -> (LayerImage, Placement) {
        let mut data = Vec::with_capacity(self.w * self.h * 4);
        let (mut x0, mut y0, mut x1, mut y1) = (self.w, self.h, 0, 0);
        for (i, a) in self.alpha.iter().enumerate() {
            data.extend(self.rgb[i * 3..i * 3 + 3].iter().map(|v| v.clamp(0.0, 1.0)));
            data.push(a.clamp(0.0, 1.0));
            if *a > 0.0 {
                let (x, y) = (i % self.w, i / self.w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
        let placement = if x1 > x0 {
            Placement {
                x: x0,
                y: y0,
                w: x1 - x0,
                h: y1 - y0,
            }
        } else {
            Placement::default()
        };
        let img = LayerImage::new(self.w, self.h, 4, data).expect("canvas values are clamped");
        (img, placement)
    }
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx - px, ay + t * dy - py);
    (qx * qx + qy * qy).sqrt()
}

/// Subtask-shaped RGBA foreground and the bounding box of its non-zero alpha.
pub fn gen_procedural_foreground(
    seed: u64,
    (w, h): (usize, usize),
    subtask: Subtask,
    params: &ForegroundParams,
) -> (LayerImage, Placement) {
    let mut rng = seed::rng(seed);
    match subtask {
        Subtask::Watermark => watermark(&mut rng, w, h, params),
        Subtask::Flare => flare(&mut rng, w, h, params),
        Subtask::Occlusion => occlusion(&mut rng, w, h, params),
        Subtask::Cell => cells(&mut rng, w, h, params),
        Subtask::Glass => glass(&mut rng, w, h, params),
        Subtask::XRay => xray(&mut rng, w, h, params),
    }
}

/// Text-like strokes inside a glyph box; opacity capped at 0.25.
fn watermark(rng: &mut ChaCha8Rng, w: usize, h: usize, p: &ForegroundParams) -> (LayerImage, Placement) {
    let color = random_color(rng, 0.6, 1.0);
    let mut canvas = Canvas::new(w, h, color);
    let hi = p.alpha_range.1.min(0.25);
    let lo = p.alpha_range.0.clamp(0.0, hi);
    // (0, hi]: 1 − U[0,1) never reaches zero.
    let alpha = lo + (hi - lo) * (1.0 - rng.gen::<f64>());

    let box_w = (uniform(rng, p.size_range) * w as f64).round().max(3.0).min(w as f64) as usize;
    let box_h = ((box_w as f64) * rng.gen_range(0.45..0.7)).round().max(3.0).min(h as f64) as usize;
    let bx = rng.gen_range(0..=w - box_w) as f64;
    let by = rng.gen_range(0..=h - box_h) as f64;

    let glyphs = rng.gen_range(2..=4);
    let glyph_w = box_w as f64 / glyphs as f64;
    let mut strokes = Vec::new();
    for g in 0..glyphs {
        let gx = bx + g as f64 * glyph_w;
        for _ in 0..rng.gen_range(2..=3) {
            let a = (gx + rng.gen::<f64>() * glyph_w, by + rng.gen::<f64>() * box_h as f64);
            let b = (gx + rng.gen::<f64>() * glyph_w, by + rng.gen::<f64>() * box_h as f64);
            strokes.push((a, b));
        }
    }
    let half_width = 0.5f64.max(box_h as f64 * 0.08);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if strokes.iter().any(|&(a, b)| segment_distance(px, py, a, b) <= half_width) {
                canvas.paint(x, y, color, alpha);
            }
        }
    }
    canvas.finish()
}

/// Radial blobs with streaks over a full-frame veil that never reaches zero.
fn flare(rng: &mut ChaCha8Rng, w: usize, h: usize, p: &ForegroundParams) -> (LayerImage, Placement) {
    let color = [1.0, rng.gen_range(0.8..0.95), rng.gen_range(0.55..0.8)];
    let mut canvas = Canvas::new(w, h, color);
    let floor = p.alpha_range.0.max(0.02);
    let peak = p.alpha_range.1.max(floor);
    let blobs = p.shape_count.unwrap_or_else(|| rng.gen_range(1..=3));
    let spec: Vec<_> = (0..blobs)
        .map(|_| {
            let cx = rng.gen_range(0.0..w as f64);
            let cy = rng.gen_range(0.0..h as f64);
            let radius = uniform(rng, p.size_range) * w as f64;
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            (cx, cy, radius.max(1.0), angle)
        })
        .collect();
    let diag = ((w * w + h * h) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v: f64 = 0.0;
            for &(cx, cy, r, angle) in &spec {
                let (dx, dy) = (px - cx, py - cy);
                let glow = (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                let (ux, uy) = (angle.cos(), angle.sin());
                let across = (dx * uy - dy * ux).abs();
                let along = (dx * ux + dy * uy).abs();
                let streak = 0.6 * (-across * across / 2.0).exp() * (-along / diag).exp();
                v = v.max(glow).max(streak);
            }
            canvas.paint(x, y, color, floor + (peak - floor) * v);
        }
    }
    canvas.finish()
}

/// Smoothly varying fog veil with brighter droplets.
fn occlusion(rng: &mut ChaCha8Rng, w: usize, h: usize, p: &ForegroundParams) -> (LayerImage, Placement) {
    let (lo, hi) = p.alpha_range;
    let tint = rng.gen_range(0.75..0.95);
    let noise = value_noise(rng, w, h, &[2, 4]);
    let shade = value_noise(rng, w, h, &[4]);
    let drops = p.shape_count.unwrap_or_else(|| rng.gen_range(3..=8));
    let drop_spec: Vec<_> = (0..drops)
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                uniform(rng, p.size_range) * w as f64 * 0.3 + 0.5,
            )
        })
        .collect();
    let mut canvas = Canvas::new(w, h, [tint; 3]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut a = lo + (hi - lo) * noise[i];
            let in_drop = drop_spec.iter().any(|&(cx, cy, r)| {
                let (dx, dy) = (px - cx, py - cy);
                dx * dx + dy * dy <= r * r
            });
            if in_drop {
                a = hi;
            }
            let g = (tint + 0.1 * (shade[i] - 0.5)).clamp(0.0, 1.0);
            canvas.paint(x, y, [g, g, (g + 0.03).min(1.0)], a.max(1e-3));
        }
    }
    canvas.finish()
}

/// Soft ellipses; color is scaled by coverage because the additive blend
/// ignores alpha.
fn cells(rng: &mut ChaCha8Rng, w: usize, h: usize, p: &ForegroundParams) -> (LayerImage, Placement) {
    let mut canvas = Canvas::new(w, h, [0.0; 3]);
    let count = p.shape_count.unwrap_or_else(|| rng.gen_range(3..=8));
    for _ in 0..count {
        let color = [rng.gen_range(0.1..0.5), rng.gen_range(0.0..0.3), rng.gen_range(0.2..0.6)];
        let strength = uniform(rng, p.alpha_range);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let ra = (uniform(rng, p.size_range) * w as f64 / 2.0).max(1.0);
        let rb = ra * rng.gen_range(0.5..1.0);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * ct + dy * st) / ra;
                let v = (-dx * st + dy * ct) / rb;
                let r = (u * u + v * v).sqrt();
                let m = smoothstep((1.0 - r) / 0.4) * strength;
                if m > 0.0 {
                    canvas.paint(x, y, [color[0] * m, color[1] * m, color[2] * m], m);
                }
            }
        }
    }
    canvas.finish()
}

/// Vessel outline with a bright rim and a low-alpha interior. The glass
/// blend ignores alpha, so the whole frame acts as a neutral-grey pane.
fn glass(rng: &mut ChaCha8Rng, w: usize, h: usize, p: &ForegroundParams) -> (LayerImage, Placement) {
    let pane = [0.5; 3];
    let mut canvas = Canvas::new(w, h, pane);
    let interior = rng.gen_range(0.35..0.6);
    let rim = rng.gen_range(0.75..0.95);
    let (lo, hi) = p.alpha_range;
    let body_w = (uniform(rng, p.size_range) * w as f64).max(4.0);
    let body_h = rng.gen_range(0.5..0.85) * h as f64;
    let cx = rng.gen_range(body_w / 2.0..=(w as f64 - body_w / 2.0).max(body_w / 2.0));
    let top = rng.gen_range(0.0..=(h as f64 - body_h).max(0.0));
    let neck = body_w * rng.gen_range(0.3..0.5);
    let shoulder = top + body_h * 0.3;
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if py < top || py > top + body_h {
                continue;
            }
            let half = if py < shoulder {
                let t = (py - top) / (shoulder - top).max(1e-9);
                neck / 2.0 + (body_w - neck) / 2.0 * smoothstep(t)
            } else {
                body_w / 2.0
            };
            let d = (px - cx).abs();
            if d > half {
                continue;
            }
            let edge = half - d < 1.0 || py - top < 1.0 || top + body_h - py < 1.0;
            if edge {
                canvas.paint(x, y, [rim; 3], hi);
            } else {
                canvas.paint(x, y, [interior; 3], lo);
            }
        }
    }
    canvas.finish()
}

/// Solid tool silhouettes: a blade plus a wider handle, randomly rotated.
fn xray(rng: &mut ChaCha8Rng, w: usize, h: usize, p: &ForegroundParams) -> (LayerImage, Placement) {
    let mut canvas = Canvas::new(w, h, [0.0; 3]);
    let tools = p.shape_count.unwrap_or_else(|| rng.gen_range(1..=3));
    for _ in 0..tools {
        let shade = rng.gen_range(0.05..0.4);
        let color = [shade, shade * rng.gen_range(0.8..1.2), shade * rng.gen_range(0.8..1.2)];
        let alpha = uniform(rng, p.alpha_range);
        let len = (uniform(rng, p.size_range) * w as f64).max(4.0);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (ux, uy) = (theta.cos(), theta.sin());
        let blade_half = (len * 0.06).max(0.6);
        let handle_half = (len * 0.14).max(1.0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = dx * ux + dy * uy;
                let across = (-dx * uy + dy * ux).abs();
                let blade = (0.0..=len * 0.6).contains(&along) && across <= blade_half;
                let handle = (-len * 0.4..0.0).contains(&along) && across <= handle_half;
                if blade || handle {
                    canvas.paint(x, y, [color[0], color[1].min(1.0), color[2].min(1.0)], alpha);
                }
            }
        }
    }
    canvas.finish()
}
