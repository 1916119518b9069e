//! Closed-form inverses of the blend operators.
//!
//! Given the composite and one known layer, each mode can be solved for the
//! other layer pixel by pixel. Solutions are flagged invalid where the divisor
//! drops below `eps` or where saturation destroyed information.

use crate::blend::{compose, BlendMode};
use crate::error::{Error, Result};
use crate::image::{AlphaMap, LayerImage};

pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub recovered: LayerImage,
    /// Per pixel: every channel was well conditioned and unambiguous.
    pub valid_mask: Vec<bool>,
    /// Per pixel: some channel had no single branch-consistent glass candidate.
    pub ambiguous_mask: Vec<bool>,
    /// RMSE (0–1 scale) of the re-composition against the input composite,
    /// over valid pixels.
    pub residual: f64,
}

impl InversionResult {
    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone, Copy)]
struct Solved {
    value: f64,
    valid: bool,
    ambiguous: bool,
}

impl Solved {
    fn new(value: f64, valid: bool) -> Self {
        Self {
            value,
            valid,
            ambiguous: false,
        }
    }
}

fn solve_background(mode: BlendMode, i: f64, a: f64, alpha: f64, eps: f64) -> Solved {
    match mode {
        BlendMode::XRay => {
            let den = 1.0 - alpha + alpha * a;
            Solved::new(if den >= eps { i / den } else { i }, den >= eps)
        }
        BlendMode::Glass { threshold } => solve_glass_background(i, a, threshold, eps),
        BlendMode::WatermarkLinear => {
            let ok = alpha >= eps;
            Solved::new(if ok { (i - (1.0 - alpha) * a) / alpha } else { i }, ok)
        }
        BlendMode::CellAdditive => {
            // Any positive addend near the ceiling may have been clipped.
            let saturated = i > 1.0 - eps && a > 0.0;
            Solved::new(i - a, !saturated)
        }
        BlendMode::OcclusionOver => {
            let den = 1.0 - alpha;
            let ok = den >= eps;
            Solved::new(if ok { (i - alpha * a) / den } else { i }, ok)
        }
        BlendMode::FlareScreen => {
            let den = 1.0 - alpha * a;
            let ok = den >= eps;
            Solved::new(if ok { 1.0 - (1.0 - i) / den } else { i }, ok)
        }
    }
}

fn solve_glass_background(i: f64, a: f64, threshold: f64, eps: f64) -> Solved {
    let mode = BlendMode::Glass { threshold };
    // Each candidate is only kept when its divisor is usable and it lands on
    // its own side of the threshold.
    let multiply = (a >= eps).then(|| i / a).filter(|&b| b < threshold);
    let screen = (1.0 - a >= eps)
        .then(|| 1.0 - (1.0 - i) / (1.0 - a))
        .filter(|&b| b >= threshold);

    match (multiply, screen) {
        (Some(b), None) | (None, Some(b)) => Solved::new(b, true),
        (Some(bm), Some(bs)) => {
            let rm = (mode.blend(a, 1.0, bm.clamp(0.0, 1.0)) - i).abs();
            let rs = (mode.blend(a, 1.0, bs.clamp(0.0, 1.0)) - i).abs();
            if (rm - rs).abs() > 1e-12 {
                Solved::new(if rm < rs { bm } else { bs }, true)
            } else {
                Solved {
                    value: bm,
                    valid: false,
                    ambiguous: true,
                }
            }
        }
        (None, None) => Solved {
            value: i,
            valid: false,
            ambiguous: true,
        },
    }
}

fn solve_foreground(mode: BlendMode, i: f64, b: f64, alpha: f64, eps: f64) -> Solved {
    match mode {
        BlendMode::XRay => {
            let den = alpha * b;
            let ok = den >= eps;
            Solved::new(if ok { (i - (1.0 - alpha) * b) / den } else { 0.0 }, ok)
        }
        BlendMode::Glass { threshold } => {
            if b < threshold {
                let ok = b >= eps;
                Solved::new(if ok { i / b } else { 0.0 }, ok)
            } else {
                let den = 1.0 - b;
                let ok = den >= eps;
                Solved::new(if ok { 1.0 - (1.0 - i) / den } else { 0.0 }, ok)
            }
        }
        BlendMode::WatermarkLinear => {
            let den = 1.0 - alpha;
            let ok = den >= eps;
            Solved::new(if ok { (i - alpha * b) / den } else { 0.0 }, ok)
        }
        BlendMode::CellAdditive => {
            let saturated = i > 1.0 - eps && b > 0.0;
            Solved::new(i - b, !saturated)
        }
        BlendMode::OcclusionOver => {
            let ok = alpha >= eps;
            Solved::new(if ok { (i - (1.0 - alpha) * b) / alpha } else { 0.0 }, ok)
        }
        BlendMode::FlareScreen => {
            let den = 1.0 - b;
            let ok = den >= eps && alpha >= eps;
            let v = if ok { (1.0 - (1.0 - i) / den) / alpha } else { 0.0 };
            Solved::new(v, ok)
        }
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("eps must be positive, got {eps}")))
    }
}

/// RMSE (0–1 scale) between two RGB images restricted to `mask` pixels.
fn masked_rmse(a: &LayerImage, b: &LayerImage, mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((pa, pb), &m) in a.data().chunks_exact(3).zip(b.data().chunks_exact(3)).zip(mask) {
        if m {
            for c in 0..3 {
                let d = pa[c] - pb[c];
                sum += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Recovers the background from the composite and the known RGBA foreground.
pub fn invert_background(
    z: &LayerImage,
    fg: &LayerImage,
    mode: BlendMode,
    eps: f64,
) -> Result<InversionResult> {
    check_eps(eps)?;
    mode.validate()?;
    if z.channels() != 3 || fg.channels() != 4 {
        return Err(Error::InvalidInput(
            "invert_background expects an RGB composite and an RGBA foreground".into(),
        ));
    }
    z.check_extent(fg, "invert_background")?;

    let n = z.pixel_count();
    let mut out = Vec::with_capacity(n * 3);
    let mut valid_mask = Vec::with_capacity(n);
    let mut ambiguous_mask = Vec::with_capacity(n);
    for (zi, f) in z.data().chunks_exact(3).zip(fg.data().chunks_exact(4)) {
        let mut valid = true;
        let mut ambiguous = false;
        for c in 0..3 {
            let s = solve_background(mode, zi[c], f[c], f[3], eps);
            out.push(s.value.clamp(0.0, 1.0));
            valid &= s.valid;
            ambiguous |= s.ambiguous;
        }
        valid_mask.push(valid);
        ambiguous_mask.push(ambiguous);
    }
    let recovered = LayerImage::new(z.width(), z.height(), 3, out)?;
    let recomposed = compose(fg, &recovered, mode)?;
    let residual = masked_rmse(&recomposed, z, &valid_mask);
    Ok(InversionResult {
        recovered,
        valid_mask,
        ambiguous_mask,
        residual,
    })
}

/// Recovers the foreground color from the composite, the known background
/// and the foreground alpha. The returned image is RGBA carrying `alpha`.
pub fn invert_foreground(
    z: &LayerImage,
    bg: &LayerImage,
    alpha: &AlphaMap,
    mode: BlendMode,
    eps: f64,
) -> Result<InversionResult> {
    check_eps(eps)?;
    mode.validate()?;
    if z.channels() != 3 || bg.channels() != 3 {
        return Err(Error::InvalidInput(
            "invert_foreground expects RGB composite and background".into(),
        ));
    }
    z.check_extent(bg, "invert_foreground")?;
    if alpha.width != z.width() || alpha.height != z.height() {
        return Err(Error::Dimension("invert_foreground: alpha map extent".into()));
    }

    let n = z.pixel_count();
    let mut out = Vec::with_capacity(n * 4);
    let mut valid_mask = Vec::with_capacity(n);
    for ((zi, b), &a) in z.data().chunks_exact(3).zip(bg.data().chunks_exact(3)).zip(&alpha.values) {
        let mut valid = true;
        for c in 0..3 {
            let s = solve_foreground(mode, zi[c], b[c], a, eps);
            out.push(s.value.clamp(0.0, 1.0));
            valid &= s.valid;
        }
        out.push(a);
        valid_mask.push(valid);
    }
    let recovered = LayerImage::new(z.width(), z.height(), 4, out)?;
    let recomposed = compose(&recovered, bg, mode)?;
    let residual = masked_rmse(&recomposed, z, &valid_mask);
    Ok(InversionResult {
        recovered,
        valid_mask,
        ambiguous_mask: vec![false; n],
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Consistency {
    pub rmse: f64,
    pub pass: bool,
}

/// Checks `compose(fg, bg, mode) ≈ z` as an RMSE on the 0–1 scale.
pub fn consistency_check(
    fg: &LayerImage,
    bg: &LayerImage,
    z: &LayerImage,
    mode: BlendMode,
    tol: f64,
) -> Result<Consistency> {
    let recomposed = compose(fg, bg, mode)?;
    z.check_extent(&recomposed, "consistency_check")?;
    if z.channels() != 3 {
        return Err(Error::InvalidInput("composite must be RGB".into()));
    }
    let rmse = masked_rmse(&recomposed, z, &vec![true; z.pixel_count()]);
    Ok(Consistency {
        rmse,
        pass: rmse <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fg1(a: f64, alpha: f64) -> LayerImage {
        LayerImage::new(1, 1, 4, vec![a, a, a, alpha]).unwrap()
    }

    fn rgb1(v: f64) -> LayerImage {
        LayerImage::new(1, 1, 3, vec![v, v, v]).unwrap()
    }

    #[test]
    fn background_examples() {
        let r = invert_background(&rgb1(0.6), &fg1(0.5, 0.5), BlendMode::XRay, DEFAULT_EPS).unwrap();
        assert!((r.recovered.data()[0] - 0.8).abs() < 1e-12);
        assert!(r.valid_mask[0]);
        assert!(r.residual < 1e-12);

        let r = invert_background(&rgb1(0.5), &fg1(0.4, 0.5), BlendMode::WatermarkLinear, DEFAULT_EPS)
            .unwrap();
        assert!((r.recovered.data()[0] - 0.6).abs() < 1e-12);
        let check = consistency_check(&fg1(0.4, 0.5), &r.recovered, &rgb1(0.5), BlendMode::WatermarkLinear, 1e-9)
            .unwrap();
        assert!(check.pass);

        let r = invert_background(&rgb1(1.0), &fg1(0.7, 1.0), BlendMode::CellAdditive, DEFAULT_EPS).unwrap();
        assert!(!r.valid_mask[0]);
    }

    #[test]
    fn foreground_examples() {
        let alpha = AlphaMap::constant(1, 1, 1.0).unwrap();
        let r = invert_foreground(&rgb1(0.9), &rgb1(0.6), &alpha, BlendMode::CellAdditive, DEFAULT_EPS)
            .unwrap();
        assert!((r.recovered.data()[0] - 0.3).abs() < 1e-12);
        assert!(r.valid_mask[0]);

        let r = invert_foreground(&rgb1(0.6), &rgb1(0.8), &alpha, BlendMode::XRay, DEFAULT_EPS).unwrap();
        assert!((r.recovered.data()[0] - 0.75).abs() < 1e-12);
        let fg = r.recovered.clone();
        assert!(consistency_check(&fg, &rgb1(0.8), &rgb1(0.6), BlendMode::XRay, 1e-12).unwrap().pass);

        let zero = AlphaMap::constant(4, 4, 0.0).unwrap();
        let z = LayerImage::filled(4, 4, 3, 0.3).unwrap();
        let r = invert_foreground(&z, &z, &zero, BlendMode::OcclusionOver, DEFAULT_EPS).unwrap();
        assert!(r.valid_mask.iter().all(|v| !v));
    }

    #[test]
    fn glass_foreground_branches_on_background() {
        let alpha = AlphaMap::constant(1, 1, 1.0).unwrap();
        let m = BlendMode::glass();
        let r = invert_foreground(&rgb1(0.1), &rgb1(0.2), &alpha, m, DEFAULT_EPS).unwrap();
        assert!((r.recovered.data()[0] - 0.5).abs() < 1e-12);
        let r = invert_foreground(&rgb1(0.9), &rgb1(0.8), &alpha, m, DEFAULT_EPS).unwrap();
        assert!((r.recovered.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let fg = LayerImage::new(2, 1, 4, vec![0.2, 0.4, 0.6, 0.5, 0.9, 0.1, 0.3, 0.7]).unwrap();
        let bg = LayerImage::new(2, 1, 3, vec![0.3, 0.5, 0.2, 0.6, 0.1, 0.8]).unwrap();
        for mode in BlendMode::all() {
            let z = compose(&fg, &bg, mode).unwrap();
            assert!(consistency_check(&fg, &bg, &z, mode, 1e-6).unwrap().pass);
        }
        let fg = LayerImage::filled(2, 2, 4, 0.2).unwrap();
        let bg = LayerImage::filled(2, 2, 3, 0.4).unwrap();
        let z = compose(&fg, &bg, BlendMode::OcclusionOver).unwrap();
        let shifted = LayerImage::new(2, 2, 3, z.data().iter().map(|v| v + 0.1).collect()).unwrap();
        let c = consistency_check(&fg, &bg, &shifted, BlendMode::OcclusionOver, 1e-3).unwrap();
        assert!((c.rmse - 0.1).abs() < 1e-12);
        assert!(!c.pass);

        let fg = LayerImage::zeros(3, 3, 4).unwrap();
        let bg = LayerImage::zeros(3, 3, 3).unwrap();
        for mode in BlendMode::all() {
            if matches!(mode, BlendMode::WatermarkLinear) {
                continue;
            }
            let c = consistency_check(&fg, &bg, &bg, mode, 0.0).unwrap();
            assert_eq!(c.rmse, 0.0);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let z = LayerImage::zeros(2, 2, 3).unwrap();
        let fg = LayerImage::zeros(2, 3, 4).unwrap();
        assert!(invert_background(&z, &fg, BlendMode::XRay, 1e-3).is_err());
        let fg = LayerImage::zeros(2, 2, 4).unwrap();
        assert!(invert_background(&z, &fg, BlendMode::XRay, 0.0).is_err());
    }

    fn pixel_strategy() -> impl Strategy<Value = (f64, f64, f64)> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
    }

    proptest! {
        #[test]
        fn roundtrip_on_valid_pixels((a, alpha, b) in pixel_strategy()) {
            let fg = fg1(a, alpha);
            let bg = rgb1(b);
            for mode in BlendMode::all() {
                let z = compose(&fg, &bg, mode).unwrap();
                let r = invert_background(&z, &fg, mode, DEFAULT_EPS).unwrap();
                if r.valid_mask[0] {
                    prop_assert!((r.recovered.data()[0] - b).abs() <= 1e-6, "{mode}: {} vs {b}", r.recovered.data()[0]);
                    prop_assert!(r.residual <= 1e-6);
                }
            }
        }

        #[test]
        fn valid_mask_monotone_in_eps((a, alpha, b) in pixel_strategy(), e1 in 1e-4..0.2f64, e2 in 1e-4..0.2f64) {
            let (big, small) = if e1 > e2 { (e1, e2) } else { (e2, e1) };
            let fg = fg1(a, alpha);
            let bg = rgb1(b);
            for mode in BlendMode::all() {
                let z = compose(&fg, &bg, mode).unwrap();
                let coarse = invert_background(&z, &fg, mode, big).unwrap();
                let fine = invert_background(&z, &fg, mode, small).unwrap();
                prop_assert!(!coarse.valid_mask[0] || fine.valid_mask[0], "{mode}");
            }
        }
    }
}
