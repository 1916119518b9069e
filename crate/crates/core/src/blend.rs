//! Forward compositing for the six layer-blend operators.
//!
//! All arithmetic runs in normalized `[0, 1]` space. With `A` the foreground
//! color, `α` its alpha and `B` the background, per channel:
//!
//! | mode              | composite                                   |
//! |-------------------|---------------------------------------------|
//! | `XRay`            | `(1 − α)·B + α·A·B`                          |
//! | `Glass`           | `A·B` if `B < threshold`, else `1 − (1 − A)(1 − B)` |
//! | `WatermarkLinear` | `(1 − α)·A + α·B`                            |
//! | `CellAdditive`    | `clamp(A + B, 0, 1)`                         |
//! | `OcclusionOver`   | `α·A + (1 − α)·B`                            |
//! | `FlareScreen`     | `1 − (1 − α·A)(1 − B)`                       |
//!
//! `WatermarkLinear` keeps the printed convention in which `α = 1` yields the
//! background and `α = 0` the foreground color. `Glass` and `CellAdditive`
//! ignore the alpha channel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LayerImage;

pub const DEFAULT_GLASS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlendMode {
    #[serde(rename = "xray")]
    XRay,
    Glass {
        threshold: f64,
    },
    WatermarkLinear,
    CellAdditive,
    OcclusionOver,
    FlareScreen,
}

impl BlendMode {
    pub const ALL_NAMES: [&'static str; 6] = [
        "xray",
        "glass",
        "watermark_linear",
        "cell_additive",
        "occlusion_over",
        "flare_screen",
    ];

    pub fn glass() -> Self {
        BlendMode::Glass {
            threshold: DEFAULT_GLASS_THRESHOLD,
        }
    }

    pub fn all() -> [BlendMode; 6] {
        [
            BlendMode::XRay,
            BlendMode::glass(),
            BlendMode::WatermarkLinear,
            BlendMode::CellAdditive,
            BlendMode::OcclusionOver,
            BlendMode::FlareScreen,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            BlendMode::XRay => "xray",
            BlendMode::Glass { .. } => "glass",
            BlendMode::WatermarkLinear => "watermark_linear",
            BlendMode::CellAdditive => "cell_additive",
            BlendMode::OcclusionOver => "occlusion_over",
            BlendMode::FlareScreen => "flare_screen",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let BlendMode::Glass { threshold } = *self {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "glass threshold {threshold} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// Blends one channel value.
    #[inline]
    pub fn blend(&self, a: f64, alpha: f64, b: f64) -> f64 {
        let v = match *self {
            BlendMode::XRay => (1.0 - alpha) * b + alpha * a * b,
            BlendMode::Glass { threshold } => {
                if b < threshold {
                    a * b
                } else {
                    1.0 - (1.0 - a) * (1.0 - b)
                }
            }
            BlendMode::WatermarkLinear => (1.0 - alpha) * a + alpha * b,
            BlendMode::CellAdditive => a + b,
            BlendMode::OcclusionOver => alpha * a + (1.0 - alpha) * b,
            BlendMode::FlareScreen => 1.0 - (1.0 - alpha * a) * (1.0 - b),
        };
        v.clamp(0.0, 1.0)
    }
}

impl fmt::Display for BlendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlendMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "xray" | "x_ray" => Ok(BlendMode::XRay),
            "glass" => Ok(BlendMode::glass()),
            "watermark" | "watermark_linear" => Ok(BlendMode::WatermarkLinear),
            "cell" | "cell_additive" => Ok(BlendMode::CellAdditive),
            "occlusion" | "occlusion_over" => Ok(BlendMode::OcclusionOver),
            "flare" | "flare_screen" => Ok(BlendMode::FlareScreen),
            _ => Err(Error::UnknownMode(s.to_string())),
        }
    }
}

/// Composites an RGBA foreground over an RGB background.
pub fn compose(fg: &LayerImage, bg: &LayerImage, mode: BlendMode) -> Result<LayerImage> {
    mode.validate()?;
    if fg.channels() != 4 {
        return Err(Error::InvalidInput("foreground must be RGBA".into()));
    }
    if bg.channels() != 3 {
        return Err(Error::InvalidInput("background must be RGB".into()));
    }
    fg.check_extent(bg, "compose")?;

    let mut out = Vec::with_capacity(bg.pixel_count() * 3);
    for (f, b) in fg.data().chunks_exact(4).zip(bg.data().chunks_exact(3)) {
        let alpha = f[3];
        for c in 0..3 {
            out.push(mode.blend(f[c], alpha, b[c]));
        }
    }
    LayerImage::new(bg.width(), bg.height(), 3, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(a: f64, alpha: f64) -> LayerImage {
        LayerImage::new(1, 1, 4, vec![a, a, a, alpha]).unwrap()
    }

    fn bgpx(b: f64) -> LayerImage {
        LayerImage::new(1, 1, 3, vec![b, b, b]).unwrap()
    }

    fn one(mode: BlendMode, a: f64, alpha: f64, b: f64) -> f64 {
        compose(&px(a, alpha), &bgpx(b), mode).unwrap().data()[0]
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(one(BlendMode::XRay, 0.3, 0.0, 0.7), 0.7);
        assert!((one(BlendMode::XRay, 0.5, 0.5, 0.8) - 0.6).abs() < 1e-12);
        assert!((one(BlendMode::glass(), 0.5, 1.0, 0.2) - 0.10).abs() < 1e-12);
        assert!((one(BlendMode::glass(), 0.5, 1.0, 0.8) - 0.90).abs() < 1e-12);
        assert_eq!(one(BlendMode::WatermarkLinear, 0.3, 1.0, 0.45), 0.45);
        assert_eq!(one(BlendMode::CellAdditive, 0.7, 1.0, 0.6), 1.0);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let fg = LayerImage::zeros(2, 2, 4).unwrap();
        let bg = LayerImage::zeros(2, 3, 3).unwrap();
        assert!(matches!(compose(&fg, &bg, BlendMode::XRay), Err(Error::Dimension(_))));
        let bg = LayerImage::zeros(2, 2, 4).unwrap();
        assert!(compose(&fg, &bg, BlendMode::XRay).is_err());
        let bg = LayerImage::zeros(2, 2, 3).unwrap();
        assert!(compose(&fg, &bg, BlendMode::Glass { threshold: 1.0 }).is_err());
    }

    #[test]
    fn parses_names() {
        for name in BlendMode::ALL_NAMES {
            assert_eq!(name.parse::<BlendMode>().unwrap().name(), name);
        }
        assert!(matches!("overlay".parse::<BlendMode>(), Err(Error::UnknownMode(_))));
    }

    proptest! {
        #[test]
        fn output_stays_in_range(a in 0.0..=1.0f64, alpha in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            for mode in BlendMode::all() {
                let v = mode.blend(a, alpha, b);
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn xray_degeneracies(a in 0.0..=1.0f64, alpha in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            prop_assert_eq!(BlendMode::XRay.blend(a, 0.0, b), b);
            prop_assert!((BlendMode::XRay.blend(1.0, alpha, b) - b).abs() <= 1e-15);
        }

        #[test]
        fn glass_branches(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let v = BlendMode::glass().blend(a, 0.0, b);
            if b < 0.5 {
                prop_assert_eq!(v, a * b);
            } else {
                prop_assert_eq!(v, 1.0 - (1.0 - a) * (1.0 - b));
            }
        }

        #[test]
        fn cell_additive_monotone(a in 0.0..=1.0f64, b in 0.0..=1.0f64, da in 0.0..=0.5f64, db in 0.0..=0.5f64) {
            let m = BlendMode::CellAdditive;
            prop_assert_eq!(m.blend(0.0, 1.0, b), b);
            let a2 = (a + da).min(1.0);
            let b2 = (b + db).min(1.0);
            prop_assert!(m.blend(a2, 1.0, b) >= m.blend(a, 1.0, b));
            prop_assert!(m.blend(a, 1.0, b2) >= m.blend(a, 1.0, b));
        }

        #[test]
        fn occlusion_is_convex(a in 0.0..=1.0f64, alpha in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let v = BlendMode::OcclusionOver.blend(a, alpha, b);
            prop_assert!(v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15);
        }

        #[test]
        fn compose_is_deterministic(vals in proptest::collection::vec(0.0..=1.0f64, 4 * 4 * 7)) {
            let fg = LayerImage::new(4, 4, 4, vals[..64].to_vec()).unwrap();
            let bg = LayerImage::new(4, 4, 3, vals[64..].to_vec()).unwrap();
            for mode in BlendMode::all() {
                let a = compose(&fg, &bg, mode).unwrap();
                let b = compose(&fg, &bg, mode).unwrap();
                let bits = |img: &LayerImage| img.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a), bits(&b));
            }
        }
    }
}
