//! Image quality metrics.

use crate::error::{Error, Result};
use crate::image::LayerImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &LayerImage, b: &LayerImage) -> Result<()> {
    if !a.same_extent(b) || a.channels() != b.channels() {
        return Err(Error::Dimension(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// Root mean squared error on the 0–255 scale.
pub fn rmse(a: &LayerImage, b: &LayerImage) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (255.0 * (x - y)).powi(2)).sum();
    Ok((sum / n).sqrt())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-mode separable Gaussian filter of a single plane.
fn filter(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let k = SSIM_WINDOW;
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean structural similarity over all valid 11×11 windows, averaged over
/// channels, with dynamic range 1.
pub fn ssim(a: &LayerImage, b: &LayerImage) -> Result<f64> {
    check_pair(a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w.min(h) < SSIM_WINDOW {
        return Err(Error::TooSmall(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(ch).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(ch).copied().collect();
        let prod = |f: fn(f64, f64) -> f64| pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let (mu_a, _, _) = filter(&pa, w, h, &g);
        let (mu_b, _, _) = filter(&pb, w, h, &g);
        let (aa, _, _) = filter(&prod(|x, _| x * x), w, h, &g);
        let (bb, _, _) = filter(&prod(|_, y| y * y), w, h, &g);
        let (ab, _, _) = filter(&prod(|x, y| x * y), w, h, &g);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / ch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> LayerImage {
        let mut rng = crate::seed::rng(seed);
        let data = (0..w * h * 3).map(|_| rng.gen::<f64>()).collect();
        LayerImage::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let a = LayerImage::filled(8, 8, 3, 0.5).unwrap();
        let b = LayerImage::filled(8, 8, 3, 0.5 + 10.0 / 255.0).unwrap();
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&a, &b).unwrap(), 10.0, epsilon = 1e-9);
        assert!(rmse(&a, &LayerImage::filled(4, 8, 3, 0.5).unwrap()).is_err());
    }

    #[test]
    fn rmse_is_a_metric() {
        for s in 0..20 {
            let (a, b, c) = (random_image(s, 9, 7), random_image(s + 100, 9, 7), random_image(s + 200, 9, 7));
            let ab = rmse(&a, &b).unwrap();
            assert_eq!(ab, rmse(&b, &a).unwrap());
            assert!(ab <= rmse(&a, &c).unwrap() + rmse(&c, &b).unwrap() + 1e-12);
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let a = random_image(1, 16, 12);
        let b = random_image(2, 16, 12);
        assert_abs_diff_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = random_image(3, 10, 20);
        assert!(matches!(ssim(&small, &small), Err(Error::TooSmall(_))));
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (ma, mb) = (0.3, 0.7);
        let a = LayerImage::filled(12, 12, 3, ma).unwrap();
        let b = LayerImage::filled(12, 12, 3, mb).unwrap();
        let c1 = SSIM_K1 * SSIM_K1;
        let expect = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert_abs_diff_eq!(ssim(&a, &b).unwrap(), expect, epsilon = 1e-9);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_negative() {
        let (w, h) = (16, 16);
        let data: Vec<f64> = (0..w * h)
            .flat_map(|i| {
                let v = ((i % w + i / w) % 2) as f64;
                [v; 3]
            })
            .collect();
        let a = LayerImage::new(w, h, 3, data.clone()).unwrap();
        let b = LayerImage::new(w, h, 3, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }
}
