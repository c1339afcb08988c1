//! Image quality metrics.

use serde::{Deserialize, Serialize};

use crate::dataset::RgbImage;
use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::Shape(format!(
            "image sizes differ: {}×{} vs {}×{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if a.pixels.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * a.pixels.len()) as f64)
}

/// Peak signal-to-noise ratio for values in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// Normalized 1D Gaussian taps.
fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Window size actually used: 11, or the largest odd size fitting the image.
fn window_size(width: usize, height: usize) -> usize {
    let m = SSIM_WINDOW.min(width).min(height);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Separable valid-mode filtering of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// averaged over channels. Only windows lying fully inside the image count.
pub fn ssim(pred: &RgbImage, target: &RgbImage) -> Result<f64> {
    check_dims(pred, target)?;
    let (w, h) = (pred.width, pred.height);
    let taps = gaussian(window_size(w, h), SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = pred.pixels.iter().map(|p| p[c]).collect();
        let y: Vec<f64> = target.pixels.iter().map(|p| p[c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &taps));
        let n = mx.len();
        let mut sum = 0.0;
        for i in 0..n {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            sum += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Wall-clock time; omitted in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_seconds: Option<f64>,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn new(split: &str, views: Vec<ViewMetrics>, runtime_seconds: Option<f64>, config_digest: String) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Input(format!("split '{split}' has no views to evaluate")));
        }
        let n = views.len() as f64;
        Ok(MetricsReport {
            split: split.to_string(),
            mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
            runtime_seconds,
            config_digest,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbImage {
        RgbImage::new(
            w,
            h,
            (0..w * h)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = RgbImage::filled(4, 3, [0.3, 0.6, 0.9]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = RgbImage::filled(4, 3, [0.4, 0.7, 1.0]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &RgbImage::filled(3, 3, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_of_identical_and_constant_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let c = RgbImage::filled(16, 16, [0.4; 3]);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negated_checkerboard_is_negative() {
        let px = |x: usize, y: usize, flip: bool| {
            let on = ((x + y) % 2 == 0) ^ flip;
            let v = if on { 0.9 } else { 0.1 };
            [v; 3]
        };
        let a = RgbImage::new(16, 16, (0..256).map(|i| px(i % 16, i / 16, false)).collect()).unwrap();
        let b = RgbImage::new(16, 16, (0..256).map(|i| px(i % 16, i / 16, true)).collect()).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn report_requires_views() {
        assert!(MetricsReport::new("test", vec![], None, String::new()).is_err());
    }
}
