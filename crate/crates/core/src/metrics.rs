//! Image quality metrics: PSNR, blocking-aware PSNR-B, and SSIM.
//!
//! Everything is computed in f64 on the 0..255 scale. PSNR of identical
//! inputs is `+inf`; callers aggregating over a dataset cap it at 100 dB
//! (see [`cap_for_mean`]) so means stay finite.

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};

/// JPEG block size assumed by the blocking term of PSNR-B.
pub const BLOCK: usize = 8;

/// Cap applied to infinite PSNR values when averaging.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    /// Metrics on the luma plane (RGB inputs are converted first).
    Luma,
    /// Mean of the per-channel metric values on RGB planes.
    RgbMean,
}

impl std::fmt::Display for ChannelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelMode::Luma => "y",
            ChannelMode::RgbMean => "rgb",
        })
    }
}

/// One pair's scores. `psnr` and `psnr_b` are dB (possibly `+inf`).
#[derive(Clone, Copy, Debug)]
pub struct MetricReport {
    pub psnr: f64,
    pub psnr_b: f64,
    pub ssim: f64,
    pub channel_mode: ChannelMode,
}

/// Replace an infinite PSNR with the aggregation cap.
pub fn cap_for_mean(db: f64) -> f64 {
    if db.is_finite() {
        db
    } else {
        PSNR_CAP_DB
    }
}

fn check_same_len(op: &'static str, a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

fn mse(reference: &[f32], test: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (&r, &t) in reference.iter().zip(test) {
        let d = r as f64 - t as f64;
        acc += d * d;
    }
    acc / reference.len() as f64
}

fn db_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(reference: &[f32], test: &[f32]) -> Result<f64> {
    check_same_len("psnr", reference, test)?;
    if reference.is_empty() {
        return Err(Error::shape("psnr", "empty planes"));
    }
    Ok(db_from_mse(mse(reference, test)))
}

/// PSNR-B: PSNR with the mean squared error inflated by the blocking effect
/// factor of the test image. Adjacent-pixel squared differences are split
/// into pairs that straddle an 8x8 block boundary and pairs that do not; if
/// the boundary mean exceeds the interior mean the excess, weighted by
/// log2(8)/log2(min(H,W)), is added to the MSE. Never exceeds plain PSNR.
pub fn psnr_b(reference: &[f32], test: &[f32], width: usize, height: usize) -> Result<f64> {
    check_same_len("psnr_b", reference, test)?;
    if reference.len() != width * height {
        return Err(Error::shape("psnr_b", format!("{} samples for {}x{}", reference.len(), width, height)));
    }
    if width.min(height) < 2 * BLOCK {
        return Err(Error::shape(
            "psnr_b",
            format!("{}x{} smaller than two {}-pixel blocks", width, height, BLOCK),
        ));
    }

    let at = |y: usize, x: usize| test[y * width + x] as f64;
    let mut boundary = (0.0f64, 0u64);
    let mut interior = (0.0f64, 0u64);
    for y in 0..height {
        for x in 0..width - 1 {
            let d = at(y, x) - at(y, x + 1);
            let bucket = if x % BLOCK == BLOCK - 1 { &mut boundary } else { &mut interior };
            bucket.0 += d * d;
            bucket.1 += 1;
        }
    }
    for y in 0..height - 1 {
        for x in 0..width {
            let d = at(y, x) - at(y + 1, x);
            let bucket = if y % BLOCK == BLOCK - 1 { &mut boundary } else { &mut interior };
            bucket.0 += d * d;
            bucket.1 += 1;
        }
    }
    let d_b = boundary.0 / boundary.1 as f64;
    let d_bc = interior.0 / interior.1 as f64;
    let bef = if d_b > d_bc {
        let eta = (BLOCK as f64).log2() / (width.min(height) as f64).log2();
        eta * (d_b - d_bc)
    } else {
        0.0
    };
    Ok(db_from_mse(mse(reference, test) + bef))
}

/// Gaussian window used by SSIM: 11 taps, sigma 1.5, normalized.
fn ssim_window() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut w = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Structural similarity with the original authors' defaults: 11x11
/// Gaussian window (sigma 1.5), K1=0.01, K2=0.03, L=255, and no padding;
/// the returned value is the mean of the valid-window SSIM map.
pub fn ssim(reference: &[f32], test: &[f32], width: usize, height: usize) -> Result<f64> {
    check_same_len("ssim", reference, test)?;
    if reference.len() != width * height {
        return Err(Error::shape("ssim", format!("{} samples for {}x{}", reference.len(), width, height)));
    }
    if width < 11 || height < 11 {
        return Err(Error::shape("ssim", format!("{}x{} smaller than the 11x11 window", width, height)));
    }

    let n = width * height;
    let mut products = vec![0.0f64; 5 * n];
    for i in 0..n {
        let (r, t) = (reference[i] as f64, test[i] as f64);
        products[i] = r;
        products[n + i] = t;
        products[2 * n + i] = r * r;
        products[3 * n + i] = t * t;
        products[4 * n + i] = r * t;
    }

    // Separable valid-mode filtering of all five channels at once.
    let window = ssim_window();
    let vw = width - 10;
    let vh = height - 10;
    let mut horiz = vec![0.0f64; 5 * vw * height];
    for p in 0..5 {
        for y in 0..height {
            for x in 0..vw {
                let mut acc = 0.0;
                for (k, &g) in window.iter().enumerate() {
                    acc += g * products[p * n + y * width + x + k];
                }
                horiz[p * vw * height + y * vw + x] = acc;
            }
        }
    }
    let mut filt = vec![0.0f64; 5 * vw * vh];
    for p in 0..5 {
        for y in 0..vh {
            for x in 0..vw {
                let mut acc = 0.0;
                for (k, &g) in window.iter().enumerate() {
                    acc += g * horiz[p * vw * height + (y + k) * vw + x];
                }
                filt[p * vw * vh + y * vw + x] = acc;
            }
        }
    }

    const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
    const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
    let m = vw * vh;
    let mut total = 0.0f64;
    for i in 0..m {
        let mu_r = filt[i];
        let mu_t = filt[m + i];
        let var_r = filt[2 * m + i] - mu_r * mu_r;
        let var_t = filt[3 * m + i] - mu_t * mu_t;
        let cov = filt[4 * m + i] - mu_r * mu_t;
        let num = (2.0 * mu_r * mu_t + C1) * (2.0 * cov + C2);
        let den = (mu_r * mu_r + mu_t * mu_t + C1) * (var_r + var_t + C2);
        total += num / den;
    }
    Ok(total / m as f64)
}

/// Score a reference/test image pair. `Luma` mode converts RGB to YCbCr and
/// scores the Y plane; `RgbMean` scores each channel and averages, capping
/// infinite PSNR values at 100 dB so the mean stays finite.
pub fn evaluate_pair(reference: &Image, test: &Image, mode: ChannelMode) -> Result<MetricReport> {
    if reference.width() != test.width()
        || reference.height() != test.height()
        || reference.color() != test.color()
    {
        return Err(Error::shape(
            "evaluate_pair",
            format!(
                "{}x{} {:?} vs {}x{} {:?}",
                reference.width(),
                reference.height(),
                reference.color(),
                test.width(),
                test.height(),
                test.color()
            ),
        ));
    }
    let (w, h) = (reference.width(), reference.height());
    match mode {
        ChannelMode::Luma => {
            let (r, t) = match reference.color() {
                ColorSpace::Rgb => (reference.to_ycbcr()?, test.to_ycbcr()?),
                _ => (reference.clone(), test.clone()),
            };
            Ok(MetricReport {
                psnr: psnr(r.plane(0), t.plane(0))?,
                psnr_b: psnr_b(r.plane(0), t.plane(0), w, h)?,
                ssim: ssim(r.plane(0), t.plane(0), w, h)?,
                channel_mode: mode,
            })
        }
        ChannelMode::RgbMean => {
            let ch = reference.channels();
            let mut acc = (0.0, 0.0, 0.0);
            for c in 0..ch {
                acc.0 += cap_for_mean(psnr(reference.plane(c), test.plane(c))?);
                acc.1 += cap_for_mean(psnr_b(reference.plane(c), test.plane(c), w, h)?);
                acc.2 += ssim(reference.plane(c), test.plane(c), w, h)?;
            }
            Ok(MetricReport {
                psnr: acc.0 / ch as f64,
                psnr_b: acc.1 / ch as f64,
                ssim: acc.2 / ch as f64,
                channel_mode: mode,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(n: usize, seed: u64, lo: f32, hi: f32) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn identical_planes_give_infinite_psnr_and_unit_ssim() {
        let a = random_plane(32 * 32, 1, 0.0, 255.0);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let smooth: Vec<f32> = (0..32 * 32).map(|i| (i % 32) as f32 * 2.0).collect();
        assert!(psnr_b(&smooth, &smooth, 32, 32).unwrap().is_infinite());
        assert!((ssim(&a, &a, 32, 32).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_difference_anchors() {
        let a = vec![100.0f32; 24 * 24];
        let b = vec![101.0f32; 24 * 24];
        let got = psnr(&a, &b).unwrap();
        assert!((got - 20.0 * 255.0f64.log10()).abs() < 1e-9, "{}", got);
        assert!((got - 48.1308).abs() < 1e-3);
        let c = vec![0.0f32; 24 * 24];
        let d = vec![255.0f32; 24 * 24];
        assert!(psnr(&c, &d).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_is_shift_invariant() {
        let a = random_plane(400, 2, 0.0, 200.0);
        let b = random_plane(400, 3, 0.0, 200.0);
        let a2: Vec<f32> = a.iter().map(|v| v + 50.0).collect();
        let b2: Vec<f32> = b.iter().map(|v| v + 50.0).collect();
        assert!((psnr(&a, &b).unwrap() - psnr(&a2, &b2).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn blocking_free_pair_makes_psnr_b_equal_psnr() {
        // A diagonal ramp has identical adjacent differences everywhere, so
        // the boundary and interior means coincide and the BEF term is zero.
        let (w, h) = (32, 24);
        let reference: Vec<f32> = (0..w * h).map(|i| ((i % w) + (i / w)) as f32).collect();
        let test: Vec<f32> = reference.iter().map(|v| v + 3.0).collect();
        let p = psnr(&reference, &test).unwrap();
        let pb = psnr_b(&reference, &test, w, h).unwrap();
        assert_eq!(p, pb);
    }

    #[test]
    fn hard_block_edge_lowers_psnr_b() {
        // Left 8 columns 0, right 8 columns 255: every pair across x=7|8 is a
        // boundary pair with difference 255, everything else is flat.
        let (w, h) = (16, 16);
        let test: Vec<f32> = (0..w * h).map(|i| if i % w < 8 { 0.0 } else { 255.0 }).collect();
        let reference: Vec<f32> = (0..w * h).map(|i| (i % w) as f32 * 10.0).collect();
        let p = psnr(&reference, &test).unwrap();
        let pb = psnr_b(&reference, &test, w, h).unwrap();
        assert!(pb < p, "psnr_b {} should be below psnr {}", pb, p);

        // Hand-computed blocking terms for this pattern.
        let d_b = 255.0f64 * 255.0 / 2.0;
        let eta = 3.0 / 4.0;
        let expected = 10.0 * (255.0f64 * 255.0 / (mse(&reference, &test) + eta * d_b)).log10();
        assert!((pb - expected).abs() < 1e-9);
    }

    #[test]
    fn psnr_b_never_exceeds_psnr_on_random_pairs() {
        for seed in 0..50 {
            let a = random_plane(24 * 24, 100 + seed, 0.0, 255.0);
            let b = random_plane(24 * 24, 200 + seed, 0.0, 255.0);
            let p = psnr(&a, &b).unwrap();
            let pb = psnr_b(&a, &b, 24, 24).unwrap();
            assert!(pb <= p);
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_plane(20 * 20, 5, 0.0, 255.0);
        let b = random_plane(20 * 20, 6, 0.0, 255.0);
        let ab = ssim(&a, &b, 20, 20).unwrap();
        let ba = ssim(&b, &a, 20, 20).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn inverted_image_has_negative_ssim() {
        // Values kept away from mid-gray so inversion flips the structure.
        let a = random_plane(24 * 24, 7, 0.0, 100.0);
        let b: Vec<f32> = a.iter().map(|v| 255.0 - v).collect();
        assert!(ssim(&a, &b, 24, 24).unwrap() < 0.0);
    }

    #[test]
    fn undersized_inputs_are_rejected() {
        let a = vec![0.0f32; 100];
        assert!(ssim(&a, &a, 10, 10).is_err());
        assert!(psnr_b(&a, &a, 10, 10).is_err());
        assert!(psnr(&a, &a[..50].to_vec()).is_err());
    }

    #[test]
    fn evaluate_pair_modes_differ_and_carry_their_tag() {
        use crate::image::{ColorSpace, Image};
        let a = Image::from_planes(20, 20, ColorSpace::Rgb, random_plane(3 * 400, 8, 0.0, 255.0)).unwrap();
        let b = Image::from_planes(20, 20, ColorSpace::Rgb, random_plane(3 * 400, 9, 0.0, 255.0)).unwrap();
        let y = evaluate_pair(&a, &b, ChannelMode::Luma).unwrap();
        let rgb = evaluate_pair(&a, &b, ChannelMode::RgbMean).unwrap();
        assert_eq!(y.channel_mode, ChannelMode::Luma);
        assert_eq!(rgb.channel_mode, ChannelMode::RgbMean);
        assert!((y.psnr - rgb.psnr).abs() > 1e-9);
    }
}
