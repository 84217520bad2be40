//! Library metrics vs the brute-force oracle, on random noise and on
//! realistic compression artifacts.

mod common;

use common::{oracle, synth};
use dejpeg_core::jpeg::{degrade, QualityFactor};
use dejpeg_core::metrics;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_plane(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(0.0..255.0f32)).collect()
}

#[test]
fn psnr_matches_oracle_on_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    for &(w, h) in &[(16usize, 16usize), (37, 29), (64, 48), (101, 53)] {
        let a = random_plane(&mut rng, w * h);
        let b = random_plane(&mut rng, w * h);
        let got = metrics::psnr(&a, &b).unwrap();
        let want = oracle::psnr(&a, &b);
        assert!((got - want).abs() < 1e-9, "{w}x{h}: {got} vs {want}");
    }
}

#[test]
fn psnr_b_matches_oracle_on_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    for &(w, h) in &[(16usize, 16usize), (40, 24), (64, 48), (104, 56)] {
        let a = random_plane(&mut rng, w * h);
        let b = random_plane(&mut rng, w * h);
        let got = metrics::psnr_b(&a, &b, w, h).unwrap();
        let want = oracle::psnr_b(&a, &b, w, h);
        assert!((got - want).abs() < 1e-9, "{w}x{h}: {got} vs {want}");
    }
}

#[test]
fn ssim_matches_oracle_on_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for &(w, h) in &[(11usize, 11usize), (16, 16), (33, 27), (48, 40)] {
        let a = random_plane(&mut rng, w * h);
        let b = random_plane(&mut rng, w * h);
        let got = metrics::ssim(&a, &b, w, h).unwrap();
        let want = oracle::ssim(&a, &b, w, h);
        assert!((got - want).abs() < 1e-9, "{w}x{h}: {got} vs {want}");
    }
}

#[test]
fn all_metrics_match_oracle_on_compression_artifacts() {
    // Realistic error statistics: blocky low-quality JPEG against its source.
    for seed in [7u64, 8, 9] {
        let clean = synth::textured_photo(96, 80, seed);
        let degraded = degrade(&clean, QualityFactor::new(10).unwrap()).unwrap();
        let (cy, dy) = (clean.to_ycbcr().unwrap(), degraded.to_ycbcr().unwrap());
        let (a, b) = (cy.plane(0).to_vec(), dy.plane(0).to_vec());
        let (w, h) = (clean.width(), clean.height());

        let psnr = metrics::psnr(&a, &b).unwrap();
        let psnr_b = metrics::psnr_b(&a, &b, w, h).unwrap();
        let ssim = metrics::ssim(&a, &b, w, h).unwrap();
        assert!((psnr - oracle::psnr(&a, &b)).abs() < 1e-9);
        assert!((psnr_b - oracle::psnr_b(&a, &b, w, h)).abs() < 1e-9);
        assert!((ssim - oracle::ssim(&a, &b, w, h)).abs() < 1e-9);

        // Block boundary damage must register: the blockiness penalty is
        // active at this quality, and similarity is visibly below perfect.
        assert!(psnr_b <= psnr + 1e-12, "seed {seed}: psnr_b {psnr_b} > psnr {psnr}");
        assert!(ssim < 0.999 && ssim > 0.2, "seed {seed}: ssim {ssim} out of plausible range");
        assert!(psnr > 15.0 && psnr < 45.0, "seed {seed}: psnr {psnr} out of plausible range");
    }
}

#[test]
fn blockiness_penalty_never_rewards() {
    let mut rng = ChaCha8Rng::seed_from_u64(305);
    for _ in 0..20 {
        let (w, h) = (rng.random_range(16..=60), rng.random_range(16..=60));
        let a = random_plane(&mut rng, w * h);
        let b = random_plane(&mut rng, w * h);
        let psnr = metrics::psnr(&a, &b).unwrap();
        let psnr_b = metrics::psnr_b(&a, &b, w, h).unwrap();
        assert!(psnr_b <= psnr + 1e-12);
    }
}
