//! Behavioral tests for the degradation pipeline on photo-like content.

mod common;

use common::synth;
use dejpeg_core::jpeg::{degrade, QualityFactor};
use dejpeg_core::metrics::{self, ChannelMode};

fn luma_psnr(clean: &dejpeg_core::Image, test: &dejpeg_core::Image) -> f64 {
    metrics::evaluate_pair(clean, test, ChannelMode::Luma).unwrap().psnr
}

#[test]
fn qf100_is_nearly_lossless_on_photos() {
    for (label, img) in [
        ("smooth", synth::smooth_photo(96, 80, 21)),
        ("smooth-odd", synth::smooth_photo(93, 71, 22)),
        ("textured", synth::textured_photo(96, 80, 23)),
    ] {
        let out = degrade(&img, QualityFactor::new(100).unwrap()).unwrap();
        let rgb = metrics::evaluate_pair(&img, &out, ChannelMode::RgbMean).unwrap().psnr;
        let y = luma_psnr(&img, &out);
        assert!(rgb >= 50.0, "{label}: rgb psnr {rgb:.2} below 50 dB");
        assert!(y >= 50.0, "{label}: luma psnr {y:.2} below 50 dB");
    }
}

#[test]
fn lower_quality_means_lower_fidelity() {
    let img = synth::textured_photo(96, 80, 31);
    let mut prev = f64::NEG_INFINITY;
    for qf in [10u8, 30, 50, 70, 90] {
        let out = degrade(&img, QualityFactor::new(qf).unwrap()).unwrap();
        let psnr = luma_psnr(&img, &out);
        assert!(
            psnr > prev - 0.05,
            "qf {qf}: psnr {psnr:.3} fell more than 0.05 dB below the previous level {prev:.3}"
        );
        prev = psnr;
    }
    // And the endpoints are far apart.
    let low = luma_psnr(&img, &degrade(&img, QualityFactor::new(10).unwrap()).unwrap());
    let high = luma_psnr(&img, &degrade(&img, QualityFactor::new(90).unwrap()).unwrap());
    assert!(high - low > 6.0, "qf sweep too flat: {low:.2} .. {high:.2}");
}

#[test]
fn qf10_blockiness_shows_up_in_psnr_b() {
    for seed in [41u64, 42, 43] {
        let img = synth::textured_photo(96, 80, seed);
        let out = degrade(&img, QualityFactor::new(10).unwrap()).unwrap();
        let report = metrics::evaluate_pair(&img, &out, ChannelMode::Luma).unwrap();
        assert!(
            report.psnr_b < report.psnr,
            "seed {seed}: no blockiness penalty (psnr_b {:.3} vs psnr {:.3})",
            report.psnr_b,
            report.psnr
        );
    }
}

#[test]
fn degrade_preserves_geometry_and_color() {
    let img = synth::smooth_photo(61, 47, 51);
    let out = degrade(&img, QualityFactor::new(35).unwrap()).unwrap();
    assert_eq!(out.width(), 61);
    assert_eq!(out.height(), 47);
    assert_eq!(out.color(), img.color());
    for &v in out.plane(0) {
        assert!((0.0..=255.0).contains(&v));
    }
}

#[test]
fn tiny_images_are_handled() {
    // Smaller than one block in each direction, odd sizes for the 4:2:0 path.
    for (w, h) in [(1usize, 1usize), (3, 5), (8, 8), (9, 7)] {
        let img = synth::smooth_photo(w.max(2), h.max(2), 61);
        let img = if w == 1 && h == 1 {
            dejpeg_core::Image::from_planes(
                1,
                1,
                dejpeg_core::ColorSpace::Rgb,
                vec![120.0, 80.0, 60.0],
            )
            .unwrap()
        } else {
            img
        };
        let out = degrade(&img, QualityFactor::new(25).unwrap()).unwrap();
        assert_eq!((out.width(), out.height()), (img.width(), img.height()));
    }
}
