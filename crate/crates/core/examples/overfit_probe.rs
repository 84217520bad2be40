//! Scratch experiment: overfit the reduced luma net on 8 patches and report
//! the degraded vs restored PSNR over the training views. Not part of the
//! deliverable; used to pick the overfit protocol knobs.
//!
//! Usage: overfit_probe <growth> <batch> <base|hard> [pool]

use std::time::Instant;

use dejpeg_core::image::{save_image, ColorSpace, Image};
use dejpeg_core::jpeg::degrade;
use dejpeg_core::model::{normalize, denormalize};
use dejpeg_core::tensor::Tensor;
use dejpeg_core::{Model, QualityFactor, TrainConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth_photo(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channels = Vec::with_capacity(3);
    let shared: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.3..2.5),
                rng.random_range(0.3..2.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(15.0..30.0),
            )
        })
        .collect();
    for _c in 0..3 {
        let offset: f64 = rng.random_range(90.0..150.0);
        let own: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.random_range(0.3..1.5),
                    rng.random_range(0.3..1.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(8.0..20.0),
                )
            })
            .collect();
        let mut plane = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
                let mut v = offset;
                for &(kx, ky, phase, amp) in shared.iter().chain(&own) {
                    v += amp * (std::f64::consts::TAU * (kx * fx + ky * fy) + phase).sin();
                }
                plane[y * w + x] = v.clamp(25.0, 230.0) as f32;
            }
        }
        channels.push(plane);
    }
    let data = channels.concat();
    Image::from_planes(w, h, ColorSpace::Rgb, data).unwrap()
}

fn textured_photo(w: usize, h: usize, seed: u64) -> Image {
    let base = smooth_photo(w, h, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57ab1e);

    let mut noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..2 {
        let mut blurred = vec![0.0f64; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += noise[yy as usize * w + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                blurred[y * w + x] = acc / n;
            }
        }
        noise = blurred;
    }

    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(6.0..14.0),
                rng.random_range(6.0..14.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(6.0..12.0),
            )
        })
        .collect();

    let mut data = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        let plane = base.plane(c);
        let mut out = vec![0.0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
                let mut v = plane[y * w + x] as f64 + 18.0 * noise[y * w + x];
                for &(kx, ky, phase, amp) in &gratings {
                    v += amp * (std::f64::consts::TAU * (kx * fx + ky * fy) + phase).sin();
                }
                out[y * w + x] = v.clamp(20.0, 235.0) as f32;
            }
        }
        data.extend_from_slice(&out);
    }
    Image::from_planes(w, h, ColorSpace::Rgb, data).unwrap()
}

fn luma_psnr(reference: &[f32], test: &[f32]) -> f64 {
    let mse: f64 = reference
        .iter()
        .zip(test)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / reference.len() as f64;
    10.0 * (255.0f64 * 255.0 / mse).log10()
}

fn degraded_luma_psnr(img: &Image, qf: u8) -> f64 {
    let clean_y = img.to_ycbcr().unwrap();
    let deg = degrade(img, QualityFactor::new(qf).unwrap()).unwrap().to_ycbcr().unwrap();
    luma_psnr(clean_y.plane(0), deg.plane(0))
}

fn restored_luma_psnr(model: &Model, img: &Image, qf: u8) -> (f64, f64) {
    let (w, h) = (img.width(), img.height());
    let clean_y = img.to_ycbcr().unwrap();
    let deg = degrade(img, QualityFactor::new(qf).unwrap()).unwrap().to_ycbcr().unwrap();
    let input: Vec<f32> = deg.plane(0).iter().map(|&v| normalize(v)).collect();
    let out = model.infer(&Tensor::from_vec(&[1, 1, h, w], input).unwrap()).unwrap();
    let restored: Vec<f32> =
        out.data().iter().map(|&v| denormalize(v).clamp(0.0, 255.0)).collect();
    (
        luma_psnr(clean_y.plane(0), deg.plane(0)),
        luma_psnr(clean_y.plane(0), &restored),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let growth: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let mode = args.get(3).cloned().unwrap_or_else(|| "base".into());
    let pool: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(300);

    let seeds: Vec<u64> = match mode.as_str() {
        "base" => (0..8).map(|i| 1000 + i).collect(),
        "hard" => {
            // Pick the 8 candidates whose qf-10 luma degrades the most.
            let mut scored: Vec<(f64, u64)> = (1000..1000 + pool)
                .map(|seed| (degraded_luma_psnr(&textured_photo(100, 100, seed), 10), seed))
                .collect();
            scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
            println!(
                "hard pool {} candidates, qf10 PSNR range {:.2}..{:.2}",
                pool,
                scored[0].0,
                scored.last().unwrap().0
            );
            scored.truncate(8);
            for &(p, s) in &scored {
                println!("  seed {s}: qf10 degraded {p:.2} dB");
            }
            scored.iter().map(|&(_, s)| s).collect()
        }
        other => panic!("unknown mode {other}"),
    };

    let dir = tempfile::tempdir().unwrap();
    let clean_dir = dir.path().join("clean");
    std::fs::create_dir_all(&clean_dir).unwrap();
    let patches: Vec<Image> = seeds.iter().map(|&s| textured_photo(100, 100, s)).collect();
    for (i, img) in patches.iter().enumerate() {
        save_image(img, &clean_dir.join(format!("patch{i}.png"))).unwrap();
    }

    let pairs = 8 * 2;
    let epochs = 500 * batch / pairs;
    assert_eq!(epochs * (pairs / batch), 500, "protocol must total 500 steps");
    let cfg = TrainConfig {
        batch_size: batch,
        crop: 100,
        qf_set: vec![10, 20],
        lr: 2e-4,
        lr_halve_after: epochs,
        epochs,
        seed: 11,
        n_rrdb: Some(1),
        base_channels: 16,
        growth,
        val_dir: Some(clean_dir.clone()),
        val_interval: (epochs / 10).max(1),
        ..TrainConfig::default()
    };

    println!("training: growth={growth} batch={batch} epochs={epochs} mode={mode}");
    let t0 = Instant::now();
    let outcome = dejpeg_core::train::train(
        Variant::Y,
        &cfg,
        &clean_dir,
        &dir.path().join("cache"),
        &dir.path().join("run"),
        None,
    )
    .unwrap();
    let minutes = t0.elapsed().as_secs_f64() / 60.0;

    let log = std::fs::read_to_string(&outcome.log).unwrap();
    let mut first_loss = None;
    println!("epoch,mean_loss,lr,val_psnr,val_ssim");
    for (i, line) in log.lines().enumerate() {
        if i == 0 {
            continue;
        }
        if first_loss.is_none() {
            first_loss = line.split(',').nth(1).and_then(|v| v.parse::<f64>().ok());
        }
        let has_val = line.split(',').nth(3).map(|v| !v.is_empty()).unwrap_or(false);
        if has_val || i == 1 {
            println!("{line}");
        }
    }
    let first_loss = first_loss.unwrap();

    let model = Model::load(&outcome.weights, cfg.spec(Variant::Y).unwrap()).unwrap();
    let mut degraded_sum = 0.0;
    let mut restored_sum = 0.0;
    for img in &patches {
        for qf in [10u8, 20] {
            let (d, r) = restored_luma_psnr(&model, img, qf);
            degraded_sum += d;
            restored_sum += r;
        }
    }
    let n = (patches.len() * 2) as f64;
    println!(
        "RESULT growth={} batch={} mode={} minutes={:.1} loss {:.5}->{:.5} ({:.1}%) degraded {:.2} restored {:.2} gain {:+.2} dB",
        growth,
        batch,
        mode,
        minutes,
        first_loss,
        outcome.final_epoch_loss,
        100.0 * outcome.final_epoch_loss / first_loss,
        degraded_sum / n,
        restored_sum / n,
        (restored_sum - degraded_sum) / n
    );
}
