//! Shared test rig: brute-force metric oracles, synthetic photo generators,
//! and the finite-difference gradient checker. Everything here is written
//! independently of the library's own code paths (direct loops, no reuse of
//! the optimized implementations) so tests compare two derivations.
#![allow(dead_code)]

use dejpeg_core::image::{ColorSpace, Image};

/// Brute-force reference metrics: direct double loops over definitions.
pub mod oracle {
    /// 10 log10(255^2 / mse), +inf when identical.
    pub fn psnr(reference: &[f32], test: &[f32]) -> f64 {
        assert_eq!(reference.len(), test.len());
        let mut sq = 0.0f64;
        for i in 0..reference.len() {
            let d = reference[i] as f64 - test[i] as f64;
            sq += d * d;
        }
        let mse = sq / reference.len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (255.0f64 * 255.0 / mse).log10()
        }
    }

    /// Yim-Bovik PSNR-B assembled pair by pair from its published pieces.
    pub fn psnr_b(reference: &[f32], test: &[f32], w: usize, h: usize) -> f64 {
        assert_eq!(reference.len(), w * h);
        assert_eq!(test.len(), w * h);
        let px = |v: &[f32], y: usize, x: usize| v[y * w + x] as f64;

        let mut boundary_sq = 0.0;
        let mut boundary_n = 0.0;
        let mut interior_sq = 0.0;
        let mut interior_n = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                let d = px(test, y, x) - px(test, y, x + 1);
                if (x + 1) % 8 == 0 {
                    boundary_sq += d * d;
                    boundary_n += 1.0;
                } else {
                    interior_sq += d * d;
                    interior_n += 1.0;
                }
            }
        }
        for x in 0..w {
            for y in 0..h - 1 {
                let d = px(test, y, x) - px(test, y + 1, x);
                if (y + 1) % 8 == 0 {
                    boundary_sq += d * d;
                    boundary_n += 1.0;
                } else {
                    interior_sq += d * d;
                    interior_n += 1.0;
                }
            }
        }
        let d_b = boundary_sq / boundary_n;
        let d_bc = interior_sq / interior_n;
        let eta = if d_b > d_bc { 8.0f64.log2() / (w.min(h) as f64).log2() } else { 0.0 };
        let bef = eta * (d_b - d_bc).max(0.0);

        let mut sq = 0.0;
        for i in 0..reference.len() {
            let d = reference[i] as f64 - test[i] as f64;
            sq += d * d;
        }
        let mse_b = sq / reference.len() as f64 + bef;
        if mse_b == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (255.0f64 * 255.0 / mse_b).log10()
        }
    }

    /// Direct windowed SSIM: 2D Gaussian weights, one full pass per window.
    pub fn ssim(reference: &[f32], test: &[f32], w: usize, h: usize) -> f64 {
        assert!(w >= 11 && h >= 11);
        let mut kernel = [[0.0f64; 11]; 11];
        let mut ksum = 0.0;
        for (i, row) in kernel.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
                *cell = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
                ksum += *cell;
            }
        }
        for row in kernel.iter_mut() {
            for cell in row.iter_mut() {
                *cell /= ksum;
            }
        }

        let c1 = (0.01f64 * 255.0).powi(2);
        let c2 = (0.03f64 * 255.0).powi(2);
        let mut total = 0.0;
        let mut count = 0usize;
        for y0 in 0..h - 10 {
            for x0 in 0..w - 10 {
                let (mut mr, mut mt, mut rr, mut tt, mut rt) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = kernel[i][j];
                        let r = reference[(y0 + i) * w + x0 + j] as f64;
                        let t = test[(y0 + i) * w + x0 + j] as f64;
                        mr += g * r;
                        mt += g * t;
                        rr += g * r * r;
                        tt += g * t * t;
                        rt += g * r * t;
                    }
                }
                let (vr, vt, cov) = (rr - mr * mr, tt - mt * mt, rt - mr * mt);
                total += ((2.0 * mr * mt + c1) * (2.0 * cov + c2))
                    / ((mr * mr + mt * mt + c1) * (vr + vt + c2));
                count += 1;
            }
        }
        total / count as f64
    }
}

/// Deterministic synthetic content standing in for photographs.
pub mod synth {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth multi-sinusoid image: gentle luma structure, very smooth
    /// chroma, everything safely inside gamut.
    pub fn smooth_photo(w: usize, h: usize, seed: u64) -> Image {
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

    /// Smooth base plus fine luma texture (gratings and smoothed noise):
    /// enough high-frequency energy that heavy JPEG compression visibly
    /// blocks it, while chroma stays smooth.
    pub fn textured_photo(w: usize, h: usize, seed: u64) -> Image {
        let base = smooth_photo(w, h, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57ab1e);

        // Smoothed noise field shared by all channels.
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
}

/// Central finite-difference gradient checking.
pub mod gradsuite {
    use dejpeg_core::tensor::{Graph, Tensor, Var};
    use dejpeg_core::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub struct OpReport {
        pub name: &'static str,
        pub instances: usize,
        pub coords_checked: usize,
        pub max_rel_err: f64,
    }

    const EPS: f64 = 1e-4;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Check one op builder against central differences of the cotangent
    /// dot product. All input coordinates are probed.
    pub fn check_op<F>(
        name: &'static str,
        rng: &mut ChaCha8Rng,
        instances: usize,
        make_inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
        op: F,
    ) -> OpReport
    where
        F: for<'g> Fn(&[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let mut max_rel = 0.0f64;
        let mut coords = 0usize;
        for _ in 0..instances {
            let inputs = make_inputs(rng);

            let graph = Graph::new();
            let leaves: Vec<Var<'_, f64>> =
                inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
            let out = op(&leaves).expect("forward failed during gradcheck");
            let out_t = out.to_tensor();
            let cotangent = random_tensor(rng, out_t.shape(), -1.0, 1.0);
            out.backward_seeded(cotangent.clone()).expect("backward failed");
            let grads: Vec<Tensor<f64>> =
                leaves.iter().map(|l| l.grad().expect("leaf grad missing")).collect();

            // Scalar functional evaluated without any graph.
            let eval = |perturbed: &[Tensor<f64>]| -> f64 {
                let vars: Vec<Var<'static, f64>> =
                    perturbed.iter().map(|t| Var::<f64>::plain(t.clone())).collect();
                let y = op(&vars).expect("forward failed during probing").to_tensor();
                y.data().iter().zip(cotangent.data()).map(|(a, b)| a * b).sum()
            };

            for (k, grad) in grads.iter().enumerate() {
                for j in 0..inputs[k].len() {
                    let mut plus = inputs.clone();
                    plus[k].data_mut()[j] += EPS;
                    let mut minus = inputs.clone();
                    minus[k].data_mut()[j] -= EPS;
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
                    let analytic = grad.data()[j];
                    let err = (numeric - analytic).abs();
                    let rel = err / numeric.abs().max(analytic.abs()).max(1e-6);
                    max_rel = max_rel.max(rel);
                    coords += 1;
                }
            }
        }
        OpReport { name, instances, coords_checked: coords, max_rel_err: max_rel }
    }

    /// The full per-op suite: every differentiable op, `instances` random
    /// small instances each.
    pub fn run_all(instances: usize, seed: u64) -> Vec<OpReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reports = Vec::new();

        reports.push(check_op(
            "conv2d",
            &mut rng,
            instances,
            |rng| {
                let n = rng.random_range(1..=2);
                let c = rng.random_range(1..=3);
                let f = rng.random_range(1..=3);
                let k = [1, 3, 5][rng.random_range(0..3usize)];
                let h = rng.random_range(k..=k.max(6));
                let w = rng.random_range(k..=k.max(6));
                vec![
                    random_tensor(rng, &[n, c, h, w], -1.0, 1.0),
                    random_tensor(rng, &[f, c, k, k], -1.0, 1.0),
                    random_tensor(rng, &[f], -0.5, 0.5),
                ]
            },
            |vars| {
                let k = vars[1].shape()[2];
                vars[0].conv2d(&vars[1], &vars[2], 1, k / 2)
            },
        ));

        // Strided convolutions go through a separate gradient path, so they
        // get their own batch of instances. Odd extents keep the output
        // geometry exact for stride 2 with same-style padding.
        reports.push(check_op(
            "conv2d/s2",
            &mut rng,
            instances,
            |rng| {
                let n = rng.random_range(1..=2);
                let c = rng.random_range(1..=3);
                let f = rng.random_range(1..=3);
                let k = [1, 3, 5][rng.random_range(0..3usize)];
                let h = k + 2 * rng.random_range(0..=1usize);
                let w = k + 2 * rng.random_range(0..=1usize);
                vec![
                    random_tensor(rng, &[n, c, h, w], -1.0, 1.0),
                    random_tensor(rng, &[f, c, k, k], -1.0, 1.0),
                    random_tensor(rng, &[f], -0.5, 0.5),
                ]
            },
            |vars| {
                let k = vars[1].shape()[2];
                vars[0].conv2d(&vars[1], &vars[2], 2, k / 2)
            },
        ));

        reports.push(check_op(
            "conv3d",
            &mut rng,
            instances,
            |rng| {
                let c = rng.random_range(1..=2);
                let f = rng.random_range(1..=2);
                let kd = [1, 3][rng.random_range(0..2usize)];
                let d = rng.random_range(kd..=4);
                let h = rng.random_range(3..=5);
                let w = rng.random_range(3..=5);
                vec![
                    random_tensor(rng, &[1, c, d, h, w], -1.0, 1.0),
                    random_tensor(rng, &[f, c, kd, 3, 3], -1.0, 1.0),
                    random_tensor(rng, &[f], -0.5, 0.5),
                ]
            },
            |vars| vars[0].conv3d(&vars[1], &vars[2], 1, 0, 1),
        ));

        reports.push(check_op(
            "leaky_relu",
            &mut rng,
            instances,
            |rng| {
                // Inputs kept at least 0.1 away from the kink so the finite
                // difference never crosses it.
                let shape = [rng.random_range(2..=4), rng.random_range(2..=5)];
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| {
                        let mag: f64 = rng.random_range(0.1..2.0);
                        if rng.random_range(0..2) == 0 {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect();
                vec![Tensor::from_vec(&shape, data).unwrap()]
            },
            |vars| vars[0].leaky_relu(0.2),
        ));

        reports.push(check_op(
            "tanh",
            &mut rng,
            instances,
            |rng| {
                let rows = rng.random_range(2..=6);
                vec![random_tensor(rng, &[rows, 3], -2.0, 2.0)]
            },
            |vars| vars[0].tanh(),
        ));

        reports.push(check_op(
            "add",
            &mut rng,
            instances,
            |rng| {
                let shape = [rng.random_range(1..=3), rng.random_range(2..=5)];
                vec![random_tensor(rng, &shape, -2.0, 2.0), random_tensor(rng, &shape, -2.0, 2.0)]
            },
            |vars| vars[0].add(&vars[1]),
        ));

        reports.push(check_op(
            "scale",
            &mut rng,
            instances,
            |rng| {
                let rows = rng.random_range(2..=5);
                vec![random_tensor(rng, &[rows, 2], -2.0, 2.0)]
            },
            |vars| vars[0].scale(0.2),
        ));

        reports.push(check_op(
            "concat",
            &mut rng,
            instances,
            |rng| {
                let h = rng.random_range(2..=4);
                let w = rng.random_range(2..=4);
                let chans: Vec<usize> = (0..3).map(|_| rng.random_range(1..=3)).collect();
                chans
                    .into_iter()
                    .map(|c| random_tensor(rng, &[1, c, h, w], -1.0, 1.0))
                    .collect()
            },
            |vars| Var::concat(vars, 1),
        ));

        reports.push(check_op(
            "reshape",
            &mut rng,
            instances,
            |rng| {
                let d = rng.random_range(2..=4);
                vec![random_tensor(rng, &[2, d, 3], -2.0, 2.0)]
            },
            |vars| {
                let n = vars[0].shape().iter().product::<usize>();
                vars[0].reshape(&[1, n / 3, 3, 1])
            },
        ));

        reports.push(check_op(
            "l1_loss",
            &mut rng,
            instances,
            |rng| {
                // Targets displaced from predictions so |pred - target| never
                // approaches a tie within the probing epsilon.
                let shape = [rng.random_range(2..=4), rng.random_range(2..=4)];
                let pred = random_tensor(rng, &shape, -1.0, 1.0);
                let target = Tensor::from_vec(
                    &shape,
                    pred.data()
                        .iter()
                        .map(|&v| {
                            let gap: f64 = rng.random_range(0.1..0.5);
                            if rng.random_range(0..2) == 0 {
                                v + gap
                            } else {
                                v - gap
                            }
                        })
                        .collect(),
                )
                .unwrap();
                vec![pred, target]
            },
            |vars| vars[0].l1_loss(&vars[1]),
        ));

        reports
    }
}
