//! Evaluation protocols: fixed-qf benchmark tables, an unknown-qf robustness
//! sweep, and a stratified breakdown of restoration quality by patch content.
//!
//! All protocols walk the test directory in sorted filename order, degrade
//! each image in memory, restore it with the two-stage model, and score
//! restored against clean. CSV output uses fixed six-decimal formatting so
//! identical runs produce identical bytes; infinite PSNR values are capped at
//! 100 dB before aggregation.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::load_image;
use crate::jpeg::{degrade, QualityFactor};
use crate::metrics::{cap_for_mean, evaluate_pair, ChannelMode, MetricReport};
use crate::model::{restore, Model};

/// Patch edge length for the stratified analysis.
pub const PATCH: usize = 64;

/// Adjacent-qf drop in a dB metric beyond which the sweep flags instability.
pub const SWEEP_DROP_DB: f64 = 0.5;

const CANNY_SIGMA: f64 = 1.4;
const CANNY_HIGH: f64 = 0.2;
const CANNY_LOW: f64 = 0.1;

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no files in {}", dir.display())));
    }
    Ok(files)
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn capped(r: &MetricReport) -> (f64, f64, f64) {
    (cap_for_mean(r.psnr), cap_for_mean(r.psnr_b), r.ssim)
}

/// One scored stage of one image at one quality factor.
#[derive(Clone, Debug)]
pub struct PerImageRow {
    pub filename: String,
    pub qf: u8,
    pub stage: &'static str,
    pub psnr: f64,
    pub psnr_b: f64,
    pub ssim: f64,
}

/// One metric's mean over the test set at one quality factor.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub qf: u8,
    pub metric: &'static str,
    pub degraded: f64,
    pub restored: f64,
}

pub struct FixedQfReport {
    pub per_image: Vec<PerImageRow>,
    pub summary: Vec<SummaryRow>,
    pub per_image_csv: PathBuf,
    pub summary_csv: PathBuf,
}

/// Degrade, restore and score every image at every listed quality factor.
/// Writes `per_image.csv` (one row per image, qf and stage) and
/// `summary.csv` (long format, |qf_list| x 3 metric rows).
pub fn fixed_qf_eval(
    y_model: &Model,
    c_model: &Model,
    testset_dir: &Path,
    qf_list: &[u8],
    mode: ChannelMode,
    out_dir: &Path,
) -> Result<FixedQfReport> {
    if qf_list.is_empty() {
        return Err(Error::Config("qf list must not be empty".into()));
    }
    let files = list_images(testset_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut per_image = Vec::new();
    let mut summary = Vec::new();
    for &qf in qf_list {
        let quality = QualityFactor::new(qf)?;
        let mut deg_sum = (0.0, 0.0, 0.0);
        let mut res_sum = (0.0, 0.0, 0.0);
        let mut count = 0.0;
        for path in &files {
            let clean = load_image(path)?;
            let degraded = degrade(&clean, quality)?;
            let restored = restore(y_model, c_model, &degraded)?;
            let deg = capped(&evaluate_pair(&clean, &degraded, mode)?);
            let res = capped(&evaluate_pair(&clean, &restored, mode)?);
            for (stage, m) in [("degraded", deg), ("restored", res)] {
                per_image.push(PerImageRow {
                    filename: file_label(path),
                    qf,
                    stage,
                    psnr: m.0,
                    psnr_b: m.1,
                    ssim: m.2,
                });
            }
            deg_sum = (deg_sum.0 + deg.0, deg_sum.1 + deg.1, deg_sum.2 + deg.2);
            res_sum = (res_sum.0 + res.0, res_sum.1 + res.1, res_sum.2 + res.2);
            count += 1.0;
        }
        for (metric, d, r) in [
            ("psnr", deg_sum.0, res_sum.0),
            ("psnr_b", deg_sum.1, res_sum.1),
            ("ssim", deg_sum.2, res_sum.2),
        ] {
            summary.push(SummaryRow { qf, metric, degraded: d / count, restored: r / count });
        }
    }

    // Metric column names carry the channel mode so a CSV is self-describing.
    let per_image_csv = out_dir.join("per_image.csv");
    let f = File::create(&per_image_csv).map_err(|e| Error::io(&per_image_csv, e))?;
    let mut w = BufWriter::new(f);
    let werr = |e| Error::io(&per_image_csv, e);
    writeln!(w, "filename,qf,stage,psnr_{mode},psnr_b_{mode},ssim_{mode}").map_err(werr)?;
    for r in &per_image {
        writeln!(
            w,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.filename, r.qf, r.stage, r.psnr, r.psnr_b, r.ssim
        )
        .map_err(werr)?;
    }
    w.flush().map_err(werr)?;

    let summary_csv = out_dir.join("summary.csv");
    let f = File::create(&summary_csv).map_err(|e| Error::io(&summary_csv, e))?;
    let mut w = BufWriter::new(f);
    let werr = |e| Error::io(&summary_csv, e);
    writeln!(w, "qf,metric,degraded_{mode},restored_{mode}").map_err(werr)?;
    for r in &summary {
        writeln!(w, "{},{},{:.6},{:.6}", r.qf, r.metric, r.degraded, r.restored).map_err(werr)?;
    }
    w.flush().map_err(werr)?;

    Ok(FixedQfReport { per_image, summary, per_image_csv, summary_csv })
}

/// Mean metrics over the test set at one quality factor, degraded baseline
/// alongside the restored result. Luma-channel scoring.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub qf: u8,
    pub n_images: usize,
    pub degraded_psnr: f64,
    pub restored_psnr: f64,
    pub degraded_psnr_b: f64,
    pub restored_psnr_b: f64,
    pub degraded_ssim: f64,
    pub restored_ssim: f64,
}

pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Human-readable instability flags: adjacent-qf dB drops beyond
    /// [`SWEEP_DROP_DB`] in a restored metric.
    pub warnings: Vec<String>,
    pub csv: PathBuf,
    pub plot_files: Vec<PathBuf>,
}

/// Score the model at each listed quality factor (luma channel), in order.
pub fn eval_at_qfs(
    y_model: &Model,
    c_model: &Model,
    testset_dir: &Path,
    qfs: &[u8],
) -> Result<Vec<SweepRow>> {
    let files = list_images(testset_dir)?;
    let mut rows = Vec::with_capacity(qfs.len());
    for &qf in qfs {
        let quality = QualityFactor::new(qf)?;
        let mut sums = [0.0f64; 6];
        for path in &files {
            let clean = load_image(path)?;
            let degraded = degrade(&clean, quality)?;
            let restored = restore(y_model, c_model, &degraded)?;
            let deg = capped(&evaluate_pair(&clean, &degraded, ChannelMode::Luma)?);
            let res = capped(&evaluate_pair(&clean, &restored, ChannelMode::Luma)?);
            for (slot, v) in sums.iter_mut().zip([deg.0, res.0, deg.1, res.1, deg.2, res.2]) {
                *slot += v;
            }
        }
        let n = files.len();
        let mean = |v: f64| v / n as f64;
        rows.push(SweepRow {
            qf,
            n_images: n,
            degraded_psnr: mean(sums[0]),
            restored_psnr: mean(sums[1]),
            degraded_psnr_b: mean(sums[2]),
            restored_psnr_b: mean(sums[3]),
            degraded_ssim: mean(sums[4]),
            restored_ssim: mean(sums[5]),
        });
    }
    Ok(rows)
}

/// Flag adjacent drops > [`SWEEP_DROP_DB`] in the restored dB metrics.
pub fn sweep_warnings(rows: &[SweepRow]) -> Vec<String> {
    let mut warnings = Vec::new();
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for (name, prev, next) in [
            ("psnr", a.restored_psnr, b.restored_psnr),
            ("psnr_b", a.restored_psnr_b, b.restored_psnr_b),
        ] {
            if next < prev - SWEEP_DROP_DB {
                warnings.push(format!(
                    "restored {name} drops {:.2} dB between qf {} and {}",
                    prev - next,
                    a.qf,
                    b.qf
                ));
            }
        }
    }
    warnings
}

/// Evaluate every integer quality factor in `[lo, hi]`, including values a
/// model never saw in training. Writes `sweep.csv` plus one two-column plot
/// data file per metric (`psnr.dat`, `psnr_b.dat`, `ssim.dat`).
pub fn unknown_qf_sweep(
    y_model: &Model,
    c_model: &Model,
    testset_dir: &Path,
    lo: u8,
    hi: u8,
    out_dir: &Path,
) -> Result<SweepResult> {
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!("bad sweep range {lo}..{hi}")));
    }
    let qfs: Vec<u8> = (lo..=hi).collect();
    let rows = eval_at_qfs(y_model, c_model, testset_dir, &qfs)?;
    let warnings = sweep_warnings(&rows);

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("sweep.csv");
    let f = File::create(&csv).map_err(|e| Error::io(&csv, e))?;
    let mut w = BufWriter::new(f);
    let werr = |e| Error::io(&csv, e);
    writeln!(
        w,
        "qf,n_images,degraded_psnr,restored_psnr,degraded_psnr_b,restored_psnr_b,degraded_ssim,restored_ssim"
    )
    .map_err(werr)?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.qf,
            r.n_images,
            r.degraded_psnr,
            r.restored_psnr,
            r.degraded_psnr_b,
            r.restored_psnr_b,
            r.degraded_ssim,
            r.restored_ssim
        )
        .map_err(werr)?;
    }
    w.flush().map_err(werr)?;

    let mut plot_files = Vec::new();
    for (name, pick) in [
        ("psnr.dat", 0usize),
        ("psnr_b.dat", 1),
        ("ssim.dat", 2),
    ] {
        let path = out_dir.join(name);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let werr = |e| Error::io(&path, e);
        writeln!(w, "# qf degraded restored").map_err(werr)?;
        for r in &rows {
            let (d, s) = match pick {
                0 => (r.degraded_psnr, r.restored_psnr),
                1 => (r.degraded_psnr_b, r.restored_psnr_b),
                _ => (r.degraded_ssim, r.restored_ssim),
            };
            writeln!(w, "{} {:.6} {:.6}", r.qf, d, s).map_err(werr)?;
        }
        w.flush().map_err(werr)?;
        plot_files.push(path);
    }

    Ok(SweepResult { rows, warnings, csv, plot_files })
}

/// Weighted average of the patch's normalized non-DC Fourier magnitudes,
/// where the weight is the centered radial frequency scaled so the Nyquist
/// corner sits at 1. A constant patch scores 0 (0/0 defined as 0); the
/// finest checkerboard concentrates all mass at the corner and scores 1.
pub fn patch_frequency_score(patch: &[f32], width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 || patch.len() != width * height {
        return Err(Error::shape(
            "patch_frequency_score",
            format!("{} values for {width}x{height}", patch.len()),
        ));
    }
    let mut grid: Vec<Complex<f64>> =
        patch.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();

    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(width);
    for row in grid.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(height);
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            grid[y * width + x] = col[y];
        }
    }

    // Signed frequency per axis, normalized by the Nyquist bin; the radial
    // weight divides by sqrt(2) so the (Nyquist, Nyquist) corner is 1.
    let axis_freq = |i: usize, n: usize| -> f64 {
        let signed = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        signed / (n as f64 / 2.0)
    };
    let mut mag_sum = 0.0;
    let mut weighted = 0.0;
    for y in 0..height {
        for x in 0..width {
            if x == 0 && y == 0 {
                continue; // DC
            }
            let m = grid[y * width + x].norm();
            let fu = axis_freq(x, width);
            let fv = axis_freq(y, height);
            let r = (fu * fu + fv * fv).sqrt() / 2.0f64.sqrt();
            mag_sum += m;
            weighted += r * m;
        }
    }
    if mag_sum == 0.0 {
        return Ok(0.0);
    }
    Ok(weighted / mag_sum)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> =
        (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable blur with edge replication.
fn blur(patch: &[f32], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let clamp_x = |x: isize| x.clamp(0, width as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, height as isize - 1) as usize;
    let mut horiz = vec![0.0f64; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = clamp_x(x as isize + ki as isize - radius);
                acc += kv * patch[y * width + sx] as f64;
            }
            horiz[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f64; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = clamp_y(y as isize + ki as isize - radius);
                acc += kv * horiz[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Mean of the Canny edge map: Gaussian blur, Sobel gradients, non-maximum
/// suppression along the quantized gradient direction, then hysteresis with
/// thresholds relative to the maximum gradient magnitude, which makes the
/// score invariant to affine intensity rescales.
pub fn patch_detail_score(patch: &[f32], width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 || patch.len() != width * height {
        return Err(Error::shape(
            "patch_detail_score",
            format!("{} values for {width}x{height}", patch.len()),
        ));
    }
    let smoothed = blur(patch, width, height, &gaussian_kernel(CANNY_SIGMA));

    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, width as isize - 1) as usize;
        let yc = y.clamp(0, height as isize - 1) as usize;
        smoothed[yc * width + xc]
    };
    let mut mag = vec![0.0f64; width * height];
    let mut dir = vec![(0isize, 0isize); width * height];
    let mut max_mag = 0.0f64;
    for y in 0..height as isize {
        for x in 0..width as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let m = (gx * gx + gy * gy).sqrt();
            let i = y as usize * width + x as usize;
            mag[i] = m;
            max_mag = max_mag.max(m);
            // Quantize the gradient direction into one of four step vectors.
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => (1, 0),
                a if a < 67.5 => (1, 1),
                a if a < 112.5 => (0, 1),
                _ => (-1, 1),
            };
        }
    }
    if max_mag == 0.0 {
        return Ok(0.0);
    }

    // Keep a pixel only if it is a maximum along its gradient direction;
    // ties survive on the (+dx,+dy) side only, so ridges stay one pixel wide.
    let mag_at = |x: isize, y: isize| -> f64 {
        if x < 0 || x >= width as isize || y < 0 || y >= height as isize {
            0.0
        } else {
            mag[y as usize * width + x as usize]
        }
    };
    let mut nms = vec![0.0f64; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let i = y as usize * width + x as usize;
            let (dx, dy) = dir[i];
            let prev = mag_at(x - dx, y - dy);
            let next = mag_at(x + dx, y + dy);
            if mag[i] >= prev && mag[i] > next {
                nms[i] = mag[i];
            }
        }
    }

    let high = CANNY_HIGH * max_mag;
    let low = CANNY_LOW * max_mag;
    let mut edge = vec![false; width * height];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in nms.iter().enumerate() {
        if m >= high {
            edge[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = ((i % width) as isize, (i / width) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || nx >= width as isize || ny < 0 || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if !edge[j] && nms[j] >= low {
                    edge[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    Ok(edge.iter().filter(|&&e| e).count() as f64 / (width * height) as f64)
}

/// One analyzed 64x64 patch.
#[derive(Clone, Debug)]
pub struct PatchClass {
    pub id: usize,
    pub source: String,
    pub x0: usize,
    pub y0: usize,
    pub frequency_score: f64,
    pub detail_score: f64,
    /// Quintile by frequency score, 1 (lowest) to 5.
    pub freq_bin: u8,
    /// Quintile by detail score, 1 (lowest) to 5.
    pub detail_bin: u8,
}

/// Mean metrics of one quintile bin.
#[derive(Clone, Debug)]
pub struct BinRow {
    pub bin: u8,
    pub count: usize,
    pub degraded_psnr: f64,
    pub restored_psnr: f64,
    pub degraded_psnr_b: f64,
    pub restored_psnr_b: f64,
    pub degraded_ssim: f64,
    pub restored_ssim: f64,
}

pub struct StratifiedReport {
    pub patches: Vec<PatchClass>,
    pub freq_bins: Vec<BinRow>,
    pub detail_bins: Vec<BinRow>,
    pub patches_csv: PathBuf,
    pub freq_csv: PathBuf,
    pub detail_csv: PathBuf,
}

/// Assign quintile bins 1..=5 over the score multiset. Sorting ties break by
/// index, and the lower bins absorb the remainder, so populations differ by
/// at most one and the split is reproducible.
fn quintile_bins(scores: &[f64]) -> Vec<u8> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a].partial_cmp(&scores[b]).expect("scores are finite").then(a.cmp(&b))
    });
    let base = n / 5;
    let rem = n % 5;
    let mut bins = vec![0u8; n];
    let mut cursor = 0;
    for bin in 0..5u8 {
        let size = base + usize::from((bin as usize) < rem);
        for &idx in &order[cursor..cursor + size] {
            bins[idx] = bin + 1;
        }
        cursor += size;
    }
    bins
}

/// Tile every test image into non-overlapping 64x64 patches (largest
/// 64-multiple region, row major), score each patch's content on the clean
/// luma plane, and report mean metrics per frequency and per detail quintile
/// at the given quality factor. Needs at least 5 patches.
pub fn stratified_eval(
    y_model: &Model,
    c_model: &Model,
    testset_dir: &Path,
    qf: u8,
    out_dir: &Path,
) -> Result<StratifiedReport> {
    let quality = QualityFactor::new(qf)?;
    let files = list_images(testset_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    struct Scored {
        class: PatchClass,
        degraded: (f64, f64, f64),
        restored: (f64, f64, f64),
    }
    let mut scored: Vec<Scored> = Vec::new();

    for path in &files {
        let clean = load_image(path)?;
        let degraded = degrade(&clean, quality)?;
        let restored = restore(y_model, c_model, &degraded)?;
        let clean_y = clean.to_ycbcr()?;
        let degraded_y = degraded.to_ycbcr()?;
        let restored_y = restored.to_ycbcr()?;
        let (w, h) = (clean.width(), clean.height());

        let slice_patch = |plane: &[f32], x0: usize, y0: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(PATCH * PATCH);
            for y in y0..y0 + PATCH {
                out.extend_from_slice(&plane[y * w + x0..y * w + x0 + PATCH]);
            }
            out
        };

        for ty in 0..h / PATCH {
            for tx in 0..w / PATCH {
                let (x0, y0) = (tx * PATCH, ty * PATCH);
                let cp = slice_patch(clean_y.plane(0), x0, y0);
                let dp = slice_patch(degraded_y.plane(0), x0, y0);
                let rp = slice_patch(restored_y.plane(0), x0, y0);
                let id = scored.len();
                scored.push(Scored {
                    class: PatchClass {
                        id,
                        source: file_label(path),
                        x0,
                        y0,
                        frequency_score: patch_frequency_score(&cp, PATCH, PATCH)?,
                        detail_score: patch_detail_score(&cp, PATCH, PATCH)?,
                        freq_bin: 0,
                        detail_bin: 0,
                    },
                    degraded: metric_triple(&cp, &dp)?,
                    restored: metric_triple(&cp, &rp)?,
                });
            }
        }
    }

    if scored.len() < 5 {
        return Err(Error::Config(format!(
            "stratified analysis needs at least 5 patches, found {}",
            scored.len()
        )));
    }

    let freq_scores: Vec<f64> = scored.iter().map(|s| s.class.frequency_score).collect();
    let detail_scores: Vec<f64> = scored.iter().map(|s| s.class.detail_score).collect();
    let freq_bins = quintile_bins(&freq_scores);
    let detail_bins = quintile_bins(&detail_scores);
    for (s, (&fb, &db)) in scored.iter_mut().zip(freq_bins.iter().zip(&detail_bins)) {
        s.class.freq_bin = fb;
        s.class.detail_bin = db;
    }

    let bin_table = |pick: &dyn Fn(&Scored) -> u8| -> Vec<BinRow> {
        (1..=5u8)
            .map(|bin| {
                let members: Vec<&Scored> = scored.iter().filter(|s| pick(s) == bin).collect();
                let n = members.len() as f64;
                let mean = |f: &dyn Fn(&Scored) -> f64| -> f64 {
                    members.iter().map(|s| f(s)).sum::<f64>() / n
                };
                BinRow {
                    bin,
                    count: members.len(),
                    degraded_psnr: mean(&|s| s.degraded.0),
                    restored_psnr: mean(&|s| s.restored.0),
                    degraded_psnr_b: mean(&|s| s.degraded.1),
                    restored_psnr_b: mean(&|s| s.restored.1),
                    degraded_ssim: mean(&|s| s.degraded.2),
                    restored_ssim: mean(&|s| s.restored.2),
                }
            })
            .collect()
    };
    let freq_rows = bin_table(&|s: &Scored| s.class.freq_bin);
    let detail_rows = bin_table(&|s: &Scored| s.class.detail_bin);

    let patches_csv = out_dir.join("patches.csv");
    let f = File::create(&patches_csv).map_err(|e| Error::io(&patches_csv, e))?;
    let mut w = BufWriter::new(f);
    let werr = |e| Error::io(&patches_csv, e);
    writeln!(w, "id,source,x0,y0,frequency_score,detail_score,freq_bin,detail_bin")
        .map_err(werr)?;
    for s in &scored {
        let c = &s.class;
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6},{},{}",
            c.id, c.source, c.x0, c.y0, c.frequency_score, c.detail_score, c.freq_bin, c.detail_bin
        )
        .map_err(werr)?;
    }
    w.flush().map_err(werr)?;

    let write_bins = |name: &str, rows: &[BinRow]| -> Result<PathBuf> {
        let path = out_dir.join(name);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let werr = |e| Error::io(&path, e);
        writeln!(
            w,
            "bin,count,degraded_psnr,restored_psnr,degraded_psnr_b,restored_psnr_b,degraded_ssim,restored_ssim"
        )
        .map_err(werr)?;
        for r in rows {
            writeln!(
                w,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.bin,
                r.count,
                r.degraded_psnr,
                r.restored_psnr,
                r.degraded_psnr_b,
                r.restored_psnr_b,
                r.degraded_ssim,
                r.restored_ssim
            )
            .map_err(werr)?;
        }
        w.flush().map_err(werr)?;
        Ok(path)
    };
    let freq_csv = write_bins("freq_bins.csv", &freq_rows)?;
    let detail_csv = write_bins("detail_bins.csv", &detail_rows)?;

    Ok(StratifiedReport {
        patches: scored.into_iter().map(|s| s.class).collect(),
        freq_bins: freq_rows,
        detail_bins: detail_rows,
        patches_csv,
        freq_csv,
        detail_csv,
    })
}

fn metric_triple(reference: &[f32], test: &[f32]) -> Result<(f64, f64, f64)> {
    Ok((
        cap_for_mean(crate::metrics::psnr(reference, test)?),
        cap_for_mean(crate::metrics::psnr_b(reference, test, PATCH, PATCH)?),
        crate::metrics::ssim(reference, test, PATCH, PATCH)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize) -> Vec<f32> {
        (0..n * n).map(|i| if (i / n + i % n) % 2 == 0 { 255.0 } else { 0.0 }).collect()
    }

    #[test]
    fn frequency_score_anchors() {
        let flat = vec![128.0f32; 64 * 64];
        assert_eq!(patch_frequency_score(&flat, 64, 64).unwrap(), 0.0);

        let check = checkerboard(64);
        let s = patch_frequency_score(&check, 64, 64).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "checkerboard scored {s}");

        // A horizontal ramp concentrates mass at low horizontal frequencies.
        let ramp: Vec<f32> = (0..64 * 64).map(|i| (i % 64) as f32 * 4.0).collect();
        let r = patch_frequency_score(&ramp, 64, 64).unwrap();
        assert!(r > 0.0 && r < s, "ramp {r} vs checkerboard {s}");
    }

    #[test]
    fn frequency_score_ignores_dc_shift() {
        let ramp: Vec<f32> = (0..64 * 64).map(|i| (i % 64) as f32 * 2.0).collect();
        let shifted: Vec<f32> = ramp.iter().map(|v| v + 37.0).collect();
        let a = patch_frequency_score(&ramp, 64, 64).unwrap();
        let b = patch_frequency_score(&shifted, 64, 64).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn detail_score_anchors() {
        let flat = vec![40.0f32; 64 * 64];
        assert_eq!(patch_detail_score(&flat, 64, 64).unwrap(), 0.0);

        // Vertical step: one-pixel-wide edge column survives suppression.
        let step: Vec<f32> =
            (0..64 * 64).map(|i| if i % 64 < 32 { 0.0 } else { 255.0 }).collect();
        let s = patch_detail_score(&step, 64, 64).unwrap();
        assert!(
            (s - 64.0 / 4096.0).abs() < 1e-12,
            "step edge scored {s}, expected {}",
            64.0 / 4096.0
        );
    }

    #[test]
    fn detail_score_is_scale_invariant() {
        let step: Vec<f32> =
            (0..64 * 64).map(|i| if i % 64 < 20 { 10.0 } else { 90.0 }).collect();
        let scaled: Vec<f32> = step.iter().map(|v| v * 2.5 + 11.0).collect();
        let a = patch_detail_score(&step, 64, 64).unwrap();
        let b = patch_detail_score(&scaled, 64, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quintiles_split_evenly_with_ties_by_index() {
        let scores = vec![0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3, 0.3];
        let bins = quintile_bins(&scores);
        // 12 = 3+3+2+2+2, lower bins absorb the remainder; ties keep index order.
        assert_eq!(bins, vec![1, 1, 1, 2, 2, 2, 3, 3, 4, 4, 5, 5]);
        let mut counts = [0usize; 5];
        for &b in &bins {
            counts[b as usize - 1] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn sweep_warnings_flag_drops() {
        let row = |qf: u8, p: f64| SweepRow {
            qf,
            n_images: 1,
            degraded_psnr: 20.0,
            restored_psnr: p,
            degraded_psnr_b: 20.0,
            restored_psnr_b: p,
            degraded_ssim: 0.8,
            restored_ssim: 0.8,
        };
        let smooth = vec![row(10, 25.0), row(11, 25.3), row(12, 25.2)];
        assert!(sweep_warnings(&smooth).is_empty());
        let unstable = vec![row(10, 25.0), row(11, 24.2)];
        let w = sweep_warnings(&unstable);
        assert_eq!(w.len(), 2, "psnr and psnr_b both drop: {w:?}");
    }
}
