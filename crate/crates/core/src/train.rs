//! Training: dataset synthesis, Adam, and the epoch loop for both networks.
//!
//! A dataset is a directory of clean images expanded into (clean, degraded)
//! pairs, one per quality factor, with degraded images cached on disk. An
//! epoch visits every pair once in shuffled order with a fresh random crop.
//! The luma network trains directly; the chroma network trains against
//! inputs whose first channel is produced by a frozen luma network.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, Image};
use crate::jpeg::{degrade, QualityFactor};
use crate::metrics;
use crate::model::{denormalize, normalize, Model, NetworkSpec, Variant, MIN_SPATIAL};
use crate::tensor::{Graph, Tensor, Var};

const ADAM_EPS: f64 = 1e-8;
const VAL_QFS: [u8; 3] = [10, 40, 80];
const VAL_MAX_DIM: usize = 160;
/// Byte budgets for the in-memory caches of decoded images and of full-image
/// restored luma planes. Small datasets stay resident; large ones churn FIFO.
const IMAGE_CACHE_BYTES: usize = 512 << 20;
const LUMA_CACHE_BYTES: usize = 256 << 20;

/// Everything that determines a training run apart from the data itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub qf_set: Vec<u8>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_halve_after: usize,
    pub epochs: usize,
    pub seed: u64,
    /// RRDB count; defaults to the variant's full-size depth when absent.
    pub n_rrdb: Option<usize>,
    pub base_channels: usize,
    pub growth: usize,
    pub val_dir: Option<PathBuf>,
    /// Run held-out validation every this many epochs (the last epoch always
    /// validates). Only meaningful with `val_dir`.
    pub val_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            crop: 100,
            qf_set: (1..=10).map(|q| q * 10).collect(),
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            lr_halve_after: 200,
            epochs: 400,
            seed: 0,
            n_rrdb: None,
            base_channels: 64,
            growth: 32,
            val_dir: None,
            val_interval: 1,
        }
    }
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys are
    /// rejected so typos fail loudly.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("line {}: {what} '{value}'", lineno + 1));
            match key {
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("bad integer"))?,
                "crop" => cfg.crop = value.parse().map_err(|_| bad("bad integer"))?,
                "qf_set" => {
                    cfg.qf_set = value
                        .split(',')
                        .map(|s| s.trim().parse::<u8>().map_err(|_| bad("bad qf list")))
                        .collect::<Result<Vec<u8>>>()?;
                }
                "lr" => cfg.lr = value.parse().map_err(|_| bad("bad number"))?,
                "beta1" => cfg.beta1 = value.parse().map_err(|_| bad("bad number"))?,
                "beta2" => cfg.beta2 = value.parse().map_err(|_| bad("bad number"))?,
                "lr_halve_after" => {
                    cfg.lr_halve_after = value.parse().map_err(|_| bad("bad integer"))?
                }
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("bad integer"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("bad integer"))?,
                "n_rrdb" => cfg.n_rrdb = Some(value.parse().map_err(|_| bad("bad integer"))?),
                "base_channels" => {
                    cfg.base_channels = value.parse().map_err(|_| bad("bad integer"))?
                }
                "growth" => cfg.growth = value.parse().map_err(|_| bad("bad integer"))?,
                "val_dir" => cfg.val_dir = Some(PathBuf::from(value)),
                "val_interval" => {
                    cfg.val_interval = value.parse().map_err(|_| bad("bad integer"))?
                }
                _ => return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.val_interval == 0 {
            return Err(Error::Config(
                "batch_size, epochs and val_interval must be positive".into(),
            ));
        }
        if self.crop < MIN_SPATIAL {
            return Err(Error::Config(format!(
                "crop must be at least {MIN_SPATIAL}, got {}",
                self.crop
            )));
        }
        if self.qf_set.is_empty() {
            return Err(Error::Config("qf_set must not be empty".into()));
        }
        for &qf in &self.qf_set {
            QualityFactor::new(qf)?;
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        Ok(())
    }

    /// The network this config trains for a given variant.
    pub fn spec(&self, variant: Variant) -> Result<NetworkSpec> {
        let n_rrdb = self.n_rrdb.unwrap_or(match variant {
            Variant::Y => 5,
            Variant::CbCr => 3,
        });
        NetworkSpec::with_size(variant, n_rrdb, self.base_channels, self.growth)
    }

    /// Learning rate in force during `epoch` (1-based): halved once after
    /// `lr_halve_after` epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch > self.lr_halve_after {
            self.lr * 0.5
        } else {
            self.lr
        }
    }
}

/// One (clean, degraded) image pair at a known quality factor.
#[derive(Clone, Debug)]
pub struct Pair {
    pub id: String,
    pub clean: PathBuf,
    pub degraded: PathBuf,
    pub qf: u8,
}

/// Expand every readable image in `clean_dir` by every qf in `qf_set`,
/// caching degraded copies under `cache_dir`. Existing cache files are
/// trusted and not recomputed.
pub fn build_dataset(clean_dir: &Path, qf_set: &[u8], cache_dir: &Path) -> Result<Vec<Pair>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(clean_dir)
        .map_err(|e| Error::io(clean_dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();

    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let mut pairs = Vec::new();
    for (idx, path) in entries.iter().enumerate() {
        let img = match load_image(path) {
            Ok(img) => img,
            Err(err) => {
                eprintln!("warning: skipping {}: {err}", path.display());
                continue;
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for &qf in qf_set {
            let quality = QualityFactor::new(qf)?;
            let cached = cache_dir.join(format!("{idx:04}_{stem}_qf{qf:03}.png"));
            if !cached.exists() {
                let degraded = degrade(&img, quality)?;
                save_image(&degraded, &cached)?;
            }
            pairs.push(Pair {
                id: format!("{stem}@qf{qf}"),
                clean: path.clone(),
                degraded: cached.clone(),
                qf,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::Config(format!("no readable images in {}", clean_dir.display())));
    }
    Ok(pairs)
}

/// Bias-corrected Adam over a model's parameter list.
pub struct Adam {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: i32,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    pub fn new(model: &Model, beta1: f64, beta2: f64) -> Adam {
        let zeros: Vec<Tensor<f32>> =
            model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Adam { m: zeros.clone(), v: zeros, t: 0, beta1, beta2 }
    }

    /// Apply one update in place. `grads` must align with the model's
    /// parameter order.
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor<f32>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match parameters");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((param, grad), (m, v)) in
            model.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            for i in 0..grad.len() {
                let g = grad.data()[i] as f64;
                let mi = self.beta1 * m.data()[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] as f64 + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                param.data_mut()[i] -= update as f32;
            }
        }
    }
}

/// One gradient step of the luma network on a normalized batch.
/// Returns the batch L1 loss.
pub fn train_step_y(
    model: &mut Model,
    adam: &mut Adam,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    train_step(model, adam, input, target, lr)
}

/// One gradient step of the chroma network. `input` is [N,3,H,W] with the
/// restored luma in channel 0 (computed outside, frozen); `target` is the
/// clean [N,2,H,W] chroma.
pub fn train_step_cbcr(
    model: &mut Model,
    adam: &mut Adam,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    train_step(model, adam, input, target, lr)
}

fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let graph = Graph::new();
    let params = model.bind(Some(&graph));
    let out = model.forward(&params, &Var::plain(input.clone()))?;
    let loss = out.l1_loss(&Var::plain(target.clone()))?;
    let loss_value = loss.to_tensor().item()? as f64;
    loss.backward()?;
    let grads: Vec<Tensor<f32>> = params
        .iter()
        .map(|p| p.grad().expect("bound parameters always accumulate gradients"))
        .collect();
    adam.step(model, &grads, lr);
    Ok(loss_value)
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub weights: PathBuf,
    pub log: PathBuf,
    pub final_epoch_loss: f64,
}

/// Train `variant` over `clean_dir`, writing the cache, the rotating
/// checkpoint, the final weights and a CSV log under the given directories.
/// Chroma training requires `y_weights` (same reduced spec sizes).
pub fn train(
    variant: Variant,
    cfg: &TrainConfig,
    clean_dir: &Path,
    cache_dir: &Path,
    out_dir: &Path,
    y_weights: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pairs = build_dataset(clean_dir, &cfg.qf_set, cache_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let y_model = match (variant, y_weights) {
        (Variant::CbCr, Some(path)) => Some(Model::load(path, cfg.spec(Variant::Y)?)?),
        (Variant::CbCr, None) => {
            return Err(Error::Config("chroma training needs --y-weights".into()))
        }
        (Variant::Y, _) => None,
    };

    let tag = match variant {
        Variant::Y => "y",
        Variant::CbCr => "cbcr",
    };
    let mut model = Model::build(cfg.spec(variant)?, cfg.seed);
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let log_path = out_dir.join(format!("{tag}_train_log.csv"));
    let log_file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    writeln!(log, "epoch,mean_loss,lr,val_psnr,val_ssim").map_err(|e| Error::io(&log_path, e))?;

    let checkpoint = out_dir.join(format!("{tag}_checkpoint.rdnw"));
    let mut final_epoch_loss = f64::NAN;
    let mut images = ImageCache::new(IMAGE_CACHE_BYTES);
    let mut restored_luma = RestoredLumaCache::new(LUMA_CACHE_BYTES);

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(
                variant,
                cfg,
                &pairs,
                chunk,
                &mut rng,
                y_model.as_ref(),
                &mut images,
                &mut restored_luma,
            )?;
            let step = match variant {
                Variant::Y => train_step_y(&mut model, &mut adam, &batch.input, &batch.target, lr),
                Variant::CbCr => {
                    train_step_cbcr(&mut model, &mut adam, &batch.input, &batch.target, lr)
                }
            };
            match step {
                Ok(loss) => {
                    loss_sum += loss;
                    batches += 1;
                }
                Err(err @ Error::NonFinite(_)) => {
                    let diag = out_dir.join(format!("{tag}_nan_diagnostic.rdnw"));
                    model.save(&diag)?;
                    eprintln!(
                        "training aborted by non-finite loss; state saved to {}",
                        diag.display()
                    );
                    return Err(err);
                }
                Err(err) => return Err(err),
            }
        }
        let mean_loss = loss_sum / batches as f64;
        final_epoch_loss = mean_loss;

        let val_due = epoch % cfg.val_interval == 0 || epoch == cfg.epochs;
        let (val_psnr, val_ssim) = match &cfg.val_dir {
            Some(dir) if val_due => {
                let (p, s) = validate(variant, &model, y_model.as_ref(), dir)?;
                (format!("{p}"), format!("{s}"))
            }
            _ => (String::new(), String::new()),
        };
        writeln!(log, "{epoch},{mean_loss},{lr},{val_psnr},{val_ssim}")
            .map_err(|e| Error::io(&log_path, e))?;
        model.save(&checkpoint)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let weights = out_dir.join(format!("{tag}_final.rdnw"));
    model.save(&weights)?;
    Ok(TrainOutcome { weights, log: log_path, final_epoch_loss })
}

struct Batch {
    input: Tensor<f32>,
    target: Tensor<f32>,
}

/// Decoded YCbCr images by path, held under a byte budget with FIFO
/// eviction. Small datasets stay fully resident across epochs.
struct ImageCache {
    map: HashMap<PathBuf, Rc<Image>>,
    order: VecDeque<PathBuf>,
    bytes: usize,
    budget: usize,
}

impl ImageCache {
    fn new(budget: usize) -> ImageCache {
        ImageCache { map: HashMap::new(), order: VecDeque::new(), bytes: 0, budget }
    }

    fn get(&mut self, path: &Path) -> Result<Rc<Image>> {
        if let Some(img) = self.map.get(path) {
            return Ok(Rc::clone(img));
        }
        let img = Rc::new(load_image(path)?.to_ycbcr()?);
        self.bytes += Self::cost(&img);
        self.map.insert(path.to_path_buf(), Rc::clone(&img));
        self.order.push_back(path.to_path_buf());
        while self.bytes > self.budget && self.order.len() > 1 {
            let oldest = self.order.pop_front().expect("order tracks map contents");
            if let Some(evicted) = self.map.remove(&oldest) {
                self.bytes -= Self::cost(&evicted);
            }
        }
        Ok(img)
    }

    fn cost(img: &Image) -> usize {
        img.width() * img.height() * 3 * std::mem::size_of::<f32>()
    }
}

/// Full-image restored luma planes (normalized domain) keyed by the degraded
/// image path. Computing these once per image instead of per crop is what
/// keeps chroma training affordable: the frozen luma network is fully
/// convolutional, so a crop of the full restoration equals restoring the
/// crop with matching context.
struct RestoredLumaCache {
    map: HashMap<PathBuf, Rc<Vec<f32>>>,
    order: VecDeque<PathBuf>,
    bytes: usize,
    budget: usize,
}

impl RestoredLumaCache {
    fn new(budget: usize) -> RestoredLumaCache {
        RestoredLumaCache { map: HashMap::new(), order: VecDeque::new(), bytes: 0, budget }
    }

    fn get(&mut self, path: &Path, degraded: &Image, y_model: &Model) -> Result<Rc<Vec<f32>>> {
        if let Some(plane) = self.map.get(path) {
            return Ok(Rc::clone(plane));
        }
        let (w, h) = (degraded.width(), degraded.height());
        let y_in: Vec<f32> = degraded.plane(0).iter().map(|&v| normalize(v)).collect();
        let restored = y_model.infer(&Tensor::from_vec(&[1, 1, h, w], y_in)?)?;
        let plane = Rc::new(restored.into_data());
        self.bytes += w * h * std::mem::size_of::<f32>();
        self.map.insert(path.to_path_buf(), Rc::clone(&plane));
        self.order.push_back(path.to_path_buf());
        while self.bytes > self.budget && self.order.len() > 1 {
            let oldest = self.order.pop_front().expect("order tracks map contents");
            if let Some(evicted) = self.map.remove(&oldest) {
                self.bytes -= evicted.len() * std::mem::size_of::<f32>();
            }
        }
        Ok(plane)
    }
}

fn crop_plane(plane: &[f32], width: usize, x0: usize, y0: usize, crop: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(crop * crop);
    for y in y0..y0 + crop {
        out.extend_from_slice(&plane[y * width + x0..y * width + x0 + crop]);
    }
    out
}

fn assemble_batch(
    variant: Variant,
    cfg: &TrainConfig,
    pairs: &[Pair],
    chunk: &[usize],
    rng: &mut ChaCha8Rng,
    y_model: Option<&Model>,
    images: &mut ImageCache,
    restored_luma: &mut RestoredLumaCache,
) -> Result<Batch> {
    let crop = cfg.crop;
    let n = chunk.len();
    let (in_c, out_c) = (variant.in_channels(), variant.out_channels());
    let mut input = Vec::with_capacity(n * in_c * crop * crop);
    let mut target = Vec::with_capacity(n * out_c * crop * crop);

    for &pi in chunk {
        let pair = &pairs[pi];
        let clean = images.get(&pair.clean)?;
        let degraded = images.get(&pair.degraded)?;
        let (w, h) = (clean.width(), clean.height());
        if degraded.width() != w || degraded.height() != h {
            return Err(Error::Config(format!(
                "pair {}: clean is {w}x{h} but degraded is {}x{}",
                pair.id,
                degraded.width(),
                degraded.height()
            )));
        }
        if w < crop || h < crop {
            return Err(Error::Config(format!(
                "pair {}: image {w}x{h} is smaller than the {crop}x{crop} crop",
                pair.id
            )));
        }
        let x0 = rng.random_range(0..=w - crop);
        let y0 = rng.random_range(0..=h - crop);

        let norm = |v: &f32| normalize(*v);
        match variant {
            Variant::Y => {
                input.extend(crop_plane(degraded.plane(0), w, x0, y0, crop).iter().map(norm));
                target.extend(crop_plane(clean.plane(0), w, x0, y0, crop).iter().map(norm));
            }
            Variant::CbCr => {
                let y_model = y_model.expect("chroma batches need the frozen luma model");
                let restored = restored_luma.get(&pair.degraded, &degraded, y_model)?;
                input.extend_from_slice(&crop_plane(&restored, w, x0, y0, crop));
                input.extend(crop_plane(degraded.plane(1), w, x0, y0, crop).iter().map(norm));
                input.extend(crop_plane(degraded.plane(2), w, x0, y0, crop).iter().map(norm));
                target.extend(crop_plane(clean.plane(1), w, x0, y0, crop).iter().map(norm));
                target.extend(crop_plane(clean.plane(2), w, x0, y0, crop).iter().map(norm));
            }
        }
    }

    // The loops above already emit [item][channel][pixels], which is exactly
    // [N,C,H,W] when concatenated in order.
    Ok(Batch {
        input: Tensor::from_vec(&[n, in_c, crop, crop], input)?,
        target: Tensor::from_vec(&[n, out_c, crop, crop], target)?,
    })
}

/// Mean restored-channel PSNR/SSIM over a held-out folder at a few fixed
/// quality factors. Large images are center-cropped for speed.
fn validate(
    variant: Variant,
    model: &Model,
    y_model: Option<&Model>,
    dir: &Path,
) -> Result<(f64, f64)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();

    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    let mut count = 0usize;
    for path in &files {
        let Ok(full) = load_image(path) else {
            eprintln!("warning: skipping {} during validation", path.display());
            continue;
        };
        let clean = center_crop(&full, VAL_MAX_DIM);
        let (w, h) = (clean.width(), clean.height());
        let clean_ycc = clean.to_ycbcr()?;
        for &qf in &VAL_QFS {
            let degraded = degrade(&clean, QualityFactor::new(qf)?)?.to_ycbcr()?;
            let y_in: Vec<f32> = degraded.plane(0).iter().map(|&v| normalize(v)).collect();
            let (restored, reference): (Vec<f32>, Vec<f32>) = match variant {
                Variant::Y => {
                    let out = model.infer(&Tensor::from_vec(&[1, 1, h, w], y_in)?)?;
                    (
                        out.data().iter().map(|&v| denormalize(v).clamp(0.0, 255.0)).collect(),
                        clean_ycc.plane(0).to_vec(),
                    )
                }
                Variant::CbCr => {
                    let y_model = y_model.expect("chroma validation needs the frozen luma model");
                    let y_restored = y_model.infer(&Tensor::from_vec(&[1, 1, h, w], y_in)?)?;
                    let mut data = Vec::with_capacity(3 * h * w);
                    data.extend_from_slice(y_restored.data());
                    data.extend(degraded.plane(1).iter().map(|&v| normalize(v)));
                    data.extend(degraded.plane(2).iter().map(|&v| normalize(v)));
                    let out = model.infer(&Tensor::from_vec(&[1, 3, h, w], data)?)?;
                    let restored: Vec<f32> =
                        out.data().iter().map(|&v| denormalize(v).clamp(0.0, 255.0)).collect();
                    let mut reference = clean_ycc.plane(1).to_vec();
                    reference.extend_from_slice(clean_ycc.plane(2));
                    (restored, reference)
                }
            };
            psnr_sum += metrics::cap_for_mean(metrics::psnr(&reference, &restored)?);
            // SSIM is defined per plane; average planes for the 2-channel case.
            let plane_px = h * w;
            let planes = restored.len() / plane_px;
            let mut s = 0.0;
            for c in 0..planes {
                s += metrics::ssim(
                    &reference[c * plane_px..(c + 1) * plane_px],
                    &restored[c * plane_px..(c + 1) * plane_px],
                    w,
                    h,
                )?;
            }
            ssim_sum += s / planes as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config(format!("no readable validation images in {}", dir.display())));
    }
    Ok((psnr_sum / count as f64, ssim_sum / count as f64))
}

fn center_crop(img: &Image, max_dim: usize) -> Image {
    let (w, h) = (img.width(), img.height());
    if w <= max_dim && h <= max_dim {
        return img.clone();
    }
    let cw = w.min(max_dim);
    let ch = h.min(max_dim);
    let x0 = (w - cw) / 2;
    let y0 = (h - ch) / 2;
    let mut data = Vec::with_capacity(img.color().channels() * cw * ch);
    for c in 0..img.color().channels() {
        let plane = img.plane(c);
        for y in y0..y0 + ch {
            data.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
        }
    }
    Image::from_planes(cw, ch, img.color(), data).expect("crop stays in bounds")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ColorSpace;

    #[test]
    fn config_parses_and_rejects_unknowns() {
        let cfg = TrainConfig::parse(
            "batch_size = 4\ncrop=48 # small\nqf_set = 10, 20\nepochs = 3\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.crop, 48);
        assert_eq!(cfg.qf_set, vec![10, 20]);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lr, 2e-4);

        assert!(TrainConfig::parse("btach_size = 4\n").is_err());
        assert!(TrainConfig::parse("qf_set = 0\n").is_err());
        assert!(TrainConfig::parse("epochs = 0\n").is_err());
    }

    #[test]
    fn lr_schedule_halves_once() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(1), 2e-4);
        assert_eq!(cfg.lr_at(200), 2e-4);
        assert_eq!(cfg.lr_at(201), 1e-4);
        assert_eq!(cfg.lr_at(400), 1e-4);
    }

    #[test]
    fn adam_first_step_magnitude_is_about_lr() {
        // With a constant gradient, bias correction makes the first update
        // exactly lr * g / (|g| + eps') which is essentially lr.
        let spec = NetworkSpec::with_size(Variant::Y, 1, 4, 2).unwrap();
        let mut model = Model::build(spec, 1);
        let before = model.tensors()[0].data().to_vec();
        let mut adam = Adam::new(&model, 0.9, 0.999);
        let grads: Vec<Tensor<f32>> =
            model.tensors().iter().map(|t| Tensor::filled(t.shape(), 0.5f32)).collect();
        adam.step(&mut model, &grads, 2e-4);
        let after = model.tensors()[0].data();
        for (b, a) in before.iter().zip(after) {
            let delta = (b - a) as f64;
            assert!((delta - 2e-4).abs() < 1e-8, "first-step delta {delta}");
        }
    }

    #[test]
    fn adam_zero_grad_is_a_no_op() {
        let spec = NetworkSpec::with_size(Variant::Y, 1, 4, 2).unwrap();
        let mut model = Model::build(spec, 2);
        let before = model.tensors()[0].data().to_vec();
        let mut adam = Adam::new(&model, 0.9, 0.999);
        let grads: Vec<Tensor<f32>> =
            model.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        adam.step(&mut model, &grads, 2e-4);
        assert_eq!(model.tensors()[0].data(), &before[..]);
    }

    #[test]
    fn training_step_reduces_loss_on_a_fixed_batch() {
        let spec = NetworkSpec::with_size(Variant::Y, 1, 4, 2).unwrap();
        let mut model = Model::build(spec, 3);
        let mut adam = Adam::new(&model, 0.9, 0.999);
        let mut input = Tensor::zeros(&[1, 1, 16, 16]);
        for (i, v) in input.data_mut().iter_mut().enumerate() {
            *v = ((i % 17) as f32 / 8.5) - 1.0;
        }
        let target = input.map(|v| (v * 0.9).clamp(-0.95, 0.95));
        let first = train_step_y(&mut model, &mut adam, &input, &target, 1e-3).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = train_step_y(&mut model, &mut adam, &input, &target, 1e-3).unwrap();
        }
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn center_crop_bounds() {
        let img = Image::from_planes(6, 4, ColorSpace::Gray, (0..24).map(|v| v as f32).collect())
            .unwrap();
        let same = center_crop(&img, 8);
        assert_eq!((same.width(), same.height()), (6, 4));
        let cut = center_crop(&img, 2);
        assert_eq!((cut.width(), cut.height()), (2, 2));
        assert_eq!(cut.plane(0), &[8.0, 9.0, 14.0, 15.0]);
    }
}
