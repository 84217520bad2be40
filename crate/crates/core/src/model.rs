//! Residual-dense restoration networks.
//!
//! Two closely related autoencoders share one implementation: a luma network
//! (1 channel in, 1 out) and a chroma network whose stem is a 3D convolution
//! fusing the restored luma with the two degraded chroma channels (3 in,
//! 2 out). Between a convolutional encoder and decoder sits a chain of
//! residual-in-residual dense blocks (RRDBs). All convolutions are stride 1
//! with size-preserving padding, so spatial dimensions pass through
//! unchanged.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};
use crate::tensor::{Graph, Tensor, Var};

const LRELU_SLOPE: f64 = 0.2;
const RESIDUAL_SCALE: f64 = 0.2;
const DENSE_BLOCKS_PER_RRDB: usize = 5;
const CONVS_PER_DENSE_BLOCK: usize = 5;
/// Smallest spatial extent the networks accept; the encoder's 5x5 receptive
/// fields need this much room.
pub const MIN_SPATIAL: usize = 16;

const WEIGHT_MAGIC: &[u8; 4] = b"RDNW";
const WEIGHT_VERSION: u32 = 1;

/// Which of the two networks a spec describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Luma restoration: input [N,1,H,W], output [N,1,H,W].
    Y,
    /// Chroma restoration guided by restored luma: input [N,3,H,W]
    /// (channels: restored Y, degraded Cb, degraded Cr), output [N,2,H,W].
    CbCr,
}

impl Variant {
    fn tag(self) -> &'static str {
        match self {
            Variant::Y => "y",
            Variant::CbCr => "cbcr",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Variant::Y => 1,
            Variant::CbCr => 3,
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            Variant::Y => 1,
            Variant::CbCr => 2,
        }
    }
}

/// Structural description of one network. The encoder widens to twice the
/// base width; dense blocks grow by `growth` channels per internal conv.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub n_rrdb: usize,
    pub base_channels: usize,
    pub growth: usize,
}

/// Name and extents of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
}

impl NetworkSpec {
    /// Full-size luma network: 5 RRDBs on 64 channels.
    pub fn y() -> Self {
        NetworkSpec { variant: Variant::Y, n_rrdb: 5, base_channels: 64, growth: 32 }
    }

    /// Full-size chroma network: 3 RRDBs on 64 channels.
    pub fn cbcr() -> Self {
        NetworkSpec { variant: Variant::CbCr, n_rrdb: 3, base_channels: 64, growth: 32 }
    }

    /// Same wiring at a different width/depth (small configurations train in
    /// minutes on a CPU and are used by the test suite).
    pub fn with_size(variant: Variant, n_rrdb: usize, base_channels: usize, growth: usize) -> Result<Self> {
        if n_rrdb == 0 || base_channels == 0 || growth == 0 {
            return Err(Error::Config(format!(
                "network spec needs positive sizes, got rrdb={n_rrdb} base={base_channels} growth={growth}"
            )));
        }
        Ok(NetworkSpec { variant, n_rrdb, base_channels, growth })
    }

    /// Canonical identity string, stored in weight files.
    pub fn canonical(&self) -> String {
        format!(
            "{}:rrdb={}:base={}:growth={}",
            self.variant.tag(),
            self.n_rrdb,
            self.base_channels,
            self.growth
        )
    }

    /// Inverse of [`NetworkSpec::canonical`].
    pub fn from_canonical(s: &str) -> Result<NetworkSpec> {
        let bad = || Error::Config(format!("bad network spec '{s}'"));
        let mut parts = s.split(':');
        let variant = match parts.next() {
            Some("y") => Variant::Y,
            Some("cbcr") => Variant::CbCr,
            _ => return Err(bad()),
        };
        let (mut n_rrdb, mut base, mut growth) = (None, None, None);
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            let v: usize = value.parse().map_err(|_| bad())?;
            match key {
                "rrdb" => n_rrdb = Some(v),
                "base" => base = Some(v),
                "growth" => growth = Some(v),
                _ => return Err(bad()),
            }
        }
        match (n_rrdb, base, growth) {
            (Some(r), Some(b), Some(g)) => Self::with_size(variant, r, b, g),
            _ => Err(bad()),
        }
    }

    fn mid_channels(&self) -> usize {
        self.base_channels * 2
    }

    /// Every parameter tensor in definition order. Forward consumes
    /// parameters in exactly this order.
    pub fn param_defs(&self) -> Vec<ParamDef> {
        let (base, mid, growth) = (self.base_channels, self.mid_channels(), self.growth);
        let mut defs = Vec::new();
        fn push_conv(defs: &mut Vec<ParamDef>, name: &str, out_c: usize, in_c: usize, k: usize) {
            defs.push(ParamDef { name: format!("{name}.weight"), shape: vec![out_c, in_c, k, k] });
            defs.push(ParamDef { name: format!("{name}.bias"), shape: vec![out_c] });
        }

        match self.variant {
            Variant::Y => push_conv(&mut defs, "stem", base, 1, 3),
            Variant::CbCr => {
                defs.push(ParamDef { name: "stem.weight".into(), shape: vec![base, 1, 3, 3, 3] });
                defs.push(ParamDef { name: "stem.bias".into(), shape: vec![base] });
            }
        }
        push_conv(&mut defs, "enc.0", mid, base, 5);
        push_conv(&mut defs, "enc.1", base, mid, 3);
        for i in 0..self.n_rrdb {
            for j in 0..DENSE_BLOCKS_PER_RRDB {
                for k in 0..CONVS_PER_DENSE_BLOCK {
                    let in_c = base + k * growth;
                    let out_c = if k + 1 == CONVS_PER_DENSE_BLOCK { base } else { growth };
                    push_conv(&mut defs, &format!("rrdb.{i}.db.{j}.conv.{k}"), out_c, in_c, 3);
                }
            }
        }
        push_conv(&mut defs, "dec.0", mid, base, 3);
        push_conv(&mut defs, "dec.1", base, mid, 5);
        push_conv(&mut defs, "out", self.variant.out_channels(), base, 3);
        defs
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.param_defs().iter().map(|d| d.shape.iter().product::<usize>()).sum()
    }
}

/// A network with its weights. Weights are plain tensors; [`Model::bind`]
/// lifts them onto a graph for training or wraps them for inference.
pub struct Model {
    spec: NetworkSpec,
    defs: Vec<ParamDef>,
    tensors: Vec<Tensor<f32>>,
}

impl Model {
    /// Fresh network: Kaiming-normal weights (fan-in, leaky slope 0.2)
    /// shrunk by 0.1, zero biases. Deterministic for a given seed.
    pub fn build(spec: NetworkSpec, seed: u64) -> Model {
        let defs = spec.param_defs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = defs
            .iter()
            .map(|def| {
                if def.name.ends_with(".bias") {
                    Tensor::zeros(&def.shape)
                } else {
                    let fan_in: usize = def.shape[1..].iter().product();
                    let gain = 2.0 / (1.0 + LRELU_SLOPE * LRELU_SLOPE);
                    let std = 0.1 * (gain / fan_in as f64).sqrt();
                    let dist = Normal::new(0.0f64, std).expect("std is positive and finite");
                    let data =
                        (0..def.shape.iter().product()).map(|_| dist.sample(&mut rng) as f32).collect();
                    Tensor::from_vec(&def.shape, data).expect("def shape matches data length")
                }
            })
            .collect();
        Model { spec, defs, tensors }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    /// Parameters as graph leaves (training, gradients retained) or plain
    /// values (inference), in definition order.
    pub fn bind<'g>(&self, graph: Option<&'g Graph<f32>>) -> Vec<Var<'g, f32>> {
        match graph {
            Some(g) => self.tensors.iter().map(|t| g.leaf(t.clone(), true)).collect(),
            None => self.tensors.iter().map(|t| Var::plain(t.clone())).collect(),
        }
    }

    /// One pass through the network. `params` must come from [`Model::bind`]
    /// on this model (same order); `input` is [N,1,H,W] for the luma variant
    /// and [N,3,H,W] (restored Y, Cb, Cr) for the chroma variant, values
    /// normalized to [-1,1]. Output has the same H and W and lies in (-1,1).
    pub fn forward<'g>(&self, params: &[Var<'g, f32>], input: &Var<'g, f32>) -> Result<Var<'g, f32>> {
        if params.len() != self.defs.len() {
            return Err(Error::shape(
                "forward",
                format!("{} params bound, spec has {}", params.len(), self.defs.len()),
            ));
        }
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != self.spec.variant.in_channels() {
            return Err(Error::shape(
                "forward",
                format!(
                    "expected [N,{},H,W], got {:?}",
                    self.spec.variant.in_channels(),
                    shape
                ),
            ));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        if h < MIN_SPATIAL || w < MIN_SPATIAL {
            return Err(Error::shape(
                "forward",
                format!("spatial dims must be at least {MIN_SPATIAL}, got {h}x{w}"),
            ));
        }

        let mut cursor = Cursor { defs: &self.defs, params, pos: 0 };
        let base = self.spec.base_channels;

        let mut x = match self.spec.variant {
            Variant::Y => {
                let (wt, b) = cursor.take("stem");
                input.conv2d(wt, b, 1, 1)?
            }
            Variant::CbCr => {
                // The three channels form a depth-3 volume with one feature
                // channel; zero depth padding collapses depth to 1.
                let volume = input.reshape(&[n, 1, 3, h, w])?;
                let (wt, b) = cursor.take("stem");
                volume.conv3d(wt, b, 1, 0, 1)?.reshape(&[n, base, h, w])?
            }
        };

        let (wt, b) = cursor.take("enc.0");
        x = x.conv2d(wt, b, 1, 2)?.leaky_relu(LRELU_SLOPE)?;
        let (wt, b) = cursor.take("enc.1");
        x = x.conv2d(wt, b, 1, 1)?.leaky_relu(LRELU_SLOPE)?;

        for i in 0..self.spec.n_rrdb {
            let rrdb_in = x.clone();
            for j in 0..DENSE_BLOCKS_PER_RRDB {
                let block_in = x.clone();
                let mut feats = vec![x.clone()];
                for k in 0..CONVS_PER_DENSE_BLOCK {
                    let cat = if feats.len() == 1 {
                        feats[0].clone()
                    } else {
                        Var::concat(&feats, 1)?
                    };
                    let (wt, b) = cursor.take(&format!("rrdb.{i}.db.{j}.conv.{k}"));
                    let y = cat.conv2d(wt, b, 1, 1)?;
                    if k + 1 == CONVS_PER_DENSE_BLOCK {
                        x = block_in.add(&y.scale(RESIDUAL_SCALE)?)?;
                    } else {
                        feats.push(y.leaky_relu(LRELU_SLOPE)?);
                    }
                }
            }
            x = rrdb_in.add(&x.scale(RESIDUAL_SCALE)?)?;
        }

        let (wt, b) = cursor.take("dec.0");
        x = x.conv2d(wt, b, 1, 1)?.leaky_relu(LRELU_SLOPE)?;
        let (wt, b) = cursor.take("dec.1");
        x = x.conv2d(wt, b, 1, 2)?.leaky_relu(LRELU_SLOPE)?;
        let (wt, b) = cursor.take("out");
        x = x.conv2d(wt, b, 1, 1)?.tanh()?;

        debug_assert_eq!(cursor.pos, self.defs.len(), "forward must consume every parameter");
        Ok(x)
    }

    /// Inference without a graph.
    pub fn infer(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let params = self.bind(None);
        Ok(self.forward(&params, &Var::plain(input.clone()))?.to_tensor())
    }

    /// Write all weights with a header identifying the spec.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let wrap = |e: std::io::Error| Error::io(path, e);

        out.write_all(WEIGHT_MAGIC).map_err(wrap)?;
        out.write_u32::<LittleEndian>(WEIGHT_VERSION).map_err(wrap)?;
        let spec = self.spec.canonical();
        out.write_u16::<LittleEndian>(spec.len() as u16).map_err(wrap)?;
        out.write_all(spec.as_bytes()).map_err(wrap)?;
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).map_err(wrap)?;
        for (def, tensor) in self.defs.iter().zip(&self.tensors) {
            out.write_u16::<LittleEndian>(def.name.len() as u16).map_err(wrap)?;
            out.write_all(def.name.as_bytes()).map_err(wrap)?;
            out.write_u8(def.shape.len() as u8).map_err(wrap)?;
            for &e in &def.shape {
                out.write_u32::<LittleEndian>(e as u32).map_err(wrap)?;
            }
            for &v in tensor.data() {
                out.write_f32::<LittleEndian>(v).map_err(wrap)?;
            }
        }
        out.flush().map_err(wrap)
    }

    /// Read weights, taking the network shape from the file header itself.
    pub fn load_auto(path: &Path) -> Result<Model> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let bad = |reason: String| Error::format(path, reason);
        let wrap = |e: std::io::Error| Error::format(path, format!("truncated weight file: {e}"));

        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(wrap)?;
        if &magic != WEIGHT_MAGIC {
            return Err(bad("not a weight file (bad magic)".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(wrap)?;
        if version != WEIGHT_VERSION {
            return Err(bad(format!("unsupported weight format version {version}")));
        }
        let spec_len = input.read_u16::<LittleEndian>().map_err(wrap)? as usize;
        let mut spec_bytes = vec![0u8; spec_len];
        input.read_exact(&mut spec_bytes).map_err(wrap)?;
        let stored = String::from_utf8(spec_bytes).map_err(|_| bad("spec string is not UTF-8".into()))?;
        let spec = NetworkSpec::from_canonical(&stored)
            .map_err(|_| bad(format!("unrecognized network spec '{stored}'")))?;
        drop(input);
        Self::load(path, spec)
    }

    /// Read weights, verifying the header and every tensor against `spec`.
    pub fn load(path: &Path, spec: NetworkSpec) -> Result<Model> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let bad = |reason: String| Error::format(path, reason);
        let wrap = |e: std::io::Error| Error::format(path, format!("truncated weight file: {e}"));

        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(wrap)?;
        if &magic != WEIGHT_MAGIC {
            return Err(bad("not a weight file (bad magic)".into()));
        }
        let version = input.read_u32::<LittleEndian>().map_err(wrap)?;
        if version != WEIGHT_VERSION {
            return Err(bad(format!("unsupported weight format version {version}")));
        }
        let spec_len = input.read_u16::<LittleEndian>().map_err(wrap)? as usize;
        let mut spec_bytes = vec![0u8; spec_len];
        input.read_exact(&mut spec_bytes).map_err(wrap)?;
        let stored = String::from_utf8(spec_bytes).map_err(|_| bad("spec string is not UTF-8".into()))?;
        if stored != spec.canonical() {
            return Err(bad(format!("weights are for '{}', expected '{}'", stored, spec.canonical())));
        }

        let defs = spec.param_defs();
        let count = input.read_u32::<LittleEndian>().map_err(wrap)? as usize;
        if count != defs.len() {
            return Err(bad(format!("{} tensors stored, spec has {}", count, defs.len())));
        }
        let mut tensors = Vec::with_capacity(defs.len());
        for def in &defs {
            let name_len = input.read_u16::<LittleEndian>().map_err(wrap)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            input.read_exact(&mut name_bytes).map_err(wrap)?;
            let name = String::from_utf8(name_bytes).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            if name != def.name {
                return Err(bad(format!("tensor '{}' where '{}' was expected", name, def.name)));
            }
            let rank = input.read_u8().map_err(wrap)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(input.read_u32::<LittleEndian>().map_err(wrap)? as usize);
            }
            if shape != def.shape {
                return Err(bad(format!(
                    "tensor '{}' has shape {:?}, spec requires {:?}",
                    def.name, shape, def.shape
                )));
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f32; len];
            input.read_f32_into::<LittleEndian>(&mut data).map_err(wrap)?;
            tensors.push(Tensor::from_vec(&shape, data).expect("shape matches data length"));
        }
        let mut tail = [0u8; 1];
        match input.read(&mut tail) {
            Ok(0) => {}
            Ok(_) => return Err(bad("trailing bytes after last tensor".into())),
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(Model { spec, defs, tensors })
    }
}

struct Cursor<'a, 'g> {
    defs: &'a [ParamDef],
    params: &'a [Var<'g, f32>],
    pos: usize,
}

impl<'a, 'g> Cursor<'a, 'g> {
    fn take(&mut self, name: &str) -> (&'a Var<'g, f32>, &'a Var<'g, f32>) {
        debug_assert_eq!(self.defs[self.pos].name, format!("{name}.weight"));
        debug_assert_eq!(self.defs[self.pos + 1].name, format!("{name}.bias"));
        let pair = (&self.params[self.pos], &self.params[self.pos + 1]);
        self.pos += 2;
        pair
    }
}

/// Map a pixel value in [0,255] to the network's [-1,1] working range.
pub fn normalize(v: f32) -> f32 {
    v / 127.5 - 1.0
}

/// Inverse of [`normalize`]; the caller clamps where required.
pub fn denormalize(v: f32) -> f32 {
    (v + 1.0) * 127.5
}

fn plane_to_input(planes: &[&[f32]], h: usize, w: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        data.extend(p.iter().map(|&v| normalize(v)));
    }
    Tensor::from_vec(&[1, planes.len(), h, w], data).expect("plane sizes agree")
}

/// Full restoration: luma first, then chroma guided by the restored luma.
pub fn restore(y_model: &Model, c_model: &Model, img: &Image) -> Result<Image> {
    if y_model.spec.variant != Variant::Y || c_model.spec.variant != Variant::CbCr {
        return Err(Error::Config("restore needs a luma model and a chroma model".into()));
    }
    if img.color() != ColorSpace::Rgb {
        return Err(Error::Config("restore expects an RGB image".into()));
    }
    let (w, h) = (img.width(), img.height());
    let ycbcr = img.to_ycbcr()?;

    let y_in = plane_to_input(&[ycbcr.plane(0)], h, w);
    let y_out = y_model.infer(&y_in)?;

    let c_in = {
        let mut data = Vec::with_capacity(3 * h * w);
        data.extend_from_slice(y_out.data());
        data.extend(ycbcr.plane(1).iter().map(|&v| normalize(v)));
        data.extend(ycbcr.plane(2).iter().map(|&v| normalize(v)));
        Tensor::from_vec(&[1, 3, h, w], data).expect("plane sizes agree")
    };
    let c_out = c_model.infer(&c_in)?;

    let mut data = Vec::with_capacity(3 * h * w);
    data.extend(y_out.data().iter().map(|&v| denormalize(v)));
    data.extend(c_out.data().iter().map(|&v| denormalize(v)));
    let restored = Image::from_planes(w, h, ColorSpace::YCbCr, data)?;
    restored.to_rgb()
}
