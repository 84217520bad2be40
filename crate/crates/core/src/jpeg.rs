//! JPEG degradation simulator.
//!
//! Reproduces the lossy stages of a baseline JPEG encoder/decoder pair:
//! 8x8 block DCT, quality-scaled quantization against the IJG Annex-K
//! tables, and 4:2:0 bilinear chroma resampling. Entropy coding is omitted;
//! it is lossless and contributes nothing to the artifacts. No bitstream is
//! produced, the output is the image a decoder would reconstruct.
//!
//! All arithmetic runs in f64 and is sequential, so a given input and
//! quality factor always reproduce the same output bit for bit.

use crate::error::{Error, Result};
use crate::image::{ColorSpace, Image};

/// Level shift applied before the forward DCT and undone after the inverse.
pub const LEVEL_SHIFT: f64 = 128.0;

/// Annex-K luminance table, row major.
pub const BASE_LUMA: [u8; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex-K chrominance table, row major.
pub const BASE_CHROMA: [u8; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKind {
    Luma,
    Chroma,
}

/// JPEG quality factor, 1 (worst) to 100 (near lossless).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct QualityFactor(u8);

impl QualityFactor {
    pub fn new(qf: u8) -> Result<Self> {
        if (1..=100).contains(&qf) {
            Ok(QualityFactor(qf))
        } else {
            Err(Error::Config(format!("quality factor {} outside 1..=100", qf)))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

/// 8x8 quantization table; entries stay in [1,255].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTable {
    pub kind: TableKind,
    pub values: [u8; 64],
}

impl QuantTable {
    pub fn base(kind: TableKind) -> Self {
        let values = match kind {
            TableKind::Luma => BASE_LUMA,
            TableKind::Chroma => BASE_CHROMA,
        };
        QuantTable { kind, values }
    }

    /// IJG scaling: s = 5000/qf below 50, else 200-2*qf; each entry becomes
    /// floor((entry*s + 50)/100) clamped to [1,255].
    pub fn scaled(kind: TableKind, qf: QualityFactor) -> Self {
        let base = Self::base(kind);
        let qf = qf.get() as u32;
        let s = if qf < 50 { 5000 / qf } else { 200 - 2 * qf };
        let mut values = [0u8; 64];
        for (v, &b) in values.iter_mut().zip(base.values.iter()) {
            *v = ((b as u32 * s + 50) / 100).clamp(1, 255) as u8;
        }
        QuantTable { kind, values }
    }
}

/// 8x8 block of DCT-II coefficients in the orthonormal basis, row major.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBlock(pub [f64; 64]);

/// Orthonormal DCT-II basis: row k holds alpha(k)*cos(pi*(2n+1)*k/16).
fn dct_basis() -> [f64; 64] {
    let mut c = [0.0; 64];
    for k in 0..8 {
        let alpha = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for n in 0..8 {
            c[k * 8 + n] = alpha * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    c
}

/// Forward 2D DCT-II of a level-shifted 8x8 block: F = C (X - 128) C^T.
pub fn forward_dct(samples: &[f64; 64]) -> DctBlock {
    let c = dct_basis();
    let mut shifted = [0.0; 64];
    for i in 0..64 {
        shifted[i] = samples[i] - LEVEL_SHIFT;
    }
    let tmp = mat8_mul(&c, &shifted);
    let mut out = [0.0; 64];
    // (C X) C^T: out[u][v] = sum_n tmp[u][n] * c[v][n]
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for n in 0..8 {
                acc += tmp[u * 8 + n] * c[v * 8 + n];
            }
            out[u * 8 + v] = acc;
        }
    }
    DctBlock(out)
}

/// Inverse of [`forward_dct`]: X = C^T F C + 128.
pub fn inverse_dct(block: &DctBlock) -> [f64; 64] {
    let c = dct_basis();
    // C^T F: tmp[n][v] = sum_u c[u][n] * F[u][v]
    let mut tmp = [0.0; 64];
    for n in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += c[u * 8 + n] * block.0[u * 8 + v];
            }
            tmp[n * 8 + v] = acc;
        }
    }
    let mut out = [0.0; 64];
    for n in 0..8 {
        for m in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                acc += tmp[n * 8 + v] * c[v * 8 + m];
            }
            out[n * 8 + m] = acc + LEVEL_SHIFT;
        }
    }
    out
}

fn mat8_mul(a: &[f64; 64], b: &[f64; 64]) -> [f64; 64] {
    let mut out = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += a[i * 8 + k] * b[k * 8 + j];
            }
            out[i * 8 + j] = acc;
        }
    }
    out
}

/// Divide by the table and round to the nearest integer (half away from zero).
pub fn quantize(block: &DctBlock, table: &QuantTable) -> DctBlock {
    let mut out = [0.0; 64];
    for i in 0..64 {
        out[i] = (block.0[i] / table.values[i] as f64).round();
    }
    DctBlock(out)
}

/// Multiply quantized levels back by the table.
pub fn dequantize(block: &DctBlock, table: &QuantTable) -> DctBlock {
    let mut out = [0.0; 64];
    for i in 0..64 {
        out[i] = block.0[i] * table.values[i] as f64;
    }
    DctBlock(out)
}

/// 2x box downsample (the bilinear kernel at aligned 4:2:0 positions).
/// Odd dimensions are first extended by edge replication.
pub fn subsample_chroma(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let w2 = w.div_ceil(2);
    let h2 = h.div_ceil(2);
    let mut out = vec![0.0; w2 * h2];
    for oy in 0..h2 {
        for ox in 0..w2 {
            let x0 = 2 * ox;
            let y0 = 2 * oy;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            out[oy * w2 + ox] =
                0.25 * (plane[y0 * w + x0] + plane[y0 * w + x1] + plane[y1 * w + x0] + plane[y1 * w + x1]);
        }
    }
    (out, w2, h2)
}

/// Center-aligned bilinear resize back to the full resolution. Exactly
/// inverts [`subsample_chroma`] on affine content away from the borders.
pub fn upsample_chroma(plane: &[f64], w: usize, h: usize, tw: usize, th: usize) -> Vec<f64> {
    let mut out = vec![0.0; tw * th];
    let sx = w as f64 / tw as f64;
    let sy = h as f64 / th as f64;
    for oy in 0..th {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..tw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
            let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
            out[oy * tw + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Extend a plane to multiples of `m` by replicating the last row/column.
fn pad_to_multiple(plane: &[f64], w: usize, h: usize, m: usize) -> (Vec<f64>, usize, usize) {
    let pw = w.div_ceil(m) * m;
    let ph = h.div_ceil(m) * m;
    if pw == w && ph == h {
        return (plane.to_vec(), w, h);
    }
    let mut out = vec![0.0; pw * ph];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            out[y * pw + x] = plane[sy * w + x.min(w - 1)];
        }
    }
    (out, pw, ph)
}

/// Run one plane through DCT, quantization, and reconstruction in 8x8 tiles.
fn code_plane(plane: &[f64], w: usize, h: usize, table: &QuantTable) -> Vec<f64> {
    let (padded, pw, ph) = pad_to_multiple(plane, w, h, 8);
    let mut coded = vec![0.0; pw * ph];
    let mut block = [0.0f64; 64];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for r in 0..8 {
                block[r * 8..r * 8 + 8].copy_from_slice(&padded[(by + r) * pw + bx..(by + r) * pw + bx + 8]);
            }
            let rec = inverse_dct(&dequantize(&quantize(&forward_dct(&block), table), table));
            for r in 0..8 {
                coded[(by + r) * pw + bx..(by + r) * pw + bx + 8].copy_from_slice(&rec[r * 8..r * 8 + 8]);
            }
        }
    }
    if pw == w && ph == h {
        coded
    } else {
        let mut cropped = vec![0.0; w * h];
        for y in 0..h {
            cropped[y * w..(y + 1) * w].copy_from_slice(&coded[y * pw..y * pw + w]);
        }
        cropped
    }
}

/// Simulate a compress/decompress round trip at the given quality factor:
/// RGB to YCbCr, blockwise coding of Y with the luma table, 4:2:0 coding of
/// Cb/Cr with the chroma table, and conversion back to RGB.
pub fn degrade(img: &Image, qf: QualityFactor) -> Result<Image> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Config("cannot degrade an empty image".into()));
    }
    let ycbcr = img.to_ycbcr()?;
    let (w, h) = (img.width(), img.height());
    let luma_table = QuantTable::scaled(TableKind::Luma, qf);
    let chroma_table = QuantTable::scaled(TableKind::Chroma, qf);

    let mut out = Vec::with_capacity(3 * w * h);
    for c in 0..3 {
        let plane: Vec<f64> = ycbcr.plane(c).iter().map(|&v| v as f64).collect();
        let coded = if c == 0 {
            code_plane(&plane, w, h, &luma_table)
        } else {
            let (small, sw, sh) = subsample_chroma(&plane, w, h);
            let coded_small = code_plane(&small, sw, sh, &chroma_table);
            upsample_chroma(&coded_small, sw, sh, w, h)
        };
        out.extend(coded.iter().map(|&v| v as f32));
    }
    Image::from_planes(w, h, ColorSpace::YCbCr, out)?.to_rgb()
}
