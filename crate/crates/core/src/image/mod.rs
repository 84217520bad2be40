//! Planar floating-point images on the 0..255 scale and the JFIF color
//! transforms between RGB and YCbCr.
//!
//! Pixels stay floating point through the whole pipeline; quantization to
//! integers happens only at file export. Conversions clamp their output to
//! [0,255]; nothing clamps mid-pipeline.

mod io;

pub use io::{load_image, save_image};

use crate::error::{Error, Result};

/// Interpretation of an image's planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    /// Single luma or generic single-channel plane.
    Gray,
    /// A CbCr pair detached from its luma plane.
    Chroma,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
            ColorSpace::Gray => 1,
            ColorSpace::Chroma => 2,
        }
    }
}

/// Planar image: `data` holds `channels` planes of `width × height` values,
/// plane after plane, rows within a plane stored top to bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    color: ColorSpace,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, color: ColorSpace) -> Self {
        Image { width, height, color, data: vec![0.0; width * height * color.channels()] }
    }

    pub fn from_planes(width: usize, height: usize, color: ColorSpace, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * color.channels() {
            return Err(Error::shape(
                "Image::from_planes",
                format!(
                    "{}x{} {:?} needs {} values, got {}",
                    width,
                    height,
                    color,
                    width * height * color.channels(),
                    data.len()
                ),
            ));
        }
        Ok(Image { width, height, color, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[c * self.width * self.height + y * self.width + x] = v;
    }

    /// True if every sample is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Full-range JFIF/BT.601 transform. Output clamped to [0,255]: pure red
    /// lands on Cr=255.5 and similar saturated inputs overshoot by up to 0.5,
    /// so the round trip is exact only where no clamping fired.
    pub fn to_ycbcr(&self) -> Result<Image> {
        if self.color != ColorSpace::Rgb {
            return Err(Error::Config(format!(
                "rgb_to_ycbcr expects an RGB image, got {:?}",
                self.color
            )));
        }
        let n = self.width * self.height;
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            let (rv, gv, bv) = (r[i] as f64, g[i] as f64, b[i] as f64);
            let y = 0.299 * rv + 0.587 * gv + 0.114 * bv;
            let cb = 128.0 - 0.168736 * rv - 0.331264 * gv + 0.5 * bv;
            let cr = 128.0 + 0.5 * rv - 0.418688 * gv - 0.081312 * bv;
            data[i] = clamp255(y);
            data[n + i] = clamp255(cb);
            data[2 * n + i] = clamp255(cr);
        }
        Ok(Image { width: self.width, height: self.height, color: ColorSpace::YCbCr, data })
    }

    /// Algebraic inverse of [`Image::to_ycbcr`], clamped to [0,255].
    pub fn to_rgb(&self) -> Result<Image> {
        if self.color != ColorSpace::YCbCr {
            return Err(Error::Config(format!(
                "ycbcr_to_rgb expects a YCbCr image, got {:?}",
                self.color
            )));
        }
        let n = self.width * self.height;
        let (y, cb, cr) = (self.plane(0), self.plane(1), self.plane(2));
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            let yv = y[i] as f64;
            let cbv = cb[i] as f64 - 128.0;
            let crv = cr[i] as f64 - 128.0;
            data[i] = clamp255(yv + 1.402 * crv);
            data[n + i] = clamp255(yv - 0.344136 * cbv - 0.714136 * crv);
            data[2 * n + i] = clamp255(yv + 1.772 * cbv);
        }
        Ok(Image { width: self.width, height: self.height, color: ColorSpace::Rgb, data })
    }

    /// Partition into standalone channel images: YCbCr yields a luma plane
    /// plus a CbCr pair, everything else yields one Gray image per channel.
    pub fn split_channels(&self) -> Vec<Image> {
        let n = self.width * self.height;
        match self.color {
            ColorSpace::YCbCr => vec![
                Image {
                    width: self.width,
                    height: self.height,
                    color: ColorSpace::Gray,
                    data: self.data[..n].to_vec(),
                },
                Image {
                    width: self.width,
                    height: self.height,
                    color: ColorSpace::Chroma,
                    data: self.data[n..].to_vec(),
                },
            ],
            _ => (0..self.channels())
                .map(|c| Image {
                    width: self.width,
                    height: self.height,
                    color: if self.channels() == 1 { self.color } else { ColorSpace::Gray },
                    data: self.plane(c).to_vec(),
                })
                .collect(),
        }
    }

    /// Reassemble a YCbCr image from a luma plane and a CbCr pair.
    pub fn merge_luma_chroma(luma: &Image, chroma: &Image) -> Result<Image> {
        if luma.channels() != 1 || chroma.color != ColorSpace::Chroma {
            return Err(Error::Config("merge expects a 1-channel luma image and a Chroma pair".into()));
        }
        if luma.width != chroma.width || luma.height != chroma.height {
            return Err(Error::shape(
                "merge_luma_chroma",
                format!(
                    "luma {}x{} vs chroma {}x{}",
                    luma.width, luma.height, chroma.width, chroma.height
                ),
            ));
        }
        let mut data = Vec::with_capacity(3 * luma.width * luma.height);
        data.extend_from_slice(&luma.data);
        data.extend_from_slice(&chroma.data);
        Ok(Image { width: luma.width, height: luma.height, color: ColorSpace::YCbCr, data })
    }

    /// Round to the nearest integer and clamp to 8 bits, interleaving the
    /// planes in channel order.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let ch = self.channels();
        let mut out = vec![0u8; n * ch];
        for c in 0..ch {
            let plane = self.plane(c);
            for i in 0..n {
                out[i * ch + c] = plane[i].round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

fn clamp255(v: f64) -> f32 {
    v.clamp(0.0, 255.0) as f32
}
