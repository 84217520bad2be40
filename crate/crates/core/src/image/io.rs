//! Raster file I/O: 8-bit PNG via the `image` crate, binary PPM (P6) and
//! PGM (P5) parsed directly. Nothing else is recognized.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{ColorSpace, Image};

/// Load an 8-bit PNG, PPM, or PGM. Alpha channels are dropped with a warning
/// on stderr; bit depths other than 8 are rejected.
pub fn load_image(path: &Path) -> Result<Image> {
    match extension(path) {
        Some("png") => load_png(path),
        Some("ppm") | Some("pgm") | Some("pnm") => load_pnm(path),
        _ => Err(Error::format(path, "unsupported image format (use .png, .ppm, or .pgm)")),
    }
}

/// Save as 8-bit PNG, PPM, or PGM, chosen by extension. Samples are rounded
/// and clamped to 0..255. YCbCr images must be converted before saving.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    match (img.color(), extension(path)) {
        (ColorSpace::YCbCr | ColorSpace::Chroma, _) => Err(Error::Config(format!(
            "cannot save a {:?} image directly; convert to RGB or split first",
            img.color()
        ))),
        (_, Some("png")) => save_png(img, path),
        (ColorSpace::Rgb, Some("ppm")) => save_pnm(img, path, b"P6"),
        (ColorSpace::Gray, Some("pgm")) => save_pnm(img, path, b"P5"),
        (ColorSpace::Gray, Some("ppm")) => Err(Error::Config("PPM holds RGB; save a gray image as .pgm or .png".into())),
        (ColorSpace::Rgb, Some("pgm")) => Err(Error::Config("PGM holds a single channel; save RGB as .ppm or .png".into())),
        _ => Err(Error::format(path, "unsupported output format (use .png, .ppm, or .pgm)")),
    }
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (img, had_alpha) = match dynimg {
        image::DynamicImage::ImageRgb8(buf) => (rgb_from_bytes(buf.width(), buf.height(), buf.as_raw()), false),
        image::DynamicImage::ImageRgba8(buf) => {
            let rgb: Vec<u8> = buf.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2]]).collect();
            (rgb_from_bytes(buf.width(), buf.height(), &rgb), true)
        }
        image::DynamicImage::ImageLuma8(buf) => (gray_from_bytes(buf.width(), buf.height(), buf.as_raw()), false),
        image::DynamicImage::ImageLumaA8(buf) => {
            let gray: Vec<u8> = buf.pixels().map(|p| p.0[0]).collect();
            (gray_from_bytes(buf.width(), buf.height(), &gray), true)
        }
        _ => return Err(Error::format(path, "only 8-bit PNG images are supported")),
    };
    if had_alpha {
        eprintln!("warning: {}: alpha channel dropped", path.display());
    }
    Ok(img)
}

fn rgb_from_bytes(w: u32, h: u32, interleaved: &[u8]) -> Image {
    let n = (w * h) as usize;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = interleaved[i * 3 + c] as f32;
        }
    }
    Image::from_planes(w as usize, h as usize, ColorSpace::Rgb, data).expect("sized above")
}

fn gray_from_bytes(w: u32, h: u32, bytes: &[u8]) -> Image {
    let data = bytes.iter().map(|&v| v as f32).collect();
    Image::from_planes(w as usize, h as usize, ColorSpace::Gray, data).expect("sized above")
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes = img.to_u8_interleaved();
    let kind = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Config("PNG export supports 1 or 3 channels".into())),
    };
    image::save_buffer(path, &bytes, img.width() as u32, img.height() as u32, kind)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn save_pnm(img: &Image, path: &Path, magic: &[u8]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    out.extend_from_slice(&img.to_u8_interleaved());
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn load_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = PnmCursor { bytes: &bytes, pos: 0 };

    let magic = cursor.take(2).ok_or_else(|| Error::format(path, "missing PNM magic"))?;
    let channels = match magic {
        b"P6" => 3usize,
        b"P5" => 1usize,
        _ => return Err(Error::format(path, "only binary PPM (P6) and PGM (P5) are supported")),
    };
    let width = cursor.token(path)?;
    let height = cursor.token(path)?;
    let maxval = cursor.token(path)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {} unsupported; only 8-bit (255)", maxval)));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    cursor.pos += 1;

    let n = width * height;
    let payload = cursor
        .take(n * channels)
        .ok_or_else(|| Error::format(path, "truncated pixel payload"))?;
    let mut data = vec![0.0f32; n * channels];
    for i in 0..n {
        for c in 0..channels {
            data[c * n + i] = payload[i * channels + c] as f32;
        }
    }
    let color = if channels == 3 { ColorSpace::Rgb } else { ColorSpace::Gray };
    Image::from_planes(width, height, color, data)
}

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmCursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(slice)
    }

    /// Next unsigned decimal token, skipping whitespace and `#` comments.
    fn token(&mut self, path: &Path) -> Result<usize> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_digit() => break,
                _ => return Err(Error::format(path, "malformed PNM header")),
            }
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PNM header"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rgb(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * w * h).map(|_| rng.random_range(0..=255u8) as f32).collect();
        Image::from_planes(w, h, ColorSpace::Rgb, data).unwrap()
    }

    #[test]
    fn png_round_trip_is_lossless_for_integer_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = random_rgb(13, 7, 5);
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn ppm_round_trip_is_lossless_for_integer_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = random_rgb(9, 11, 6);
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_is_lossless_for_integer_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = (0..15).map(|_| rng.random_range(0..=255u8) as f32).collect();
        let img = Image::from_planes(5, 3, ColorSpace::Gray, data).unwrap();
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn pnm_comments_and_whitespace_are_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5 # magic\n# a comment line\n 2\t2 #dims\n255\n\x01\x02\x03\x04").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn truncated_pnm_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        fs::write(&path, b"P6\n4 4\n255\nshort").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
    }

    #[test]
    fn non_255_maxval_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn unknown_extension_is_an_error() {
        assert!(load_image(Path::new("/nonexistent/file.bmp")).is_err());
    }
}
