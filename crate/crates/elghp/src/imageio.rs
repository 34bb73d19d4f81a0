//! Grayscale images, binary PGM (P5) parsing/writing, and the canonical
//! 64x64 bilinear resize that all descriptor math runs on.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Side length of the canonical square image fed to the descriptor.
pub const CANONICAL_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {actual} bytes, expected width*height = {expected}")]
    PixelCountMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("unsupported magic {found:?}, only binary PGM (\"P5\") is accepted")]
    UnsupportedMagic { found: String },
    #[error("unsupported maxval {0}, must be at most 255")]
    UnsupportedMaxval(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 8-bit grayscale raster, row-major, immutable after construction.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImageError::PixelCountMismatch {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    /// Build an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image must be at least 1x1");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Intensity at column `x`, row `y`. Panics if out of bounds.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        assert!(x < self.width && y < self.height, "pixel ({x},{y}) out of bounds");
        self.pixels[y * self.width + x]
    }

    pub fn is_canonical(&self) -> bool {
        self.width == CANONICAL_SIZE && self.height == CANONICAL_SIZE
    }
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

/// Parse a binary PGM (magic "P5", maxval <= 255) from raw bytes.
///
/// Header comments (from '#' to end of line) are skipped. Pixel bytes are
/// copied through untouched.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let mut scan = HeaderScanner { bytes, pos: 0 };

    let magic = scan.token("missing magic")?;
    if magic != b"P5" {
        return Err(PgmError::UnsupportedMagic {
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }

    let width = scan.number("width")?;
    let height = scan.number("height")?;
    if width == 0 {
        return Err(PgmError::MalformedHeader("width must be positive"));
    }
    if height == 0 {
        return Err(PgmError::MalformedHeader("height must be positive"));
    }
    let maxval = scan.number("maxval")?;
    if maxval == 0 {
        return Err(PgmError::MalformedHeader("maxval must be positive"));
    }
    if maxval > 255 {
        return Err(PgmError::UnsupportedMaxval(maxval));
    }

    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(scan.pos) {
        Some(b) if b.is_ascii_whitespace() => scan.pos += 1,
        _ => return Err(PgmError::MalformedHeader("expected single whitespace after maxval")),
    }

    let expected = (width as usize) * (height as usize);
    let data = &bytes[scan.pos..];
    if data.len() < expected {
        return Err(PgmError::TruncatedData { expected, actual: data.len() });
    }
    Ok(GrayImage::new(width as usize, height as usize, data[..expected].to_vec())?)
}

pub fn load_pgm_file(path: impl AsRef<Path>) -> Result<GrayImage, PgmError> {
    let bytes = fs::read(path)?;
    load_pgm(&bytes)
}

/// Serialize an image as binary PGM.
pub fn write_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> io::Result<()> {
    fs::write(path, write_pgm(img))
}

/// Load a PGM file and resize it to the canonical raster.
pub fn load_canonical(path: impl AsRef<Path>) -> Result<GrayImage, PgmError> {
    Ok(resize_to_canonical(&load_pgm_file(path)?))
}

struct HeaderScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderScanner<'a> {
    fn skip_separators(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => return,
            }
        }
    }

    fn token(&mut self, missing: &'static str) -> Result<&'a [u8], PgmError> {
        self.skip_separators();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if self.pos == start {
            return Err(PgmError::MalformedHeader(missing));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, field: &'static str) -> Result<u32, PgmError> {
        let tok = self.token(field)?;
        let mut value: u32 = 0;
        for &b in tok {
            if !b.is_ascii_digit() {
                return Err(PgmError::MalformedHeader(field));
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as u32))
                .ok_or(PgmError::MalformedHeader(field))?;
        }
        Ok(value)
    }
}

/// Resize to the canonical 64x64 raster.
///
/// Bilinear interpolation with half-pixel-center sampling; results are
/// rounded to the nearest integer and clamped to [0, 255]. A 64x64 input
/// passes through bit-exact.
pub fn resize_to_canonical(img: &GrayImage) -> GrayImage {
    resize_bilinear(img, CANONICAL_SIZE, CANONICAL_SIZE)
}

fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    let (in_w, in_h) = (img.width(), img.height());
    let scale_x = in_w as f64 / out_w as f64;
    let scale_y = in_h as f64 / out_h as f64;
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (in_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (in_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;

            let p00 = img.get(x0, y0) as f64;
            let p10 = img.get(x1, y0) as f64;
            let p01 = img.get(x0, y1) as f64;
            let p11 = img.get(x1, y1) as f64;
            let value = (1.0 - fx) * (1.0 - fy) * p00
                + fx * (1.0 - fy) * p10
                + (1.0 - fx) * fy * p01
                + fx * fy * p11;
            pixels.push(value.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage { width: out_w, height: out_h, pixels }
}
