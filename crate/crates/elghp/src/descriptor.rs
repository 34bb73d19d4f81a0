//! Gradient hexa pattern descriptors.
//!
//! At every pixel the descriptor compares first-order directional derivative
//! responses for the six unordered pairs ("hexa") of four derivative
//! directions. Each comparison over a reference pixel and its eight
//! square-ring neighbors yields a 9-bit code; per-(pair, radius) code
//! histograms of 512 bins are concatenated into the final feature vector.
//!
//! Two angle families are supported through the angular multiplier `delta`:
//! `delta = 1` uses 0°, 45°, 90°, 135° (the LGHP base case) and `delta = 2`
//! uses 0°, 90°, 180°, 270° (ELGHP).

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::imageio::GrayImage;

/// Histogram bin count; codes are 9-bit (reference pixel plus 8 neighbors).
pub const BINS: usize = 512;

/// Number of unordered pairs of the four derivative directions.
pub const PAIR_COUNT: usize = 6;

/// Canonical pair order over direction indices 0..4.
pub const ANGLE_PAIRS: [(usize, usize); PAIR_COUNT] =
    [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Unit square-ring offsets in (dx, dy), clockwise from the top-left corner.
/// At radius `d` each component is scaled by `d`.
pub const RING: [(isize, isize); 8] =
    [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

#[derive(Debug, Error)]
pub enum DescriptorError {
    #[error("angular multiplier must be 1 or 2, got {0}")]
    InvalidDelta(u8),
    #[error("radius must be at least 1")]
    InvalidRadius,
    #[error("radii must be nonempty, strictly increasing, and at least 1")]
    InvalidRadii,
    #[error("angle index must be in 0..4, got {0}")]
    InvalidAngle(usize),
    #[error("pair index must be in 0..6, got {0}")]
    InvalidPair(usize),
    #[error(
        "no valid region: {width}x{height} image needs at least {min}x{min} for radius {radius}"
    )]
    NoValidRegion { width: usize, height: usize, radius: usize, min: usize },
    #[error("pixel ({x},{y}) lies outside the valid region for radius {radius}")]
    OutsideValidRegion { x: usize, y: usize, radius: usize },
}

/// Descriptor parameters: angular multiplier and the square-ring radii.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptorConfig {
    delta: u8,
    radii: Vec<usize>,
}

impl DescriptorConfig {
    /// `delta` must be 1 or 2; `radii` nonempty, strictly increasing, each >= 1.
    pub fn new(delta: u8, radii: Vec<usize>) -> Result<Self, DescriptorError> {
        angle_offsets(delta)?;
        if radii.is_empty() || radii[0] == 0 || !radii.windows(2).all(|w| w[0] < w[1]) {
            return Err(DescriptorError::InvalidRadii);
        }
        Ok(Self { delta, radii })
    }

    #[inline]
    pub fn delta(&self) -> u8 {
        self.delta
    }

    #[inline]
    pub fn radii(&self) -> &[usize] {
        &self.radii
    }

    pub fn max_radius(&self) -> usize {
        *self.radii.last().expect("radii validated nonempty")
    }

    /// Length of the feature vectors this configuration produces.
    pub fn feature_len(&self) -> usize {
        BINS * PAIR_COUNT * self.radii.len()
    }

    /// Smallest image side that leaves a nonempty valid region.
    pub fn min_image_side(&self) -> usize {
        4 * self.max_radius() + 1
    }
}

impl Default for DescriptorConfig {
    /// Extended angles (`delta = 2`) over radii 1, 2, 3.
    fn default() -> Self {
        Self { delta: 2, radii: vec![1, 2, 3] }
    }
}

/// The four derivative directions for a given angular multiplier, as unit
/// offsets on the square grid (x rightward, y downward).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AngleSet {
    delta: u8,
    offsets: [(isize, isize); 4],
}

impl AngleSet {
    #[inline]
    pub fn delta(&self) -> u8 {
        self.delta
    }

    #[inline]
    pub fn offsets(&self) -> &[(isize, isize); 4] {
        &self.offsets
    }
}

/// Directions α = delta×0°, delta×45°, delta×90°, delta×135°, in that index
/// order: 0°→(+1,0), 45°→(+1,−1), 90°→(0,−1), 135°→(−1,−1), 180°→(−1,0),
/// 270°→(0,+1).
pub fn angle_offsets(delta: u8) -> Result<AngleSet, DescriptorError> {
    let offsets = match delta {
        1 => [(1, 0), (1, -1), (0, -1), (-1, -1)],
        2 => [(1, 0), (0, -1), (-1, 0), (0, 1)],
        other => return Err(DescriptorError::InvalidDelta(other)),
    };
    Ok(AngleSet { delta, offsets })
}

/// First-order directional derivative G over an image: at each pixel Z the
/// value is I(Z) − I(Z + d·offset(angle)), defined wherever the offset
/// target is in bounds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivativeField {
    angle: usize,
    radius: usize,
    offset: (isize, isize),
    width: usize,
    height: usize,
    values: Vec<i16>,
}

impl DerivativeField {
    #[inline]
    pub fn angle(&self) -> usize {
        self.angle
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Derivative value at (x, y), or `None` where the offset neighbor falls
    /// outside the image.
    pub fn get(&self, x: usize, y: usize) -> Option<i16> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let tx = x as isize + self.offset.0;
        let ty = y as isize + self.offset.1;
        if tx < 0 || ty < 0 || tx as usize >= self.width || ty as usize >= self.height {
            return None;
        }
        Some(self.values[y * self.width + x])
    }

    #[inline]
    fn raw(&self, x: usize, y: usize) -> i16 {
        self.values[y * self.width + x]
    }
}

/// Compute G_{angle,d} for the whole image.
pub fn derivative_field(
    img: &GrayImage,
    angle: usize,
    d: usize,
    delta: u8,
) -> Result<DerivativeField, DescriptorError> {
    let set = angle_offsets(delta)?;
    if angle >= 4 {
        return Err(DescriptorError::InvalidAngle(angle));
    }
    if d == 0 {
        return Err(DescriptorError::InvalidRadius);
    }
    let (ux, uy) = set.offsets()[angle];
    let (dx, dy) = (ux * d as isize, uy * d as isize);
    let (w, h) = (img.width(), img.height());
    let mut values = vec![0i16; w * h];
    for y in 0..h {
        for x in 0..w {
            let tx = x as isize + dx;
            let ty = y as isize + dy;
            if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                values[y * w + x] =
                    img.get(x, y) as i16 - img.get(tx as usize, ty as usize) as i16;
            }
        }
    }
    Ok(DerivativeField { angle, radius: d, offset: (dx, dy), width: w, height: h, values })
}

/// One comparison bit: 1 iff `ga` strictly exceeds `gb`; ties encode to 0.
#[inline]
pub fn encode(ga: i16, gb: i16) -> u16 {
    (ga > gb) as u16
}

/// Per-(pair, radius) map of 9-bit codes over the valid region of an image.
///
/// The valid region excludes a border of width 2d (one d for the ring
/// neighbor, one more for its derivative offset).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMap {
    pair: usize,
    radius: usize,
    valid_width: usize,
    valid_height: usize,
    codes: Vec<u16>,
}

impl CodeMap {
    #[inline]
    pub fn pair(&self) -> usize {
        self.pair
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn valid_width(&self) -> usize {
        self.valid_width
    }

    #[inline]
    pub fn valid_height(&self) -> usize {
        self.valid_height
    }

    /// Codes row-major over the valid region.
    #[inline]
    pub fn codes(&self) -> &[u16] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn check_valid_region(img: &GrayImage, d: usize) -> Result<(), DescriptorError> {
    let min = 4 * d + 1;
    if img.width() < min || img.height() < min {
        return Err(DescriptorError::NoValidRegion {
            width: img.width(),
            height: img.height(),
            radius: d,
            min,
        });
    }
    Ok(())
}

/// 9-bit code at a single pixel, recomputed from raw intensities.
///
/// Bit 8 (most significant) compares the two derivatives at `p` itself;
/// bits 7..0 walk the ring-`d` neighbors clockwise from the top-left corner.
pub fn code_at(
    img: &GrayImage,
    p: (usize, usize),
    pair: usize,
    d: usize,
    delta: u8,
) -> Result<u16, DescriptorError> {
    let set = angle_offsets(delta)?;
    if d == 0 {
        return Err(DescriptorError::InvalidRadius);
    }
    let &(a, b) = ANGLE_PAIRS.get(pair).ok_or(DescriptorError::InvalidPair(pair))?;
    let (x, y) = p;
    let m = 2 * d;
    if x < m || y < m || x + m >= img.width() || y + m >= img.height() {
        return Err(DescriptorError::OutsideValidRegion { x, y, radius: d });
    }
    let step = |(ux, uy): (isize, isize)| (ux * d as isize, uy * d as isize);
    let oa = step(set.offsets()[a]);
    let ob = step(set.offsets()[b]);
    let deriv = |px: usize, py: usize, (dx, dy): (isize, isize)| -> i16 {
        let tx = (px as isize + dx) as usize;
        let ty = (py as isize + dy) as usize;
        img.get(px, py) as i16 - img.get(tx, ty) as i16
    };
    let bit = |px: usize, py: usize| encode(deriv(px, py, oa), deriv(px, py, ob));
    let mut code = bit(x, y);
    for &(rx, ry) in &RING {
        let nx = (x as isize + rx * d as isize) as usize;
        let ny = (y as isize + ry * d as isize) as usize;
        code = (code << 1) | bit(nx, ny);
    }
    Ok(code)
}

/// Codes for every valid-region pixel of one (pair, radius) combination.
pub fn code_map(
    img: &GrayImage,
    pair: usize,
    d: usize,
    delta: u8,
) -> Result<CodeMap, DescriptorError> {
    if d == 0 {
        return Err(DescriptorError::InvalidRadius);
    }
    let &(a, b) = ANGLE_PAIRS.get(pair).ok_or(DescriptorError::InvalidPair(pair))?;
    check_valid_region(img, d)?;
    let fa = derivative_field(img, a, d, delta)?;
    let fb = derivative_field(img, b, d, delta)?;
    Ok(code_map_inner(&fa, &fb, pair, d))
}

/// Shared core of [`code_map`] and [`extract_features`]: both derivative
/// fields are precomputed, so each pixel costs 9 comparisons and no
/// re-derivation.
fn code_map_inner(fa: &DerivativeField, fb: &DerivativeField, pair: usize, d: usize) -> CodeMap {
    debug_assert_eq!((fa.width, fa.height), (fb.width, fb.height));
    let (w, h) = (fa.width, fa.height);
    let m = 2 * d;
    let valid_width = w - 4 * d;
    let valid_height = h - 4 * d;
    let mut codes = Vec::with_capacity(valid_width * valid_height);
    for y in m..h - m {
        for x in m..w - m {
            let mut code = encode(fa.raw(x, y), fb.raw(x, y));
            for &(rx, ry) in &RING {
                let nx = (x as isize + rx * d as isize) as usize;
                let ny = (y as isize + ry * d as isize) as usize;
                code = (code << 1) | encode(fa.raw(nx, ny), fb.raw(nx, ny));
            }
            codes.push(code);
        }
    }
    CodeMap { pair, radius: d, valid_width, valid_height, codes }
}

/// 512-bin occurrence histogram of a code map.
pub fn histogram(map: &CodeMap) -> [u32; BINS] {
    let mut counts = [0u32; BINS];
    for &code in map.codes() {
        counts[code as usize] += 1;
    }
    counts
}

/// Concatenated histogram features: 512 bins × 6 pairs × |radii|.
///
/// Layout is radius-major, then pair index, then bin, so the radii-[1]
/// vector is a prefix of the radii-[1,2,3] vector for the same image.
#[derive(Clone, PartialEq, Eq)]
pub struct FeatureVector {
    counts: Vec<u32>,
}

impl FeatureVector {
    pub fn new(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    #[inline]
    pub fn counts(&self) -> &[u32] {
        &self.counts
    }
}

impl fmt::Debug for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nonzero = self.counts.iter().filter(|&&c| c != 0).count();
        write!(f, "FeatureVector(len={}, nonzero={})", self.counts.len(), nonzero)
    }
}

/// Full descriptor: for each radius, all six pair histograms concatenated in
/// canonical order.
pub fn extract_features(
    img: &GrayImage,
    cfg: &DescriptorConfig,
) -> Result<FeatureVector, DescriptorError> {
    let mut counts = Vec::with_capacity(cfg.feature_len());
    for &d in cfg.radii() {
        check_valid_region(img, d)?;
        let mut fields = Vec::with_capacity(4);
        for angle in 0..4 {
            fields.push(derivative_field(img, angle, d, cfg.delta())?);
        }
        for (pair, &(a, b)) in ANGLE_PAIRS.iter().enumerate() {
            let map = code_map_inner(&fields[a], &fields[b], pair, d);
            counts.extend_from_slice(&histogram(&map));
        }
    }
    Ok(FeatureVector::new(counts))
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

pub(crate) fn take_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let end = pos.checked_add(4)?;
    let chunk = bytes.get(*pos..end)?;
    *pos = end;
    Some(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
}

/// Append a count block: 4-byte big-endian length, then that many 4-byte
/// big-endian values. This is both the feature-cache layout and the wire
/// layout for feature vectors.
pub(crate) fn put_counts(out: &mut Vec<u8>, counts: &[u32]) {
    put_u32(out, counts.len() as u32);
    for &c in counts {
        put_u32(out, c);
    }
}

pub(crate) fn take_counts(bytes: &[u8], pos: &mut usize) -> Option<Vec<u32>> {
    let len = take_u32(bytes, pos)? as usize;
    let need = len.checked_mul(4)?;
    if bytes.len().saturating_sub(*pos) < need {
        return None;
    }
    let mut counts = Vec::with_capacity(len);
    for _ in 0..len {
        counts.push(take_u32(bytes, pos).expect("bounds pre-checked"));
    }
    Some(counts)
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("truncated feature cache record")]
    Truncated,
    #[error("image name in cache is not valid UTF-8")]
    NameNotUtf8,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Write named feature vectors as cache records: name length (4-byte
/// big-endian), name bytes, then the count block.
pub fn write_feature_cache<W: Write>(
    mut w: W,
    records: &[(String, FeatureVector)],
) -> io::Result<()> {
    let mut buf = Vec::new();
    for (name, features) in records {
        buf.clear();
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_counts(&mut buf, features.counts());
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Read cache records until end of input.
pub fn read_feature_cache<R: Read>(mut r: R) -> Result<Vec<(String, FeatureVector)>, CacheError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut records = Vec::new();
    while pos < bytes.len() {
        let name_len = take_u32(&bytes, &mut pos).ok_or(CacheError::Truncated)? as usize;
        let end = pos
            .checked_add(name_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(CacheError::Truncated)?;
        let name = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| CacheError::NameNotUtf8)?
            .to_owned();
        pos = end;
        let counts = take_counts(&bytes, &mut pos).ok_or(CacheError::Truncated)?;
        records.push((name, FeatureVector::new(counts)));
    }
    Ok(records)
}
