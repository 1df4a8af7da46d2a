//! Radiograph preprocessing: percentile-truncated intensity normalisation,
//! resampling to a standard pixel spacing, left-knee orientation, and the
//! ROI crop that feeds the classifier.
//!
//! Conventions shared by every operation here:
//!
//! * Percentiles interpolate linearly between order statistics (rank
//!   `p/100 * (n-1)`), computed over all pixels of the image.
//! * Interpolation is separable bicubic with the Catmull-Rom kernel
//!   (`a = -0.5`) and clamp-to-edge borders. An output pixel `i` samples the
//!   source at `(i + 0.5) * scale - 0.5`, so pixel centres stay aligned.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::datamodel::Side;
use crate::roi::RoiBox;
use crate::{Error, Result};

pub const STANDARD_SPACING_MM: f64 = 0.2;
pub const CROP_HEIGHT: usize = 128;
pub const CROP_WIDTH: usize = 64;

const CATMULL_ROM_A: f64 = -0.5;
const RAW_MAGIC: &[u8; 4] = b"PFRW";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> u16 {
        match self {
            BitDepth::Eight => u8::MAX as u16,
            BitDepth::Sixteen => u16::MAX,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            BitDepth::Eight => 8,
            BitDepth::Sixteen => 16,
        }
    }
}

/// Grayscale raster, row-major, with isotropic pixel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    spacing: f64,
    depth: BitDepth,
    pixels: Vec<u16>,
}

impl Image {
    pub fn new(width: usize, height: usize, spacing: f64, depth: BitDepth, pixels: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation(format!(
                "image dimensions {width}x{height} must be >= 1"
            )));
        }
        if !(spacing > 0.0) || !spacing.is_finite() {
            return Err(Error::validation(format!("pixel spacing {spacing} must be > 0")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        let max = depth.max_value();
        if let Some(v) = pixels.iter().find(|&&v| v > max) {
            return Err(Error::validation(format!(
                "pixel value {v} exceeds {}-bit range",
                depth.bits()
            )));
        }
        Ok(Image {
            width,
            height,
            spacing,
            depth,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: f64, depth: BitDepth, value: u16) -> Result<Self> {
        Image::new(width, height, spacing, depth, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        spacing: f64,
        depth: BitDepth,
        mut f: impl FnMut(usize, usize) -> u16,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image::new(width, height, spacing, depth, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn depth(&self) -> BitDepth {
        self.depth
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub fn with_spacing(mut self, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::validation(format!("pixel spacing {spacing} must be > 0")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    /// Pixels scaled to `[0, 1]` by the depth's maximum value.
    pub fn to_unit_f64(&self) -> Vec<f64> {
        let max = f64::from(self.depth.max_value());
        self.pixels.iter().map(|&v| f64::from(v) / max).collect()
    }

    fn from_values(width: usize, height: usize, spacing: f64, depth: BitDepth, values: &[f64]) -> Result<Self> {
        let max = f64::from(depth.max_value());
        let pixels = values.iter().map(|&v| v.round().clamp(0.0, max) as u16).collect();
        Image::new(width, height, spacing, depth, pixels)
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Order statistics of 16-bit data via a counting histogram.
struct IntensityHistogram {
    cumulative: Vec<usize>,
    n: usize,
}

impl IntensityHistogram {
    fn new(pixels: &[u16]) -> Self {
        let mut counts = vec![0usize; 1 << 16];
        for &v in pixels {
            counts[v as usize] += 1;
        }
        let mut acc = 0;
        for c in counts.iter_mut() {
            acc += *c;
            *c = acc;
        }
        IntensityHistogram {
            cumulative: counts,
            n: pixels.len(),
        }
    }

    /// The `k`-th smallest value (0-based).
    fn order_statistic(&self, k: usize) -> f64 {
        let idx = self.cumulative.partition_point(|&c| c <= k);
        idx as f64
    }

    fn percentile(&self, p: f64) -> f64 {
        let rank = (p / 100.0).clamp(0.0, 1.0) * (self.n - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = (lo + 1).min(self.n - 1);
        let (a, b) = (self.order_statistic(lo), self.order_statistic(hi));
        a + (rank - lo as f64) * (b - a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub image: Image,
    pub p5: f64,
    pub p99: f64,
    /// Set when the 5th and 99th percentiles coincide; the output is then all zeros.
    pub degenerate: bool,
}

/// Truncates a 16-bit image to its 5th–99th percentile window and rescales it
/// linearly to 8 bits.
pub fn normalize_intensity(img: &Image) -> Result<Normalized> {
    if img.depth != BitDepth::Sixteen {
        return Err(Error::validation("intensity normalisation expects a 16-bit image"));
    }
    let hist = IntensityHistogram::new(&img.pixels);
    let p5 = hist.percentile(5.0);
    let p99 = hist.percentile(99.0);
    let degenerate = !(p99 > p5);
    let pixels = if degenerate {
        log::warn!("zero dynamic range between 5th and 99th percentile ({p5})");
        vec![0u16; img.pixels.len()]
    } else {
        let range = p99 - p5;
        img.pixels
            .iter()
            .map(|&v| {
                let t = ((f64::from(v) - p5) / range).clamp(0.0, 1.0);
                (t * 255.0).round() as u16
            })
            .collect()
    };
    Ok(Normalized {
        image: Image::new(img.width, img.height, img.spacing, BitDepth::Eight, pixels)?,
        p5,
        p99,
        degenerate,
    })
}

/// Catmull-Rom cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate.
#[derive(Debug, Clone, Copy)]
struct Taps {
    index: [usize; 4],
    weight: [f64; 4],
}

fn taps_for_axis(src_len: usize, dst_len: usize, scale: f64) -> Vec<Taps> {
    let last = src_len as isize - 1;
    (0..dst_len)
        .map(|i| {
            let s = (i as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let t = s - base;
            let base = base as isize;
            let mut index = [0usize; 4];
            let mut weight = [0.0; 4];
            for k in 0..4 {
                let offset = k as isize - 1;
                index[k] = (base + offset).clamp(0, last) as usize;
                weight[k] = cubic_kernel(t - offset as f64);
            }
            Taps { index, weight }
        })
        .collect()
}

/// Separable bicubic resize of a row-major `f64` grid. `scale_x`/`scale_y`
/// are source pixels per destination pixel.
pub fn resize_values(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
    scale_x: f64,
    scale_y: f64,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), src_w * src_h);
    let xt = taps_for_axis(src_w, dst_w, scale_x);
    let yt = taps_for_axis(src_h, dst_h, scale_y);

    let mut horizontal = vec![0.0; dst_w * src_h];
    for y in 0..src_h {
        let row = &src[y * src_w..(y + 1) * src_w];
        let out = &mut horizontal[y * dst_w..(y + 1) * dst_w];
        for (o, t) in out.iter_mut().zip(&xt) {
            *o = (0..4).map(|k| t.weight[k] * row[t.index[k]]).sum();
        }
    }

    let mut out = vec![0.0; dst_w * dst_h];
    for (y, t) in yt.iter().enumerate() {
        let dst_row = &mut out[y * dst_w..(y + 1) * dst_w];
        for k in 0..4 {
            let w = t.weight[k];
            let src_row = &horizontal[t.index[k] * dst_w..(t.index[k] + 1) * dst_w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += w * s;
            }
        }
    }
    out
}

/// Output dimensions after resampling from `spacing` to `target`.
pub fn resampled_dims(width: usize, height: usize, spacing: f64, target: f64) -> (usize, usize) {
    let f = spacing / target;
    (
        (width as f64 * f).round() as usize,
        (height as f64 * f).round() as usize,
    )
}

/// Resampled intensities before quantisation: `(width, height, values)`.
pub fn resample_values(img: &Image, target_spacing: f64) -> Result<(usize, usize, Vec<f64>)> {
    if !(target_spacing > 0.0) {
        return Err(Error::validation(format!(
            "target spacing {target_spacing} must be > 0"
        )));
    }
    let (w, h) = resampled_dims(img.width, img.height, img.spacing, target_spacing);
    if w < 1 || h < 1 {
        return Err(Error::validation(format!(
            "resampling {}x{} from {} mm to {target_spacing} mm leaves no pixels",
            img.width, img.height, img.spacing
        )));
    }
    let src: Vec<f64> = img.pixels.iter().map(|&v| f64::from(v)).collect();
    let scale = target_spacing / img.spacing;
    Ok((w, h, resize_values(&src, img.width, img.height, w, h, scale, scale)))
}

/// Resamples to `target_spacing` mm/pixel; values are rounded and clipped to
/// the image's depth range.
pub fn resample(img: &Image, target_spacing: f64) -> Result<Image> {
    if img.spacing == target_spacing {
        return Ok(img.clone());
    }
    let (w, h, values) = resample_values(img, target_spacing)?;
    Image::from_values(w, h, target_spacing, img.depth, &values)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for row in img.pixels.chunks_exact(img.width) {
        pixels.extend(row.iter().rev());
    }
    Image { pixels, ..img.clone() }
}

/// Mirrors right-knee images so every knee shares the left-knee orientation.
pub fn orient_left(img: &Image, side: Side) -> Image {
    match side {
        Side::Left => img.clone(),
        Side::Right => flip_horizontal(img),
    }
}

/// Mirrors a box the same way [`orient_left`] mirrors its image.
pub fn orient_box_left(b: RoiBox, image_width: usize, side: Side) -> RoiBox {
    match side {
        Side::Left => b,
        Side::Right => RoiBox {
            x: image_width as i32 - b.x - b.w as i32,
            ..b
        },
    }
}

/// Region covered by the crop before resizing, in image coordinates. May
/// extend past the image borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRegion {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

/// Grows a box symmetrically about its centre to a 2:1 height:width aspect.
/// When the growth is odd, the extra pixel goes to the right/bottom.
pub fn expand_to_aspect(b: RoiBox) -> CropRegion {
    let w0 = b.w as usize;
    let h0 = b.h as usize;
    let w = w0.max(h0.div_ceil(2));
    let h = 2 * w;
    let dx = (w - w0) / 2;
    let dy = (h - h0) / 2;
    CropRegion {
        x: i64::from(b.x) - dx as i64,
        y: i64::from(b.y) - dy as i64,
        w,
        h,
    }
}

/// Extracts a region as `f64`, filling the parts outside the image with zero.
pub fn crop_padded(img: &Image, region: CropRegion) -> Vec<f64> {
    let mut out = vec![0.0; region.w * region.h];
    for ry in 0..region.h {
        let y = region.y + ry as i64;
        if y < 0 || y >= img.height as i64 {
            continue;
        }
        for rx in 0..region.w {
            let x = region.x + rx as i64;
            if x < 0 || x >= img.width as i64 {
                continue;
            }
            out[ry * region.w + rx] = f64::from(img.get(x as usize, y as usize));
        }
    }
    out
}

fn intersects(img: &Image, b: RoiBox) -> bool {
    let x1 = i64::from(b.x) + i64::from(b.w);
    let y1 = i64::from(b.y) + i64::from(b.h);
    b.w > 0 && b.h > 0 && x1 > 0 && y1 > 0 && i64::from(b.x) < img.width as i64 && i64::from(b.y) < img.height as i64
}

/// Crops the ROI (expanded to 2:1 and zero-padded) and resizes it to
/// `out_h` x `out_w`, which must itself be 2:1.
pub fn crop_resize_to(img: &Image, b: RoiBox, out_h: usize, out_w: usize) -> Result<Image> {
    if !intersects(img, b) {
        return Err(Error::validation(format!(
            "ROI {b:?} does not intersect the {}x{} image",
            img.width, img.height
        )));
    }
    if out_h != 2 * out_w || out_w == 0 {
        return Err(Error::validation(format!("crop output {out_h}x{out_w} is not 2:1")));
    }
    let region = expand_to_aspect(b);
    let values = crop_padded(img, region);
    let scale = region.h as f64 / out_h as f64;
    let spacing = img.spacing * scale;
    if region.h == out_h {
        return Image::from_values(out_w, out_h, spacing, img.depth, &values);
    }
    let resized = resize_values(&values, region.w, region.h, out_w, out_h, scale, scale);
    Image::from_values(out_w, out_h, spacing, img.depth, &resized)
}

/// [`crop_resize_to`] at the classifier input size (128 high, 64 wide).
pub fn crop_resize(img: &Image, b: RoiBox) -> Result<Image> {
    crop_resize_to(img, b, CROP_HEIGHT, CROP_WIDTH)
}

/// Full preprocessing chain for a 16-bit radiograph: normalise to 8 bits,
/// resample to the standard spacing, mirror right knees.
pub fn preprocess(img: &Image, side: Side, target_spacing: f64) -> Result<(Image, bool)> {
    let n = normalize_intensity(img)?;
    let resampled = resample(&n.image, target_spacing)?;
    Ok((orient_left(&resampled, side), n.degenerate))
}

pub fn spacing_sidecar_path(png: &Path) -> PathBuf {
    let mut s = png.as_os_str().to_owned();
    s.push(".spacing");
    PathBuf::from(s)
}

/// Writes an 8- or 16-bit grayscale PNG plus a `<file>.spacing` sidecar.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    match img.depth {
        BitDepth::Eight => {
            let data: Vec<u8> = img.pixels.iter().map(|&v| v as u8).collect();
            image::GrayImage::from_raw(w, h, data)
                .expect("buffer matches dimensions")
                .save(path)?;
        }
        BitDepth::Sixteen => {
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w, h, img.pixels.clone())
                .expect("buffer matches dimensions")
                .save(path)?;
        }
    }
    let sidecar = spacing_sidecar_path(path);
    fs::write(&sidecar, format!("{}\n", img.spacing)).map_err(|e| Error::io(sidecar, e))
}

/// Reads a grayscale PNG. Spacing comes from the sidecar file when present,
/// otherwise from `default_spacing`.
pub fn load_png(path: &Path, default_spacing: Option<f64>) -> Result<Image> {
    let sidecar = spacing_sidecar_path(path);
    let spacing = match fs::read_to_string(&sidecar) {
        Ok(s) => s
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::validation(format!("{}: bad spacing: {e}", sidecar.display())))?,
        Err(_) => default_spacing.ok_or_else(|| {
            Error::validation(format!("{}: no spacing sidecar and no default spacing", path.display()))
        })?,
    };
    let dynamic = image::open(path)?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    match dynamic {
        image::DynamicImage::ImageLuma8(buf) => Image::new(
            w,
            h,
            spacing,
            BitDepth::Eight,
            buf.into_raw().into_iter().map(u16::from).collect(),
        ),
        image::DynamicImage::ImageLuma16(buf) => Image::new(w, h, spacing, BitDepth::Sixteen, buf.into_raw()),
        other => Err(Error::validation(format!(
            "{}: unsupported pixel format {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Raw container: magic `PFRW`, little-endian u32 width and height, u8 bit
/// depth, f64 spacing, then u16 pixels.
pub fn save_raw(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(21 + 2 * img.pixels.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.push(img.depth.bits());
    buf.extend_from_slice(&img.spacing.to_le_bytes());
    for &v in &img.pixels {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: &Path) -> Result<Image> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::validation(format!("{}: {m}", path.display()));
    if buf.len() < 21 || &buf[..4] != RAW_MAGIC {
        return Err(bad("not a raw image container"));
    }
    let width = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let depth = match buf[12] {
        8 => BitDepth::Eight,
        16 => BitDepth::Sixteen,
        d => return Err(bad(&format!("unsupported bit depth {d}"))),
    };
    let spacing = f64::from_le_bytes(buf[13..21].try_into().unwrap());
    let body = &buf[21..];
    if body.len() != 2 * width * height {
        return Err(bad("pixel payload length does not match dimensions"));
    }
    let pixels = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    Image::new(width, height, spacing, depth, pixels)
}
