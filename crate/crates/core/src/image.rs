//! Image planes, colour conversion, classical resampling and quality metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Read access shared by 8-bit and real-valued planes.
pub trait PlaneView: Sync {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
    fn at(&self, row: usize, col: usize) -> f64;

    /// Value with replicate padding for out-of-range coordinates.
    #[inline]
    fn at_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height() as isize - 1) as usize;
        let c = col.clamp(0, self.width() as isize - 1) as usize;
        self.at(r, c)
    }
}

/// Row-major 8-bit intensity plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_input(format!(
                "plane data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    pub fn to_float(&self) -> FloatPlane {
        FloatPlane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }

    /// Top-left crop.
    pub fn crop(&self, height: usize, width: usize) -> Result<Plane> {
        if height > self.height || width > self.width {
            return Err(invalid_input("crop larger than plane"));
        }
        Ok(Plane::from_fn(height, width, |r, c| self.get(r, c)))
    }

    /// Crops to dimensions divisible by `factor`.
    pub fn crop_to_multiple(&self, factor: usize) -> Result<Plane> {
        let factor = factor.max(1);
        self.crop(self.height / factor * factor, self.width / factor * factor)
    }

    /// Removes `border` pixels on every side.
    pub fn shave(&self, border: usize) -> Result<Plane> {
        if 2 * border >= self.height.min(self.width) {
            return Err(invalid_input(format!(
                "border {border} too large for {}x{} plane",
                self.height, self.width
            )));
        }
        Ok(Plane::from_fn(
            self.height - 2 * border,
            self.width - 2 * border,
            |r, c| self.get(r + border, c + border),
        ))
    }

    /// Counter-clockwise rotation by `quarter_turns` × 90°.
    pub fn rotate90(&self, quarter_turns: u32) -> Plane {
        let (height, width, data) = rotate_buf(&self.data, self.height, self.width, quarter_turns);
        Plane {
            height,
            width,
            data,
        }
    }
}

impl PlaneView for Plane {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    #[inline]
    fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col] as f64
    }
}

/// Row-major real-valued plane (un-quantized features, gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatPlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatPlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_input(format!(
                "float plane data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut f64 {
        &mut self.data[row * self.width + col]
    }

    /// Round half away from zero and clamp into 8 bits.
    pub fn quantize(&self) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize_u8(v)).collect(),
        }
    }

    pub fn rotate90(&self, quarter_turns: u32) -> FloatPlane {
        let (height, width, data) = rotate_buf(&self.data, self.height, self.width, quarter_turns);
        FloatPlane {
            height,
            width,
            data,
        }
    }
}

impl PlaneView for FloatPlane {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
    #[inline]
    fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Round half away from zero, clamped to `[0, 255]`.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Counter-clockwise quarter-turn rotation of a row-major buffer.
/// A CCW turn maps source `(r, c)` to `(w - 1 - c, r)`.
pub(crate) fn rotate_buf<T: Copy>(
    data: &[T],
    height: usize,
    width: usize,
    quarter_turns: u32,
) -> (usize, usize, Vec<T>) {
    match quarter_turns % 4 {
        0 => (height, width, data.to_vec()),
        1 => {
            let mut out = Vec::with_capacity(data.len());
            for r in 0..width {
                for c in 0..height {
                    out.push(data[c * width + (width - 1 - r)]);
                }
            }
            (width, height, out)
        }
        2 => {
            let mut out = data.to_vec();
            out.reverse();
            (height, width, out)
        }
        _ => {
            let mut out = Vec::with_capacity(data.len());
            for r in 0..width {
                for c in 0..height {
                    out.push(data[(height - 1 - c) * width + r]);
                }
            }
            (width, height, out)
        }
    }
}

/// Studio-range BT.601 luma from interleaved 8-bit RGB.
pub fn rgb_to_y(rgb: &[u8], height: usize, width: usize) -> Result<Plane> {
    if rgb.len() != height * width * 3 {
        return Err(invalid_input(format!(
            "rgb buffer has {} bytes, expected {height}x{width}x3",
            rgb.len()
        )));
    }
    let data = rgb
        .chunks_exact(3)
        .map(|px| {
            let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
            quantize_u8(16.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0)
        })
        .collect();
    Plane::new(height, width, data)
}

/// Resampling kernel for [`resize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Nearest,
    Bilinear,
    Bicubic,
}

impl std::str::FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Kernel::Nearest),
            "bilinear" => Ok(Kernel::Bilinear),
            "bicubic" => Ok(Kernel::Bicubic),
            other => Err(invalid_input(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Keys cubic convolution kernel with a = -0.5.
fn keys_cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Per-output-sample source taps along one axis.
struct Taps {
    index: Vec<usize>,
    weight: Vec<f64>,
    start: Vec<usize>,
}

impl Taps {
    fn new(in_len: usize, out_len: usize, kernel: Kernel) -> Taps {
        let scale = out_len as f64 / in_len as f64;
        let mut taps = Taps {
            index: Vec::new(),
            weight: Vec::new(),
            start: Vec::with_capacity(out_len + 1),
        };
        let last = in_len as isize - 1;
        for o in 0..out_len {
            taps.start.push(taps.index.len());
            let center = (o as f64 + 0.5) / scale - 0.5;
            if kernel == Kernel::Nearest {
                let src = (((o as f64 + 0.5) / scale).floor() as isize).clamp(0, last);
                taps.index.push(src as usize);
                taps.weight.push(1.0);
                continue;
            }
            let (f, radius): (fn(f64) -> f64, f64) = match kernel {
                Kernel::Bicubic => (keys_cubic, 2.0),
                _ => (triangle, 1.0),
            };
            // Downscaling widens the kernel (antialiasing).
            let stretch = if scale < 1.0 { scale } else { 1.0 };
            let support = radius / stretch;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let begin = taps.index.len();
            let mut sum = 0.0;
            for i in lo..=hi {
                let w = f((center - i as f64) * stretch);
                if w == 0.0 {
                    continue;
                }
                sum += w;
                taps.index.push(i.clamp(0, last) as usize);
                taps.weight.push(w);
            }
            for w in &mut taps.weight[begin..] {
                *w /= sum;
            }
        }
        taps.start.push(taps.index.len());
        taps
    }

    fn apply(&self, o: usize, mut sample: impl FnMut(usize) -> f64) -> f64 {
        let (a, b) = (self.start[o], self.start[o + 1]);
        self.index[a..b]
            .iter()
            .zip(&self.weight[a..b])
            .map(|(&i, &w)| w * sample(i))
            .sum()
    }
}

/// Separable resize with pixel-centre alignment and clamped edges.
/// Downscaling stretches the kernel by the scale factor; the result is
/// rounded once after both passes.
pub fn resize(plane: &Plane, out_h: usize, out_w: usize, kernel: Kernel) -> Result<Plane> {
    if plane.is_empty() {
        return Err(invalid_input("cannot resize an empty plane"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid_input("output dimensions must be positive"));
    }
    if out_h == plane.height && out_w == plane.width {
        return Ok(plane.clone());
    }
    let cols = Taps::new(plane.width, out_w, kernel);
    let rows = Taps::new(plane.height, out_h, kernel);
    let mut tmp = vec![0.0f64; plane.height * out_w];
    for r in 0..plane.height {
        let src = &plane.data[r * plane.width..(r + 1) * plane.width];
        for c in 0..out_w {
            tmp[r * out_w + c] = cols.apply(c, |i| src[i] as f64);
        }
    }
    let mut data = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            data.push(quantize_u8(rows.apply(r, |i| tmp[i * out_w + c])));
        }
    }
    Plane::new(out_h, out_w, data)
}

fn check_same_dims(a: &Plane, b: &Plane) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(invalid_input(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB after shaving `border_crop` pixels.
/// Identical regions return [`PSNR_CAP_DB`].
pub fn psnr(a: &Plane, b: &Plane, border_crop: usize) -> Result<f64> {
    check_same_dims(a, b)?;
    let (a, b) = (a.shave(border_crop)?, b.shave(border_crop)?);
    let sse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let mse = sse / a.data.len() as f64;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Separable "valid" Gaussian filter.
fn filter_valid(data: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * data[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over an 11×11 Gaussian window (σ = 1.5, K1 = 0.01, K2 = 0.03).
pub fn ssim(a: &Plane, b: &Plane, border_crop: usize) -> Result<f64> {
    check_same_dims(a, b)?;
    let (a, b) = (a.shave(border_crop)?, b.shave(border_crop)?);
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid_input(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels after crop, got {h}x{w}"
        )));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let g = gaussian_window();
    let x: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, h, w, &g);
    let mu_y = filter_valid(&y, h, w, &g);
    let e_xx = filter_valid(&xx, h, w, &g);
    let e_yy = filter_valid(&yy, h, w, &g);
    let e_xy = filter_valid(&xy, h, w, &g);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Loads a PNG as a luma plane. Grayscale files are taken as-is, colour
/// files go through [`rgb_to_y`].
pub fn load_y(path: impl AsRef<Path>) -> Result<Plane> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Plane::new(h as usize, w as usize, g.into_raw())
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            rgb_to_y(rgb.as_raw(), h as usize, w as usize)
        }
    }
}

/// Writes a plane as an 8-bit grayscale PNG.
pub fn save_png(plane: &Plane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::GrayImage::from_raw(plane.width as u32, plane.height as u32, plane.data.clone())
        .ok_or_else(|| invalid_input("plane buffer does not match its dimensions"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}
