//! Pixel buffers, PNG I/O, alpha flattening, bicubic resizing and the
//! orthonormal 2D Haar wavelet transform.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Row-major 8-bit image with 3 (RGB) or 4 (RGBA) interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 3 && channels != 4 {
            return Err(Error::InvalidFormat(format!(
                "expected 3 or 4 channels, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image filled with a single pixel value; `pixel.len()` selects the channel count.
    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width * height * pixel.len())
            .collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 4],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y)[..channels]);
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_rgba(&self) -> bool {
        self.channels == 4
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Opaque RGBA view of an RGB image (alpha = 255); RGBA images are cloned.
    pub fn to_rgba(&self) -> ImageBuffer {
        if self.channels == 4 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 4,
            data,
        }
    }

    /// Drops the alpha channel without compositing.
    pub fn to_rgb_dropping_alpha(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// One fp64 plane per channel, values in sample units (0..=255).
    pub fn to_planes(&self) -> Vec<Array2<f64>> {
        (0..self.channels)
            .map(|c| {
                Array2::from_shape_fn((self.height, self.width), |(y, x)| {
                    f64::from(self.data[(y * self.width + x) * self.channels + c])
                })
            })
            .collect()
    }

    /// Inverse of [`to_planes`](Self::to_planes); values are rounded and clipped to [0, 255].
    pub fn from_planes(planes: &[Array2<f64>]) -> Result<Self> {
        let Some(first) = planes.first() else {
            return Err(Error::InvalidArgument("no planes".into()));
        };
        let (height, width) = first.dim();
        if planes.iter().any(|p| p.dim() != (height, width)) {
            return Err(Error::Shape("planes differ in size".into()));
        }
        let channels = planes.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for p in planes {
                    data.push(to_sample(p[(y, x)]));
                }
            }
        }
        Self::new(width, height, channels, data)
    }
}

/// Rounds and clips an fp64 value to an 8-bit sample.
pub fn to_sample(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

pub const DEFAULT_ALPHA_THRESHOLD: u8 = 128;

/// Converts RGBA to RGB: pixels with alpha strictly below `threshold` become white,
/// all others keep their RGB triple.
pub fn flatten_alpha(img: &ImageBuffer, threshold: u8) -> Result<ImageBuffer> {
    if !img.is_rgba() {
        return Err(Error::InvalidFormat(
            "flatten_alpha expects an RGBA image".into(),
        ));
    }
    let data = img
        .data
        .chunks_exact(4)
        .flat_map(|p| {
            if p[3] < threshold {
                [255, 255, 255]
            } else {
                [p[0], p[1], p[2]]
            }
        })
        .collect();
    ImageBuffer::new(img.width, img.height, 3, data)
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate, pixel-centre aligned and edge-clamped.
fn cubic_taps(out_len: usize, in_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as i64 - 1;
                let idx = (base as i64 + offset).clamp(0, in_len as i64 - 1) as usize;
                *tap = (idx, cubic_kernel(frac - offset as f64));
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize of every channel (alpha included).
pub fn resize_bicubic(img: &ImageBuffer, target_w: usize, target_h: usize) -> Result<ImageBuffer> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be at least 1x1, got {target_w}x{target_h}"
        )));
    }
    let planes = img.to_planes();
    let resized: Vec<Array2<f64>> = planes
        .iter()
        .map(|p| resize_plane(p, target_w, target_h))
        .collect();
    ImageBuffer::from_planes(&resized)
}

/// Bicubic resize of a single fp64 plane; values are not clipped.
pub fn resize_plane(plane: &Array2<f64>, target_w: usize, target_h: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    let xt = cubic_taps(target_w, w);
    let yt = cubic_taps(target_h, h);
    let mut horiz = Array2::<f64>::zeros((h, target_w));
    for y in 0..h {
        for (ox, taps) in xt.iter().enumerate() {
            horiz[(y, ox)] = taps.iter().map(|&(i, wt)| plane[(y, i)] * wt).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((target_h, target_w));
    for (oy, taps) in yt.iter().enumerate() {
        for ox in 0..target_w {
            out[(oy, ox)] = taps.iter().map(|&(i, wt)| horiz[(i, ox)] * wt).sum();
        }
    }
    out
}

/// The four Haar subbands of one plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub ll: Array2<f64>,
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

impl SubbandSet {
    pub fn dim(&self) -> (usize, usize) {
        self.ll.dim()
    }

    fn check(&self) -> Result<(usize, usize)> {
        let d = self.ll.dim();
        if self.lh.dim() != d || self.hl.dim() != d || self.hh.dim() != d {
            return Err(Error::InvalidArgument(
                "subband planes must share dimensions".into(),
            ));
        }
        Ok(d)
    }
}

/// One level of orthonormal 2D Haar analysis.
///
/// For each 2x2 block `[a b; c d]`:
/// `ll = (a+b+c+d)/2`, `lh = (a-b+c-d)/2`, `hl = (a+b-c-d)/2`, `hh = (a-b-c+d)/2`.
pub fn haar_dwt(plane: &Array2<f64>) -> Result<SubbandSet> {
    let (h, w) = plane.dim();
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "haar_dwt needs even, non-zero dimensions, got {h}x{w}"
        )));
    }
    let (hh_, hw) = (h / 2, w / 2);
    let mut out = SubbandSet {
        ll: Array2::zeros((hh_, hw)),
        lh: Array2::zeros((hh_, hw)),
        hl: Array2::zeros((hh_, hw)),
        hh: Array2::zeros((hh_, hw)),
    };
    for i in 0..hh_ {
        for j in 0..hw {
            let a = plane[(2 * i, 2 * j)];
            let b = plane[(2 * i, 2 * j + 1)];
            let c = plane[(2 * i + 1, 2 * j)];
            let d = plane[(2 * i + 1, 2 * j + 1)];
            out.ll[(i, j)] = 0.5 * (a + b + c + d);
            out.lh[(i, j)] = 0.5 * (a - b + c - d);
            out.hl[(i, j)] = 0.5 * (a + b - c - d);
            out.hh[(i, j)] = 0.5 * (a - b - c + d);
        }
    }
    Ok(out)
}

/// Orthonormal 2D Haar synthesis; exact inverse (and adjoint) of [`haar_dwt`].
pub fn haar_idwt(s: &SubbandSet) -> Result<Array2<f64>> {
    let (h, w) = s.check()?;
    let mut out = Array2::zeros((2 * h, 2 * w));
    for i in 0..h {
        for j in 0..w {
            let (ll, lh, hl, hh) = (s.ll[(i, j)], s.lh[(i, j)], s.hl[(i, j)], s.hh[(i, j)]);
            out[(2 * i, 2 * j)] = 0.5 * (ll + lh + hl + hh);
            out[(2 * i, 2 * j + 1)] = 0.5 * (ll - lh + hl - hh);
            out[(2 * i + 1, 2 * j)] = 0.5 * (ll + lh - hl - hh);
            out[(2 * i + 1, 2 * j + 1)] = 0.5 * (ll - lh - hl + hh);
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB between two same-shaped images.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.width != b.width || a.height != b.height || a.channels != b.channels {
        return Err(Error::Shape("psnr operands differ in shape".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_png(BufReader::new(file))
}

pub fn decode_png<R: std::io::BufRead + std::io::Seek>(reader: R) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(e.to_string()))?;
    let info = reader.info();
    if info.bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat("16-bit PNG".into()));
    }
    if info.interlaced {
        return Err(Error::UnsupportedFormat("interlaced PNG".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "bit depth {:?}",
            frame.bit_depth
        )));
    }
    buf.truncate(frame.buffer_size());
    let (w, h) = (frame.width as usize, frame.height as usize);
    match frame.color_type {
        png::ColorType::Rgb => ImageBuffer::new(w, h, 3, buf),
        png::ColorType::Rgba => ImageBuffer::new(w, h, 4, buf),
        png::ColorType::Grayscale => {
            ImageBuffer::new(w, h, 3, buf.iter().flat_map(|&g| [g, g, g]).collect())
        }
        png::ColorType::GrayscaleAlpha => ImageBuffer::new(
            w,
            h,
            4,
            buf.chunks_exact(2)
                .flat_map(|p| [p[0], p[0], p[0], p[1]])
                .collect(),
        ),
        png::ColorType::Indexed => Err(Error::UnsupportedFormat("unexpanded palette".into())),
    }
}

pub fn write_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let color = if img.is_rgba() {
        png::ColorType::Rgba
    } else {
        png::ColorType::Rgb
    };
    write_raw_png(path.as_ref(), img.width, img.height, color, &img.data)
}

pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let color = if img.is_rgba() {
        png::ColorType::Rgba
    } else {
        png::ColorType::Rgb
    };
    let mut out = Vec::new();
    encode_raw(&mut out, img.width, img.height, color, &img.data)?;
    Ok(out)
}

/// Writes an 8-bit single-channel PNG (used for masks).
pub fn write_gray_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    data: &[u8],
) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Shape("gray buffer size mismatch".into()));
    }
    write_raw_png(
        path.as_ref(),
        width,
        height,
        png::ColorType::Grayscale,
        data,
    )
}

pub fn encode_gray_png(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    if data.len() != width * height {
        return Err(Error::Shape("gray buffer size mismatch".into()));
    }
    let mut out = Vec::new();
    encode_raw(&mut out, width, height, png::ColorType::Grayscale, data)?;
    Ok(out)
}

/// Reads an 8-bit single-channel PNG, returning `(width, height, samples)`.
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode("image too large".into()))?;
    let mut buf = vec![0; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode(e.to_string()))?;
    if frame.color_type != png::ColorType::Grayscale || frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "expected 8-bit grayscale, got {:?}/{:?}",
            frame.color_type, frame.bit_depth
        )));
    }
    buf.truncate(frame.buffer_size());
    Ok((frame.width as usize, frame.height as usize, buf))
}

fn write_raw_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_raw(BufWriter::new(file), width, height, color, data)
}

fn encode_raw<W: std::io::Write>(
    w: W,
    width: usize,
    height: usize,
    color: png::ColorType,
    data: &[u8],
) -> Result<()> {
    let mut encoder = png::Encoder::new(w, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Decode(e.to_string()))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Decode(e.to_string()))?;
    writer.finish().map_err(|e| Error::Decode(e.to_string()))
}
