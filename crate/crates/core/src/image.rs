//! Planar floating-point images and 8-bit file I/O.
//!
//! Samples live in `[0, 1]` and are stored channel-major: all of plane 0, then
//! plane 1, and so on, each plane row-major. Every operator in the crate is
//! channel independent and works plane by plane.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder, ImageError, ImageFormat};

use crate::{Error, Result};

/// A `(x, y)` location on a pixel grid; `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelCoord {
    pub x: usize,
    pub y: usize,
}

impl PixelCoord {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// All-zero image.
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    /// Wraps planar samples. Fails if the length does not match or a sample
    /// is not finite.
    pub fn from_planar(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::DimensionMismatch(format!(
                "empty image {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} samples for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite sample at index {i}")));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds an image by evaluating `f(channel, y, x)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { width, height, channels, data }
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

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn planes(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.plane_len())
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn at(&self, c: usize, p: PixelCoord) -> f64 {
        self.get(c, p.y, p.x)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn ensure_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch { expected: self.channels, found: other.channels });
        }
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Applies `f` to every sample.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone_shape() }
    }

    /// Every sample clamped into `[0, 1]`.
    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rounds every sample to the nearest 8-bit level, as a save/load round
    /// trip would.
    pub fn quantized(&self) -> Image {
        self.map(|v| f64::from(to_byte(v)) / 255.0)
    }

    /// Rectangular sub-image.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::DimensionMismatch(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, self.channels, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Removes `border` pixels from every side.
    pub fn shave(&self, border: usize) -> Result<Image> {
        if 2 * border >= self.width || 2 * border >= self.height {
            return Err(Error::DimensionMismatch(format!(
                "cannot shave {border} pixels from a {}x{} image",
                self.width, self.height
            )));
        }
        self.crop(border, border, self.width - 2 * border, self.height - 2 * border)
    }

    /// Elementwise `a·self + b·other`.
    pub fn axpby(&self, a: f64, other: &Image, b: f64) -> Result<Image> {
        self.ensure_same_shape(other, "axpby")?;
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + b * y).collect();
        Ok(Image { data, ..self.clone_shape() })
    }

    fn clone_shape(&self) -> Image {
        Image { width: self.width, height: self.height, channels: self.channels, data: Vec::new() }
    }

    /// Euclidean inner product over all samples.
    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

/// Clamp, scale and round a sample to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit PNG or a PGM/PPM file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|_| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: "not a PNG or PNM file".into(),
    })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("{format:?} files are not supported"),
        });
    }
    let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| match e {
        ImageError::Unsupported(u) => {
            Error::UnsupportedFormat { path: path.to_path_buf(), reason: u.to_string() }
        }
        other => Error::Format { path: path.to_path_buf(), reason: other.to_string() },
    })?;
    from_dynamic(decoded, path)
}

fn from_dynamic(img: DynamicImage, path: &Path) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let unsupported = |reason: &str| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    match img.color() {
        ColorType::L8 => {
            let raw = img.into_luma8().into_raw();
            let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
            Image::from_planar(w, h, 1, data)
        }
        ColorType::Rgb8 => {
            let raw = img.into_rgb8().into_raw();
            let n = w * h;
            let mut data = vec![0.0; 3 * n];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * n + i] = f64::from(px[c]) / 255.0;
                }
            }
            Image::from_planar(w, h, 3, data)
        }
        ColorType::La8 | ColorType::Rgba8 => Err(unsupported("alpha channels are not supported")),
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            Err(unsupported("only 8-bit samples are supported"))
        }
        other => Err(unsupported(&format!("color type {other:?}"))),
    }
}

/// Writes the image as PNG (`.png`) or binary PGM/PPM (`.pgm`, `.ppm`,
/// `.pnm`), clamping and rounding samples to 8 bits.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (img.width(), img.height());
    let n = img.plane_len();
    let (bytes, color) = match img.channels() {
        1 => (img.data().iter().map(|&v| to_byte(v)).collect::<Vec<u8>>(), ExtendedColorType::L8),
        3 => {
            let mut out = Vec::with_capacity(3 * n);
            for i in 0..n {
                for c in 0..3 {
                    out.push(to_byte(img.data()[c * n + i]));
                }
            }
            (out, ExtendedColorType::Rgb8)
        }
        c => {
            return Err(Error::InvalidParameter(format!("cannot store a {c}-channel image")));
        }
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let mut buf = Cursor::new(Vec::new());
    let encoded = match ext.as_str() {
        "png" => image::codecs::png::PngEncoder::new(&mut buf).write_image(
            &bytes,
            w as u32,
            h as u32,
            color,
        ),
        "pgm" | "ppm" | "pnm" => {
            let subtype = if img.channels() == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            PnmEncoder::new(&mut buf).with_subtype(subtype).write_image(
                &bytes,
                w as u32,
                h as u32,
                color,
            )
        }
        _ => {
            return Err(Error::InvalidParameter(format!(
                "unknown image extension for {}",
                path.display()
            )))
        }
    };
    encoded.map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

/// BT.601 luma in studio range, `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`.
/// Single-channel input is returned unchanged.
pub fn to_luma(img: &Image) -> Image {
    if img.channels() != 3 {
        return img.clone();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)
        .collect();
    Image { width: img.width(), height: img.height(), channels: 1, data }
}
