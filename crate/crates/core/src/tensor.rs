//! Dense `H × W × C` maps (rendered images, feature maps) and their file
//! formats: FTENS for raw tensors, PNG for 8-bit images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FTENS_MAGIC: [u8; 4] = *b"FTEN";

/// Row-major `height × width × dim` grid of scalars. Also used for RGB
/// images (`dim == 3`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    pub fn filled(height: usize, width: usize, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(height * width * value.len());
        for _ in 0..height * width {
            data.extend_from_slice(value);
        }
        Self {
            height,
            width,
            dim: value.len(),
            data,
        }
    }

    pub fn from_data(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{dim} map needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }

    pub fn check_same_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.dim, other.height, other.width, other.dim
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Box-filter downsampling by an integer factor; trailing rows and
    /// columns that do not fill a whole block are dropped.
    pub fn downsample_area(&self, factor: usize) -> FeatureMap {
        if factor <= 1 {
            return self.clone();
        }
        let h = (self.height / factor).max(1);
        let w = (self.width / factor).max(1);
        let fy = factor.min(self.height);
        let fx = factor.min(self.width);
        let mut out = FeatureMap::zeros(h, w, self.dim);
        let norm = 1.0 / (fx * fy) as f64;
        for y in 0..h {
            for x in 0..w {
                let dst = (y * w + x) * self.dim;
                for sy in y * fy..(y + 1) * fy {
                    for sx in x * fx..(x + 1) * fx {
                        let src = self.pixel(sy, sx);
                        for c in 0..self.dim {
                            out.data[dst + c] += src[c] * norm;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn to_ftens_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 4);
        buf.extend_from_slice(&FTENS_MAGIC);
        buf.extend_from_slice(&3u32.to_le_bytes());
        for d in [self.height, self.width, self.dim] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf
    }

    /// Parses an FTENS blob. Rank 2 is read as a single-channel map.
    pub fn from_ftens_bytes(bytes: &[u8]) -> Result<FeatureMap> {
        let mut r = ByteReader::new(bytes, "FTENS");
        let magic = r.magic()?;
        if magic != FTENS_MAGIC {
            return Err(Error::BadMagic {
                expected: FTENS_MAGIC,
                found: magic,
            });
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (h, w, c) = match dims.as_slice() {
            [h, w] => (*h, *w, 1),
            [h, w, c] => (*h, *w, *c),
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "feature map tensors have rank 2 or 3, got {rank}"
                )))
            }
        };
        let count = h * w * c;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let offset = r.offset();
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(Error::InvalidRecord {
                    record: i,
                    offset,
                    reason: "non-finite value".into(),
                });
            }
            data.push(v as f64);
        }
        FeatureMap::from_data(h, w, c, data)
    }

    pub fn save_ftens(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_ftens_bytes())
    }

    pub fn load_ftens(path: &Path) -> Result<FeatureMap> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ftens_bytes(&bytes)
    }

    /// 8-bit RGB, values clamped to `[0, 1]` and rounded.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.dim != 3 {
            return Err(Error::DimensionMismatch {
                what: "RGB image channels",
                expected: 3,
                got: self.dim,
            });
        }
        let bytes = self.data.iter().map(|&v| quantize_unit(v)).collect();
        Ok(image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions"))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> FeatureMap {
        FeatureMap {
            height: img.height() as usize,
            width: img.width() as usize,
            dim: 3,
            data: img.as_raw().iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_png(&image::DynamicImage::ImageRgb8(self.to_rgb8()?))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode_png()?)
    }

    pub fn load_png(path: &Path) -> Result<FeatureMap> {
        let img = image::open(path)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }
}

#[inline]
pub fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// 8-bit single-channel PNG (class-id maps, masks).
pub fn encode_gray_png(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| Error::ShapeMismatch("gray buffer length".into()))?;
    encode_png(&image::DynamicImage::ImageLuma8(img))
}

pub fn load_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so a failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Little-endian cursor that reports truncation with the byte offset.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], context: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            context,
        }
    }

    #[inline]
    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.remaining() < N {
            return Err(Error::UnexpectedEof {
                context: self.context,
                offset: self.bytes.len(),
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub(crate) fn magic(&mut self) -> Result<[u8; 4]> {
        self.take::<4>()
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take::<4>()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take::<4>()?))
    }
}
