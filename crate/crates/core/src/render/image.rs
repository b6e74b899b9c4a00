//! Float images and their on-disk formats: 8-bit PNG and a raw f32 dump.
//!
//! Raw layout (little-endian): magic `GSAVRAW1`, `u32` width, `u32` height,
//! `u32` channels, then `width * height * channels` `f32` values, row-major
//! and channel-interleaved.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 8] = b"GSAVRAW1";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved values nominally in `[0, 1]`.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
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

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, o: &Image) -> Result<()> {
        if (self.width, self.height, self.channels) != (o.width, o.height, o.channels) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, o.width, o.height, o.channels
            )));
        }
        Ok(())
    }

    fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes an 8-bit PNG (1 channel = grayscale, 3 = RGB). Values are
    /// treated as already display-encoded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::DimensionMismatch(format!(
                    "cannot write {c}-channel png"
                )))
            }
        };
        image::save_buffer_with_format(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }

    /// Encodes to PNG bytes in memory.
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        use image::ImageEncoder;
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::DimensionMismatch(format!(
                    "cannot write {c}-channel png"
                )))
            }
        };
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out).write_image(
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )?;
        Ok(out)
    }

    /// Reads a PNG as RGB (`channels = 3`) or grayscale (`channels = 1`).
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            1 => img
                .to_luma8()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
            3 => img
                .to_rgb8()
                .into_raw()
                .into_iter()
                .map(|v| v as f64 / 255.0)
                .collect(),
            c => {
                return Err(Error::DimensionMismatch(format!(
                    "cannot read {c}-channel png"
                )))
            }
        };
        Self::new(w, h, channels, data)
    }

    pub fn write_raw(&self, mut w: impl Write) -> Result<()> {
        w.write_all(RAW_MAGIC)?;
        for v in [self.width, self.height, self.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != RAW_MAGIC {
            return Err(Error::DimensionMismatch("not a raw image dump".into()));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = dims.iter().product::<usize>();
        let mut buf = vec![0u8; 4 * n];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(dims[0], dims[1], dims[2], data)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_raw(f)
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        Self::read_raw(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
