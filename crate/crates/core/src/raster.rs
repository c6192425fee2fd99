//! Minimal RGB/grayscale raster type plus PNG/PPM I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved `H x W x C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set_rgb(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let base = (row * self.width + col) * self.channels;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::InvalidArgument(format!(
                    "cannot encode a {c}-channel raster as PNG"
                )))
            }
        };
        image::save_buffer_with_format(
            path,
            &self.to_bytes(),
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

/// Loads a PNG or PPM file as an RGB raster.
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Raster::new(h as usize, w as usize, 3, data)
}

/// Loads a single-channel PNG as values in `[0, 1]`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Raster::new(h as usize, w as usize, 1, data)
}
