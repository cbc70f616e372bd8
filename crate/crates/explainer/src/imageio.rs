//! 8-bit grayscale PNG encoding and conversion to and from feature maps.

use std::io::Cursor;
use std::path::Path;

use explainer_core::tensor::FeatureMap;

use crate::error::{AppError, Result};

/// Row-major 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height] }
    }

    /// Quantises a single-channel map with values in `[0, 1]`.
    pub fn from_unit_map(map: &FeatureMap) -> Self {
        Self::from_unit_plane(map.width, map.height, &map.data[..map.width * map.height])
    }

    pub fn from_unit_plane(width: usize, height: usize, plane: &[f64]) -> Self {
        let pixels = plane.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self { width, height, pixels }
    }

    pub fn to_unit_map(&self) -> FeatureMap {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        FeatureMap { channels: 1, height: self.height, width: self.width, data }
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        if row < self.height && col < self.width {
            self.pixels[row * self.width + col] = v;
        }
    }

    /// Copies `src` with its top-left corner at `(row, col)`.
    pub fn blit(&mut self, src: &GrayImage, row: usize, col: usize) {
        for r in 0..src.height {
            for c in 0..src.width {
                self.set(row + r, col + c, src.pixels[r * src.width + c]);
            }
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(Cursor::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| AppError::Failed(format!("png encode: {e}")))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| AppError::Failed(format!("png encode: {e}")))?;
        }
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> std::result::Result<Self, String> {
        let decoder = png::Decoder::new(Cursor::new(bytes));
        let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
        let size = reader.output_buffer_size().ok_or("image too large")?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(format!("expected 8-bit grayscale, found {:?} {:?}", info.color_type, info.bit_depth));
        }
        buf.truncate(info.buffer_size());
        Ok(Self { width: info.width as usize, height: info.height as usize, pixels: buf })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?).map_err(AppError::io(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact() {
        let img = GrayImage { width: 3, height: 2, pixels: vec![0, 1, 2, 128, 254, 255] };
        let back = GrayImage::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn quantised_maps_survive_conversion() {
        let data: Vec<f64> = (0..16).map(|i| (i * 17) as f64 / 255.0).collect();
        let map = FeatureMap { channels: 1, height: 4, width: 4, data };
        assert_eq!(GrayImage::from_unit_map(&map).to_unit_map(), map);
    }
}
