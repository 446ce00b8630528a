//! Grayscale rasters and their canonical byte form.
//!
//! The canonical serialization is an 8-byte header (height then width, each a
//! little-endian `u32`) followed by the pixels in row-major order as
//! little-endian IEEE-754 `f32`. Everything that hashes an image (the inverse
//! trigger generator, rule filters, oracle lookups) goes through these bytes.

use sha2::{Digest, Sha256};
use thiserror::Error;

/// SHA-256 of an image's canonical bytes.
pub type ImageDigest = [u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    Dimensions {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("pixel buffer has {got} values, expected {want}")]
    BufferLength { got: usize, want: usize },
    #[error("serialized image truncated: {0} bytes")]
    Truncated(usize),
}

/// An `H x W` raster. Pixel values are nominally in `[0, 1]` but may lie
/// outside it (outranged triggers are legal inputs everywhere).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if pixels.len() != height * width {
            return Err(ImageError::BufferLength {
                got: pixels.len(),
                want: height * width,
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<(), ImageError> {
        if self.dims() != (height, width) {
            return Err(ImageError::Dimensions {
                got_h: self.height,
                got_w: self.width,
                want_h: height,
                want_w: width,
            });
        }
        Ok(())
    }

    /// True when any pixel lies outside `[0, 1]`.
    pub fn has_outranged(&self) -> bool {
        self.pixels.iter().any(|&p| !(0.0..=1.0).contains(&p))
    }

    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.pixels.len());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_canonical_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < 8 {
            return Err(ImageError::Truncated(bytes.len()));
        }
        let height = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * height * width {
            return Err(ImageError::Truncated(bytes.len()));
        }
        let pixels = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn digest(&self) -> ImageDigest {
        Sha256::digest(self.to_canonical_bytes()).into()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_layout() {
        let img = Image::new(1, 2, vec![1.0, -0.5]).unwrap();
        let bytes = img.to_canonical_bytes();
        assert_eq!(&bytes[0..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[12..16], &(-0.5f32).to_le_bytes());
        assert_eq!(Image::from_canonical_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_truncated_and_mismatched() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        let bytes = Image::filled(2, 2, 0.3).to_canonical_bytes();
        assert_eq!(
            Image::from_canonical_bytes(&bytes[..bytes.len() - 1]),
            Err(ImageError::Truncated(bytes.len() - 1))
        );
    }
}
