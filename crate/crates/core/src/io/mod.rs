//! Image and disparity files.

pub mod dataset;
pub mod pfm;
pub mod png;

use std::path::Path;

use crate::disparity::DisparityMap;
use crate::engine::Tensor;
use crate::error::{Error, Result};

pub use dataset::{load_dataset, Scene, Split};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use png::{read_disparity_png16, write_disparity_png16};

#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Interleaved, top-down pixel data.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: Samples,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, samples: Samples) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{} channels; expected 1 or 3", channels)));
        }
        if samples.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{} samples for a {}x{}x{} image",
                samples.len(),
                width,
                height,
                channels
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            samples,
        })
    }

    fn sample(&self, i: usize) -> f32 {
        match &self.samples {
            Samples::U8(v) => v[i] as f32 / 255.0,
            Samples::F32(v) => v[i],
        }
    }

    /// `3 x H x W` planar tensor; 8-bit samples map to `[0, 1]` and grey
    /// images are repeated into all three channels.
    pub fn to_rgb_tensor(&self) -> Tensor<f32> {
        let (w, h, ch) = (self.width, self.height, self.channels);
        Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (w * h), i % (w * h));
            self.sample(p * ch + if ch == 3 { c } else { 0 })
        })
    }

    /// Single-channel map; non-finite values (the usual "unknown" marker)
    /// become invalid pixels.
    pub fn to_disparity(&self) -> Result<DisparityMap> {
        if self.channels != 1 {
            return Err(Error::InvalidArgument("disparity maps have one channel".into()));
        }
        let values: Vec<f32> = (0..self.width * self.height).map(|i| self.sample(i)).collect();
        let valid = values.iter().map(|v| v.is_finite()).collect();
        let values = values.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
        DisparityMap::from_parts(self.width, self.height, values, valid)
    }

    /// Invalid pixels are written as `+inf`.
    pub fn from_disparity(map: &DisparityMap) -> Self {
        let data = map
            .values()
            .iter()
            .zip(map.mask())
            .map(|(v, ok)| if *ok { *v } else { f32::INFINITY })
            .collect();
        ImageBuffer {
            width: map.width(),
            height: map.height(),
            channels: 1,
            samples: Samples::F32(data),
        }
    }
}

/// Reads an 8-bit PNG, PGM or PPM (any other depth is converted to 8 bits).
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let img = image::open(path.as_ref())?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        ImageBuffer::new(width, height, 3, Samples::U8(img.to_rgb8().into_raw()))
    } else {
        ImageBuffer::new(width, height, 1, Samples::U8(img.to_luma8().into_raw()))
    }
}

/// Disparity map as an 8-bit grey PNG scaled so `d_max` is white; invalid
/// pixels are black.
pub fn write_disparity_preview(map: &DisparityMap, d_max: f32, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u8> = map
        .values()
        .iter()
        .zip(map.mask())
        .map(|(v, ok)| if *ok { (v / d_max * 255.0).clamp(0.0, 255.0).round() as u8 } else { 0 })
        .collect();
    let img = image::GrayImage::from_raw(map.width() as u32, map.height() as u32, data)
        .ok_or_else(|| Error::InvalidArgument("preview buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grey_images_fill_all_channels() {
        let img = ImageBuffer::new(2, 1, 1, Samples::U8(vec![0, 255])).unwrap();
        let t = img.to_rgb_tensor();
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn interleaved_colour_becomes_planar() {
        let img = ImageBuffer::new(2, 1, 3, Samples::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        assert_eq!(img.to_rgb_tensor().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn infinite_disparity_is_invalid() {
        let mut m = DisparityMap::dense(2, 1, vec![3.5, 1.0]).unwrap();
        m.invalidate(1, 0);
        let back = ImageBuffer::from_disparity(&m).to_disparity().unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sample_count_is_checked() {
        assert!(ImageBuffer::new(2, 2, 1, Samples::U8(vec![0; 3])).is_err());
        assert!(ImageBuffer::new(1, 1, 2, Samples::U8(vec![0; 2])).is_err());
    }
}
