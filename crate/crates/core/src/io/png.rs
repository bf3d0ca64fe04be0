//! 16-bit disparity PNGs: stored value `round(d * 256)`, 0 for invalid.

use std::path::Path;

use image::{ImageBuffer as RawImage, Luma};

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};

pub fn encode_disparity_png16(map: &DisparityMap) -> Result<RawImage<Luma<u16>, Vec<u16>>> {
    let mut data = Vec::with_capacity(map.values().len());
    for (v, ok) in map.values().iter().zip(map.mask()) {
        if !ok {
            data.push(0);
            continue;
        }
        if !(0.0..256.0).contains(v) {
            return Err(Error::InvalidArgument(format!(
                "disparity {} cannot be stored in a 16-bit PNG",
                v
            )));
        }
        // 0 is reserved for invalid; the smallest valid code is 1
        data.push(((v * 256.0).round() as u16).max(1));
    }
    RawImage::from_raw(map.width() as u32, map.height() as u32, data)
        .ok_or_else(|| Error::InvalidArgument("png buffer size".into()))
}

pub fn write_disparity_png16(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    encode_disparity_png16(map)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_disparity_png16(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let valid = raw.iter().map(|v| *v != 0).collect();
    let values = raw.iter().map(|v| *v as f32 / 256.0).collect();
    DisparityMap::from_parts(w, h, values, valid)
}
