//! 8-bit PNG images, masks and probability maps.

use std::path::Path;

use granedge_core::{Image, Map, Mask};
use image::{GrayImage, Luma};

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// RGB image scaled to `[0, 1]`. Gray and alpha inputs are accepted.
pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Image::from_vec(h as usize, w as usize, data)?)
}

/// Binary mask: luma above 127 is set.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Mask::from_vec(h as usize, w as usize, g.into_raw().into_iter().map(|v| v > 127).collect())?)
}

/// Gray map scaled to `[0, 1]`.
pub fn read_map(path: &Path) -> Result<Map> {
    let g = open(path)?.to_luma8();
    let (w, h) = g.dimensions();
    Ok(Map::from_vec(h as usize, w as usize, g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect())?)
}

/// `round(255 p)` with `p` clamped to `[0, 1]`.
pub fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: GrayImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn write_map(map: &Map, path: &Path) -> Result<()> {
    let (h, w) = map.size();
    save(GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([quantize(map.at(y as usize, x as usize))])), path)
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.size();
    save(GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask.at(y as usize, x as usize) { 255 } else { 0 }])), path)
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = img.size();
    let buf: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
    rgb.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}
