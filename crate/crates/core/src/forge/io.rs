//! 8-bit PNG storage for images and masks.
//!
//! Masks are single-channel: 0 = pristine, 255 = manipulated; on load any
//! value ≥ 128 counts as manipulated.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

use super::image::Image;
use super::mask::ManipulationMask;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image { path: path.to_path_buf(), source }
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes = img.to_u8();
    match img.channels {
        3 => RgbImage::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
            .map_err(image_err(path)),
        1 => GrayImage::from_raw(w, h, bytes)
            .expect("buffer size matches")
            .save(path)
            .map_err(image_err(path)),
        c => Err(Error::Validation(format!("cannot store a {c}-channel image"))),
    }
}

/// Loads an image as RGB (`channels == 3`) or grayscale (`channels == 1`).
pub fn load_image(path: &Path, channels: usize) -> Result<Image> {
    let dynimg = image::open(path).map_err(image_err(path))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match channels {
        3 => Image::from_u8(h, w, 3, dynimg.to_rgb8().as_raw()),
        1 => Image::from_u8(h, w, 1, dynimg.to_luma8().as_raw()),
        c => Err(Error::Validation(format!("cannot load a {c}-channel image"))),
    }
}

pub fn save_mask(mask: &ManipulationMask, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = mask.data.iter().map(|v| if *v == 1 { 255 } else { 0 }).collect();
    let img: ImageBuffer<Luma<u8>, _> =
        GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes).expect("buffer size matches");
    img.save(path).map_err(image_err(path))
}

pub fn load_mask(path: &Path) -> Result<ManipulationMask> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|v| u8::from(*v >= 128)).collect();
    ManipulationMask::new(h, w, data)
}

pub fn save_rgb(bytes: Vec<u8>, width: usize, height: usize, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let img: ImageBuffer<Rgb<u8>, _> =
        RgbImage::from_raw(width as u32, height as u32, bytes).expect("buffer size matches");
    img.save(path).map_err(image_err(path))
}
