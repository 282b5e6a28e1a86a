//! 8-bit RGB PNG frames. Values in `[-1, 1]` map linearly onto `0..=255`.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use streetscape_core::{Error, ImageTensor, Result};

pub fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

pub fn from_u8(b: u8) -> f32 {
    (b as f32 / 255.0) * 2.0 - 1.0
}

/// Quantizes a photo exactly as a PNG round trip would.
pub fn quantize(img: &ImageTensor) -> ImageTensor {
    img.map(|v| from_u8(to_u8(v)))
}

pub fn encode_rgb(img: &ImageTensor) -> Result<RgbImage> {
    let (c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::contract(format!("PNG frames need 3 channels, got {c}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|k| to_u8(img.get(k, y, x))))
    }))
}

pub fn decode_rgb(rgb: &RgbImage) -> ImageTensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = ImageTensor::zeros(3, h, w);
    for (x, y, p) in rgb.enumerate_pixels() {
        for k in 0..3 {
            out.set(k, y as usize, x as usize, from_u8(p.0[k]));
        }
    }
    out
}

pub fn write_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    encode_rgb(img)?.save_with_format(path, ImageFormat::Png).map_err(|e| image_error(path, e))
}

pub fn read_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    Ok(decode_rgb(&img.to_rgb8()))
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::format(format!("{}: {other}", path.display())),
    }
}
