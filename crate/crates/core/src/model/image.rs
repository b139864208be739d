use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pads the shorter side symmetrically with black to a square, resizes
/// bilinearly to `size`, and scales channels to `[0, 1]`. Output is `[3, size, size]`.
pub fn preprocess_image(img: &RgbImage, size: usize) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Input(format!("image has zero pixels ({w}x{h})")));
    }
    let squared = pad_to_square(img);
    let side = squared.width() as usize;
    let resized = if side == size {
        squared
    } else {
        imageops::resize(&squared, size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in resized.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Black-pads to a `max(w, h)` square, content centered (extra pixel of odd
/// padding goes right/bottom).
pub fn pad_to_square(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    if w == h {
        return img.clone();
    }
    let side = w.max(h);
    let mut out = RgbImage::from_pixel(side, side, Rgb([0, 0, 0]));
    imageops::replace(&mut out, img, ((side - w) / 2) as i64, ((side - h) / 2) as i64);
    out
}
