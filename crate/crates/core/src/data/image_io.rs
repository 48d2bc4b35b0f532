//! 8-bit RGB images on disk ↔ `[3,H,W]` tensors in `[0,1]`.

use crate::{Error, Result, Tensor};
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, Rgb, RgbImage};
use std::path::Path;

/// Extensions `load_image` accepts, lower case.
pub const IMAGE_EXTENSIONS: [&str; 2] = ["ppm", "png"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    let data = t.data_mut();
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px.0[c]) / 255.0;
        }
    }
    t
}

/// Rounds to the nearest 8-bit level after clamping to `[0,1]`.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [c, h, w] = t.shape() else {
        return Err(Error::Dimension(format!("image tensor must be [3,H,W], got {:?}", t.shape())));
    };
    if *c != 3 {
        return Err(Error::Dimension(format!("image tensor must have 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(*w as u32, *h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[plane + i]), q(d[2 * plane + i])])
    }))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Dataset(format!("cannot decode image {}: {e}", path.display())))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Binary PPM (P6) regardless of the extension.
pub fn save_ppm(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = tensor_to_rgb(t)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", path.display())))
}

pub fn save_png(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    tensor_to_rgb(t)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Dataset(format!("cannot write {}: {e}", path.display())))
}
