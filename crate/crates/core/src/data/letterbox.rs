//! Aspect-preserving resize into a square canvas.

use crate::bbox::BBox;
use crate::{Error, Result, Tensor};
use image::imageops::{resize, FilterType};
use image::{Rgb, Rgb32FImage};

/// Canvas fill, the customary grey 114/255.
pub const LETTERBOX_FILL: f32 = 114.0 / 255.0;

/// Geometry of one letterbox: `canvas = source·scale + pad`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: usize,
    pub pad_y: usize,
    pub src_w: usize,
    pub src_h: usize,
}

impl Letterbox {
    /// Maps a box in canvas pixels back to source pixels, clipped to the image.
    pub fn to_source(&self, b: &BBox) -> BBox {
        let (px, py) = (self.pad_x as f64, self.pad_y as f64);
        BBox::new(
            ((b.x_min - px) / self.scale).clamp(0.0, self.src_w as f64),
            ((b.y_min - py) / self.scale).clamp(0.0, self.src_h as f64),
            ((b.x_max - px) / self.scale).clamp(0.0, self.src_w as f64),
            ((b.y_max - py) / self.scale).clamp(0.0, self.src_h as f64),
        )
    }
}

/// Scales the longer side to `size` (triangle filter), centres the result and
/// fills the border with [`LETTERBOX_FILL`].
pub fn letterbox(img: &Tensor<f32>, size: usize) -> Result<(Tensor<f32>, Letterbox)> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Dimension(format!("image tensor must be [3,H,W], got {:?}", img.shape())));
    };
    if size == 0 {
        return Err(Error::Config("letterbox size must be positive".into()));
    }
    let scale = (size as f64 / w as f64).min(size as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
    let (pad_x, pad_y) = ((size - nw) / 2, (size - nh) / 2);
    let info = Letterbox { scale, pad_x, pad_y, src_w: w, src_h: h };

    let plane = h * w;
    let d = img.data();
    let resized = if (nw, nh) == (w, h) {
        None
    } else {
        let src = Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([d[i], d[plane + i], d[2 * plane + i]])
        });
        Some(resize(&src, nw as u32, nh as u32, FilterType::Triangle))
    };

    let mut out = Tensor::full(&[3, size, size], LETTERBOX_FILL);
    let o = out.data_mut();
    for y in 0..nh {
        for x in 0..nw {
            let dst = (y + pad_y) * size + x + pad_x;
            for c in 0..3 {
                let v = match &resized {
                    Some(r) => r.get_pixel(x as u32, y as u32).0[c],
                    None => d[c * plane + y * w + x],
                };
                o[c * size * size + dst] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((out, info))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_input_at_size_is_unchanged() {
        let t = Tensor::from_fn(&[3, 8, 8], |i| (i % 7) as f32 / 7.0);
        let (o, info) = letterbox(&t, 8).unwrap();
        assert_eq!(o, t);
        assert_eq!((info.scale, info.pad_x, info.pad_y), (1.0, 0, 0));
    }

    #[test]
    fn wide_image_pads_rows() {
        let t = Tensor::full(&[3, 10, 20], 1.0f32);
        let (o, info) = letterbox(&t, 40).unwrap();
        assert_eq!(o.shape(), &[3, 40, 40]);
        assert_eq!((info.scale, info.pad_x, info.pad_y), (2.0, 0, 10));
        assert_eq!(o.get(&[0, 0, 0]), LETTERBOX_FILL);
        assert_eq!(o.get(&[1, 20, 20]), 1.0);
        let b = info.to_source(&BBox::new(0.0, 10.0, 40.0, 30.0));
        assert_eq!(b, BBox::new(0.0, 0.0, 20.0, 10.0));
    }
}
