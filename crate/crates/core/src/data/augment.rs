//! The six offline augmentations plus the identity.

use super::labels::Label;
use super::Sample;
use crate::{Error, Result, Tensor};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugmentKind {
    Original,
    Brightness,
    Contrast,
    Denoise,
    Grayscale,
    HFlip,
    VFlip,
}

impl AugmentKind {
    /// Output order of `augment_dataset`.
    pub const ALL: [AugmentKind; 7] = [
        AugmentKind::Original,
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Denoise,
        AugmentKind::Grayscale,
        AugmentKind::HFlip,
        AugmentKind::VFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Original => "original",
            AugmentKind::Brightness => "brightness",
            AugmentKind::Contrast => "contrast",
            AugmentKind::Denoise => "denoise",
            AugmentKind::Grayscale => "grayscale",
            AugmentKind::HFlip => "hflip",
            AugmentKind::VFlip => "vflip",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, AugmentKind::HFlip | AugmentKind::VFlip)
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation '{s}'; expected one of original, brightness, contrast, denoise, grayscale, hflip, vflip")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub brightness: f32,
    pub contrast: f32,
    /// Luminance weights for R, G, B.
    pub luma: [f32; 3],
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { brightness: 1.3, contrast: 1.3, luma: [0.299, 0.587, 0.114] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub sample: Sample,
    pub kind: AugmentKind,
}

impl AugmentedSample {
    /// `<stem>_<kind>`, the file stem `augment_dataset` output is written under.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.sample.name, self.kind)
    }
}

fn dims(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Dimension(format!("image tensor must be [3,H,W], got {s:?}"))),
    }
}

pub fn brightness(img: &Tensor<f32>, factor: f32) -> Tensor<f32> {
    img.map(|v| (v * factor).clamp(0.0, 1.0))
}

pub fn contrast(img: &Tensor<f32>, factor: f32) -> Tensor<f32> {
    img.map(|v| ((v - 0.5) * factor + 0.5).clamp(0.0, 1.0))
}

/// 3×3 box mean over the in-bounds neighbours of each pixel.
pub fn box_blur(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = dims(img)?;
    let src = img.data();
    let mut out = Tensor::zeros(img.shape());
    let dst = out.data_mut();
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let mut acc = 0.0;
                for yy in y0..=y1 {
                    acc += plane[yy * w + x0..=yy * w + x1].iter().sum::<f32>();
                }
                dst[c * h * w + y * w + x] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f32;
            }
        }
    }
    Ok(out)
}

pub fn grayscale(img: &Tensor<f32>, luma: [f32; 3]) -> Result<Tensor<f32>> {
    let (h, w) = dims(img)?;
    let n = h * w;
    let d = img.data();
    let mut out = Tensor::zeros(img.shape());
    let o = out.data_mut();
    for i in 0..n {
        let l = (luma[0] * d[i] + luma[1] * d[n + i] + luma[2] * d[2 * n + i]).clamp(0.0, 1.0);
        o[i] = l;
        o[n + i] = l;
        o[2 * n + i] = l;
    }
    Ok(out)
}

pub fn flip_horizontal(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = dims(img)?;
    let mut out = img.clone();
    for row in out.data_mut().chunks_exact_mut(w).take(3 * h) {
        row.reverse();
    }
    Ok(out)
}

pub fn flip_vertical(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = dims(img)?;
    let src = img.data();
    let mut out = Tensor::zeros(img.shape());
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..h {
            let (s, d) = ((c * h + y) * w, (c * h + h - 1 - y) * w);
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(out)
}

/// Grid the reflected centre is snapped to. Every decimal with up to nine
/// places round-trips exactly, so `reflect(reflect(c)) == c` for label-file
/// coordinates.
const REFLECT_GRID: f64 = 1e9;

/// `1 − c`, snapped to [`REFLECT_GRID`].
pub fn reflect(c: f64) -> f64 {
    ((1.0 - c) * REFLECT_GRID).round() / REFLECT_GRID
}

pub fn hflip_label(l: &Label) -> Label {
    Label { cx: reflect(l.cx), ..*l }
}

pub fn vflip_label(l: &Label) -> Label {
    Label { cy: reflect(l.cy), ..*l }
}

pub fn augment_with(sample: &Sample, kind: AugmentKind, p: &AugmentParams) -> Result<AugmentedSample> {
    let img = &sample.image;
    let (image, labels) = match kind {
        AugmentKind::Original => (img.clone(), sample.labels.clone()),
        AugmentKind::Brightness => (brightness(img, p.brightness), sample.labels.clone()),
        AugmentKind::Contrast => (contrast(img, p.contrast), sample.labels.clone()),
        AugmentKind::Denoise => (box_blur(img)?, sample.labels.clone()),
        AugmentKind::Grayscale => (grayscale(img, p.luma)?, sample.labels.clone()),
        AugmentKind::HFlip => (flip_horizontal(img)?, sample.labels.iter().map(hflip_label).collect()),
        AugmentKind::VFlip => (flip_vertical(img)?, sample.labels.iter().map(vflip_label).collect()),
    };
    Ok(AugmentedSample { sample: Sample { image, labels, name: sample.name.clone() }, kind })
}

pub fn augment(sample: &Sample, kind: AugmentKind) -> Result<AugmentedSample> {
    augment_with(sample, kind, &AugmentParams::default())
}

/// Every sample under every kind in [`AugmentKind::ALL`] order: `7·n` outputs.
pub fn augment_dataset(samples: &[Sample]) -> Result<Vec<AugmentedSample>> {
    augment_dataset_with(samples, &AugmentParams::default())
}

pub fn augment_dataset_with(samples: &[Sample], p: &AugmentParams) -> Result<Vec<AugmentedSample>> {
    use rayon::prelude::*;
    let per: Vec<Vec<AugmentedSample>> = samples
        .par_iter()
        .map(|s| AugmentKind::ALL.iter().map(|&k| augment_with(s, k, p)).collect())
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        let image = Tensor::from_fn(&[3, 4, 5], |i| (i % 11) as f32 / 10.0);
        let labels = vec![Label { class: 0, cx: 0.3, cy: 0.25, w: 0.2, h: 0.1 }];
        Sample { image, labels, name: "s".into() }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in AugmentKind::ALL {
            assert_eq!(k.name().parse::<AugmentKind>().unwrap(), k);
        }
        assert!(matches!("mosaic".parse::<AugmentKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn unit_factors_are_identity() {
        let s = sample();
        assert_eq!(brightness(&s.image, 1.0), s.image);
        assert!(contrast(&s.image, 1.0).max_abs_diff(&s.image) < 1e-6);
    }

    #[test]
    fn hflip_label_reflects_centre() {
        let s = augment(&sample(), AugmentKind::HFlip).unwrap().sample;
        assert_eq!(s.labels[0].cx, 0.7);
        assert_eq!(s.labels[0].w, 0.2);
        assert_eq!(s.labels[0].cy, 0.25);
    }

    #[test]
    fn flip_moves_pixels() {
        let s = sample();
        let h = flip_horizontal(&s.image).unwrap();
        let v = flip_vertical(&s.image).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(h.get(&[c, y, x]), s.image.get(&[c, y, 4 - x]));
                    assert_eq!(v.get(&[c, y, x]), s.image.get(&[c, 3 - y, x]));
                }
            }
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let t = Tensor::full(&[3, 3, 4], 0.4f32);
        let b = box_blur(&t).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn blur_corner_averages_four() {
        let mut t = Tensor::zeros(&[3, 3, 3]);
        t.set(&[0, 0, 0], 1.0f32);
        let b = box_blur(&t).unwrap();
        assert_eq!(b.get(&[0, 0, 0]), 0.25);
        assert_eq!(b.get(&[0, 1, 1]), 1.0 / 9.0);
        assert_eq!(b.get(&[0, 2, 2]), 0.0);
    }

    #[test]
    fn grayscale_channels_equal() {
        let g = grayscale(&sample().image, AugmentParams::default().luma).unwrap();
        let n = 20;
        for i in 0..n {
            assert_eq!(g.data()[i], g.data()[n + i]);
            assert_eq!(g.data()[i], g.data()[2 * n + i]);
        }
    }
}
