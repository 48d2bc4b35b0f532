//! Image/label loading, the seeded train/test split, augmentation and
//! letterboxing to the network input.

mod augment;
mod image_io;
pub mod labels;
mod letterbox;

pub use augment::{
    augment, augment_dataset, augment_dataset_with, augment_with, box_blur, brightness, contrast, flip_horizontal,
    flip_vertical, grayscale, hflip_label, reflect, vflip_label, AugmentKind, AugmentParams, AugmentedSample,
};
pub use image_io::{is_image_path, load_image, rgb_to_tensor, save_png, save_ppm, tensor_to_rgb, IMAGE_EXTENSIONS};
pub use labels::{format_labels, parse_labels, parse_predictions, read_labels, read_predictions, Label, Prediction};
pub use letterbox::{letterbox, Letterbox, LETTERBOX_FILL};

use crate::rng::SplitMix64;
use crate::{Error, Result, Tensor};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor<f32>,
    pub labels: Vec<Label>,
    /// File stem shared by the image and its label file.
    pub name: String,
}

/// Image and label file for one stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub name: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

fn stem_of(path: &Path) -> Option<String> {
    path.file_stem().and_then(|s| s.to_str()).map(str::to_owned)
}

/// Pairs `<stem>.{ppm,png}` with `<stem>.txt` in one directory, sorted by stem.
pub fn pair_files(dir: impl AsRef<Path>) -> Result<Vec<SamplePaths>> {
    let dir = dir.as_ref();
    let mut images = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = stem_of(&path) else { continue };
        if is_image_path(&path) {
            if let Some(prev) = images.insert(stem.clone(), path.clone()) {
                return Err(Error::Dataset(format!("two images share the stem '{stem}': {} and {}", prev.display(), path.display())));
            }
        } else if path.extension().is_some_and(|e| e == "txt") {
            labels.insert(stem, path);
        }
    }
    if let Some(s) = images.keys().find(|s| !labels.contains_key(*s)) {
        return Err(Error::Dataset(format!("image '{s}' has no label file {s}.txt in {}", dir.display())));
    }
    if let Some(s) = labels.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Dataset(format!("label file '{s}.txt' has no matching image in {}", dir.display())));
    }
    Ok(images
        .into_iter()
        .map(|(name, image)| {
            let labels = labels.remove(&name).unwrap_or_default();
            SamplePaths { name, image, labels }
        })
        .collect())
}

pub fn load_sample(p: &SamplePaths) -> Result<Sample> {
    Ok(Sample { image: load_image(&p.image)?, labels: read_labels(&p.labels)?, name: p.name.clone() })
}

/// Every image/label pair in `dir`, in stem order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    pair_files(dir)?.par_iter().map(load_sample).collect()
}

/// `floor(n·ratio)`, tolerant of the representation error in `ratio`.
pub fn train_count(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio must be in [0,1], got {ratio}")));
    }
    Ok(((n as f64 * ratio + 1e-9).floor() as usize).min(n))
}

/// Indices `0..n` shuffled by SplitMix64 (Fisher-Yates from the back), then
/// cut after `train_count(n, ratio)`.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = train_count(n, ratio)?;
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut idx);
    let test = idx.split_off(k);
    Ok((idx, test))
}

pub fn split_dataset<S: Clone>(samples: &[S], ratio: f64, seed: u64) -> Result<(Vec<S>, Vec<S>)> {
    let (train, test) = split_indices(samples.len(), ratio, seed)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| samples[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        for (n, train) in [(317, 190), (10, 6), (0, 0), (1, 0), (100, 60)] {
            let (a, b) = split_indices(n, 0.6, 42).unwrap();
            assert_eq!((a.len(), b.len()), (train, n - train), "n = {n}");
        }
        assert_eq!(train_count(100, 0.29).unwrap(), 29);
        assert!(split_indices(5, 1.5, 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        assert_eq!(split_indices(50, 0.6, 7).unwrap(), split_indices(50, 0.6, 7).unwrap());
        assert_ne!(split_indices(50, 0.6, 7).unwrap(), split_indices(50, 0.6, 8).unwrap());
    }
}
