//! On-disk dataset layout, loaders and the synthetic corpus generator.
//!
//! ```text
//! root/authentic/*.png     label 0
//! root/manipulated/*.png   label 1
//! root/masks/*.png         ground truth, same file name as the manipulated image
//! ```
//!
//! Training goes through [`load_training`], which never opens `masks/`.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgproc::{read_mask, read_png, BinaryMask, Image};
use crate::model::Example;

pub use synth::{
    authentic_sample, manipulated_sample, polygon_mask, procedural_image, splice, synth_forgery_generate,
    synth_uniform_paste, synth_with_options, uniform_paste_scene, SynthOptions,
};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn authentic_dir(&self) -> PathBuf {
        self.root.join("authentic")
    }

    pub fn manipulated_dir(&self) -> PathBuf {
        self.root.join("manipulated")
    }

    pub fn masks_dir(&self) -> PathBuf {
        self.root.join("masks")
    }
}

/// A loaded image with its label and, for evaluation, its mask.
#[derive(Clone, Debug)]
pub struct ManipSample {
    pub name: String,
    pub image: Image,
    pub label: bool,
    pub mask: Option<BinaryMask>,
}

/// `*.png` files directly under `dir`, sorted by path. A missing directory
/// yields an empty list.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_images(layout: &DatasetLayout) -> Result<Vec<(String, Image, bool)>> {
    let mut out = Vec::new();
    for (dir, label) in [(layout.authentic_dir(), false), (layout.manipulated_dir(), true)] {
        for path in png_files(&dir)? {
            out.push((file_name(&path), read_png(&path)?, label));
        }
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", layout.root.display())));
    }
    Ok(out)
}

/// Images and image-level labels only: authentic first, then manipulated,
/// each in lexicographic order.
pub fn load_training(layout: &DatasetLayout) -> Result<Vec<Example>> {
    Ok(load_images(layout)?
        .into_iter()
        .map(|(_, image, label)| Example { image, label })
        .collect())
}

/// Like [`load_training`] but attaches the ground-truth mask of every
/// manipulated image. Authentic images get an all-false mask.
pub fn load_eval(layout: &DatasetLayout) -> Result<Vec<ManipSample>> {
    load_images(layout)?
        .into_iter()
        .map(|(name, image, label)| {
            let mask = if label {
                let path = layout.masks_dir().join(&name);
                if !path.exists() {
                    return Err(Error::Dataset(format!("missing mask for {name}")));
                }
                let m = read_mask(&path)?;
                if m.width() != image.width() || m.height() != image.height() {
                    return Err(Error::Dataset(format!("mask for {name} does not match the image size")));
                }
                m
            } else {
                BinaryMask::empty(image.width(), image.height())
            };
            Ok(ManipSample {
                name,
                image,
                label,
                mask: Some(mask),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let layout = synth_forgery_generate(dir.path(), 4, 32, 9).unwrap();
        assert_eq!(png_files(&layout.authentic_dir()).unwrap().len(), 2);
        assert_eq!(png_files(&layout.manipulated_dir()).unwrap().len(), 2);
        assert_eq!(png_files(&layout.masks_dir()).unwrap().len(), 2);
        let train = load_training(&layout).unwrap();
        assert_eq!(train.iter().map(|e| e.label).collect::<Vec<_>>(), vec![false, false, true, true]);
        let eval = load_eval(&layout).unwrap();
        assert_eq!(eval.len(), 4);
        assert_eq!(eval[2].name, "m_00000.png");
        for s in &eval {
            let m = s.mask.as_ref().unwrap();
            assert_eq!((m.width(), m.height()), (s.image.width(), s.image.height()));
            assert_eq!(m.is_empty(), !s.label);
        }
    }

    #[test]
    fn training_ignores_masks_directory() {
        let dir = tempfile::tempdir().unwrap();
        let layout = synth_forgery_generate(dir.path(), 4, 32, 1).unwrap();
        fs::remove_dir_all(layout.masks_dir()).unwrap();
        assert_eq!(load_training(&layout).unwrap().len(), 4);
        assert!(load_eval(&layout).is_err());
    }

    #[test]
    fn empty_root_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_training(&DatasetLayout::new(dir.path())).is_err());
        assert!(load_eval(&DatasetLayout::new(dir.path().join("nope"))).is_err());
    }
}
