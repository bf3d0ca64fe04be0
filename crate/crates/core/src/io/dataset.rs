//! Scene folders on disk.
//!
//! ```text
//! root/
//!   eval.txt            optional: scene names held out of training, one per line
//!   <scene>/
//!     left.{png,ppm,pgm}
//!     right.{png,ppm,pgm}
//!     disp.pfm          left ground truth (non-finite = unknown), optional
//!     mask.png          optional: non-zero marks pixels to evaluate
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::disparity::DisparityMap;
use crate::engine::Tensor;
use crate::error::{Error, Result};

use super::{read_image, read_pfm};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// Scenes not listed in `eval.txt` that have ground truth.
    Train,
    /// Scenes listed in `eval.txt`, or every scene when there is no list.
    Eval,
    All,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub name: String,
    /// `3 x H x W` in `[0, 1]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub gt: Option<DisparityMap>,
    /// Pixels to evaluate; all true when the scene has no mask file.
    pub mask: Vec<bool>,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "ppm", "pgm"]
        .iter()
        .map(|ext| dir.join(format!("{}.{}", stem, ext)))
        .find(|p| p.is_file())
}

fn load_scene(dir: &Path, name: String) -> Result<Scene> {
    let missing = |what: &str| Error::InvalidArgument(format!("scene {} has no {} image", name, what));
    let left = read_image(find_image(dir, "left").ok_or_else(|| missing("left"))?)?;
    let right = read_image(find_image(dir, "right").ok_or_else(|| missing("right"))?)?;
    if (left.width, left.height) != (right.width, right.height) {
        return Err(Error::InvalidArgument(format!("scene {}: views differ in size", name)));
    }
    let gt_path = dir.join("disp.pfm");
    let gt = if gt_path.is_file() {
        let gt = read_pfm(&gt_path)?.to_disparity()?;
        if (gt.width(), gt.height()) != (left.width, left.height) {
            return Err(Error::InvalidArgument(format!("scene {}: ground truth size differs", name)));
        }
        Some(gt)
    } else {
        None
    };
    let mask = match find_image(dir, "mask") {
        Some(p) => {
            let m = image::open(p)?.into_luma8();
            if (m.width() as usize, m.height() as usize) != (left.width, left.height) {
                return Err(Error::InvalidArgument(format!("scene {}: mask size differs", name)));
            }
            m.into_raw().iter().map(|v| *v != 0).collect()
        }
        None => vec![true; left.width * left.height],
    };
    Ok(Scene {
        name,
        left: left.to_rgb_tensor(),
        right: right.to_rgb_tensor(),
        gt,
        mask,
    })
}

/// Scenes of `split` in name order. Unreadable scenes, and training scenes
/// without ground truth, are skipped with a warning.
pub fn load_dataset(root: impl AsRef<Path>, split: Split) -> Result<Vec<Scene>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::InvalidArgument(format!("{} is not a directory", root.display())));
    }
    let mut names: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let list = root.join("eval.txt");
    let held_out: Option<BTreeSet<String>> = if list.is_file() {
        Some(
            std::fs::read_to_string(&list)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect(),
        )
    } else {
        None
    };
    let wanted = |n: &String| match (split, &held_out) {
        (Split::All, _) => true,
        (Split::Train, Some(h)) => !h.contains(n),
        (Split::Train, None) => true,
        (Split::Eval, Some(h)) => h.contains(n),
        (Split::Eval, None) => true,
    };
    let mut scenes = Vec::new();
    for name in names.into_iter().filter(wanted) {
        match load_scene(&root.join(&name), name.clone()) {
            Ok(s) if split == Split::Train && s.gt.is_none() => {
                log::warn!("skipping training scene {}: no ground truth", name)
            }
            Ok(s) => scenes.push(s),
            Err(e) => log::warn!("skipping scene {}: {}", name, e),
        }
    }
    if scenes.is_empty() {
        log::warn!("no scenes found under {}", root.display());
    }
    Ok(scenes)
}
