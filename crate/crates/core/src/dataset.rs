//! Posed-image datasets on disk.
//!
//! A dataset directory holds `cameras.json` plus the PNG files it references:
//!
//! ```json
//! {
//!   "fx": 60.0, "fy": 60.0, "cx": 32.0, "cy": 32.0, "width": 64, "height": 64,
//!   "aabb": [-1, -1, -1, 1, 1, 1],
//!   "frames": [ { "file": "images/000.png", "c2w": [16 numbers, row-major] } ]
//! }
//! ```
//!
//! `c2w` maps camera space (x right, y down, z forward) to world space.
//! `aabb` is optional. Every 20th frame, starting with frame 0, is held out
//! for validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::image::ImageBuffer;

pub const VALIDATION_STRIDE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub images: Vec<ImageBuffer>,
    pub poses: Vec<CameraPose>,
    pub split: Vec<Split>,
    /// Appearance-embedding row per image; `None` for validation images.
    pub appearance_index: Vec<Option<usize>>,
    pub aabb: Option<Aabb>,
}

pub fn split_for(n: usize) -> Vec<Split> {
    (0..n)
        .map(|i| if i % VALIDATION_STRIDE == 0 { Split::Val } else { Split::Train })
        .collect()
}

impl SceneDataset {
    pub fn new(images: Vec<ImageBuffer>, poses: Vec<CameraPose>, aabb: Option<Aabb>) -> Result<Self> {
        if images.len() != poses.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} poses",
                images.len(),
                poses.len()
            )));
        }
        for (i, (img, pose)) in images.iter().zip(&poses).enumerate() {
            if img.dims() != (pose.width(), pose.height()) {
                return Err(Error::Dimension(format!("image {i} size does not match its camera")));
            }
        }
        let split = split_for(images.len());
        let mut next = 0;
        let appearance_index = split
            .iter()
            .map(|s| match s {
                Split::Train => {
                    next += 1;
                    Some(next - 1)
                }
                Split::Val => None,
            })
            .collect();
        Ok(Self { images, poses, split, appearance_index, aabb })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == Split::Train).collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == Split::Val).collect()
    }

    pub fn num_train(&self) -> usize {
        self.split.iter().filter(|s| **s == Split::Train).count()
    }

    pub fn camera_centers(&self) -> Vec<Vec3> {
        self.poses.iter().map(|p| p.center).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aabb: Option<[f64; 6]>,
    frames: Vec<FrameEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    file: String,
    c2w: Vec<f64>,
}

fn load_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), reason: reason.into() }
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let cameras_path = dir.join("cameras.json");
    let text = fs::read_to_string(&cameras_path).map_err(|e| load_err(&cameras_path, e.to_string()))?;
    let file: CamerasFile =
        serde_json::from_str(&text).map_err(|e| load_err(&cameras_path, format!("malformed json: {e}")))?;
    let intrinsics = Intrinsics {
        fx: file.fx,
        fy: file.fy,
        cx: file.cx,
        cy: file.cy,
        width: file.width,
        height: file.height,
    };
    intrinsics.validate().map_err(|e| load_err(&cameras_path, e.to_string()))?;

    let mut images = Vec::with_capacity(file.frames.len());
    let mut poses = Vec::with_capacity(file.frames.len());
    for (i, frame) in file.frames.iter().enumerate() {
        let c2w: [f64; 16] = frame.c2w.as_slice().try_into().map_err(|_| {
            load_err(&cameras_path, format!("frame {i} ({}): c2w needs 16 numbers", frame.file))
        })?;
        if c2w[12..] != [0.0, 0.0, 0.0, 1.0] {
            return Err(load_err(&cameras_path, format!("frame {i} ({}): bad c2w last row", frame.file)));
        }
        let pose = CameraPose::from_c2w(&c2w, intrinsics)
            .map_err(|e| load_err(&cameras_path, format!("frame {i} ({}): {e}", frame.file)))?;
        let img_path = dir.join(&frame.file);
        let img = ImageBuffer::load_png(&img_path).map_err(|e| load_err(&img_path, e.to_string()))?;
        if img.dims() != (file.width, file.height) {
            return Err(load_err(&img_path, format!("frame {i}: image is {}x{}", img.width(), img.height())));
        }
        images.push(img);
        poses.push(pose);
    }
    let aabb = file.aabb.map(|a| Aabb::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5])));
    SceneDataset::new(images, poses, aabb)
}

/// Writes `cameras.json` and `images/NNN.png`. All poses must share intrinsics.
pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    let first = ds.poses.first().ok_or_else(|| Error::Empty("dataset has no frames".into()))?;
    let k = first.intrinsics;
    if ds.poses.iter().any(|p| p.intrinsics != k) {
        return Err(Error::Config("save_dataset requires shared intrinsics".into()));
    }
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut frames = Vec::with_capacity(ds.len());
    for (i, (img, pose)) in ds.images.iter().zip(&ds.poses).enumerate() {
        let rel = format!("images/{i:03}.png");
        img.save_png(&dir.join(&rel))?;
        frames.push(FrameEntry { file: rel, c2w: pose.c2w().to_vec() });
    }
    let file = CamerasFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
        aabb: ds.aabb.map(|b| [b.lo.x, b.lo.y, b.lo.z, b.hi.x, b.hi.y, b.hi.z]),
        frames,
    };
    let path: PathBuf = dir.join("cameras.json");
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
