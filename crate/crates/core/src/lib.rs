//! Block-partitioned neural radiance fields.
//!
//! A coarse global model (hash-grid encoder plus shallow MLP decoder) is
//! trained on every image. Cameras are then clustered into overlapping
//! blocks, each block trains its own hash grid against a copy of the global
//! decoder, and per-block renderings are fused per pixel using the global
//! rendering as a guide.

pub mod camera;
pub mod dataset;
pub mod decoder;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod partition;
pub mod pipeline;
pub mod render;
pub mod scenegen;
pub mod train;

pub use camera::{pixel_ray, CameraPose, Intrinsics, Ray};
pub use dataset::{load_dataset, save_dataset, SceneDataset, Split};
pub use decoder::{Appearance, DecoderConfig, MlpDecoder};
pub use encoding::{hash_index, HashGrid, HashGridConfig};
pub use error::{Error, Result};
pub use geometry::{Aabb, Mat3, Vec3};
pub use image::ImageBuffer;
