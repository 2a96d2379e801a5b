//! End-to-end stages shared by the command line and the experiments:
//! per-block training, per-view rendering and fusion, and scoring.

use rayon::prelude::*;

use crate::dataset::SceneDataset;
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::fusion::{global_guided_fuse, idw_blend, FusionInput};
use crate::image::ImageBuffer;
use crate::partition::BlockAssignment;
use crate::render::mix;
use crate::train::{train_block, Checkpoint, DecoderPolicy, TrainConfig};

const STREAM_BLOCKS: u64 = 5;

pub const COARSE_LABEL: &str = "coarse-only";
pub const IDW_LABEL: &str = "idw-fused";
pub const GLOBAL_LABEL: &str = "global-fused";

/// Seed of block `block`, independent of how blocks are scheduled.
pub fn block_seed(seed: u64, block: usize) -> u64 {
    mix(mix(seed, STREAM_BLOCKS), block as u64)
}

pub fn block_label(block: usize) -> String {
    format!("block-{block}")
}

/// Trains every block on a pool of `jobs` threads. With `Finetune` or
/// `Freeze` each block starts from a copy of the coarse decoder; with
/// `Train` each block gets a fresh random decoder.
pub fn train_blocks(
    dataset: &SceneDataset,
    assignment: &BlockAssignment,
    coarse: &Checkpoint,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<Checkpoint>> {
    let all: Vec<usize> = (0..assignment.k).collect();
    train_block_subset(dataset, assignment, coarse, cfg, &all, jobs)
}

/// Trains the listed blocks only, in list order. Each result equals the
/// corresponding entry of [`train_blocks`].
pub fn train_block_subset(
    dataset: &SceneDataset,
    assignment: &BlockAssignment,
    coarse: &Checkpoint,
    cfg: &TrainConfig,
    which: &[usize],
    jobs: usize,
) -> Result<Vec<Checkpoint>> {
    if let Some(&b) = which.iter().find(|&&b| b >= assignment.k) {
        return Err(Error::Dimension(format!("block {b} out of range for {} blocks", assignment.k)));
    }
    let shared = match cfg.decoder_policy {
        DecoderPolicy::Train => None,
        DecoderPolicy::Finetune | DecoderPolicy::Freeze => Some(&coarse.decoder),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        which
            .par_iter()
            .map(|&b| {
                let cfg = TrainConfig { seed: block_seed(cfg.seed, b), ..*cfg };
                train_block(dataset, &assignment.members[b], &assignment.block_aabbs[b], shared, &cfg)
            })
            .collect()
    })
}

/// Every rendering of one novel view.
#[derive(Debug, Clone)]
pub struct ViewRenders {
    pub index: usize,
    pub coarse: ImageBuffer,
    pub blocks: Vec<ImageBuffer>,
    pub idw: ImageBuffer,
    pub global: ImageBuffer,
    /// Winning block per pixel of the global-guided fusion.
    pub selection: Vec<usize>,
}

/// Renders view `index` with the coarse model and every block, then fuses.
pub fn render_view(
    dataset: &SceneDataset,
    index: usize,
    coarse: &Checkpoint,
    blocks: &[Checkpoint],
    assignment: &BlockAssignment,
    gamma: f64,
) -> Result<ViewRenders> {
    if blocks.len() != assignment.k {
        return Err(Error::Dimension(format!("{} block models for {} blocks", blocks.len(), assignment.k)));
    }
    let pose = dataset.poses.get(index).ok_or_else(|| Error::Dimension(format!("no view {index}")))?;
    let coarse_img = coarse.render(pose)?;
    let block_images = blocks.iter().map(|b| b.render(pose)).collect::<Result<Vec<_>>>()?;
    let input = FusionInput {
        block_images,
        block_centroids: assignment.centroids(&dataset.camera_centers()),
        global_image: Some(coarse_img),
        view_center: pose.center,
    };
    let idw = idw_blend(&input, gamma)?;
    let (global, selection) = global_guided_fuse(&input)?;
    let FusionInput { block_images, global_image, .. } = input;
    Ok(ViewRenders {
        index,
        coarse: global_image.expect("set above"),
        blocks: block_images,
        idw,
        global,
        selection,
    })
}

/// Scores renders against the dataset images: coarse, each block, IDW and
/// global-guided fusion, in that order.
pub fn score_views(dataset: &SceneDataset, views: &[ViewRenders]) -> Result<Vec<MetricReport>> {
    let name = |v: &ViewRenders| format!("view_{:03}", v.index);
    let gt = |v: &ViewRenders| &dataset.images[v.index];
    let k = views.first().map_or(0, |v| v.blocks.len());
    let mut reports = vec![MetricReport::evaluate(COARSE_LABEL, views.iter().map(|v| (name(v), &v.coarse, gt(v))))?];
    for b in 0..k {
        reports.push(MetricReport::evaluate(block_label(b), views.iter().map(|v| (name(v), &v.blocks[b], gt(v))))?);
    }
    reports.push(MetricReport::evaluate(IDW_LABEL, views.iter().map(|v| (name(v), &v.idw, gt(v))))?);
    reports.push(MetricReport::evaluate(GLOBAL_LABEL, views.iter().map(|v| (name(v), &v.global, gt(v))))?);
    Ok(reports)
}

/// Renders, fuses and scores every validation view.
pub fn evaluate_validation(
    dataset: &SceneDataset,
    coarse: &Checkpoint,
    blocks: &[Checkpoint],
    assignment: &BlockAssignment,
    gamma: f64,
) -> Result<(Vec<ViewRenders>, Vec<MetricReport>)> {
    let views = dataset
        .val_indices()
        .into_iter()
        .map(|i| render_view(dataset, i, coarse, blocks, assignment, gamma))
        .collect::<Result<Vec<_>>>()?;
    let reports = score_views(dataset, &views)?;
    Ok((views, reports))
}

pub fn find_report<'a>(reports: &'a [MetricReport], label: &str) -> Option<&'a MetricReport> {
    reports.iter().find(|r| r.label == label)
}
