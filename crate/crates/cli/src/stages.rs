//! One function per stage. Stages talk only through files under the output
//! directory; each artifact carries a `.cfghash` sidecar holding the hash of
//! everything it was built from, and a stage whose artifact and hash are both
//! current is skipped.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use blockfield::eval::{summary_tsv, MetricReport};
use blockfield::fusion::{global_guided_fuse, idw_blend, selection_image, FusionInput};
use blockfield::partition::{build_blocks, BlockAssignment};
use blockfield::pipeline::{block_label, train_block_subset, COARSE_LABEL, GLOBAL_LABEL, IDW_LABEL};
use blockfield::scenegen::{emit_dataset, AnalyticScene};
use blockfield::train::{train_coarse, Checkpoint, DecoderPolicy, TrainConfig};
use blockfield::{load_dataset, ImageBuffer, SceneDataset};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{FusionMode, RunConfig};

const SIDECAR_EXT: &str = "cfghash";

/// A run: configuration plus worker count.
pub struct Run {
    pub cfg: RunConfig,
    pub jobs: usize,
}

fn sidecar(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(SIDECAR_EXT);
    artifact.with_file_name(name)
}

fn is_current(artifact: &Path, key: &str) -> bool {
    artifact.exists() && fs::read_to_string(sidecar(artifact)).is_ok_and(|h| h.trim() == key)
}

fn mark(artifact: &Path, key: &str) -> Result<()> {
    fs::write(sidecar(artifact), format!("{key}\n")).with_context(|| format!("writing hash for {}", artifact.display()))
}

/// Hash of a stage: its name, the keys of its inputs and its own settings.
fn stage_key<T: Serialize>(stage: &str, inputs: &[&str], settings: &T) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    for k in inputs {
        h.update([0u8]);
        h.update(k.as_bytes());
    }
    h.update([0u8]);
    h.update(serde_json::to_vec(settings)?);
    Ok(hex::encode(h.finalize()))
}

/// Content hash of every file below `dir`, in path order, sidecars excluded.
fn dir_hash(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.extension().is_none_or(|e| e != SIDECAR_EXT) {
                out.push(path.strip_prefix(root)?.to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(fs::read(dir.join(&f))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} not found at {} (run `blockfield {hint}` first)", path.display());
    }
    Ok(())
}

fn view_name(index: usize) -> String {
    format!("view_{index:03}")
}

fn save_image(img: &ImageBuffer, stem: &Path) -> Result<()> {
    img.save_png(&stem.with_extension("png"))?;
    img.save_raw(&stem.with_extension("rgbf"))?;
    Ok(())
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[blockfield] {}", msg.as_ref());
}

impl Run {
    pub fn out(&self) -> &Path {
        &self.cfg.paths.out
    }

    fn coarse_path(&self) -> PathBuf {
        self.out().join("coarse.ckpt")
    }

    fn blocks_json(&self) -> PathBuf {
        self.out().join("blocks.json")
    }

    pub fn block_path(&self, b: usize) -> PathBuf {
        self.out().join("blocks").join(format!("block_{b:02}.ckpt"))
    }

    pub fn renders_dir(&self) -> PathBuf {
        self.out().join("renders")
    }

    pub fn fused_dir(&self) -> PathBuf {
        self.out().join("fused")
    }

    pub fn metrics_paths(&self) -> (PathBuf, PathBuf) {
        (self.out().join("metrics.tsv"), self.out().join("metrics.json"))
    }

    /// The coarse model always trains its own decoder.
    fn coarse_config(&self) -> TrainConfig {
        TrainConfig { decoder_policy: DecoderPolicy::Train, ..self.cfg.train_config() }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs.max(1)).build()?)
    }

    fn dataset(&self) -> Result<(SceneDataset, String)> {
        let dir = self.cfg.data_dir();
        require(&dir.join("cameras.json"), "dataset", "gen-data")?;
        let ds = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
        Ok((ds, dir_hash(&dir)?))
    }

    fn coarse_key(&self, data_key: &str) -> Result<String> {
        stage_key("coarse", &[data_key], &self.coarse_config())
    }

    fn split_key(&self, data_key: &str) -> Result<String> {
        let p = &self.cfg.partition;
        stage_key("split", &[data_key], &(p.k, p.s_aabb, self.cfg.partition_seed()))
    }

    fn block_key(&self, data_key: &str, coarse_hash: &str, split_hash: &str, b: usize) -> Result<String> {
        stage_key("block", &[data_key, coarse_hash, split_hash], &(self.cfg.train_config(), b))
    }

    /// Renders depend on the checkpoints themselves, whoever produced them.
    fn render_key(&self, data_key: &str, k: usize, index: usize) -> Result<String> {
        let mut inputs = vec![data_key.to_string(), file_hash(&self.coarse_path())?];
        for b in 0..k {
            inputs.push(file_hash(&self.block_path(b))?);
        }
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        stage_key("render", &refs, &index)
    }

    /// Writes the synthetic dataset unless one built from the same scene
    /// settings is already in place.
    pub fn gen_data(&self) -> Result<()> {
        let dir = self.cfg.data_dir();
        let key = stage_key("data", &[], &self.cfg.scene)?;
        if is_current(&dir, &key) {
            log(format!("gen-data: {} is current, skipping", dir.display()));
            return Ok(());
        }
        log(format!(
            "gen-data: {} {:?} cameras at {}x{} -> {}",
            self.cfg.scene.n_cameras,
            self.cfg.scene.layout,
            self.cfg.scene.width,
            self.cfg.scene.height,
            dir.display()
        ));
        let pool = self.pool()?;
        pool.install(|| emit_dataset(&AnalyticScene::desk(), &self.cfg.scene, &dir))?;
        mark(&dir, &key)
    }

    /// Uses `paths.data` when it names an existing dataset, otherwise
    /// generates one under the output directory.
    fn ensure_data(&self) -> Result<()> {
        match &self.cfg.paths.data {
            Some(dir) => require(&dir.join("cameras.json"), "dataset", "gen-data"),
            None => self.gen_data(),
        }
    }

    pub fn train_coarse(&self) -> Result<()> {
        let (ds, data_key) = self.dataset()?;
        let path = self.coarse_path();
        let key = self.coarse_key(&data_key)?;
        if is_current(&path, &key) {
            log("train-coarse: checkpoint is current, skipping");
            return Ok(());
        }
        let cfg = self.coarse_config();
        log(format!("train-coarse: {} iterations, T = 2^{}", cfg.iterations, cfg.hash.table_size_log2));
        let ckpt = self.pool()?.install(|| train_coarse(&ds, &cfg))?;
        fs::create_dir_all(self.out())?;
        ckpt.save(&path)?;
        log(format!("train-coarse: final loss {:.5}", ckpt.final_loss));
        mark(&path, &key)
    }

    pub fn split(&self) -> Result<()> {
        let (ds, data_key) = self.dataset()?;
        let path = self.blocks_json();
        let key = self.split_key(&data_key)?;
        if is_current(&path, &key) {
            log("split: blocks.json is current, skipping");
            return Ok(());
        }
        let p = &self.cfg.partition;
        let assignment = build_blocks(&ds.camera_centers(), p.k, self.cfg.s_aabb(), self.cfg.partition_seed())?;
        fs::create_dir_all(self.out())?;
        assignment.save(&path)?;
        let sizes: Vec<usize> = assignment.members.iter().map(Vec::len).collect();
        log(format!("split: K = {}, s = {:?}, block sizes {sizes:?}", p.k, p.s_aabb));
        mark(&path, &key)
    }

    fn assignment(&self) -> Result<BlockAssignment> {
        let path = self.blocks_json();
        require(&path, "block assignment", "split")?;
        let a = BlockAssignment::load(&path)?;
        if a.k != self.cfg.partition.k {
            bail!("{} has K = {} but the config asks for K = {}", path.display(), a.k, self.cfg.partition.k);
        }
        Ok(a)
    }

    pub fn train_blocks(&self) -> Result<()> {
        let (ds, data_key) = self.dataset()?;
        require(&self.coarse_path(), "coarse checkpoint", "train-coarse")?;
        let assignment = self.assignment()?;
        let coarse = Checkpoint::load(&self.coarse_path())?;
        let (coarse_hash, split_hash) = (file_hash(&self.coarse_path())?, file_hash(&self.blocks_json())?);
        let keys = (0..assignment.k).map(|b| self.block_key(&data_key, &coarse_hash, &split_hash, b)).collect::<Result<Vec<_>>>()?;
        let stale: Vec<usize> = (0..assignment.k).filter(|&b| !is_current(&self.block_path(b), &keys[b])).collect();
        if stale.is_empty() {
            log("train-blocks: every block is current, skipping");
            return Ok(());
        }
        let cfg = self.cfg.train_config();
        log(format!(
            "train-blocks: training blocks {stale:?} with {:?} decoders on {} worker(s)",
            cfg.decoder_policy, self.jobs
        ));
        let ckpts = train_block_subset(&ds, &assignment, &coarse, &cfg, &stale, self.jobs)?;
        fs::create_dir_all(self.out().join("blocks"))?;
        for (&b, ckpt) in stale.iter().zip(&ckpts) {
            let path = self.block_path(b);
            ckpt.save(&path)?;
            mark(&path, &keys[b])?;
        }
        Ok(())
    }

    fn load_blocks(&self, k: usize) -> Result<Vec<Checkpoint>> {
        (0..k)
            .map(|b| {
                let path = self.block_path(b);
                require(&path, "block checkpoint", "train-blocks")?;
                Ok(Checkpoint::load(&path)?)
            })
            .collect()
    }

    /// Renders the requested views (validation views by default) with the
    /// coarse model and every block.
    pub fn render(&self, views: Option<&[usize]>) -> Result<()> {
        let (ds, data_key) = self.dataset()?;
        require(&self.coarse_path(), "coarse checkpoint", "train-coarse")?;
        let assignment = self.assignment()?;
        let coarse = Checkpoint::load(&self.coarse_path())?;
        let blocks = self.load_blocks(assignment.k)?;
        let views = views.map_or_else(|| ds.val_indices(), <[usize]>::to_vec);
        if let Some(&v) = views.iter().find(|&&v| v >= ds.len()) {
            bail!("view {v} out of range for {} images", ds.len());
        }
        let pool = self.pool()?;
        for index in views {
            let dir = self.renders_dir().join(view_name(index));
            let key = self.render_key(&data_key, assignment.k, index)?;
            if is_current(&dir, &key) {
                continue;
            }
            log(format!("render: {}", view_name(index)));
            fs::create_dir_all(&dir)?;
            let pose = &ds.poses[index];
            pool.install(|| -> Result<()> {
                save_image(&coarse.render(pose)?, &dir.join("coarse"))?;
                for (b, block) in blocks.iter().enumerate() {
                    save_image(&block.render(pose)?, &dir.join(format!("block_{b:02}")))?;
                }
                Ok(())
            })?;
            mark(&dir, &key)?;
        }
        Ok(())
    }

    /// Indices of every rendered view, ascending.
    fn rendered_views(&self) -> Result<Vec<usize>> {
        let dir = self.renders_dir();
        require(&dir, "renders", "render")?;
        let mut views = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if !entry.path().is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(i) = name.strip_prefix("view_").and_then(|s| s.parse::<usize>().ok()) {
                views.push(i);
            }
        }
        views.sort_unstable();
        Ok(views)
    }

    fn load_view(&self, index: usize, k: usize) -> Result<(ImageBuffer, Vec<ImageBuffer>)> {
        let dir = self.renders_dir().join(view_name(index));
        let coarse = ImageBuffer::load_raw(&dir.join("coarse.rgbf"))?;
        let blocks = (0..k)
            .map(|b| Ok(ImageBuffer::load_raw(&dir.join(format!("block_{b:02}.rgbf")))?))
            .collect::<Result<Vec<_>>>()?;
        Ok((coarse, blocks))
    }

    /// Fuses every rendered view with each of `modes`.
    pub fn fuse(&self, modes: &[FusionMode], selection: bool) -> Result<()> {
        let (ds, _) = self.dataset()?;
        let assignment = self.assignment()?;
        let centroids = assignment.centroids(&ds.camera_centers());
        let out = self.fused_dir();
        fs::create_dir_all(&out)?;
        for index in self.rendered_views()? {
            let (coarse, block_images) = self.load_view(index, assignment.k)?;
            let input = FusionInput {
                block_images,
                block_centroids: centroids.clone(),
                global_image: Some(coarse),
                view_center: ds.poses[index].center,
            };
            let name = view_name(index);
            for &mode in modes {
                let stem = out.join(format!("{name}_{}", mode.name()));
                match mode {
                    FusionMode::Idw => save_image(&idw_blend(&input, self.cfg.fusion.gamma)?, &stem)?,
                    FusionMode::Global => {
                        let (img, sel) = global_guided_fuse(&input)?;
                        save_image(&img, &stem)?;
                        if selection {
                            let (w, h) = img.dims();
                            selection_image(w, h, &sel)?.save_png(&out.join(format!("{name}_selection.png")))?;
                        }
                    }
                }
            }
        }
        log(format!("fuse: wrote {}", out.display()));
        Ok(())
    }

    /// Scores every rendered and fused view against the dataset; writes and
    /// returns the reports.
    pub fn eval(&self) -> Result<Vec<MetricReport>> {
        let (ds, _) = self.dataset()?;
        let assignment = self.assignment()?;
        let views = self.rendered_views()?;
        if views.is_empty() {
            bail!("no rendered views in {}", self.renders_dir().display());
        }
        let mut coarse = Vec::new();
        let mut blocks: Vec<Vec<ImageBuffer>> = vec![Vec::new(); assignment.k];
        for &index in &views {
            let (c, bs) = self.load_view(index, assignment.k)?;
            coarse.push(c);
            for (acc, img) in blocks.iter_mut().zip(bs) {
                acc.push(img);
            }
        }
        let score = |label: String, imgs: &[ImageBuffer]| {
            MetricReport::evaluate(label, views.iter().zip(imgs).map(|(&i, img)| (view_name(i), img, &ds.images[i])))
        };
        let mut reports = vec![score(COARSE_LABEL.to_string(), &coarse)?];
        for (b, imgs) in blocks.iter().enumerate() {
            reports.push(score(block_label(b), imgs)?);
        }
        for (mode, label) in [(FusionMode::Idw, IDW_LABEL), (FusionMode::Global, GLOBAL_LABEL)] {
            let paths: Vec<PathBuf> =
                views.iter().map(|&i| self.fused_dir().join(format!("{}_{}.rgbf", view_name(i), mode.name()))).collect();
            if paths.iter().all(|p| p.exists()) {
                let imgs = paths.iter().map(|p| Ok(ImageBuffer::load_raw(p)?)).collect::<Result<Vec<_>>>()?;
                reports.push(score(label.to_string(), &imgs)?);
            }
        }
        let (tsv, json) = self.metrics_paths();
        fs::write(&tsv, metrics_tsv(&reports))?;
        fs::write(&json, serde_json::to_string_pretty(&reports)? + "\n")?;
        Ok(reports)
    }

    /// Every stage in order; current stages are skipped.
    pub fn pipeline(&self) -> Result<Vec<MetricReport>> {
        self.ensure_data().context("stage gen-data")?;
        self.train_coarse().context("stage train-coarse")?;
        self.split().context("stage split")?;
        self.train_blocks().context("stage train-blocks")?;
        self.render(None).context("stage render")?;
        self.fuse(&[FusionMode::Idw, FusionMode::Global], true).context("stage fuse")?;
        self.eval().context("stage eval")
    }
}

/// The summary table followed by one per-image table per method.
pub fn metrics_tsv(reports: &[MetricReport]) -> String {
    let mut s = summary_tsv(reports);
    for r in reports {
        s.push_str(&format!("\n# {}\n", r.label));
        s.push_str(&r.to_tsv());
    }
    s
}
