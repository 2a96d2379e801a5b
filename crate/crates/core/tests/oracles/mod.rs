//! Independent reference computations shared by the property tests and the
//! acceptance suite. Each check returns the measured quantity; callers
//! compare it against their tolerance.
#![allow(dead_code)]

use blockfield::decoder::{Appearance, DecoderCache, DecoderConfig, DecoderGrad, MlpDecoder};
use blockfield::encoding::{EncodeCache, HashGrid, HashGridConfig};
use blockfield::fusion::{global_guided_fuse, idw_blend, FusionInput};
use blockfield::image::ImageBuffer;
use blockfield::partition::{build_blocks, scale_aabb};
use blockfield::render::{
    composite, composite_backward, contract, render_image, to_unit_cube, OccupancyGrid, RayBounds, RaySampleBatch,
    RenderConfig, SceneNormalization, Spacing,
};
use blockfield::scenegen::AnalyticScene;
use blockfield::{Aabb, CameraPose, Intrinsics, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn small_hash() -> HashGridConfig {
    HashGridConfig { levels: 4, features_per_level: 2, table_size_log2: 10, base_resolution: 4, max_resolution: 32 }
}

pub fn small_decoder() -> DecoderConfig {
    DecoderConfig { width: 16, ..DecoderConfig::default() }
}

/// A random model with every parameter nonzero, so ReLUs are mixed.
pub fn random_model(seed: u64) -> (HashGrid, MlpDecoder) {
    let mut r = rng(seed);
    let mut grid = HashGrid::new(small_hash(), &mut r).unwrap();
    grid.params_mut().iter_mut().for_each(|p| *p = r.gen_range(-1.0..1.0));
    let mut dec = MlpDecoder::new(small_decoder(), grid.output_dim(), 3, &mut r).unwrap();
    dec.params_mut().iter_mut().for_each(|p| *p += r.gen_range(-0.1..0.1));
    dec.appearance_table_mut().iter_mut().for_each(|p| *p = r.gen_range(-1.0..1.0));
    (grid, dec)
}

/// One ray's worth of samples: model-space points, step lengths, a view
/// direction, an appearance row and a target color.
pub struct RayProblem {
    pub points: Vec<Vec3>,
    pub deltas: Vec<f64>,
    pub dir: Vec3,
    pub row: usize,
    pub target: [f64; 3],
    pub background: [f64; 3],
}

impl RayProblem {
    pub fn random(r: &mut ChaCha8Rng, samples: usize) -> Self {
        let origin = Vec3::new(r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5));
        let dir = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)).normalized();
        let mut t = 0.0;
        let mut points = Vec::new();
        let mut deltas = Vec::new();
        for _ in 0..samples {
            let d = r.gen_range(0.02..0.2);
            t += d;
            points.push(origin + dir * t);
            deltas.push(d);
        }
        Self {
            points,
            deltas,
            dir,
            row: r.gen_range(0..3),
            target: [r.gen(), r.gen(), r.gen()],
            background: [r.gen(), r.gen(), r.gen()],
        }
    }

    /// Squared color error after encoding, decoding and compositing.
    pub fn loss(&self, grid: &HashGrid, dec: &MlpDecoder) -> f64 {
        let mut batch = RaySampleBatch::default();
        for (i, p) in self.points.iter().enumerate() {
            let f = grid.encode(to_unit_cube(contract(*p)));
            let (sigma, c) = dec.forward(&f, self.dir, Appearance::Row(self.row)).unwrap();
            batch.push(i as f64, self.deltas[i], sigma, c);
        }
        let c = composite(&batch, self.background).unwrap().color;
        (0..3).map(|k| (c[k] - self.target[k]).powi(2)).sum()
    }

    /// Analytic gradient of [`RayProblem::loss`]: (hash tables, decoder, appearance table).
    pub fn gradient(&self, grid: &HashGrid, dec: &MlpDecoder) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut batch = RaySampleBatch::default();
        let mut encs = Vec::new();
        let mut caches = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            let mut f = vec![0.0; grid.output_dim()];
            let mut enc = EncodeCache::default();
            grid.encode_into(to_unit_cube(contract(*p)), &mut f, &mut enc);
            let mut cache = DecoderCache::default();
            dec.forward_cached(&f, self.dir, Appearance::Row(self.row), &mut cache).unwrap();
            batch.push(i as f64, self.deltas[i], cache.sigma, cache.color);
            encs.push(enc);
            caches.push(cache);
        }
        let c = composite(&batch, self.background).unwrap().color;
        let d_color = [0, 1, 2].map(|k| 2.0 * (c[k] - self.target[k]));
        let (d_sigma, d_c) = composite_backward(&batch, self.background, d_color);
        let mut g_dec = DecoderGrad::zeros_like(dec);
        let mut g_grid = vec![0.0; grid.params().len()];
        let mut d_f = vec![0.0; grid.output_dim()];
        for i in 0..self.points.len() {
            dec.backward(&caches[i], d_sigma[i], d_c[i], &mut g_dec, &mut d_f);
            grid.backward_dense(&encs[i], &d_f, &mut g_grid);
        }
        let mut g_app = vec![0.0; dec.appearance_table().len()];
        let d = dec.config().appearance_dim;
        for (row, g) in &g_dec.appearance {
            g_app[row * d..(row + 1) * d].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        (g_grid, g_dec.params, g_app)
    }
}

/// Which parameter group a probe perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Hash,
    Decoder,
    Appearance,
}

/// Worst relative error of the full encode → decode → composite → loss
/// chain against central differences over `probes` random parameters with
/// nonzero analytic gradient.
pub fn chain_gradient_check(probes: usize, seed: u64) -> f64 {
    let h = 1e-6;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < probes {
        let (mut grid, mut dec) = random_model(r.gen());
        let prob = RayProblem::random(&mut r, 6);
        let (g_grid, g_dec, g_app) = prob.gradient(&grid, &dec);
        for _ in 0..10 {
            let group = [Group::Hash, Group::Decoder, Group::Appearance][r.gen_range(0..3)];
            let grads = match group {
                Group::Hash => &g_grid,
                Group::Decoder => &g_dec,
                Group::Appearance => &g_app,
            };
            let nonzero: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].abs() > 1e-7).collect();
            if nonzero.is_empty() {
                continue;
            }
            let i = nonzero[r.gen_range(0..nonzero.len())];
            let slot = |grid: &mut HashGrid, dec: &mut MlpDecoder, v: f64| match group {
                Group::Hash => grid.params_mut()[i] += v,
                Group::Decoder => dec.params_mut()[i] += v,
                Group::Appearance => dec.appearance_table_mut()[i] += v,
            };
            slot(&mut grid, &mut dec, h);
            let lp = prob.loss(&grid, &dec);
            slot(&mut grid, &mut dec, -2.0 * h);
            let lm = prob.loss(&grid, &dec);
            slot(&mut grid, &mut dec, h);
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(grads[i], numeric, 1e-6));
            done += 1;
            if done == probes {
                break;
            }
        }
    }
    worst
}

/// Worst relative error of the hash-table gradient of `⟨u, encode(x)⟩`.
pub fn encoder_gradient_check(probes: usize, seed: u64) -> f64 {
    let h = 1e-6;
    let mut r = rng(seed);
    let (mut grid, _) = random_model(r.gen());
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = Vec3::new(r.gen(), r.gen(), r.gen());
        let u: Vec<f64> = (0..grid.output_dim()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = grid.encode_backward(x, &u).to_dense(grid.params().len());
        let touched: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
        let i = touched[r.gen_range(0..touched.len())];
        let f = |grid: &HashGrid| grid.encode(x).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        grid.params_mut()[i] += h;
        let fp = f(&grid);
        grid.params_mut()[i] -= 2.0 * h;
        let fm = f(&grid);
        grid.params_mut()[i] += h;
        worst = worst.max(rel_err(g[i], (fp - fm) / (2.0 * h), 1e-6));
    }
    worst
}

/// Worst relative error of decoder parameter and feature gradients of
/// `⟨u_σ, σ⟩ + ⟨u_c, c⟩`.
pub fn decoder_gradient_check(probes: usize, seed: u64) -> f64 {
    let h = 1e-6;
    let mut r = rng(seed);
    let (_, mut dec) = random_model(r.gen());
    let fd = dec.feature_dim();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut feat: Vec<f64> = (0..fd).map(|_| r.gen_range(-1.0..1.0)).collect();
        let dir = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), 0.5).normalized();
        let (us, uc) = (r.gen_range(-1.0..1.0), [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
        let row = r.gen_range(0..3);
        let f = |dec: &MlpDecoder, feat: &[f64]| {
            let (s, c) = dec.forward(feat, dir, Appearance::Row(row)).unwrap();
            us * s + (0..3).map(|k| uc[k] * c[k]).sum::<f64>()
        };
        let mut cache = DecoderCache::default();
        dec.forward_cached(&feat, dir, Appearance::Row(row), &mut cache).unwrap();
        let mut g = DecoderGrad::zeros_like(&dec);
        let mut df = vec![0.0; fd];
        dec.backward(&cache, us, uc, &mut g, &mut df);
        if r.gen_bool(0.5) {
            let nonzero: Vec<usize> = (0..g.params.len()).filter(|&i| g.params[i] != 0.0).collect();
            let i = nonzero[r.gen_range(0..nonzero.len())];
            dec.params_mut()[i] += h;
            let fp = f(&dec, &feat);
            dec.params_mut()[i] -= 2.0 * h;
            let fm = f(&dec, &feat);
            dec.params_mut()[i] += h;
            worst = worst.max(rel_err(g.params[i], (fp - fm) / (2.0 * h), 1e-6));
        } else {
            let i = r.gen_range(0..fd);
            feat[i] += h;
            let fp = f(&dec, &feat);
            feat[i] -= 2.0 * h;
            let fm = f(&dec, &feat);
            feat[i] += h;
            worst = worst.max(rel_err(df[i], (fp - fm) / (2.0 * h), 1e-6));
        }
    }
    worst
}

/// The decoder evaluated with plain nested loops over its layer views.
pub fn naive_decode(dec: &MlpDecoder, feature: &[f64], dir: Vec3, app: &[f64]) -> (f64, [f64; 3]) {
    let apply = |i: usize, x: &[f64], relu: bool| -> Vec<f64> {
        let l = dec.layer(i);
        (0..l.out_dim)
            .map(|o| {
                let mut s = l.bias[o];
                for j in 0..l.in_dim {
                    s += l.weights[o * l.in_dim + j] * x[j];
                }
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    };
    let h = apply(0, feature, true);
    let d = apply(1, &h, false);
    let sigma = if d[0] > 30.0 { d[0] } else { (1.0 + d[0].exp()).ln() };
    let mut x: Vec<f64> = d[1..].to_vec();
    let deg = dec.config().view_encoding_degree;
    let mut sh = vec![0.0; (deg * deg) as usize];
    blockfield::decoder::sh_encode(deg, dir, &mut sh);
    x.extend(sh);
    x.extend_from_slice(app);
    let last = dec.num_layers() - 1;
    for i in 2..last {
        x = apply(i, &x, true);
    }
    let z = apply(last, &x, false);
    (sigma, [0, 1, 2].map(|k| 1.0 / (1.0 + (-z[k]).exp())))
}

/// SSIM with every window computed by an explicit double loop.
pub fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (w, h) = (a.width() as usize, a.height() as usize);
    let n = 11;
    let sigma: f64 = 1.5;
    let mut kern = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            kern[i * n + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kern.iter().sum();
    kern.iter_mut().for_each(|k| *k /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let k = kern[i * n + j];
                        let va = a.get((x0 + j) as u32, (y0 + i) as u32)[c];
                        let vb = b.get((x0 + j) as u32, (y0 + i) as u32)[c];
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

pub fn random_image(r: &mut ChaCha8Rng, w: u32, h: u32) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |_, _| [r.gen(), r.gen(), r.gen()]).unwrap()
}

pub fn mean_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = a.pixels().len() * 3;
    a.pixels().iter().zip(b.pixels()).map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).abs()).sum::<f64>()).sum::<f64>()
        / n as f64
}

/// Cameras looking at the origin of the analytic test scenes.
pub fn oracle_poses(size: u32) -> Vec<CameraPose> {
    [Vec3::new(2.2, 1.1, 0.8), Vec3::new(-1.4, 2.0, 0.5), Vec3::new(0.3, -2.4, 1.2)]
        .into_iter()
        .map(|eye| {
            let k = Intrinsics::centered(size, size, size as f64 * 1.1);
            CameraPose::look_at(eye, Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0), k).unwrap()
        })
        .collect()
}

pub fn oracle_pose(size: u32) -> CameraPose {
    oracle_poses(size).remove(0)
}

/// The renderer driven by the analytic field: linear spacing over the
/// scene's bounding sphere, midpoint samples, every cell occupied.
pub fn render_analytic(scene: &AnalyticScene, pose: &CameraPose, steps: usize) -> ImageBuffer {
    let (center, radius) = scene.bounding_sphere().unwrap();
    let cfg = RenderConfig {
        max_samples: steps,
        spacing: Spacing::Linear,
        bounds: RayBounds::Sphere { center, radius },
        jitter: false,
        background: scene.background,
        early_stop: 0.0,
    };
    render_image(scene, &SceneNormalization::IDENTITY, pose, &OccupancyGrid::full(8), &cfg, 0).unwrap()
}

pub struct RenderOracle {
    /// Renderer vs reference at equal step counts.
    pub matched_mae: f64,
    /// Error against a converged reference at `steps` and `2·steps`.
    pub coarse_err: f64,
    pub fine_err: f64,
}

/// Step count of the converged reference.
pub const TRUTH_STEPS: usize = 4096;

/// Desk scene from three poses: the renderer at `steps` against the
/// reference at `steps`, and at `steps` and `2·steps` against a converged
/// reference. Errors are averaged over the poses.
pub fn render_oracle(steps: usize, size: u32) -> RenderOracle {
    let scene = AnalyticScene::desk();
    let poses = oracle_poses(size);
    let mut o = RenderOracle { matched_mae: 0.0, coarse_err: 0.0, fine_err: 0.0 };
    for pose in &poses {
        let truth = scene.reference_render(pose, TRUTH_STEPS).unwrap();
        let reference = scene.reference_render(pose, steps).unwrap();
        let coarse = render_analytic(&scene, pose, steps);
        let fine = render_analytic(&scene, pose, 2 * steps);
        o.matched_mae += mean_abs_diff(&coarse, &reference) / poses.len() as f64;
        o.coarse_err += mean_abs_diff(&coarse, &truth) / poses.len() as f64;
        o.fine_err += mean_abs_diff(&fine, &truth) / poses.len() as f64;
    }
    o
}

pub struct ContractionCheck {
    /// Largest `‖contract(x) − x‖` for `‖x‖ ≤ 1`.
    pub inside: f64,
    /// Largest contracted norm seen.
    pub max_norm: f64,
    /// Largest jump across `‖x‖ = 1` for steps of 1e-12.
    pub seam: f64,
}

pub fn contraction_check(n: usize, seed: u64) -> ContractionCheck {
    let mut r = rng(seed);
    let mut c = ContractionCheck { inside: 0.0, max_norm: 0.0, seam: 0.0 };
    for _ in 0..n {
        let dir = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)).normalized();
        let inner = dir * r.gen_range(0.0..=1.0);
        c.inside = c.inside.max((contract(inner) - inner).norm());
        let far = dir * 10f64.powf(r.gen_range(-3.0..8.0));
        c.max_norm = c.max_norm.max(contract(far).norm()).max(contract(inner).norm());
        let below = dir * (1.0 - 1e-12);
        let above = dir * (1.0 + 1e-12);
        c.seam = c.seam.max((contract(above) - contract(below)).norm());
    }
    c
}

pub fn random_centers(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    let clusters = r.gen_range(1..5);
    let anchors: Vec<Vec3> = (0..clusters)
        .map(|_| Vec3::new(r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-1.0..1.0)))
        .collect();
    (0..n)
        .map(|_| {
            let a = anchors[r.gen_range(0..clusters)];
            a + Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-0.3..0.3))
        })
        .collect()
}

pub struct PartitionCheck {
    pub scale_example_exact: bool,
    pub identity_exact: bool,
    pub monotone_sets: usize,
    pub covered_sets: usize,
    pub total_sets: usize,
}

/// Scale arithmetic plus monotonicity and coverage over `sets` random pose sets.
pub fn partition_check(sets: usize, seed: u64) -> PartitionCheck {
    let unit = Aabb::new(Vec3::ZERO, Vec3::ONE);
    let grown = scale_aabb(&unit, Vec3::splat(2.0));
    let scale_example_exact = grown.lo == Vec3::splat(-0.5) && grown.hi == Vec3::splat(1.5);
    let mut r = rng(seed);
    let mut identity_exact = true;
    let mut c = PartitionCheck { scale_example_exact, identity_exact, monotone_sets: 0, covered_sets: 0, total_sets: sets };
    let ladder = [1.0, 1.1, 1.3, 1.6, 2.0, 3.0];
    for _ in 0..sets {
        let n = r.gen_range(8..60);
        let centers = random_centers(&mut r, n);
        let b = Aabb::from_points(centers.iter().copied()).unwrap();
        identity_exact &= scale_aabb(&b, Vec3::ONE) == b;
        let k = r.gen_range(1..5);
        let seed = r.gen();
        let mut monotone = true;
        let mut covered = true;
        let mut prev: Option<Vec<Vec<usize>>> = None;
        for s in ladder {
            let a = build_blocks(&centers, k, Vec3::splat(s), seed).unwrap();
            let mut seen = vec![false; n];
            a.members.iter().flatten().for_each(|&i| seen[i] = true);
            covered &= seen.iter().all(|v| *v);
            if let Some(p) = &prev {
                monotone &= p.iter().zip(&a.members).all(|(small, big)| small.iter().all(|i| big.contains(i)));
            }
            prev = Some(a.members);
        }
        c.monotone_sets += monotone as usize;
        c.covered_sets += covered as usize;
    }
    c.identity_exact = identity_exact;
    c
}

pub struct FusionCheck {
    /// Largest deviation from the closed-form weights (0.75, 0.25).
    pub idw_err: f64,
    /// Pixels where global-guided output or selection differ from brute force.
    pub guided_mismatches: usize,
    pub pixels: usize,
}

pub fn fusion_check(seed: u64) -> FusionCheck {
    let mut r = rng(seed);
    let a = random_image(&mut r, 16, 16);
    let b = random_image(&mut r, 16, 16);
    let input = FusionInput {
        block_images: vec![a.clone(), b.clone()],
        block_centroids: vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(-3.0, 0.0, 0.0)],
        global_image: None,
        view_center: Vec3::ZERO,
    };
    let out = idw_blend(&input, 1.0).unwrap();
    let mut idw_err: f64 = 0.0;
    for ((o, p), q) in out.pixels().iter().zip(a.pixels()).zip(b.pixels()) {
        for k in 0..3 {
            idw_err = idw_err.max((o[k] - (0.75 * p[k] + 0.25 * q[k])).abs());
        }
    }

    // Colors on a dyadic grid make exact ties common, exercising the tie rule.
    let q = |r: &mut ChaCha8Rng| ImageBuffer::from_fn(64, 64, |_, _| [0, 1, 2].map(|_| r.gen_range(0..5) as f64 / 4.0)).unwrap();
    let blocks: Vec<ImageBuffer> = (0..3).map(|_| q(&mut r)).collect();
    let global = q(&mut r);
    let input = FusionInput {
        block_images: blocks.clone(),
        block_centroids: vec![Vec3::ZERO; 3],
        global_image: Some(global.clone()),
        view_center: Vec3::ONE,
    };
    let (fused, sel) = global_guided_fuse(&input).unwrap();
    let mut mismatches = 0;
    for (p, g) in global.pixels().iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, img) in blocks.iter().enumerate() {
            let c = img.pixels()[p];
            let d = ((c[0] - g[0]).powi(2) + (c[1] - g[1]).powi(2) + (c[2] - g[2]).powi(2)).sqrt();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        if sel[p] != best || fused.pixels()[p] != blocks[best].pixels()[p] {
            mismatches += 1;
        }
    }
    FusionCheck { idw_err, guided_mismatches: mismatches, pixels: global.pixels().len() }
}
