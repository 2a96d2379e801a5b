//! Splitting a camera set into overlapping blocks.
//!
//! Camera centers are clustered with k-means. Each cluster's bounding box is
//! grown about its center by a per-axis factor `s ≥ 1`, and every camera whose
//! center falls inside a grown box joins that block, so neighboring blocks
//! share the cameras near their boundary.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};

pub const KMEANS_MAX_ITERS: usize = 100;
/// Relative pad added to zero-extent axes of a scaled box.
pub const DEGENERATE_PAD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec3>,
    pub iterations: usize,
}

impl KMeans {
    pub fn inertia(&self, points: &[Vec3]) -> f64 {
        within_cluster_ss(points, &self.labels, self.centroids.len())
    }
}

/// Sum of squared distances of each point to its cluster mean.
pub fn within_cluster_ss(points: &[Vec3], labels: &[usize], k: usize) -> f64 {
    let mut sums = vec![Vec3::ZERO; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l] += *p;
        counts[l] += 1;
    }
    let means: Vec<Vec3> =
        sums.iter().zip(&counts).map(|(s, &c)| if c > 0 { *s / c as f64 } else { Vec3::ZERO }).collect();
    points.iter().zip(labels).map(|(p, &l)| (*p - means[l]).norm_squared()).sum()
}

fn nearest(p: Vec3, centroids: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = (p - *c).norm_squared();
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn distinct_count(points: &[Vec3]) -> usize {
    points
        .iter()
        .map(|p| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits()))
        .collect::<HashSet<_>>()
        .len()
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed;
/// empty clusters are reseeded at the point farthest from its centroid.
pub fn kmeans_cluster(points: &[Vec3], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Clustering("K must be at least 1".into()));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("camera center".into()));
    }
    let distinct = distinct_count(points);
    if distinct < k {
        return Err(Error::Clustering(format!("{distinct} distinct points cannot form {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(*p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            0
        };
        centroids.push(points[pick]);
    }

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(*p, &centroids).0).collect();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sums = vec![Vec3::ZERO; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l] += *p;
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        // Reseed empty clusters at the worst-fit point.
        for j in 0..k {
            if counts[j] == 0 {
                let far = points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| counts[labels[*i]] > 1)
                    .map(|(i, p)| (i, (*p - centroids[labels[i]]).norm_squared()))
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                counts[labels[far]] -= 1;
                labels[far] = j;
                counts[j] = 1;
                centroids[j] = points[far];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(*p, &centroids).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    // Final guarantee that no cluster is empty.
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|l| counts[*l] += 1);
        let Some(empty) = counts.iter().position(|c| *c == 0) else { break };
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = (points[a] - centroids[labels[a]]).norm_squared();
                let db = (points[b] - centroids[labels[b]]).norm_squared();
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .ok_or_else(|| Error::Clustering("cannot fill empty cluster".into()))?;
        labels[far] = empty;
        centroids[empty] = points[far];
    }
    Ok(KMeans { labels, centroids, iterations })
}

/// Grows a box about its center: half-extent `h` becomes `s ∘ h`. Axes with
/// zero extent keep their position and get a tiny pad.
pub fn scale_aabb(b: &Aabb, s: Vec3) -> Aabb {
    let h = b.extent() * 0.5;
    // Growing each face by (s − 1)∘h keeps s = 1 bit-exact.
    let grow = (s - Vec3::ONE).hadamard(h);
    let mut lo = b.lo - grow;
    let mut hi = b.hi + grow;
    let pad = DEGENERATE_PAD * b.extent().max_element();
    for (a, (l, u)) in [(&mut lo.x, &mut hi.x), (&mut lo.y, &mut hi.y), (&mut lo.z, &mut hi.z)]
        .into_iter()
        .enumerate()
    {
        if h[a] == 0.0 {
            *l = b.lo[a] - pad;
            *u = b.hi[a] + pad;
        }
    }
    Aabb { lo, hi }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAssignment {
    pub k: usize,
    pub s: Vec3,
    /// Primary cluster of each image.
    pub labels: Vec<usize>,
    /// Grown box per block.
    pub block_aabbs: Vec<Aabb>,
    /// Sorted image indices per block; blocks may overlap.
    pub members: Vec<Vec<usize>>,
}

impl BlockAssignment {
    /// Mean camera center of each block's members.
    pub fn centroids(&self, centers: &[Vec3]) -> Vec<Vec3> {
        self.members
            .iter()
            .map(|m| m.iter().fold(Vec3::ZERO, |acc, &i| acc + centers[i]) / m.len().max(1) as f64)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BlocksFile {
            k: self.k,
            s: self.s.to_array(),
            blocks: self
                .block_aabbs
                .iter()
                .zip(&self.members)
                .map(|(b, m)| BlockEntry { aabb: [b.lo.to_array(), b.hi.to_array()], members: m.clone() })
                .collect(),
            labels: self.labels.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BlocksFile = serde_json::from_str(text)?;
        if file.blocks.len() != file.k {
            return Err(Error::Config(format!("k = {} but {} blocks listed", file.k, file.blocks.len())));
        }
        Ok(Self {
            k: file.k,
            s: Vec3::from_array(file.s),
            labels: file.labels,
            block_aabbs: file
                .blocks
                .iter()
                .map(|b| Aabb::new(Vec3::from_array(b.aabb[0]), Vec3::from_array(b.aabb[1])))
                .collect(),
            members: file.blocks.into_iter().map(|b| b.members).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlocksFile {
    k: usize,
    s: [f64; 3],
    blocks: Vec<BlockEntry>,
    labels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    aabb: [[f64; 3]; 2],
    members: Vec<usize>,
}

/// Clusters camera centers and regroups them into overlapping blocks.
pub fn build_blocks(centers: &[Vec3], k: usize, s: Vec3, seed: u64) -> Result<BlockAssignment> {
    if !(s.x >= 1.0 && s.y >= 1.0 && s.z >= 1.0) {
        return Err(Error::Config(format!("AABB scale factors must be >= 1, got {s:?}")));
    }
    let km = kmeans_cluster(centers, k, seed)?;
    let mut block_aabbs = Vec::with_capacity(k);
    let mut members = Vec::with_capacity(k);
    for j in 0..k {
        let pts = centers.iter().zip(&km.labels).filter(|(_, l)| **l == j).map(|(p, _)| *p);
        let b = Aabb::from_points(pts).ok_or_else(|| Error::Clustering(format!("cluster {j} is empty")))?;
        let grown = scale_aabb(&b, s);
        let m: Vec<usize> = (0..centers.len())
            .filter(|&i| km.labels[i] == j || grown.contains(centers[i]))
            .collect();
        block_aabbs.push(grown);
        members.push(m);
    }
    Ok(BlockAssignment { k, s, labels: km.labels, block_aabbs, members })
}
