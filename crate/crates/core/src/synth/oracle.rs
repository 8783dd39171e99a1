//! Brute-force reference implementations. They share no code with the
//! pipeline stages they check beyond the scene and camera types.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use crate::error::{Error, Result};
use crate::rasterizer::{ALPHA_MAX, ALPHA_MIN, LOW_PASS, NEAR_PLANE, TAU_EMIT};
use crate::scene_io::{Camera, FeatureTable, GaussianScene, MaskImage};

/// Transmittance at which the oracle stops blending.
pub const ORACLE_T_STOP: f64 = 1e-6;

/// A Gaussian's image-space footprint computed in plain float64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSplat {
    pub gaussian_id: u32,
    pub mean2d: [f64; 2],
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    inv: [f64; 3],
}

impl OracleSplat {
    pub fn alpha_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.mean2d[0], y - self.mean2d[1]);
        let m = self.inv[0] * dx * dx + 2.0 * self.inv[1] * dx * dy + self.inv[2] * dy * dy;
        self.opacity * (-0.5 * m).exp()
    }
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn quat_to_matrix(q: [f32; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v as f64 / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Project one Gaussian; `None` when it lies behind the near plane.
pub fn oracle_project(scene: &GaussianScene, camera: &Camera, id: u32) -> Option<OracleSplat> {
    let g = &scene.gaussians()[id as usize];
    let w = camera.rotation();
    let t = camera.translation();
    let pw = g.position.map(|v| v as f64);
    let p: Vec<f64> = (0..3)
        .map(|i| w[i][0] * pw[0] + w[i][1] * pw[1] + w[i][2] * pw[2] + t[i])
        .collect();
    if p[2] <= NEAR_PLANE {
        return None;
    }
    let r = quat_to_matrix(g.rotation);
    let s = g.log_scale.map(|v| (v as f64).exp());
    let mut rs = r;
    for row in rs.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= s[j];
        }
    }
    let mut rs_t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rs_t[i][j] = rs[j][i];
        }
    }
    let sigma = mat3_mul(&rs, &rs_t);
    let (x, y, z) = (p[0], p[1], p[2]);
    let jac = [
        [camera.fx / z, 0.0, -camera.fx * x / (z * z)],
        [0.0, camera.fy / z, -camera.fy * y / (z * z)],
        [0.0, 0.0, 0.0],
    ];
    let m = mat3_mul(&jac, &w);
    let ms = mat3_mul(&m, &sigma);
    let mut cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            cov[i][j] = (0..3).map(|k| ms[i][k] * m[j][k]).sum();
        }
    }
    let (a, b, c) = (cov[0][0] + LOW_PASS, cov[0][1], cov[1][1] + LOW_PASS);
    let det = a * c - b * b;
    Some(OracleSplat {
        gaussian_id: id,
        mean2d: [camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy],
        cov2d: [a, b, c],
        depth: z,
        opacity: g.opacity(),
        inv: [c / det, -b / det, a / det],
    })
}

/// Exact per-pixel records `(gaussian, weight)` in blending order, row-major.
pub type OracleRecords = Vec<Vec<(u32, f64)>>;

/// Guard against quadratic blowup: small images or small scenes only.
pub fn oracle_guard(scene: &GaussianScene, camera: &Camera) -> Result<()> {
    if camera.pixel_count() <= 64 * 64 || scene.len() <= 10_000 {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "oracle refuses a {}x{} image with {} Gaussians (limit: 64x64 pixels or 10k Gaussians)",
            camera.width,
            camera.height,
            scene.len()
        )))
    }
}

/// Naive rasterization: every pixel visits every Gaussian in depth order and
/// blends in float64 until transmittance falls below `ORACLE_T_STOP`.
pub fn oracle_rasterize(scene: &GaussianScene, camera: &Camera) -> Result<OracleRecords> {
    oracle_guard(scene, camera)?;
    let mut splats: Vec<OracleSplat> = (0..scene.len() as u32)
        .filter_map(|id| oracle_project(scene, camera, id))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.gaussian_id.cmp(&b.gaussian_id)));

    let mut out = Vec::with_capacity(camera.pixel_count());
    for v in 0..camera.height {
        for u in 0..camera.width {
            let (x, y) = (u as f64 + 0.5, v as f64 + 0.5);
            let mut t = 1.0;
            let mut recs = Vec::new();
            for s in &splats {
                let alpha = s.alpha_at(x, y).min(ALPHA_MAX);
                if alpha < ALPHA_MIN {
                    continue;
                }
                let w = alpha * t;
                if w >= TAU_EMIT {
                    recs.push((s.gaussian_id, w));
                }
                t *= 1.0 - alpha;
                if t < ORACLE_T_STOP {
                    break;
                }
            }
            out.push(recs);
        }
    }
    Ok(out)
}

/// Connected components by breadth-first search, each sorted, listed in
/// order of their smallest node.
pub fn oracle_components(nodes: &[u32], edges: &[(u32, u32)]) -> Vec<Vec<u32>> {
    let mut adj: BTreeMap<u32, Vec<u32>> = nodes.iter().map(|&n| (n, Vec::new())).collect();
    for &(a, b) in edges {
        adj.get_mut(&a).expect("edge endpoint is a node").push(b);
        adj.get_mut(&b).expect("edge endpoint is a node").push(a);
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &start in adj.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &m in &adj[&n] {
                if seen.insert(m) {
                    comp.push(m);
                    queue.push_back(m);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Edge list by testing every pair of surviving masks. A pair is linked
/// when the sets share a Gaussian and both gates pass. Self-loops included,
/// pairs as `(smaller, larger)`, sorted.
pub fn oracle_graph(
    sets: &[Vec<u32>],
    features: &FeatureTable,
    surviving: &[u32],
    tau_iou: f64,
    tau_feat: f64,
) -> Vec<(u32, u32)> {
    let hashed: Vec<HashSet<u32>> = surviving
        .iter()
        .map(|&k| sets[k as usize].iter().copied().collect())
        .collect();
    let mut edges: Vec<(u32, u32)> = surviving.iter().map(|&k| (k, k)).collect();
    for i in 0..surviving.len() {
        for j in i + 1..surviving.len() {
            let inter = hashed[i].intersection(&hashed[j]).count();
            if inter == 0 {
                continue;
            }
            let union = hashed[i].len() + hashed[j].len() - inter;
            let iou = inter as f64 / union as f64;
            let (a, b) = (surviving[i], surviving[j]);
            let sim = cosine(features.row(a as usize), features.row(b as usize));
            if iou >= tau_iou && sim >= tau_feat {
                edges.push((a.min(b), a.max(b)));
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Mask sets and influence sums recomputed from oracle records.
#[derive(Clone, Debug, Default)]
pub struct OracleMaskSets {
    pub sets: Vec<BTreeSet<u32>>,
    pub influence: BTreeMap<(u32, u32), f64>,
}

/// Associate Gaussians with masks by scanning every oracle record.
/// `views` pairs each view's records with its mask image and global offset.
pub fn oracle_mask_sets(
    views: &[(&OracleRecords, &MaskImage, u32)],
    total_masks: usize,
    tau_contrib: f64,
) -> OracleMaskSets {
    let mut out = OracleMaskSets {
        sets: vec![BTreeSet::new(); total_masks],
        influence: BTreeMap::new(),
    };
    for (records, mask, offset) in views {
        for (p, recs) in records.iter().enumerate() {
            let label = mask.pixels[p];
            if label == 0 {
                continue;
            }
            let k = offset + label as u32 - 1;
            for &(g, w) in recs {
                if w >= tau_contrib {
                    out.sets[k as usize].insert(g);
                    *out.influence.entry((g, k)).or_insert(0.0) += w;
                }
            }
        }
    }
    out
}
