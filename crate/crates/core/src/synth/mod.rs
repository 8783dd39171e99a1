//! Deterministic synthetic scenes with known object partitions, planted
//! features, ground-truth masks and brute-force oracles.

mod oracle;

pub use oracle::*;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::QueryGroundTruth;
use crate::rasterizer::{project_gaussians, TiledView};
use crate::scene_io::{
    encode_features, encode_scene, logit, save_cameras, save_mask_png, save_queries, Camera,
    FeatureTable, Gaussian, GaussianScene, MaskImage, QueryEntry, QuerySet, QueryTask, ViewSet,
};

/// Feature dimension of the planted semantic space.
pub const DEFAULT_DIM: usize = 512;
/// A pixel is covered when the summed weight there reaches this.
pub const COVERAGE: f64 = 0.5;
/// Label value for pixels and Gaussians without an object.
pub const NO_OBJECT: u16 = u16::MAX;
/// Largest pixel-times-Gaussian product for which `GtRenderer::Auto`
/// draws ground truth with the oracle.
pub const ORACLE_GT_BUDGET: usize = 50_000_000;

/// A flat elliptical blob of surfel-like Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub center: [f64; 3],
    /// Semi-axis along x; the y semi-axis is `radius * aspect`.
    pub radius: f64,
    pub aspect: f64,
    pub gaussians: usize,
    pub opacity: f64,
    /// Surfel standard deviation in units of the mean surfel spacing.
    pub footprint: f64,
    /// Standard deviation of the out-of-plane jitter and surfel thickness.
    pub thickness: f64,
    /// Objects in the same group share one planted feature vector and label.
    pub feature_group: usize,
}

impl ObjectSpec {
    pub fn disc(center: [f64; 3], gaussians: usize, feature_group: usize) -> Self {
        Self {
            center,
            radius: 1.0,
            aspect: 1.0,
            gaussians,
            opacity: 0.9,
            footprint: 0.7,
            thickness: 0.002,
            feature_group,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub distance: f64,
    pub target: [f64; 3],
    /// Elevation range in degrees above the z = 0 plane.
    pub elevation_deg: [f64; 2],
    /// Alternate cameras between the upper and lower hemisphere.
    pub both_hemispheres: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpuriousPlacement {
    /// On a random visible object in a random view.
    Random,
    /// On `object` in `view`, or in the view where the object covers the most pixels.
    OnObject { object: usize, view: Option<usize> },
    /// Around the projection of the object's center, one patch in each listed view.
    Anchored { object: usize, views: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSize {
    Pixels(usize),
    /// A fraction of the object's pixels in the patch's view.
    Fraction(f64),
}

/// A small planted mask with a random feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub placement: SpuriousPlacement,
    pub size: PatchSize,
}

/// How object-selection query embeddings are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryEmbedding {
    /// The planted group vector.
    #[default]
    Planted,
    /// The normalized mean of the object's own mask features.
    InstanceMean,
}

/// Which rasterizer draws the ground-truth masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtRenderer {
    /// The oracle within `ORACLE_GT_BUDGET`, otherwise the tiled rasterizer.
    #[default]
    Auto,
    Oracle,
    Tiled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub dim: usize,
    pub noise_sigma: f64,
    pub objects: Vec<ObjectSpec>,
    pub rig: CameraRig,
    pub spurious: Vec<SpuriousSpec>,
    pub query_embedding: QueryEmbedding,
    pub gt_renderer: GtRenderer,
}

impl SceneSpec {
    /// Discs on a square grid with center spacing six radii, seen from an
    /// upper spherical cap.
    pub fn grid(
        seed: u64,
        n_objects: usize,
        gaussians_per_object: usize,
        n_views: usize,
        noise_sigma: f64,
    ) -> Self {
        let k = (n_objects as f64).sqrt().ceil().max(1.0) as usize;
        let spacing = 6.0;
        let objects = (0..n_objects)
            .map(|i| {
                let (ix, iy) = ((i % k) as f64, (i / k) as f64);
                let off = (k as f64 - 1.0) / 2.0;
                let center = [(ix - off) * spacing, (iy - off) * spacing, 0.0];
                ObjectSpec::disc(center, gaussians_per_object, i)
            })
            .collect();
        let half_extent = spacing * (k as f64 - 1.0) / 2.0 + 1.0;
        let distance = 14.0 * (half_extent / 4.0).max(1.0);
        let (width, height) = (256, 256);
        let fx = 0.5 * width.min(height) as f64 * distance / (half_extent * 1.45);
        Self {
            seed,
            dim: DEFAULT_DIM,
            noise_sigma,
            objects,
            rig: CameraRig {
                views: n_views,
                width,
                height,
                fx,
                distance,
                target: [0.0; 3],
                elevation_deg: [55.0, 75.0],
                both_hemispheres: false,
            },
            spurious: Vec::new(),
            query_embedding: QueryEmbedding::Planted,
            gt_renderer: GtRenderer::Auto,
        }
    }

    /// The acceptance benchmark: 4 objects of 2,000 Gaussians, 8 views,
    /// feature noise 0.05.
    pub fn benchmark(seed: u64) -> Self {
        Self::grid(seed, 4, 2_000, 8, 0.05)
    }

    /// The throughput scene: a 10 x 10 grid of discs with 1,000 Gaussians
    /// each, 50 views at 960 x 540.
    pub fn throughput(seed: u64) -> Self {
        let mut spec = Self::grid(seed, 100, 1_000, 50, 0.05);
        for o in &mut spec.objects {
            o.radius = 2.5;
        }
        let half_extent = 6.0 * 4.5 + 2.5;
        spec.rig.width = 960;
        spec.rig.height = 540;
        spec.rig.distance = 80.0;
        spec.rig.fx = 0.5 * 540.0 * spec.rig.distance / (half_extent * 1.2);
        spec
    }

    /// A scene that separates the three gates of the clustering stage:
    /// - two coplanar discs sharing one feature vector, nearly touching, so
    ///   their masks share Gaussians only along the seam;
    /// - a sparse translucent disc floating just above a smaller dense
    ///   disc, so masks of the two from opposite sides overlap strongly in
    ///   Gaussians while their features are orthogonal;
    /// - spurious masks with random features anchored on the first two discs
    ///   in ten of the twelve views, each holding fewer than 200 Gaussians.
    ///
    /// Queries use instance-mean embeddings so that the twin discs stay
    /// distinguishable under argmax selection.
    pub fn ablation(seed: u64) -> Self {
        let gap = 0.02;
        let a = ObjectSpec::disc([-3.5, -1.0 - gap / 2.0, 0.0], 1500, 0);
        let b = ObjectSpec::disc([-3.5, 1.0 + gap / 2.0, 0.0], 1500, 0);
        let cover = ObjectSpec {
            radius: 1.1,
            opacity: 0.5,
            footprint: 0.55,
            ..ObjectSpec::disc([3.0, 0.0, 0.15], 100, 1)
        };
        let under = ObjectSpec {
            radius: 0.65,
            opacity: 0.5,
            ..ObjectSpec::disc([3.0, 0.0, -0.15], 600, 2)
        };
        let views = 12;
        let anchored: Vec<usize> = (0..views).filter(|&v| v != 2 && v != 9).collect();
        let spurious = [0, 1]
            .map(|object| SpuriousSpec {
                placement: SpuriousPlacement::Anchored {
                    object,
                    views: anchored.clone(),
                },
                size: PatchSize::Fraction(0.06),
            })
            .to_vec();
        Self {
            seed,
            dim: 64,
            noise_sigma: 0.05,
            objects: vec![a, b, cover, under],
            rig: CameraRig {
                views,
                width: 256,
                height: 256,
                fx: 400.0,
                distance: 16.0,
                target: [0.0; 3],
                elevation_deg: [35.0, 60.0],
                both_hemispheres: true,
            },
            spurious,
            query_embedding: QueryEmbedding::InstanceMean,
            gt_renderer: GtRenderer::Auto,
        }
    }

    /// Rescale the rig to a new resolution, keeping the field of view.
    pub fn with_resolution(mut self, width: u32, height: u32) -> Self {
        let old = self.rig.width.min(self.rig.height) as f64;
        self.rig.fx *= width.min(height) as f64 / old;
        self.rig.width = width;
        self.rig.height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let groups = self.feature_groups();
        if self.objects.is_empty() {
            return Err(Error::Validation("a synthetic scene needs at least one object".into()));
        }
        if groups > self.dim {
            return Err(Error::Validation(format!(
                "{groups} feature groups cannot be orthogonal in dimension {}",
                self.dim
            )));
        }
        if self.objects.len() >= NO_OBJECT as usize {
            return Err(Error::Validation("too many objects".into()));
        }
        if self.rig.views < 2 {
            return Err(Error::Validation("at least two views are required".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Validation("noise sigma must be non-negative".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.gaussians == 0 || !(o.radius > 0.0 && o.aspect > 0.0 && o.footprint > 0.0) {
                return Err(Error::Validation(format!("object {i} has an empty or degenerate shape")));
            }
            if !(o.opacity > 0.0 && o.opacity < 1.0) || !(o.thickness > 0.0) {
                return Err(Error::Validation(format!("object {i} has invalid opacity or thickness")));
            }
        }
        for s in &self.spurious {
            let in_range = match &s.placement {
                SpuriousPlacement::Random => true,
                SpuriousPlacement::OnObject { object, view } => {
                    *object < self.objects.len() && view.is_none_or(|v| v < self.rig.views)
                }
                SpuriousPlacement::Anchored { object, views } => {
                    *object < self.objects.len() && views.iter().all(|&v| v < self.rig.views)
                }
            };
            if !in_range {
                return Err(Error::Validation("spurious mask placement out of range".into()));
            }
            let size_ok = match s.size {
                PatchSize::Pixels(n) => n > 0,
                PatchSize::Fraction(f) => f > 0.0 && f <= 1.0,
            };
            if !size_ok {
                return Err(Error::Validation("spurious masks need a positive size".into()));
            }
        }
        Ok(())
    }

    pub fn feature_groups(&self) -> usize {
        self.objects.iter().map(|o| o.feature_group + 1).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestObject {
    pub id: usize,
    pub label: u16,
    /// Gaussian ids `start..end`.
    pub gaussian_start: u32,
    pub gaussian_end: u32,
    pub center: [f64; 3],
    /// Planted feature vector before noise.
    pub feature: Vec<f32>,
    /// Normalized mean of this object's mask features.
    pub instance_feature: Vec<f32>,
}

impl ManifestObject {
    pub fn gaussians(&self) -> std::ops::Range<u32> {
        self.gaussian_start..self.gaussian_end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Object(usize),
    Spurious,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMask {
    pub global_id: u32,
    pub view_id: u32,
    pub local: u32,
    pub source: MaskSource,
    pub pixels: usize,
    /// Norm of the feature row as written.
    pub feature_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub dim: usize,
    pub noise_sigma: f64,
    pub objects: Vec<ManifestObject>,
    pub cameras: Vec<Camera>,
    pub masks: Vec<ManifestMask>,
    /// Global ids of the planted spurious masks.
    pub spurious_masks: Vec<u32>,
    pub gt_renderer: GtRenderer,
}

impl SynthManifest {
    pub fn object_of_gaussian(&self, n: usize) -> Vec<u16> {
        let mut out = vec![NO_OBJECT; n];
        for o in &self.objects {
            for g in o.gaussians() {
                out[g as usize] = o.id as u16;
            }
        }
        out
    }

    pub fn label_of_gaussian(&self, n: usize) -> Vec<u16> {
        let mut out = vec![NO_OBJECT; n];
        for o in &self.objects {
            for g in o.gaussians() {
                out[g as usize] = o.label;
            }
        }
        out
    }

    pub fn label_count(&self) -> usize {
        self.objects.iter().map(|o| o.label as usize + 1).max().unwrap_or(0)
    }
}

/// Everything a synthetic scene consists of, in memory.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SceneSpec,
    pub scene: GaussianScene,
    pub views: ViewSet,
    pub features: FeatureTable,
    pub manifest: SynthManifest,
    /// Per view, row-major object id of each pixel or `NO_OBJECT`.
    pub gt_objects: Vec<Vec<u16>>,
}

impl SynthScene {
    pub fn object_queries(&self) -> QuerySet {
        let entries = self
            .manifest
            .objects
            .iter()
            .map(|o| QueryEntry {
                name: format!("object_{}", o.id),
                embedding: match self.spec.query_embedding {
                    QueryEmbedding::Planted => o.feature.clone(),
                    QueryEmbedding::InstanceMean => o.instance_feature.clone(),
                },
            })
            .collect();
        QuerySet {
            task: QueryTask::ObjectSelection,
            entries,
        }
    }

    pub fn label_queries(&self) -> QuerySet {
        let mut entries: Vec<QueryEntry> = Vec::new();
        for label in 0..self.manifest.label_count() {
            let o = self
                .manifest
                .objects
                .iter()
                .find(|o| o.label as usize == label)
                .expect("labels are contiguous");
            entries.push(QueryEntry {
                name: format!("label_{label}"),
                embedding: o.feature.clone(),
            });
        }
        QuerySet {
            task: QueryTask::SemanticSegmentation,
            entries,
        }
    }

    /// Ground truth of every object query over all views.
    pub fn selection_ground_truth(&self) -> Vec<QueryGroundTruth> {
        self.manifest
            .objects
            .iter()
            .map(|o| QueryGroundTruth {
                name: format!("object_{}", o.id),
                views: self
                    .views
                    .cameras
                    .iter()
                    .zip(&self.gt_objects)
                    .map(|(c, gt)| (c.view_id, gt.iter().map(|&v| v == o.id as u16).collect()))
                    .collect(),
            })
            .collect()
    }

    pub fn gt_labels(&self) -> Vec<u16> {
        self.manifest.label_of_gaussian(self.scene.len())
    }

    /// Write every artifact in its interchange format:
    /// `scene.ply`, `cameras.json`, `masks/<view_id>.png`, `features.splf`,
    /// `manifest.json`, `gt/<view_id>.png`, `queries_objects.json` and
    /// `queries_labels.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let io = |p: &Path, e| Error::io(p, e);
        for sub in ["masks", "gt"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        }
        let p = dir.join("scene.ply");
        fs::write(&p, encode_scene(&self.scene)).map_err(|e| io(&p, e))?;
        save_cameras(&self.views.cameras, dir.join("cameras.json"))?;
        for m in &self.views.masks {
            save_mask_png(m, dir.join("masks").join(format!("{}.png", m.view_id)))?;
        }
        for (c, gt) in self.views.cameras.iter().zip(&self.gt_objects) {
            let img = MaskImage {
                view_id: c.view_id,
                width: c.width,
                height: c.height,
                pixels: gt.iter().map(|&o| if o == NO_OBJECT { 0 } else { o + 1 }).collect(),
            };
            save_mask_png(&img, dir.join("gt").join(format!("{}.png", c.view_id)))?;
        }
        let p = dir.join("features.splf");
        fs::write(&p, encode_features(&self.features)).map_err(|e| io(&p, e))?;
        let p = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&p, text).map_err(|e| io(&p, e))?;
        save_queries(&self.object_queries(), dir.join("queries_objects.json"))?;
        save_queries(&self.label_queries(), dir.join("queries_labels.json"))?;
        Ok(())
    }
}

/// Load per-view object ground truth written by [`SynthScene::write`].
pub fn load_gt_objects(dir: impl AsRef<Path>, cameras: &[Camera]) -> Result<Vec<Vec<u16>>> {
    let dir = dir.as_ref();
    cameras
        .iter()
        .map(|c| {
            let m = crate::scene_io::load_mask_png(dir.join(format!("{}.png", c.view_id)), c.view_id)?;
            Ok(m.pixels.iter().map(|&v| if v == 0 { NO_OBJECT } else { v - 1 }).collect())
        })
        .collect()
}

/// Object-selection ground truth for every manifest object over all views.
pub fn selection_ground_truth(
    manifest: &SynthManifest,
    cameras: &[Camera],
    gt_objects: &[Vec<u16>],
) -> Vec<QueryGroundTruth> {
    manifest
        .objects
        .iter()
        .map(|o| QueryGroundTruth {
            name: format!("object_{}", o.id),
            views: cameras
                .iter()
                .zip(gt_objects)
                .map(|(c, gt)| (c.view_id, gt.iter().map(|&v| v == o.id as u16).collect()))
                .collect(),
        })
        .collect()
}

/// The generator entry point with the default grid layout.
pub fn generate_scene(
    seed: u64,
    n_objects: usize,
    gaussians_per_object: usize,
    n_views: usize,
    noise_sigma: f64,
) -> Result<SynthScene> {
    build_scene(&SceneSpec::grid(seed, n_objects, gaussians_per_object, n_views, noise_sigma))
}

/// OpenCV-convention camera at `eye` looking at `target` with +z up.
pub fn look_at(view_id: u32, eye: [f64; 3], target: [f64; 3], width: u32, height: u32, fx: f64) -> Camera {
    let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let normalize = |a: [f64; 3]| {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        a.map(|v| v / n)
    };
    let forward = normalize(sub(target, eye));
    let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
    let down = cross(forward, right);
    let rows = [right, down, forward];
    let mut m = [0.0; 16];
    for (i, r) in rows.iter().enumerate() {
        m[i * 4..i * 4 + 3].copy_from_slice(r);
        m[i * 4 + 3] = -(r[0] * eye[0] + r[1] * eye[1] + r[2] * eye[2]);
    }
    m[15] = 1.0;
    Camera {
        view_id,
        width,
        height,
        fx,
        fy: fx,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        world_to_camera: m,
        mask_count: None,
    }
}

fn rig_cameras(rig: &CameraRig, rng: &mut ChaCha8Rng) -> Vec<Camera> {
    (0..rig.views)
        .map(|i| {
            let az = 2.0 * PI * (i as f64 + rng.random_range(-0.3..0.3)) / rig.views as f64;
            let mut el = rng.random_range(rig.elevation_deg[0]..=rig.elevation_deg[1]).to_radians();
            if rig.both_hemispheres && i % 2 == 1 {
                el = -el;
            }
            let d = rig.distance;
            let eye = [
                rig.target[0] + d * el.cos() * az.cos(),
                rig.target[1] + d * el.cos() * az.sin(),
                rig.target[2] + d * el.sin(),
            ];
            look_at(i as u32, eye, rig.target, rig.width, rig.height, rig.fx)
        })
        .collect()
}

/// Random unit vectors made mutually orthogonal by Gram-Schmidt.
fn orthonormal_vectors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

fn unit_f32(v: &[f64]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn object_gaussians(spec: &ObjectSpec, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let n = spec.gaussians;
    let (a, b) = (spec.radius, spec.radius * spec.aspect);
    let spacing = (PI * a * b / n as f64).sqrt();
    let golden = PI * (3.0 - 5f64.sqrt());
    let color: [f32; 3] = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
    (0..n)
        .map(|i| {
            let r = ((i as f64 + 0.5) / n as f64).sqrt();
            let theta = i as f64 * golden;
            let jx = rng.random_range(-0.25..0.25) * spacing;
            let jy = rng.random_range(-0.25..0.25) * spacing;
            let jz: f64 = rng.sample::<f64, _>(StandardNormal) * spec.thickness;
            let x = spec.center[0] + a * r * theta.cos() + jx;
            let y = spec.center[1] + b * r * theta.sin() + jy;
            let z = spec.center[2] + jz;
            let phi: f64 = rng.random_range(0.0..PI);
            let sx = spacing * spec.footprint * rng.random_range(0.85..1.15);
            let sy = spacing * spec.footprint * rng.random_range(0.85..1.15);
            Gaussian {
                position: [x as f32, y as f32, z as f32],
                log_scale: [sx.ln() as f32, sy.ln() as f32, spec.thickness.ln() as f32],
                rotation: [(phi / 2.0).cos() as f32, 0.0, 0.0, (phi / 2.0).sin() as f32],
                opacity_logit: logit(spec.opacity) as f32,
                color_dc: color,
            }
        })
        .collect()
}

/// Per-pixel object ownership: the object with the largest summed weight
/// where the total weight reaches `COVERAGE`.
fn gt_from_records<'a>(
    pixels: impl Iterator<Item = Box<dyn Iterator<Item = (u32, f64)> + 'a>>,
    object_of: &[u16],
) -> Vec<u16> {
    let mut sums: Vec<(u16, f64)> = Vec::new();
    pixels
        .map(|recs| {
            sums.clear();
            for (g, w) in recs {
                let o = object_of[g as usize];
                match sums.iter_mut().find(|(k, _)| *k == o) {
                    Some((_, s)) => *s += w,
                    None => sums.push((o, w)),
                }
            }
            let total: f64 = sums.iter().map(|(_, s)| s).sum();
            if total < COVERAGE {
                return NO_OBJECT;
            }
            sums.iter()
                .fold((NO_OBJECT, f64::NEG_INFINITY), |best, &(o, s)| {
                    if s > best.1 || (s == best.1 && o < best.0) {
                        (o, s)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn render_gt(scene: &GaussianScene, camera: &Camera, object_of: &[u16], renderer: GtRenderer) -> Result<Vec<u16>> {
    let use_oracle = match renderer {
        GtRenderer::Oracle => true,
        GtRenderer::Tiled => false,
        GtRenderer::Auto => {
            camera.pixel_count() * scene.len() <= ORACLE_GT_BUDGET && oracle_guard(scene, camera).is_ok()
        }
    };
    if use_oracle {
        let records = oracle_rasterize(scene, camera)?;
        Ok(gt_from_records(
            records
                .iter()
                .map(|r| Box::new(r.iter().copied()) as Box<dyn Iterator<Item = (u32, f64)>>),
            object_of,
        ))
    } else {
        let projection = project_gaussians(scene, camera);
        let stream = TiledView::new(&projection.gaussians, camera.width, camera.height).contributions();
        Ok(gt_from_records(
            stream.iter_pixels().map(|(_, recs)| {
                Box::new(recs.iter().map(|r| (r.gaussian, r.weight as f64)))
                    as Box<dyn Iterator<Item = (u32, f64)>>
            }),
            object_of,
        ))
    }
}

/// Pixels of `object` in `gt` nearest to an anchor: the given pixel
/// position, or else the pixel of the object closest to its centroid.
fn patch_on_object(gt: &[u16], width: u32, object: u16, size: PatchSize, anchor: Option<[f64; 2]>) -> Vec<usize> {
    let w = width as usize;
    let pixels: Vec<usize> = (0..gt.len()).filter(|&p| gt[p] == object).collect();
    if pixels.is_empty() {
        return pixels;
    }
    let count = match size {
        PatchSize::Pixels(n) => n,
        PatchSize::Fraction(f) => ((f * pixels.len() as f64).round() as usize).max(1),
    };
    let [cx, cy] = anchor.unwrap_or_else(|| {
        let (sx, sy) = pixels
            .iter()
            .fold((0.0, 0.0), |(x, y), &p| (x + (p % w) as f64 + 0.5, y + (p / w) as f64 + 0.5));
        [sx / pixels.len() as f64, sy / pixels.len() as f64]
    });
    let dist = |p: usize| ((p % w) as f64 + 0.5 - cx).powi(2) + ((p / w) as f64 + 0.5 - cy).powi(2);
    let center = *pixels
        .iter()
        .min_by(|&&a, &&b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)))
        .unwrap();
    let (ux, uy) = ((center % w) as i64, (center / w) as i64);
    let mut near: Vec<usize> = pixels;
    near.sort_by_key(|&p| {
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        ((x - ux).pow(2) + (y - uy).pow(2), p)
    });
    near.truncate(count);
    near
}

fn project_point(camera: &Camera, p: [f64; 3]) -> Option<[f64; 2]> {
    let r = camera.rotation();
    let t = camera.translation();
    let c: Vec<f64> = (0..3).map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i]).collect();
    (c[2] > 0.0).then(|| [camera.fx * c[0] / c[2] + camera.cx, camera.fy * c[1] / c[2] + camera.cy])
}

/// Build a synthetic scene from its specification.
pub fn build_scene(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let group_vectors = orthonormal_vectors(spec.feature_groups(), spec.dim, &mut rng);

    let mut gaussians = Vec::new();
    let mut ranges = Vec::new();
    for o in &spec.objects {
        let start = gaussians.len() as u32;
        gaussians.extend(object_gaussians(o, &mut rng));
        ranges.push((start, gaussians.len() as u32));
    }
    let scene = GaussianScene::new(gaussians);
    let mut object_of = vec![NO_OBJECT; scene.len()];
    for (i, &(s, e)) in ranges.iter().enumerate() {
        object_of[s as usize..e as usize].fill(i as u16);
    }

    let mut cameras = rig_cameras(&spec.rig, &mut rng);
    let gt_objects: Vec<Vec<u16>> = cameras
        .iter()
        .map(|c| render_gt(&scene, c, &object_of, spec.gt_renderer))
        .collect::<Result<_>>()?;

    // Plan spurious patches per view.
    let mut patches: Vec<Vec<Vec<usize>>> = vec![Vec::new(); cameras.len()];
    for s in &spec.spurious {
        let placements: Vec<(usize, usize, Option<[f64; 2]>)> = match &s.placement {
            &SpuriousPlacement::OnObject { object, view } => {
                let view = view.unwrap_or_else(|| {
                    (0..cameras.len())
                        .max_by_key(|&v| {
                            let n = gt_objects[v].iter().filter(|&&o| o == object as u16).count();
                            (n, std::cmp::Reverse(v))
                        })
                        .unwrap()
                });
                vec![(view, object, None)]
            }
            SpuriousPlacement::Anchored { object, views } => views
                .iter()
                .map(|&v| (v, *object, project_point(&cameras[v], spec.objects[*object].center)))
                .collect(),
            SpuriousPlacement::Random => {
                let view = rng.random_range(0..cameras.len());
                let visible: Vec<usize> = (0..spec.objects.len())
                    .filter(|&o| gt_objects[view].contains(&(o as u16)))
                    .collect();
                if visible.is_empty() {
                    continue;
                }
                vec![(view, visible[rng.random_range(0..visible.len())], None)]
            }
        };
        for (view, object, anchor) in placements {
            let patch = patch_on_object(&gt_objects[view], cameras[view].width, object as u16, s.size, anchor);
            if !patch.is_empty() {
                patches[view].push(patch);
            }
        }
    }

    let noise_per_dim = spec.noise_sigma / (spec.dim as f64).sqrt();
    let mut masks = Vec::new();
    let mut manifest_masks = Vec::new();
    let mut spurious_ids = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    let mut instance_sums = vec![vec![0.0f64; spec.dim]; spec.objects.len()];
    let mut global = 0u32;
    for (v, cam) in cameras.iter_mut().enumerate() {
        let gt = &gt_objects[v];
        let mut pixels = vec![0u16; gt.len()];
        let mut local = 0u32;
        let mut sources = Vec::new();
        for o in 0..spec.objects.len() {
            let owned: Vec<usize> = (0..gt.len()).filter(|&p| gt[p] == o as u16).collect();
            if owned.is_empty() {
                continue;
            }
            for &p in &owned {
                pixels[p] = (local + 1) as u16;
            }
            sources.push(MaskSource::Object(o));
            local += 1;
        }
        for patch in &patches[v] {
            for &p in patch {
                pixels[p] = (local + 1) as u16;
            }
            sources.push(MaskSource::Spurious);
            local += 1;
        }
        for (l, source) in sources.into_iter().enumerate() {
            let feature: Vec<f64> = match source {
                MaskSource::Object(o) => group_vectors[spec.objects[o].feature_group]
                    .iter()
                    .map(|&x| x + noise_per_dim * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                MaskSource::Spurious => (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect(),
            };
            let row = unit_f32(&feature);
            if let MaskSource::Object(o) = source {
                for (s, &x) in instance_sums[o].iter_mut().zip(&row) {
                    *s += x as f64;
                }
            } else {
                spurious_ids.push(global);
            }
            let count = pixels.iter().filter(|&&p| p as usize == l + 1).count();
            manifest_masks.push(ManifestMask {
                global_id: global,
                view_id: cam.view_id,
                local: l as u32,
                source,
                pixels: count,
                feature_norm: crate::scene_io::norm(&row),
            });
            rows.extend_from_slice(&row);
            global += 1;
        }
        cam.mask_count = Some(local);
        masks.push(MaskImage {
            view_id: cam.view_id,
            width: cam.width,
            height: cam.height,
            pixels,
        });
    }

    let objects = spec
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| ManifestObject {
            id: i,
            label: o.feature_group as u16,
            gaussian_start: ranges[i].0,
            gaussian_end: ranges[i].1,
            center: o.center,
            feature: unit_f32(&group_vectors[o.feature_group]),
            instance_feature: if instance_sums[i].iter().all(|&x| x == 0.0) {
                unit_f32(&group_vectors[o.feature_group])
            } else {
                unit_f32(&instance_sums[i])
            },
        })
        .collect();

    let features = FeatureTable::new(spec.dim, rows)?;
    let views = ViewSet::new(cameras.clone(), masks)?;
    let manifest = SynthManifest {
        seed: spec.seed,
        dim: spec.dim,
        noise_sigma: spec.noise_sigma,
        objects,
        cameras,
        masks: manifest_masks,
        spurious_masks: spurious_ids,
        gt_renderer: spec.gt_renderer,
    };
    Ok(SynthScene {
        spec: spec.clone(),
        scene,
        views,
        features,
        manifest,
        gt_objects,
    })
}

/// A random camera looking roughly at the origin from distance 3 to 6.
pub fn random_camera(rng: &mut impl Rng, view_id: u32, width: u32, height: u32) -> Camera {
    let az: f64 = rng.random_range(0.0..2.0 * PI);
    let el: f64 = rng.random_range(-1.2..1.2);
    let d: f64 = rng.random_range(3.0..6.0);
    let eye = [d * el.cos() * az.cos(), d * el.cos() * az.sin(), d * el.sin()];
    let target = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let fx = rng.random_range(0.6..1.4) * width as f64;
    look_at(view_id, eye, target, width, height, fx)
}

/// `n` random Gaussians scattered around the origin with random shapes,
/// orientations and opacities.
pub fn random_scene(rng: &mut impl Rng, n: usize) -> GaussianScene {
    GaussianScene::new(
        (0..n)
            .map(|_| {
                let q: [f64; 4] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                let opacity: f64 = rng.random_range(0.05..0.99);
                Gaussian {
                    position: [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ],
                    log_scale: [
                        rng.random_range(-3.5f32..-1.0),
                        rng.random_range(-3.5f32..-1.0),
                        rng.random_range(-3.5f32..-1.0),
                    ],
                    rotation: q.map(|v| (v / qn) as f32),
                    opacity_logit: logit(opacity) as f32,
                    color_dc: [0.0; 3],
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_centers_the_target() {
        let cam = look_at(0, [3.0, -4.0, 5.0], [0.5, 0.5, 0.0], 64, 48, 50.0);
        cam.validate().unwrap();
        let scene = GaussianScene::new(vec![Gaussian {
            position: [0.5, 0.5, 0.0],
            log_scale: [-3.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 2.0,
            color_dc: [0.0; 3],
        }]);
        let p = oracle_project(&scene, &cam, 0).unwrap();
        assert!((p.mean2d[0] - 32.0).abs() < 1e-9 && (p.mean2d[1] - 24.0).abs() < 1e-9);
    }

    #[test]
    fn up_is_image_up() {
        let cam = look_at(0, [10.0, 0.0, 0.0], [0.0; 3], 64, 64, 50.0);
        let scene = GaussianScene::new(vec![Gaussian {
            position: [0.0, 0.0, 1.0],
            log_scale: [-3.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 2.0,
            color_dc: [0.0; 3],
        }]);
        assert!(oracle_project(&scene, &cam, 0).unwrap().mean2d[1] < 32.0);
    }

    #[test]
    fn orthonormal_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = orthonormal_vectors(5, 16, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        assert!(matches!(generate_scene(0, 2, 10, 1, 0.0), Err(Error::Validation(_))));
        let mut spec = SceneSpec::grid(0, 3, 10, 2, 0.0);
        spec.dim = 2;
        assert!(matches!(build_scene(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn oracle_guard_refuses_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&mut rng, 10_001);
        let cam = random_camera(&mut rng, 0, 65, 64);
        assert!(oracle_rasterize(&scene, &cam).is_err());
    }

    #[test]
    fn bfs_components() {
        assert_eq!(oracle_components(&[0, 1, 2], &[(0, 1), (1, 2)]), vec![vec![0, 1, 2]]);
        assert_eq!(oracle_components(&[4, 7], &[]), vec![vec![4], vec![7]]);
    }
}
