use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};

use super::{ALPHA_MIN, LOW_PASS, NEAR_PLANE};
use crate::scene_io::{Camera, GaussianScene};

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn contains(&self, u: u32, v: u32) -> bool {
        (self.x0..=self.x1).contains(&u) && (self.y0..=self.y1).contains(&v)
    }
}

/// A Gaussian splatted into one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub gaussian_id: u32,
    pub mean2d: [f64; 2],
    /// Symmetric 2D covariance `[xx, xy, yy]` in pixels², low-pass included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, `[xx, xy, yy]`.
    pub conic: [f64; 3],
    pub view_depth: f64,
    pub base_opacity: f64,
    /// Every pixel where the Gaussian's alpha can reach `ALPHA_MIN`.
    pub pixel_bbox: PixelRect,
}

impl ProjectedGaussian {
    /// Unclamped opacity at pixel center `(px, py)`.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        self.base_opacity * power.exp()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CullStats {
    pub behind_near_plane: usize,
    pub outside_image: usize,
    /// Non-invertible footprint or opacity too low to ever reach `ALPHA_MIN`.
    pub degenerate: usize,
}

impl CullStats {
    pub fn total(&self) -> usize {
        self.behind_near_plane + self.outside_image + self.degenerate
    }
}

#[derive(Clone, Debug, Default)]
pub struct Projection {
    /// Visible Gaussians sorted front to back (depth, then id).
    pub gaussians: Vec<ProjectedGaussian>,
    pub culled: CullStats,
}

pub(crate) fn camera_rotation(camera: &Camera) -> Matrix3<f64> {
    let r = camera.rotation();
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

/// EWA projection of every Gaussian in `scene` into `camera`.
pub fn project_gaussians(scene: &GaussianScene, camera: &Camera) -> Projection {
    project_subset(scene, camera, 0..scene.len() as u32)
}

/// Project only the Gaussians listed in `ids`.
pub fn project_subset(
    scene: &GaussianScene,
    camera: &Camera,
    ids: impl IntoIterator<Item = u32>,
) -> Projection {
    let w2c = camera_rotation(camera);
    let t = Vector3::from(camera.translation());
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut out = Projection::default();

    for id in ids {
        let g = &scene.gaussians()[id as usize];
        let p_world = Vector3::new(
            g.position[0] as f64,
            g.position[1] as f64,
            g.position[2] as f64,
        );
        let p = w2c * p_world + t;
        if !(p.z > NEAR_PLANE) {
            out.culled.behind_near_plane += 1;
            continue;
        }

        let opacity = g.opacity();
        if opacity * 255.0 <= 1.0 {
            out.culled.degenerate += 1;
            continue;
        }

        let [qw, qx, qy, qz] = g.rotation.map(|v| v as f64);
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz))
            .to_rotation_matrix()
            .into_inner();
        let scale = g.scale();
        let m = rot * Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2]));
        let sigma = m * m.transpose();

        let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
        let jac = Matrix2x3::new(
            camera.fx * iz,
            0.0,
            -camera.fx * p.x * iz2,
            0.0,
            camera.fy * iz,
            -camera.fy * p.y * iz2,
        );
        let tm = jac * w2c;
        let cov = tm * sigma * tm.transpose();
        let cov2d = [cov[(0, 0)] + LOW_PASS, cov[(0, 1)], cov[(1, 1)] + LOW_PASS];
        let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
        if !(det > 0.0) || !det.is_finite() {
            out.culled.degenerate += 1;
            continue;
        }
        let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
        let mean2d = [camera.fx * p.x * iz + camera.cx, camera.fy * p.y * iz + camera.cy];

        // alpha >= ALPHA_MIN  <=>  Mahalanobis² <= 2 ln(opacity / ALPHA_MIN)
        let r2 = 2.0 * (opacity / ALPHA_MIN).ln();
        let ex = (r2 * cov2d[0]).sqrt();
        let ey = (r2 * cov2d[2]).sqrt();
        // Pixel (u, v) is sampled at (u + 0.5, v + 0.5).
        let x0 = (mean2d[0] - ex - 0.5).floor().max(0.0);
        let x1 = (mean2d[0] + ex - 0.5).ceil().min(w - 1.0);
        let y0 = (mean2d[1] - ey - 0.5).floor().max(0.0);
        let y1 = (mean2d[1] + ey - 0.5).ceil().min(h - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            out.culled.outside_image += 1;
            continue;
        }

        out.gaussians.push(ProjectedGaussian {
            gaussian_id: id,
            mean2d,
            cov2d,
            conic,
            view_depth: p.z,
            base_opacity: opacity,
            pixel_bbox: PixelRect {
                x0: x0 as u32,
                y0: y0 as u32,
                x1: x1 as u32,
                y1: y1 as u32,
            },
        });
    }

    out.gaussians.sort_by(|a, b| {
        a.view_depth
            .total_cmp(&b.view_depth)
            .then(a.gaussian_id.cmp(&b.gaussian_id))
    });
    out
}
