//! Forward-only Gaussian rasterization producing per-pixel contribution
//! weights `w = alpha * T`.

mod project;
mod tile;

pub use project::*;
pub use tile::*;

use crate::scene_io::{Camera, GaussianScene};

/// Camera-space depth below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.2;
/// Added to both diagonal entries of every 2D covariance.
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
/// Per-pixel alphas below this are skipped, as in the reference 3DGS kernel.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Blending stops once transmittance drops below this.
pub const T_STOP: f64 = 1e-4;
/// Records with a weight below this are not emitted.
pub const TAU_EMIT: f64 = 1e-4;
pub const TILE_SIZE: u32 = 16;

/// Project and rasterize one view.
pub fn rasterize_view(scene: &GaussianScene, camera: &Camera) -> ContributionStream {
    let projection = project_gaussians(scene, camera);
    rasterize_contributions(&projection.gaussians, camera)
}

/// Contribution records for pre-projected, depth-sorted Gaussians.
pub fn rasterize_contributions(projected: &[ProjectedGaussian], camera: &Camera) -> ContributionStream {
    TiledView::new(projected, camera.width, camera.height).contributions()
}

/// Accumulated alpha (`1 - T`) rendered from the `selected` Gaussians only.
/// Pixel values are row-major in `[0, 1]`.
pub fn render_alpha_mask(
    scene: &GaussianScene,
    camera: &Camera,
    selected: impl IntoIterator<Item = u32>,
) -> Vec<f32> {
    let projection = project_subset(scene, camera, selected);
    if projection.gaussians.is_empty() {
        return vec![0.0; camera.pixel_count()];
    }
    TiledView::new(&projection.gaussians, camera.width, camera.height)
        .transmittance_image()
        .into_iter()
        .map(|t| (1.0 - t) as f32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{logit, Gaussian};

    fn camera(w: u32, h: u32) -> Camera {
        Camera {
            view_id: 0,
            width: w,
            height: h,
            fx: 100.0,
            fy: 100.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            world_to_camera: [
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
            mask_count: None,
        }
    }

    fn blob(pos: [f32; 3], scale: f32, opacity: f64) -> Gaussian {
        Gaussian {
            position: pos,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(opacity) as f32,
            color_dc: [0.0; 3],
        }
    }

    fn projected_at(id: u32, depth: f64, opacity: f64) -> ProjectedGaussian {
        // Huge flat footprint so the alpha at the pixel center equals the opacity.
        ProjectedGaussian {
            gaussian_id: id,
            mean2d: [0.5, 0.5],
            cov2d: [1e12, 0.0, 1e12],
            conic: [1e-12, 0.0, 1e-12],
            view_depth: depth,
            base_opacity: opacity,
            pixel_bbox: PixelRect { x0: 0, y0: 0, x1: 0, y1: 0 },
        }
    }

    #[test]
    fn on_axis_mean_hits_principal_point() {
        let scene = GaussianScene::new(vec![blob([0.0, 0.0, 2.0], 0.05, 0.9)]);
        let p = project_gaussians(&scene, &camera(100, 100));
        assert_eq!(p.gaussians.len(), 1);
        let m = p.gaussians[0].mean2d;
        assert!((m[0] - 50.0).abs() < 1e-9 && (m[1] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn doubling_depth_quarters_footprint() {
        let near = GaussianScene::new(vec![blob([0.0, 0.0, 2.0], 0.05, 0.9)]);
        let far = GaussianScene::new(vec![blob([0.0, 0.0, 4.0], 0.05, 0.9)]);
        let cam = camera(100, 100);
        let a = project_gaussians(&near, &cam).gaussians[0].cov2d[0] - LOW_PASS;
        let b = project_gaussians(&far, &cam).gaussians[0].cov2d[0] - LOW_PASS;
        assert!((a / b - 4.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let scene = GaussianScene::new(vec![blob([0.0, 0.0, -1.0], 0.05, 0.9)]);
        let p = project_gaussians(&scene, &camera(10, 10));
        assert!(p.gaussians.is_empty());
        assert_eq!(p.culled.behind_near_plane, 1);
    }

    #[test]
    fn single_gaussian_weight() {
        let view = [projected_at(0, 1.0, 0.8)];
        let tiled = TiledView::new(&view, 1, 1);
        let mut steps = Vec::new();
        let t = tiled.blend_pixel(0, 0, |s| steps.push(s));
        assert_eq!(steps.len(), 1);
        assert!((steps[0].weight() - 0.8).abs() < 1e-9);
        assert!((t - 0.2).abs() < 1e-9);
    }

    #[test]
    fn stacked_half_alphas() {
        let view = [projected_at(0, 1.0, 0.5), projected_at(1, 2.0, 0.5)];
        let stream = TiledView::new(&view, 1, 1).contributions();
        let w: Vec<f32> = stream.pixel(0).iter().map(|r| r.weight).collect();
        assert_eq!(w, vec![0.5, 0.25]);
    }

    #[test]
    fn alpha_is_clamped() {
        let view = [projected_at(3, 1.0, 0.999_9)];
        let stream = TiledView::new(&view, 1, 1).contributions();
        assert!((stream.pixel(0)[0].weight as f64 - ALPHA_MAX).abs() < 1e-7);
    }

    #[test]
    fn empty_selection_renders_zero() {
        let scene = GaussianScene::new(vec![blob([0.0, 0.0, 2.0], 0.05, 0.9)]);
        let img = render_alpha_mask(&scene, &camera(8, 8), []);
        assert!(img.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn opaque_stack_saturates() {
        let scene = GaussianScene::new(
            (0..8)
                .map(|i| blob([0.0, 0.0, 2.0 + 0.01 * i as f32], 0.3, 0.95))
                .collect(),
        );
        let img = render_alpha_mask(&scene, &camera(16, 16), 0..8);
        assert!(img[8 * 16 + 8] >= 0.99);
        assert!(img.iter().all(|&a| (0.0..=1.0).contains(&a)));
    }
}
