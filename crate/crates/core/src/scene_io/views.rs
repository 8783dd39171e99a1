//! Cameras and per-view mask images.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub view_id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4 rigid transform.
    pub world_to_camera: [f64; 16],
    /// Number of local masks in this view. When absent it is inferred from
    /// the largest value in the mask image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_count: Option<u32>,
}

impl Camera {
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.world_to_camera;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn translation(&self) -> [f64; 3] {
        let m = &self.world_to_camera;
        [m[3], m[7], m[11]]
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.view_id;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data(format!("view {v}: zero image size")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Data(format!("view {v}: focal lengths must be positive")));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Data(format!("view {v}: principal point outside the image")));
        }
        if self.world_to_camera.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data(format!("view {v}: non-finite extrinsics")));
        }
        let m = &self.world_to_camera;
        if m[12] != 0.0 || m[13] != 0.0 || m[14] != 0.0 || m[15] != 1.0 {
            return Err(Error::Data(format!("view {v}: last row of world_to_camera must be 0 0 0 1")));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > 1e-5 {
                    return Err(Error::Data(format!(
                        "view {v}: world_to_camera rotation is not orthonormal"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-view mask labels: 0 is background, value `v > 0` is local mask `v - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    pub view_id: u32,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u16>,
}

impl MaskImage {
    pub fn empty(view_id: u32, width: u32, height: u32) -> Self {
        Self {
            view_id,
            width,
            height,
            pixels: vec![0; width as usize * height as usize],
        }
    }

    pub fn max_label(&self) -> u16 {
        self.pixels.iter().copied().max().unwrap_or(0)
    }
}

/// Cameras plus their masks, with a contiguous global mask numbering.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub cameras: Vec<Camera>,
    pub masks: Vec<MaskImage>,
    mask_counts: Vec<u32>,
    offsets: Vec<u32>,
}

impl ViewSet {
    /// Validate cameras against masks and assign global mask ids.
    /// Views are kept in the given order; global ids follow that order.
    pub fn new(cameras: Vec<Camera>, masks: Vec<MaskImage>) -> Result<Self> {
        if cameras.len() != masks.len() {
            return Err(Error::Data(format!(
                "{} cameras but {} mask images",
                cameras.len(),
                masks.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        let mut mask_counts = Vec::with_capacity(cameras.len());
        let mut offsets = Vec::with_capacity(cameras.len());
        let mut total: u64 = 0;
        for (cam, mask) in cameras.iter().zip(&masks) {
            cam.validate()?;
            if !seen.insert(cam.view_id) {
                return Err(Error::Data(format!("duplicate view_id {}", cam.view_id)));
            }
            if mask.view_id != cam.view_id {
                return Err(Error::Data(format!(
                    "mask for view {} paired with camera {}",
                    mask.view_id, cam.view_id
                )));
            }
            if mask.width != cam.width || mask.height != cam.height {
                return Err(Error::Dimension(format!(
                    "view {}: camera is {}x{} but mask is {}x{}",
                    cam.view_id, cam.width, cam.height, mask.width, mask.height
                )));
            }
            if mask.pixels.len() != cam.pixel_count() {
                return Err(Error::Dimension(format!(
                    "view {}: mask holds {} pixels, expected {}",
                    cam.view_id,
                    mask.pixels.len(),
                    cam.pixel_count()
                )));
            }
            let max = mask.max_label() as u32;
            let count = match cam.mask_count {
                Some(declared) => {
                    if max > declared {
                        return Err(Error::Data(format!(
                            "view {}: mask value {max} exceeds the declared count {declared}",
                            cam.view_id
                        )));
                    }
                    declared
                }
                None => max,
            };
            if count > u16::MAX as u32 {
                return Err(Error::Capacity {
                    what: "per-view mask",
                    count: count as usize,
                    limit: u16::MAX as usize,
                });
            }
            offsets.push(total as u32);
            mask_counts.push(count);
            total += count as u64;
        }
        if total > u32::MAX as u64 {
            return Err(Error::Capacity {
                what: "global mask",
                count: total as usize,
                limit: u32::MAX as usize,
            });
        }
        Ok(Self {
            cameras,
            masks,
            mask_counts,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn mask_count(&self, view: usize) -> u32 {
        self.mask_counts[view]
    }

    pub fn mask_offset(&self, view: usize) -> u32 {
        self.offsets[view]
    }

    /// Total number of masks across all views (K_global).
    pub fn total_masks(&self) -> usize {
        self.mask_counts.iter().map(|&c| c as usize).sum()
    }

    /// Global id of local mask `local` in view position `view`.
    pub fn global_mask(&self, view: usize, local: u32) -> u32 {
        debug_assert!(local < self.mask_counts[view]);
        self.offsets[view] + local
    }

    /// View position and local index of a global mask id.
    pub fn locate_mask(&self, global: u32) -> Option<(usize, u32)> {
        let view = self.offsets.partition_point(|&o| o <= global).checked_sub(1)?;
        let local = global - self.offsets[view];
        (local < self.mask_counts[view]).then_some((view, local))
    }

    pub fn view_position(&self, view_id: u32) -> Option<usize> {
        self.cameras.iter().position(|c| c.view_id == view_id)
    }
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<Camera>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cameras: Vec<Camera> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("camera file {}: {e}", path.display())))?;
    for c in &cameras {
        c.validate()?;
    }
    Ok(cameras)
}

pub fn save_cameras(cameras: &[Camera], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(cameras).expect("cameras serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_mask_png(path: impl AsRef<Path>, view_id: u32) -> Result<MaskImage> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "{}: masks must be 16-bit grayscale PNG, found {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (width, height) = (info.width, info.height);
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let bytes = &buf[..frame.buffer_size()];
    // PNG stores 16-bit samples big-endian.
    let pixels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok(MaskImage {
        view_id,
        width,
        height,
        pixels,
    })
}

pub fn save_mask_png(mask: &MaskImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width, mask.height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let data: Vec<u8> = mask.pixels.iter().flat_map(|v| v.to_be_bytes()).collect();
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&data))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write an 8-bit grayscale PNG (selection masks, overlays).
pub fn save_gray8_png(width: u32, height: u32, data: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut w| w.write_image_data(data))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Load cameras and one `<view_id>.png` per camera from `mask_dir`.
pub fn load_views(camera_path: impl AsRef<Path>, mask_dir: impl AsRef<Path>) -> Result<ViewSet> {
    let cameras = load_cameras(camera_path)?;
    let dir = mask_dir.as_ref();
    let mut masks = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let path = dir.join(format!("{}.png", cam.view_id));
        if !path.exists() {
            return Err(Error::Data(format!(
                "missing mask file for view {}: {}",
                cam.view_id,
                path.display()
            )));
        }
        masks.push(load_mask_png(&path, cam.view_id)?);
    }
    ViewSet::new(cameras, masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn identity_camera(view_id: u32, width: u32, height: u32) -> Camera {
        Camera {
            view_id,
            width,
            height,
            fx: 100.0,
            fy: 100.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: [
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
            mask_count: None,
        }
    }

    fn mask_with_labels(view_id: u32, w: u32, h: u32, labels: u16) -> MaskImage {
        let mut m = MaskImage::empty(view_id, w, h);
        for l in 1..=labels {
            m.pixels[l as usize] = l;
        }
        m
    }

    #[test]
    fn global_ids_are_contiguous_offsets() {
        let cams = vec![identity_camera(0, 8, 8), identity_camera(1, 8, 8)];
        let masks = vec![mask_with_labels(0, 8, 8, 3), mask_with_labels(1, 8, 8, 4)];
        let views = ViewSet::new(cams, masks).unwrap();
        assert_eq!(views.total_masks(), 7);
        assert_eq!(views.mask_offset(1), 3);
        assert_eq!(views.global_mask(1, 3), 6);
        assert_eq!(views.locate_mask(3), Some((1, 0)));
        assert_eq!(views.locate_mask(7), None);
    }

    #[test]
    fn dimension_mismatch_names_the_view() {
        let cams = vec![identity_camera(5, 640, 480)];
        let masks = vec![MaskImage::empty(5, 640, 360)];
        let err = ViewSet::new(cams, masks).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("view 5")), "{err}");
    }

    #[test]
    fn mask_value_above_declared_count_is_rejected() {
        let mut cam = identity_camera(0, 8, 8);
        cam.mask_count = Some(2);
        let err = ViewSet::new(vec![cam], vec![mask_with_labels(0, 8, 8, 3)]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut cam = identity_camera(0, 8, 8);
        cam.world_to_camera[0] = 1.1;
        assert!(cam.validate().is_err());
    }

    #[test]
    fn mask_png_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = MaskImage::empty(3, 5, 4);
        mask.pixels[7] = 65_535;
        mask.pixels[8] = 2;
        save_mask_png(&mask, dir.path().join("3.png")).unwrap();
        assert_eq!(load_mask_png(dir.path().join("3.png"), 3).unwrap(), mask);

        let cams = vec![identity_camera(3, 5, 4), identity_camera(4, 5, 4)];
        save_cameras(&cams, dir.path().join("cameras.json")).unwrap();
        let err = load_views(dir.path().join("cameras.json"), dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("view 4")), "{err}");
    }
}
