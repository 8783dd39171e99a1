use rayon::prelude::*;

use super::project::ProjectedGaussian;
use super::{ALPHA_MAX, ALPHA_MIN, TAU_EMIT, TILE_SIZE, T_STOP};
use crate::scene_io::ContributionDumpRecord;

/// One step of front-to-back blending at a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendStep {
    pub gaussian_id: u32,
    /// Clamped opacity at the pixel.
    pub alpha: f64,
    /// Transmittance before this Gaussian is composited.
    pub transmittance: f64,
}

impl BlendStep {
    pub fn weight(&self) -> f64 {
        self.alpha * self.transmittance
    }
}

/// The fields blending reads, copied into each tile bin so a tile's
/// Gaussians are contiguous in memory.
#[derive(Clone, Copy, Debug)]
struct Splat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    bbox: [u32; 4],
    id: u32,
}

impl Splat {
    fn new(g: &ProjectedGaussian) -> Self {
        let b = g.pixel_bbox;
        Self {
            mean: g.mean2d,
            conic: g.conic,
            opacity: g.base_opacity,
            bbox: [b.x0, b.y0, b.x1, b.y1],
            id: g.gaussian_id,
        }
    }

    /// Same arithmetic as `ProjectedGaussian::alpha_at`.
    #[inline]
    fn alpha_at(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        self.opacity * power.exp()
    }
}

/// Projected Gaussians binned into 16x16 tiles, each bin in depth order.
pub struct TiledView {
    width: u32,
    height: u32,
    tiles_x: u32,
    tiles_y: u32,
    offsets: Vec<u32>,
    entries: Vec<Splat>,
}

impl TiledView {
    /// `projected` must already be sorted front to back.
    pub fn new(projected: &[ProjectedGaussian], width: u32, height: u32) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let n_tiles = (tiles_x * tiles_y) as usize;

        let tile_range = |g: &ProjectedGaussian| {
            let b = g.pixel_bbox;
            (
                b.x0 / TILE_SIZE..=b.x1 / TILE_SIZE,
                b.y0 / TILE_SIZE..=b.y1 / TILE_SIZE,
            )
        };

        let mut counts = vec![0u32; n_tiles + 1];
        for g in projected {
            let (xs, ys) = tile_range(g);
            for ty in ys {
                for tx in xs.clone() {
                    counts[(ty * tiles_x + tx) as usize + 1] += 1;
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let offsets = counts;
        let mut cursor = offsets.clone();
        let mut entries = vec![
            Splat {
                mean: [0.0; 2],
                conic: [0.0; 3],
                opacity: 0.0,
                bbox: [0; 4],
                id: 0,
            };
            offsets[n_tiles] as usize
        ];
        for g in projected {
            let (xs, ys) = tile_range(g);
            let splat = Splat::new(g);
            for ty in ys {
                for tx in xs.clone() {
                    let t = (ty * tiles_x + tx) as usize;
                    entries[cursor[t] as usize] = splat;
                    cursor[t] += 1;
                }
            }
        }

        Self {
            width,
            height,
            tiles_x,
            tiles_y,
            offsets,
            entries,
        }
    }

    pub fn tile_count(&self) -> usize {
        (self.tiles_x * self.tiles_y) as usize
    }

    fn tile_list(&self, tile: usize) -> &[Splat] {
        &self.entries[self.offsets[tile] as usize..self.offsets[tile + 1] as usize]
    }

    /// Blend the pixel `(u, v)` front to back, calling `visit` for every
    /// Gaussian that composites. Returns the final transmittance.
    #[inline]
    pub fn blend_pixel(&self, u: u32, v: u32, mut visit: impl FnMut(BlendStep)) -> f64 {
        let tile = ((v / TILE_SIZE) * self.tiles_x + u / TILE_SIZE) as usize;
        let (px, py) = (u as f64 + 0.5, v as f64 + 0.5);
        let mut t = 1.0;
        for g in self.tile_list(tile) {
            let [x0, y0, x1, y1] = g.bbox;
            if u < x0 || u > x1 || v < y0 || v > y1 {
                continue;
            }
            let alpha = g.alpha_at(px, py).min(ALPHA_MAX);
            if alpha < ALPHA_MIN {
                continue;
            }
            visit(BlendStep {
                gaussian_id: g.id,
                alpha,
                transmittance: t,
            });
            t *= 1.0 - alpha;
            if t < T_STOP {
                break;
            }
        }
        t
    }

    /// Per-pixel final transmittance, row-major.
    pub fn transmittance_image(&self) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = (0..self.height)
            .into_par_iter()
            .map(|v| (0..self.width).map(|u| self.blend_pixel(u, v, |_| {})).collect())
            .collect();
        rows.concat()
    }

    /// Run the blend for every pixel and keep records with weight >= `TAU_EMIT`.
    pub fn contributions(&self) -> ContributionStream {
        let ts = TILE_SIZE;
        let tiles: Vec<(Vec<u32>, Vec<Contribution>)> = (0..self.tile_count())
            .into_par_iter()
            .map(|tile| {
                let tx = tile as u32 % self.tiles_x;
                let ty = tile as u32 / self.tiles_x;
                let (x0, y0) = (tx * ts, ty * ts);
                let (x1, y1) = ((x0 + ts).min(self.width), (y0 + ts).min(self.height));
                let mut counts = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
                let mut records = Vec::new();
                if self.tile_list(tile).is_empty() {
                    counts.resize(((x1 - x0) * (y1 - y0)) as usize, 0);
                    return (counts, records);
                }
                for v in y0..y1 {
                    for u in x0..x1 {
                        let before = records.len();
                        self.blend_pixel(u, v, |s| {
                            let w = s.weight();
                            if w >= TAU_EMIT {
                                records.push(Contribution {
                                    gaussian: s.gaussian_id,
                                    weight: w as f32,
                                });
                            }
                        });
                        counts.push((records.len() - before) as u32);
                    }
                }
                (counts, records)
            })
            .collect();

        // Scatter tile-major output into row-major pixel order.
        let n_pixels = (self.width * self.height) as usize;
        let mut offsets = vec![0u32; n_pixels + 1];
        for (tile, (counts, _)) in tiles.iter().enumerate() {
            let (x0, y0, x1) = self.tile_origin(tile);
            let tw = (x1 - x0) as usize;
            for (i, &c) in counts.iter().enumerate() {
                let (u, v) = (x0 as usize + i % tw, y0 as usize + i / tw);
                offsets[v * self.width as usize + u + 1] = c;
            }
        }
        for i in 1..offsets.len() {
            offsets[i] += offsets[i - 1];
        }
        let mut records = vec![
            Contribution {
                gaussian: 0,
                weight: 0.0
            };
            offsets[n_pixels] as usize
        ];
        for (tile, (counts, recs)) in tiles.iter().enumerate() {
            let (x0, y0, x1) = self.tile_origin(tile);
            let tw = (x1 - x0) as usize;
            let mut at = 0;
            for (i, &c) in counts.iter().enumerate() {
                let (u, v) = (x0 as usize + i % tw, y0 as usize + i / tw);
                let dst = offsets[v * self.width as usize + u] as usize;
                records[dst..dst + c as usize].copy_from_slice(&recs[at..at + c as usize]);
                at += c as usize;
            }
        }

        ContributionStream {
            width: self.width,
            height: self.height,
            offsets,
            records,
        }
    }

    fn tile_origin(&self, tile: usize) -> (u32, u32, u32) {
        let tx = tile as u32 % self.tiles_x;
        let ty = tile as u32 / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        (x0, ty * TILE_SIZE, (x0 + TILE_SIZE).min(self.width))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub gaussian: u32,
    pub weight: f32,
}

/// Contribution records of one view grouped by pixel (row-major), each
/// group in blending order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionStream {
    width: u32,
    height: u32,
    offsets: Vec<u32>,
    records: Vec<Contribution>,
}

impl ContributionStream {
    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    /// Records at the linear pixel index `v * width + u`.
    pub fn pixel(&self, index: usize) -> &[Contribution] {
        &self.records[self.offsets[index] as usize..self.offsets[index + 1] as usize]
    }

    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn iter_pixels(&self) -> impl Iterator<Item = (usize, &[Contribution])> + '_ {
        (0..self.pixel_count()).map(move |i| (i, self.pixel(i)))
    }

    pub fn to_dump(&self) -> Vec<ContributionDumpRecord> {
        self.iter_pixels()
            .flat_map(|(p, recs)| {
                recs.iter().map(move |r| ContributionDumpRecord {
                    pixel: p as u32,
                    gaussian: r.gaussian,
                    weight: r.weight,
                })
            })
            .collect()
    }
}
