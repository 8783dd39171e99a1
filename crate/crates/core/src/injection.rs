//! Indexed feature injection: mask-to-Gaussian association by contribution
//! weight, 3D-aware mask filtering and most-influential index assignment.

use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rasterizer::ContributionStream;
use crate::scene_io::{MaskImage, ViewSet};

/// Value of an index field entry for a Gaussian without semantics.
pub const SENTINEL: u16 = u16::MAX;
/// Largest number of distinct indices a 2-byte field can hold besides the sentinel.
pub const INDEX_CAPACITY: usize = u16::MAX as usize;

/// The four gating thresholds of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub contrib: f64,
    pub noise: u32,
    pub iou: f64,
    pub feat: f64,
}

impl Thresholds {
    pub const LERF: Self = Self {
        contrib: 0.04,
        noise: 200,
        iou: 0.6,
        feat: 0.75,
    };
    pub const SCANNET: Self = Self {
        contrib: 0.04,
        noise: 500,
        iou: 0.35,
        feat: 0.8,
    };
    pub const DL3DV: Self = Self {
        contrib: 0.09,
        noise: 450,
        iou: 0.5,
        feat: 0.8,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.contrib > 0.0 && self.contrib < 1.0) {
            return Err(Error::Validation(format!(
                "contrib threshold {} must lie in (0, 1)",
                self.contrib
            )));
        }
        if self.noise < 1 {
            return Err(Error::Validation("noise threshold must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.iou) {
            return Err(Error::Validation(format!(
                "iou threshold {} must lie in [0, 1]",
                self.iou
            )));
        }
        if !(-1.0..=1.0).contains(&self.feat) {
            return Err(Error::Validation(format!(
                "feat threshold {} must lie in [-1, 1]",
                self.feat
            )));
        }
        Ok(())
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self::LERF
    }
}

/// Per-mask Gaussian sets and per-Gaussian accumulated influence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGaussianSets {
    /// `sets[k]`: ascending ids of Gaussians associated with global mask `k`.
    pub sets: Vec<Vec<u32>>,
    /// Influence rows per Gaussian, as `(mask, summed weight)` ascending by mask.
    influence_offsets: Vec<u32>,
    influence: Vec<(u32, f64)>,
}

impl MaskGaussianSets {
    pub fn gaussian_count(&self) -> usize {
        self.influence_offsets.len() - 1
    }

    pub fn mask_count(&self) -> usize {
        self.sets.len()
    }

    /// `(mask, weight)` pairs of Gaussian `g`, ascending by mask.
    pub fn influence(&self, g: usize) -> &[(u32, f64)] {
        &self.influence[self.influence_offsets[g] as usize..self.influence_offsets[g + 1] as usize]
    }

    pub fn incidence_count(&self) -> usize {
        self.influence.len()
    }

    /// Assemble from `(gaussian, mask, weight)` triples with unique keys.
    pub fn from_triples(
        n_gaussians: usize,
        n_masks: usize,
        mut triples: Vec<(u32, u32, f64)>,
    ) -> Self {
        triples.par_sort_unstable_by_key(|&(g, k, _)| (g, k));
        let mut influence_offsets = vec![0u32; n_gaussians + 1];
        let mut sets = vec![Vec::new(); n_masks];
        let mut influence = Vec::with_capacity(triples.len());
        for &(g, k, w) in &triples {
            influence_offsets[g as usize + 1] += 1;
            sets[k as usize].push(g);
            influence.push((k, w));
        }
        for i in 1..influence_offsets.len() {
            influence_offsets[i] += influence_offsets[i - 1];
        }
        Self {
            sets,
            influence_offsets,
            influence,
        }
    }
}

/// Influence triples `(gaussian, global mask, weight sum)` gathered from one view.
#[derive(Clone, Debug, Default)]
pub struct ViewInfluence {
    pub triples: Vec<(u32, u32, f64)>,
}

/// Accumulate one view's contribution records inside its masks.
pub fn accumulate_view(
    stream: &ContributionStream,
    mask: &MaskImage,
    mask_offset: u32,
    tau_contrib: f64,
) -> Result<ViewInfluence> {
    if stream.width() != mask.width || stream.height() != mask.height {
        return Err(Error::Dimension(format!(
            "view {}: contributions are {}x{} but mask is {}x{}",
            mask.view_id,
            stream.width(),
            stream.height(),
            mask.width,
            mask.height
        )));
    }
    let mut acc: FxHashMap<(u32, u32), f64> = FxHashMap::default();
    for (p, records) in stream.iter_pixels() {
        let label = mask.pixels[p];
        if label == 0 {
            continue;
        }
        let k = mask_offset + label as u32 - 1;
        for r in records {
            let w = r.weight as f64;
            if w >= tau_contrib {
                *acc.entry((r.gaussian, k)).or_insert(0.0) += w;
            }
        }
    }
    Ok(ViewInfluence {
        triples: acc.into_iter().map(|((g, k), w)| (g, k, w)).collect(),
    })
}

/// Combine per-view partial results. Every global mask belongs to exactly
/// one view, so keys never collide and no cross-view summation happens;
/// the result is independent of view order.
pub fn merge_views(
    n_gaussians: usize,
    n_masks: usize,
    parts: impl IntoIterator<Item = ViewInfluence>,
) -> MaskGaussianSets {
    let triples = parts.into_iter().flat_map(|p| p.triples).collect();
    MaskGaussianSets::from_triples(n_gaussians, n_masks, triples)
}

/// Associate Gaussians with masks from one contribution stream per view
/// (in `views` order).
pub fn build_mask_sets(
    streams: &[ContributionStream],
    views: &ViewSet,
    n_gaussians: usize,
    tau_contrib: f64,
) -> Result<MaskGaussianSets> {
    if streams.len() != views.len() {
        return Err(Error::Data(format!(
            "{} contribution streams for {} views",
            streams.len(),
            views.len()
        )));
    }
    let parts = streams
        .par_iter()
        .enumerate()
        .map(|(v, s)| accumulate_view(s, &views.masks[v], views.mask_offset(v), tau_contrib))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_views(n_gaussians, views.total_masks(), parts))
}

/// Masks kept by the noise filter, ascending by global id. The position of
/// a mask in this list is its compact index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurvivingMasks {
    ids: Vec<u32>,
    compact: Vec<u32>,
}

impl SurvivingMasks {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Global mask id behind compact index `i`.
    pub fn global(&self, i: usize) -> u32 {
        self.ids[i]
    }

    /// Compact index of global mask `k`, if it survived.
    pub fn compact(&self, k: u32) -> Option<u32> {
        self.compact
            .get(k as usize)
            .copied()
            .filter(|&c| c != u32::MAX)
    }

    pub fn contains(&self, k: u32) -> bool {
        self.compact(k).is_some()
    }
}

/// Keep masks whose Gaussian set has at least `tau_noise` members.
pub fn filter_masks(sets: &MaskGaussianSets, tau_noise: u32) -> Result<SurvivingMasks> {
    let mut compact = vec![u32::MAX; sets.mask_count()];
    let mut ids = Vec::new();
    for (k, s) in sets.sets.iter().enumerate() {
        if s.len() >= tau_noise as usize {
            compact[k] = ids.len() as u32;
            ids.push(k as u32);
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptySemantics {
            total: sets.mask_count(),
            tau_noise,
        });
    }
    Ok(SurvivingMasks { ids, compact })
}

/// Per-Gaussian 2-byte index; allocation is exactly two bytes per Gaussian.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskIndexField {
    values: Box<[u16]>,
}

impl MaskIndexField {
    pub fn from_values(values: Vec<u16>) -> Self {
        Self {
            values: values.into_boxed_slice(),
        }
    }

    pub fn values(&self) -> &[u16] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, g: usize) -> Option<u16> {
        Some(self.values[g]).filter(|&v| v != SENTINEL)
    }

    /// Bytes held by the field's heap allocation.
    pub fn allocated_bytes(&self) -> usize {
        std::mem::size_of_val::<[u16]>(&self.values)
    }

    pub fn assigned_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != SENTINEL).count()
    }
}

/// Give every Gaussian the compact index of its most influential surviving
/// mask (largest summed weight, ties to the smallest mask id).
pub fn assign_indices(sets: &MaskGaussianSets, surviving: &SurvivingMasks) -> Result<MaskIndexField> {
    if surviving.len() > INDEX_CAPACITY {
        return Err(Error::Capacity {
            what: "surviving mask",
            count: surviving.len(),
            limit: INDEX_CAPACITY,
        });
    }
    let values: Vec<u16> = (0..sets.gaussian_count())
        .into_par_iter()
        .map(|g| {
            let mut best: Option<(u32, f64)> = None;
            for &(k, w) in sets.influence(g) {
                let Some(c) = surviving.compact(k) else {
                    continue;
                };
                if best.is_none_or(|(_, bw)| w > bw) {
                    best = Some((c, w));
                }
            }
            best.map_or(SENTINEL, |(c, _)| c as u16)
        })
        .collect();
    Ok(MaskIndexField::from_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasterizer::{PixelRect, ProjectedGaussian, TiledView};

    fn flat(id: u32, depth: f64, opacity: f64) -> ProjectedGaussian {
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

    fn one_pixel_mask(label: u16) -> MaskImage {
        MaskImage {
            view_id: 0,
            width: 1,
            height: 1,
            pixels: vec![label],
        }
    }

    #[test]
    fn weight_above_contrib_threshold_joins_set() {
        let g = [flat(0, 1.0, 0.05)];
        let stream = TiledView::new(&g, 1, 1).contributions();
        let part = accumulate_view(&stream, &one_pixel_mask(4), 0, Thresholds::LERF.contrib).unwrap();
        let sets = merge_views(1, 5, [part]);
        assert_eq!(sets.sets[3], vec![0]);

        let g = [flat(0, 1.0, 0.03)];
        let stream = TiledView::new(&g, 1, 1).contributions();
        let part = accumulate_view(&stream, &one_pixel_mask(4), 0, 0.04).unwrap();
        assert!(merge_views(1, 5, [part]).sets[3].is_empty());
    }

    #[test]
    fn background_contributes_nothing() {
        let g = [flat(0, 1.0, 0.9)];
        let stream = TiledView::new(&g, 1, 1).contributions();
        let part = accumulate_view(&stream, &one_pixel_mask(0), 0, 0.04).unwrap();
        assert!(part.triples.is_empty());
    }

    fn sets_with_sizes(sizes: &[usize]) -> MaskGaussianSets {
        let mut triples = Vec::new();
        for (k, &n) in sizes.iter().enumerate() {
            for g in 0..n as u32 {
                triples.push((g, k as u32, 1.0));
            }
        }
        let n = sizes.iter().copied().max().unwrap_or(0);
        MaskGaussianSets::from_triples(n, sizes.len(), triples)
    }

    #[test]
    fn noise_threshold_is_inclusive() {
        let sets = sets_with_sizes(&[199, 200]);
        let kept = filter_masks(&sets, Thresholds::LERF.noise).unwrap();
        assert_eq!(kept.ids(), &[1]);
        assert_eq!(kept.compact(1), Some(0));
        assert_eq!(kept.compact(0), None);
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let sets = sets_with_sizes(&[3, 4]);
        assert!(matches!(
            filter_masks(&sets, 10),
            Err(Error::EmptySemantics { total: 2, tau_noise: 10 })
        ));
    }

    #[test]
    fn argmax_and_tie_rule() {
        let sets = MaskGaussianSets::from_triples(
            2,
            3,
            vec![(0, 0, 0.9), (0, 2, 0.4), (1, 2, 0.5), (1, 1, 0.5)],
        );
        let kept = filter_masks(&sets, 1).unwrap();
        let field = assign_indices(&sets, &kept).unwrap();
        assert_eq!(field.values(), &[0, 1]);
    }

    #[test]
    fn filtered_influence_is_ignored() {
        let sets = MaskGaussianSets::from_triples(2, 2, vec![(0, 0, 0.9), (0, 1, 0.1), (1, 1, 0.2)]);
        let kept = filter_masks(&sets, 2).unwrap();
        assert_eq!(kept.ids(), &[1]);
        // Gaussian 0 prefers mask 0, which is gone, so it falls back to mask 1.
        let field = assign_indices(&sets, &kept).unwrap();
        assert_eq!(field.values(), &[0, 0]);
    }

    #[test]
    fn field_is_two_bytes_per_gaussian() {
        let field = MaskIndexField::from_values(vec![SENTINEL; 1234]);
        assert_eq!(field.allocated_bytes(), 2 * 1234);
        assert_eq!(field.assigned_count(), 0);
    }

    #[test]
    fn too_many_surviving_masks() {
        let n = INDEX_CAPACITY + 1;
        let sets = MaskGaussianSets::from_triples(1, n, (0..n as u32).map(|k| (0, k, 1.0)).collect());
        let kept = filter_masks(&sets, 1).unwrap();
        assert!(matches!(assign_indices(&sets, &kept), Err(Error::Capacity { .. })));
    }
}
