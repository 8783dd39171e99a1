//! Render-back 2D evaluation and per-Gaussian 3D evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::SENTINEL;
use crate::query::SelectionResult;
use crate::rasterizer::render_alpha_mask;
use crate::scene_io::{Camera, GaussianScene};

/// A query counts as a hit when its IoU reaches this value.
pub const HIT_IOU: f64 = 0.25;

/// Pixel IoU of two binary masks; two empty masks agree perfectly.
pub fn iou_2d(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

pub fn binarize(alpha: &[f32], threshold: f64) -> Vec<bool> {
    alpha.iter().map(|&a| a as f64 >= threshold).collect()
}

/// Ground-truth masks of one query, one per evaluation view.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGroundTruth {
    pub name: String,
    pub views: Vec<(u32, Vec<bool>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryMetric {
    pub name: String,
    pub iou: f64,
    pub hit: bool,
    pub view_ious: Vec<ViewIou>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewIou {
    pub view_id: u32,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: u16,
    pub iou: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub distill_seconds: f64,
    pub per_query_us: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: Vec<QueryMetric>,
    pub miou: f64,
    pub macc25: f64,
    pub per_class: Vec<ClassMetric>,
    pub miou_3d: f64,
    pub macc_3d: f64,
    /// How per-view IoUs are reduced to a per-query IoU.
    pub view_reduction: String,
    pub timing: Timing,
}

impl MetricReport {
    pub fn from_queries(per_query: Vec<QueryMetric>) -> Self {
        let (miou, macc25) = summarize(&per_query);
        Self {
            per_query,
            miou,
            macc25,
            view_reduction: "mean_over_views".into(),
            ..Self::default()
        }
    }

    pub fn with_classes(mut self, per_class: Vec<ClassMetric>) -> Self {
        let n = per_class.len().max(1) as f64;
        self.miou_3d = per_class.iter().map(|c| c.iou).sum::<f64>() / n;
        self.macc_3d = per_class.iter().map(|c| c.acc).sum::<f64>() / n;
        self.per_class = per_class;
        self
    }

    /// The report with its timing block cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

/// Mean IoU and hit rate over queries.
pub fn summarize(per_query: &[QueryMetric]) -> (f64, f64) {
    if per_query.is_empty() {
        return (0.0, 0.0);
    }
    let n = per_query.len() as f64;
    let miou = per_query.iter().map(|q| q.iou).sum::<f64>() / n;
    let macc = per_query.iter().filter(|q| q.hit).count() as f64 / n;
    (miou, macc)
}

pub fn query_metric(name: &str, view_ious: Vec<ViewIou>) -> QueryMetric {
    let iou = view_ious.iter().map(|v| v.iou).sum::<f64>() / view_ious.len().max(1) as f64;
    QueryMetric {
        name: name.to_string(),
        iou,
        hit: iou >= HIT_IOU,
        view_ious,
    }
}

/// Render each selection back into its query's evaluation views, binarize at
/// `binarize_alpha` and score against the ground truth.
pub fn evaluate_object_selection(
    scene: &GaussianScene,
    cameras: &[Camera],
    results: &[SelectionResult],
    ground_truth: &[QueryGroundTruth],
    binarize_alpha: f64,
) -> Result<Vec<QueryMetric>> {
    results
        .iter()
        .map(|r| {
            let gt = ground_truth
                .iter()
                .find(|g| g.name == r.query_name)
                .ok_or_else(|| Error::Data(format!("no ground truth for query '{}'", r.query_name)))?;
            if gt.views.is_empty() {
                return Err(Error::Data(format!(
                    "query '{}' has no ground-truth views",
                    r.query_name
                )));
            }
            let view_ious = gt
                .views
                .iter()
                .map(|(view_id, mask)| {
                    let cam = cameras.iter().find(|c| c.view_id == *view_id).ok_or_else(|| {
                        Error::Data(format!(
                            "query '{}' references missing view {view_id}",
                            r.query_name
                        ))
                    })?;
                    let alpha = render_alpha_mask(scene, cam, r.selected_gaussians.iter().copied());
                    let iou = iou_2d(&binarize(&alpha, binarize_alpha), mask)?;
                    Ok(ViewIou {
                        view_id: *view_id,
                        iou,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(query_metric(&r.query_name, view_ious))
        })
        .collect()
}

/// Per-class IoU and recall over Gaussians for classes present in `gt`.
/// Sentinel predictions never match any class.
pub fn evaluate_semantic_3d(pred: &[u16], gt: &[u16], class_count: usize) -> Result<Vec<ClassMetric>> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "{} predicted labels for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut inter = vec![0usize; class_count];
    let mut pred_n = vec![0usize; class_count];
    let mut gt_n = vec![0usize; class_count];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g != SENTINEL {
            *gt_n
                .get_mut(g as usize)
                .ok_or_else(|| Error::Data(format!("ground-truth label {g} at {i} exceeds {class_count} classes")))? += 1;
        }
        if p != SENTINEL && (p as usize) < class_count {
            pred_n[p as usize] += 1;
            if p == g {
                inter[p as usize] += 1;
            }
        }
    }
    Ok((0..class_count)
        .filter(|&c| gt_n[c] > 0)
        .map(|c| ClassMetric {
            class: c as u16,
            iou: inter[c] as f64 / (gt_n[c] + pred_n[c] - inter[c]) as f64,
            acc: inter[c] as f64 / gt_n[c] as f64,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(n: usize, x0: usize, y0: usize, side: usize) -> Vec<bool> {
        let mut m = vec![false; n * n];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m[y * n + x] = true;
            }
        }
        m
    }

    #[test]
    fn iou_examples() {
        let a = square(20, 5, 5, 10);
        assert_eq!(iou_2d(&a, &a).unwrap(), 1.0);
        let left: Vec<bool> = (0..100).map(|i| i % 10 < 5).collect();
        let right: Vec<bool> = left.iter().map(|v| !v).collect();
        assert_eq!(iou_2d(&left, &right).unwrap(), 0.0);
        assert_eq!(iou_2d(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(iou_2d(&[true], &[true, false]).is_err());
    }

    #[test]
    fn dilated_square() {
        let gt = square(20, 5, 5, 10);
        let pred = square(20, 4, 4, 12);
        assert_eq!(iou_2d(&pred, &gt).unwrap(), 100.0 / 144.0);
    }

    #[test]
    fn summary_definitions() {
        let q = |iou| query_metric("q", vec![ViewIou { view_id: 0, iou }]);
        let r = MetricReport::from_queries(vec![q(0.3), q(0.2)]);
        assert!((r.miou - 0.25).abs() < 1e-12);
        assert_eq!(r.macc25, 0.5);
        let r = MetricReport::from_queries(vec![q(1.0), q(1.0)]);
        assert_eq!((r.miou, r.macc25), (1.0, 1.0));
    }

    #[test]
    fn semantic_3d_examples() {
        let gt = vec![0, 1, 1, 2];
        let m = evaluate_semantic_3d(&gt, &gt, 3).unwrap();
        assert!(m.iter().all(|c| c.iou == 1.0 && c.acc == 1.0));

        let m = evaluate_semantic_3d(&[0, 0, SENTINEL, SENTINEL], &[0; 4], 1).unwrap();
        assert_eq!(m[0].iou, 0.5);
        assert_eq!(m[0].acc, 0.5);

        assert!(evaluate_semantic_3d(&[0], &[0, 0], 1).is_err());
    }

    proptest! {
        #[test]
        fn iou_is_symmetric(a in proptest::collection::vec(any::<bool>(), 64), b in proptest::collection::vec(any::<bool>(), 64)) {
            prop_assert_eq!(iou_2d(&a, &b).unwrap(), iou_2d(&b, &a).unwrap());
        }

        #[test]
        fn hit_rate_monotone(ious in proptest::collection::vec(0.0f64..1.0, 1..10), bump in 0.0f64..1.0, at in 0usize..10) {
            let make = |v: &[f64]| v.iter().map(|&iou| query_metric("q", vec![ViewIou { view_id: 0, iou }])).collect::<Vec<_>>();
            let mut raised = ious.clone();
            let i = at % raised.len();
            raised[i] = (raised[i] + bump).min(1.0);
            prop_assert!(summarize(&make(&raised)).1 >= summarize(&make(&ious)).1);
        }
    }
}
