//! Cluster-level open-vocabulary inference and scene edits.

use serde::{Deserialize, Serialize};

use crate::clustering::{feature_sim, ClusterTable};
use crate::error::{Error, Result};
use crate::injection::{INDEX_CAPACITY, SENTINEL};
use crate::scene_io::{GaussianScene, QuerySet};

/// Similarities below this for every cluster flag a selection as low-confidence.
pub const LOW_CONFIDENCE_SIM: f64 = 0.5;
/// Zeroth-order spherical-harmonic constant.
pub const SH_C0: f64 = 0.28209479177387814;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    /// The single most similar cluster.
    Argmax,
    /// Every cluster with similarity at least `rho` times the best one.
    Relative { rho: f64 },
}

impl Default for SelectionMode {
    fn default() -> Self {
        SelectionMode::Relative { rho: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub query_name: String,
    pub similarities: Vec<f64>,
    pub selected_clusters: Vec<u32>,
    pub selected_gaussians: Vec<u32>,
    /// Cosine evaluations spent on this query.
    pub similarity_evaluations: usize,
    pub low_confidence: bool,
}

fn similarities(table: &ClusterTable, query: &[f32]) -> Result<Vec<f64>> {
    if table.is_empty() {
        return Err(Error::Data("cluster table is empty".into()));
    }
    if query.len() != table.dim() {
        return Err(Error::Dimension(format!(
            "query has dimension {}, cluster features have {}",
            query.len(),
            table.dim()
        )));
    }
    Ok((0..table.cluster_count())
        .map(|c| feature_sim(query, table.feature(c)))
        .collect())
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Compare `query` against every cluster feature and pick clusters by `mode`.
/// In relative mode with a non-positive best similarity only the best
/// cluster is kept, since the ratio rule would otherwise exclude it.
pub fn select_objects(
    table: &ClusterTable,
    name: &str,
    query: &[f32],
    mode: SelectionMode,
) -> Result<SelectionResult> {
    let sims = similarities(table, query)?;
    let best = argmax(&sims);
    let max = sims[best];
    let selected_clusters: Vec<u32> = match mode {
        SelectionMode::Relative { rho } if max > 0.0 => (0..sims.len() as u32)
            .filter(|&c| sims[c as usize] >= rho * max)
            .collect(),
        _ => vec![best as u32],
    };
    let mut selected_gaussians: Vec<u32> = selected_clusters
        .iter()
        .flat_map(|&c| table.gaussians(c as usize).iter().copied())
        .collect();
    selected_gaussians.sort_unstable();
    Ok(SelectionResult {
        query_name: name.to_string(),
        similarity_evaluations: sims.len(),
        low_confidence: max < LOW_CONFIDENCE_SIM,
        similarities: sims,
        selected_clusters,
        selected_gaussians,
    })
}

/// Per-Gaussian semantic labels plus the label chosen for each cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelField {
    pub cluster_labels: Vec<u16>,
    /// Per-Gaussian label, `SENTINEL` where the Gaussian has no cluster.
    pub labels: Vec<u16>,
}

/// Label every cluster with its most similar query (ties to the smallest
/// label id) and spread the labels to Gaussians through the cluster field.
pub fn semantic_segmentation(table: &ClusterTable, labels: &QuerySet) -> Result<LabelField> {
    if labels.entries.is_empty() {
        return Err(Error::Validation("semantic segmentation needs at least one label".into()));
    }
    if labels.entries.len() > INDEX_CAPACITY {
        return Err(Error::Capacity {
            what: "label",
            count: labels.entries.len(),
            limit: INDEX_CAPACITY,
        });
    }
    for e in &labels.entries {
        if e.embedding.len() != table.dim() {
            return Err(Error::Dimension(format!(
                "label '{}' has dimension {}, cluster features have {}",
                e.name,
                e.embedding.len(),
                table.dim()
            )));
        }
    }
    let cluster_labels: Vec<u16> = (0..table.cluster_count())
        .map(|c| {
            let sims: Vec<f64> = labels
                .entries
                .iter()
                .map(|e| feature_sim(&e.embedding, table.feature(c)))
                .collect();
            argmax(&sims) as u16
        })
        .collect();
    let labels = table
        .field()
        .iter()
        .map(|&c| if c == SENTINEL { SENTINEL } else { cluster_labels[c as usize] })
        .collect();
    Ok(LabelField {
        cluster_labels,
        labels,
    })
}

fn check_selection(scene: &GaussianScene, selection: &[u32]) -> Result<()> {
    match selection.iter().find(|&&g| g as usize >= scene.len()) {
        Some(g) => Err(Error::Validation(format!(
            "selected Gaussian {g} is outside a scene of {}",
            scene.len()
        ))),
        None => Ok(()),
    }
}

/// Set the DC color of the selected Gaussians to `rgb`.
pub fn edit_recolor(scene: &GaussianScene, selection: &[u32], rgb: [f64; 3]) -> Result<GaussianScene> {
    if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Validation(format!("color {rgb:?} has components outside [0, 1]")));
    }
    check_selection(scene, selection)?;
    let dc = rgb.map(|c| ((c - 0.5) / SH_C0) as f32);
    let mut out = scene.clone();
    for &g in selection {
        out.gaussians_mut()[g as usize].color_dc = dc;
    }
    Ok(out)
}

/// Scale the selected Gaussians about their centroid: positions spread by
/// `factor` and every axis scale multiplied by it.
pub fn edit_enlarge(scene: &GaussianScene, selection: &[u32], factor: f64) -> Result<GaussianScene> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Validation(format!("enlarge factor {factor} must be positive")));
    }
    check_selection(scene, selection)?;
    let mut out = scene.clone();
    if selection.is_empty() {
        return Ok(out);
    }
    let mut mu = [0.0f64; 3];
    for &g in selection {
        for (m, &p) in mu.iter_mut().zip(&scene.gaussians()[g as usize].position) {
            *m += p as f64;
        }
    }
    mu = mu.map(|m| m / selection.len() as f64);
    let ln_f = factor.ln();
    for &g in selection {
        let gs = &mut out.gaussians_mut()[g as usize];
        for ((pos, s), m) in gs.position.iter_mut().zip(&mut gs.log_scale).zip(mu) {
            let p = *pos as f64;
            *pos = (p + (factor - 1.0) * (p - m)) as f32;
            *s = (*s as f64 + ln_f) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{Gaussian, QueryEntry, QueryTask};

    fn basis_table(n: usize) -> ClusterTable {
        let mut feats = vec![0.0; n * n];
        for i in 0..n {
            feats[i * n + i] = 1.0;
        }
        let field = (0..n as u16).chain([SENTINEL]).collect();
        ClusterTable::new(n, (0..n as u32).map(|k| vec![k]).collect(), feats, field).unwrap()
    }

    fn table_with_sims(sims: &[f64]) -> ClusterTable {
        // Cluster features in 2D at the requested cosine to (1, 0).
        let feats = sims
            .iter()
            .flat_map(|&s| [s as f32, (1.0 - s * s).sqrt() as f32])
            .collect();
        let field = (0..sims.len() as u16).collect();
        ClusterTable::new(2, (0..sims.len() as u32).map(|k| vec![k]).collect(), feats, field).unwrap()
    }

    #[test]
    fn basis_query_hits_its_cluster() {
        let t = basis_table(3);
        let r = select_objects(&t, "one", &[0.0, 1.0, 0.0], SelectionMode::Argmax).unwrap();
        assert_eq!(r.selected_clusters, vec![1]);
        assert_eq!(r.similarities[1], 1.0);
        assert_eq!(r.selected_gaussians, vec![1]);
        assert_eq!(r.similarity_evaluations, 3);
    }

    #[test]
    fn relative_rule() {
        let t = table_with_sims(&[0.95, 0.90, 0.5]);
        let r = select_objects(&t, "q", &[1.0, 0.0], SelectionMode::default()).unwrap();
        assert_eq!(r.selected_clusters, vec![0, 1]);
    }

    #[test]
    fn orthogonal_query_is_low_confidence() {
        // Three clusters on the first three axes of a 4D space.
        let mut feats = vec![0.0; 12];
        for i in 0..3 {
            feats[i * 4 + i] = 1.0;
        }
        let t = ClusterTable::new(4, vec![vec![0], vec![1], vec![2]], feats, vec![0, 1, 2]).unwrap();
        let r = select_objects(&t, "unknown", &[0.0, 0.0, 0.0, 1.0], SelectionMode::default()).unwrap();
        assert!(r.low_confidence);
        assert!(r.similarities.iter().all(|&s| s == 0.0));
        assert_eq!(r.selected_clusters, vec![0]);

        let r = select_objects(&t, "neg", &[-1.0, 0.0, 0.0, 0.0], SelectionMode::default()).unwrap();
        assert!(r.low_confidence);
        assert_eq!(r.selected_clusters, vec![1]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = basis_table(3);
        assert!(matches!(
            select_objects(&t, "q", &[1.0, 0.0], SelectionMode::Argmax),
            Err(Error::Dimension(_))
        ));
    }

    fn labels(vectors: &[[f32; 2]]) -> QuerySet {
        QuerySet {
            task: QueryTask::SemanticSegmentation,
            entries: vectors
                .iter()
                .enumerate()
                .map(|(i, v)| QueryEntry {
                    name: format!("l{i}"),
                    embedding: v.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn labels_by_argmax_with_ties_to_first() {
        let t = table_with_sims(&[1.0]);
        let out = semantic_segmentation(&t, &labels(&[[0.3, 0.954], [0.7, 0.714]])).unwrap();
        assert_eq!(out.cluster_labels, vec![1]);
        let out = semantic_segmentation(&t, &labels(&[[0.5, 0.5], [0.5, -0.5]])).unwrap();
        assert_eq!(out.labels, vec![0]);
    }

    fn scene(points: &[[f32; 3]]) -> GaussianScene {
        GaussianScene::new(
            points
                .iter()
                .map(|&p| Gaussian {
                    position: p,
                    log_scale: [-2.0; 3],
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    opacity_logit: 1.0,
                    color_dc: [0.3, -0.2, 0.1],
                })
                .collect(),
        )
    }

    #[test]
    fn recolor_to_mid_gray_zeroes_dc() {
        let s = scene(&[[0.0; 3], [1.0; 3]]);
        let out = edit_recolor(&s, &[1], [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(out.gaussians()[1].color_dc, [0.0; 3]);
        assert_eq!(out.gaussians()[0], s.gaussians()[0]);
        assert_eq!(edit_recolor(&s, &[], [0.1, 0.2, 0.3]).unwrap(), s);
        assert!(edit_recolor(&s, &[0], [1.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn enlarge_about_centroid() {
        let s = scene(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(edit_enlarge(&s, &[0, 1], 1.0).unwrap(), s);

        let out = edit_enlarge(&s, &[0], 2.0).unwrap();
        assert_eq!(out.gaussians()[0].position, [0.0; 3]);
        assert!((out.gaussians()[0].scale()[0] / s.gaussians()[0].scale()[0] - 2.0).abs() < 1e-6);

        let out = edit_enlarge(&s, &[0, 1], 2.0).unwrap();
        assert_eq!(out.gaussians()[0].position, [-0.5, 0.0, 0.0]);
        assert_eq!(out.gaussians()[1].position, [1.5, 0.0, 0.0]);

        assert!(edit_enlarge(&s, &[0], 0.0).is_err());
        assert!(edit_enlarge(&s, &[0], -1.0).is_err());
    }
}
