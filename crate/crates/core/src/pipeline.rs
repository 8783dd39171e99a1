//! End-to-end orchestration: distillation (rasterize, inject, filter,
//! cluster), artifact persistence and querying.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{cluster_masks, ClusterStats, ClusterTable, MaskGraph};
use crate::error::{Error, Result};
use crate::injection::{
    accumulate_view, assign_indices, filter_masks, merge_views, MaskGaussianSets, MaskIndexField,
    SurvivingMasks, Thresholds,
};
use crate::query::{select_objects, semantic_segmentation, LabelField, SelectionMode, SelectionResult};
use crate::rasterizer::{project_gaussians, rasterize_contributions, ContributionStream};
use crate::scene_io::{
    encode_features, encode_u16_field, norm, parse_features, parse_u16_field, FeatureTable,
    GaussianScene, QuerySet, QueryTask, ViewSet, SPCL_MAGIC, SPIX_MAGIC,
};

pub const INDEX_FILE: &str = "index.spix";
pub const CLUSTER_FIELD_FILE: &str = "clusters.spcl";
pub const CLUSTER_FEATURES_FILE: &str = "cluster_features.splf";
pub const CLUSTER_REPORT_FILE: &str = "clusters.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Keep every mask with a non-empty Gaussian set.
    pub disable_filtering: bool,
    /// Accept any feature similarity.
    pub disable_semantic_gate: bool,
    /// Accept any IoU between masks that share a Gaussian.
    pub disable_geometric_gate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub thresholds: Thresholds,
    pub selection_mode: SelectionMode,
    pub binarize_alpha: f64,
    /// Worker threads; `None` uses every available core.
    pub thread_count: Option<usize>,
    pub ablation: Ablation,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::LERF,
            selection_mode: SelectionMode::default(),
            binarize_alpha: 0.5,
            thread_count: None,
            ablation: Ablation::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        if let SelectionMode::Relative { rho } = self.selection_mode {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::Validation(format!("relative selection rho {rho} must lie in (0, 1]")));
            }
        }
        if !(self.binarize_alpha > 0.0 && self.binarize_alpha < 1.0) {
            return Err(Error::Validation(format!(
                "binarize_alpha {} must lie in (0, 1)",
                self.binarize_alpha
            )));
        }
        if self.thread_count == Some(0) {
            return Err(Error::Validation("thread_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Thresholds after applying the ablation switches.
    pub fn effective_thresholds(&self) -> Thresholds {
        let mut t = self.thresholds;
        if self.ablation.disable_filtering {
            t.noise = 1;
        }
        if self.ablation.disable_semantic_gate {
            t.feat = -1.0;
        }
        if self.ablation.disable_geometric_gate {
            t.iou = 0.0;
        }
        t
    }

    /// Run `f` on a worker pool sized by `thread_count`.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.thread_count {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Validation(format!("cannot build a worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Wall time of each distillation stage in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub rasterize: f64,
    pub inject: f64,
    pub filter: f64,
    pub cluster: f64,
    pub total: f64,
}

impl StageTiming {
    /// Fractions of the summed stage time, in stage order.
    pub fn shares(&self) -> [f64; 4] {
        let sum = (self.rasterize + self.inject + self.filter + self.cluster).max(f64::MIN_POSITIVE);
        [self.rasterize, self.inject, self.filter, self.cluster].map(|t| t / sum)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillCounters {
    pub rasterization_passes: u32,
    pub clustering_passes: u32,
    pub contribution_records: u64,
    pub culled_gaussians: u64,
    pub cluster_stats: ClusterStats,
}

/// Results of the filter, assignment and clustering stages.
#[derive(Clone, Debug)]
pub struct Semantics {
    pub surviving: SurvivingMasks,
    pub index_field: MaskIndexField,
    pub table: ClusterTable,
    pub graph: MaskGraph,
    pub stats: ClusterStats,
}

#[derive(Clone, Debug)]
pub struct Distillation {
    pub sets: MaskGaussianSets,
    pub semantics: Semantics,
    pub timing: StageTiming,
    pub counters: DistillCounters,
    pub thresholds: Thresholds,
}

fn check_inputs(scene: &GaussianScene, views: &ViewSet, features: &FeatureTable) -> Result<()> {
    if features.rows() != views.total_masks() {
        return Err(Error::Data(format!(
            "{} feature rows for {} masks",
            features.rows(),
            views.total_masks()
        )));
    }
    if scene.is_empty() {
        return Err(Error::Data("scene has no Gaussians".into()));
    }
    Ok(())
}

/// Contribution streams of every view, in view order.
pub fn rasterize_views(scene: &GaussianScene, views: &ViewSet) -> Vec<ContributionStream> {
    views
        .cameras
        .iter()
        .map(|c| rasterize_contributions(&project_gaussians(scene, c).gaussians, c))
        .collect()
}

/// Mask sets from precomputed streams.
pub fn inject_streams(
    streams: &[ContributionStream],
    views: &ViewSet,
    n_gaussians: usize,
    tau_contrib: f64,
) -> Result<MaskGaussianSets> {
    crate::injection::build_mask_sets(streams, views, n_gaussians, tau_contrib)
}

/// Filter, assign and cluster from mask sets.
pub fn semantics_from_sets(
    sets: &MaskGaussianSets,
    features: &FeatureTable,
    thresholds: &Thresholds,
) -> Result<Semantics> {
    let surviving = filter_masks(sets, thresholds.noise).map_err(|e| e.in_stage("filter"))?;
    let index_field = assign_indices(sets, &surviving).map_err(|e| e.in_stage("inject"))?;
    let (table, graph, stats) =
        cluster_masks(sets, features, &surviving, &index_field, thresholds.iou, thresholds.feat)
            .map_err(|e| e.in_stage("cluster"))?;
    Ok(Semantics {
        surviving,
        index_field,
        table,
        graph,
        stats,
    })
}

/// Distill on the calling thread's pool. Each view is rasterized once and
/// its records are folded into mask influence before the next view, so at
/// most one view's stream is alive. `on_stream` sees every stream.
pub fn distill_with(
    scene: &GaussianScene,
    views: &ViewSet,
    features: &FeatureTable,
    thresholds: &Thresholds,
    mut on_stream: impl FnMut(usize, &ContributionStream) -> Result<()>,
) -> Result<Distillation> {
    thresholds.validate()?;
    check_inputs(scene, views, features)?;
    let start = Instant::now();
    let mut timing = StageTiming::default();
    let mut counters = DistillCounters::default();
    let mut parts = Vec::with_capacity(views.len());
    for (v, cam) in views.cameras.iter().enumerate() {
        let t0 = Instant::now();
        let projection = project_gaussians(scene, cam);
        let stream = rasterize_contributions(&projection.gaussians, cam);
        timing.rasterize += t0.elapsed().as_secs_f64();
        counters.rasterization_passes += 1;
        counters.contribution_records += stream.record_count() as u64;
        let culled = projection.culled;
        counters.culled_gaussians += (culled.behind_near_plane + culled.outside_image + culled.degenerate) as u64;
        on_stream(v, &stream)?;

        let t0 = Instant::now();
        let part = accumulate_view(&stream, &views.masks[v], views.mask_offset(v), thresholds.contrib)
            .map_err(|e| e.in_stage("inject"))?;
        parts.push(part);
        timing.inject += t0.elapsed().as_secs_f64();
    }
    let t0 = Instant::now();
    let sets = merge_views(scene.len(), views.total_masks(), parts);
    timing.inject += t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let surviving = filter_masks(&sets, thresholds.noise).map_err(|e| e.in_stage("filter"))?;
    timing.filter = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let index_field = assign_indices(&sets, &surviving).map_err(|e| e.in_stage("inject"))?;
    timing.inject += t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let (table, graph, stats) =
        cluster_masks(&sets, features, &surviving, &index_field, thresholds.iou, thresholds.feat)
            .map_err(|e| e.in_stage("cluster"))?;
    timing.cluster = t0.elapsed().as_secs_f64();
    timing.total = start.elapsed().as_secs_f64();
    counters.clustering_passes = stats.pair_passes;
    counters.cluster_stats = stats;

    Ok(Distillation {
        sets,
        semantics: Semantics {
            surviving,
            index_field,
            table,
            graph,
            stats,
        },
        timing,
        counters,
        thresholds: *thresholds,
    })
}

/// Distill with the configured thresholds, ablations and worker pool.
pub fn run_distill(
    scene: &GaussianScene,
    views: &ViewSet,
    features: &FeatureTable,
    config: &PipelineConfig,
) -> Result<Distillation> {
    config.validate()?;
    let thresholds = config.effective_thresholds();
    config.install(|| distill_with(scene, views, features, &thresholds, |_, _| Ok(())))?
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub id: u32,
    pub members: Vec<u32>,
    pub gaussian_count: usize,
    pub feature_norm: f64,
}

/// Summary written next to the binary artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub config: PipelineConfig,
    pub effective_thresholds: Thresholds,
    pub gaussian_count: usize,
    pub view_count: usize,
    pub mask_count: usize,
    pub surviving_masks: Vec<u32>,
    pub assigned_gaussians: usize,
    pub index_field_bytes_per_gaussian: f64,
    pub clusters: Vec<ClusterEntry>,
    pub counters: DistillCounters,
    pub timing: StageTiming,
    /// Content hashes of inputs and written artifacts, keyed by file name.
    pub hashes: std::collections::BTreeMap<String, String>,
}

impl DistillReport {
    pub fn without_timing(&self) -> Self {
        Self {
            timing: StageTiming::default(),
            ..self.clone()
        }
    }
}

/// Write `SPIX`, `SPCL`, cluster features and the cluster report into `dir`.
/// `input_hashes` are recorded alongside the artifact hashes.
pub fn persist(
    dir: impl AsRef<Path>,
    distillation: &Distillation,
    config: &PipelineConfig,
    view_count: usize,
    input_hashes: impl IntoIterator<Item = (String, String)>,
) -> Result<DistillReport> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &distillation.semantics;
    let table = &s.table;
    let mut hashes: std::collections::BTreeMap<String, String> = input_hashes.into_iter().collect();
    let feature_table = FeatureTable::new(table.dim(), table.features().to_vec())?;
    let artifacts = [
        (INDEX_FILE, encode_u16_field(SPIX_MAGIC, s.index_field.values())),
        (CLUSTER_FIELD_FILE, encode_u16_field(SPCL_MAGIC, table.field())),
        (CLUSTER_FEATURES_FILE, encode_features(&feature_table)),
    ];
    for (name, bytes) in &artifacts {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        hashes.insert(name.to_string(), sha256_hex(bytes));
    }
    let n = s.index_field.len();
    let report = DistillReport {
        config: *config,
        effective_thresholds: distillation.thresholds,
        gaussian_count: n,
        view_count,
        mask_count: distillation.sets.mask_count(),
        surviving_masks: s.surviving.ids().to_vec(),
        assigned_gaussians: s.index_field.assigned_count(),
        index_field_bytes_per_gaussian: s.index_field.allocated_bytes() as f64 / n.max(1) as f64,
        clusters: (0..table.cluster_count())
            .map(|c| ClusterEntry {
                id: c as u32,
                members: table.members(c).to_vec(),
                gaussian_count: table.gaussians(c).len(),
                feature_norm: norm(table.feature(c)),
            })
            .collect(),
        counters: distillation.counters,
        timing: distillation.timing,
        hashes,
    };
    let p = dir.join(CLUSTER_REPORT_FILE);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

/// Persisted distillation outputs loaded back.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub index_field: MaskIndexField,
    pub table: ClusterTable,
    pub report: DistillReport,
}

pub fn load_artifacts(dir: impl AsRef<Path>) -> Result<Artifacts> {
    let dir = dir.as_ref();
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let report: DistillReport = serde_json::from_slice(&read(CLUSTER_REPORT_FILE)?)
        .map_err(|e| Error::Format(format!("{CLUSTER_REPORT_FILE}: {e}")))?;
    let index = parse_u16_field(SPIX_MAGIC, &read(INDEX_FILE)?)?;
    let field = parse_u16_field(SPCL_MAGIC, &read(CLUSTER_FIELD_FILE)?)?;
    let features = parse_features(&read(CLUSTER_FEATURES_FILE)?)?;
    if index.len() != field.len() {
        return Err(Error::Data(format!(
            "index field has {} entries, cluster field {}",
            index.len(),
            field.len()
        )));
    }
    let members = report.clusters.iter().map(|c| c.members.clone()).collect();
    let table = ClusterTable::new(features.dim(), members, features.as_slice().to_vec(), field)?;
    Ok(Artifacts {
        index_field: MaskIndexField::from_values(index),
        table,
        report,
    })
}

/// Per-query outputs with wall time in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedSelection {
    #[serde(flatten)]
    pub result: SelectionResult,
    pub gaussian_count: usize,
    pub wall_time_us: f64,
}

#[derive(Clone, Debug)]
pub enum QueryOutput {
    Selections(Vec<TimedSelection>),
    Labels { field: LabelField, wall_time_us: f64 },
}

/// Run a query file against a cluster table.
pub fn run_query(table: &ClusterTable, queries: &QuerySet, config: &PipelineConfig) -> Result<QueryOutput> {
    let queries = queries.clone().normalized(table.dim())?;
    match queries.task {
        QueryTask::ObjectSelection => queries
            .entries
            .iter()
            .map(|q| {
                let t0 = Instant::now();
                let result = select_objects(table, &q.name, &q.embedding, config.selection_mode)?;
                let wall_time_us = t0.elapsed().as_secs_f64() * 1e6;
                Ok(TimedSelection {
                    gaussian_count: result.selected_gaussians.len(),
                    result,
                    wall_time_us,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(QueryOutput::Selections),
        QueryTask::SemanticSegmentation => {
            let t0 = Instant::now();
            let field = semantic_segmentation(table, &queries)?;
            Ok(QueryOutput::Labels {
                field,
                wall_time_us: t0.elapsed().as_secs_f64() * 1e6,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_map_to_thresholds() {
        let mut c = PipelineConfig::default();
        assert_eq!(c.effective_thresholds(), Thresholds::LERF);
        c.ablation = Ablation {
            disable_filtering: true,
            disable_semantic_gate: true,
            disable_geometric_gate: true,
        };
        let t = c.effective_thresholds();
        assert_eq!((t.contrib, t.noise, t.iou, t.feat), (0.04, 1, 0.0, -1.0));
    }

    #[test]
    fn config_json_round_trip() {
        let c = PipelineConfig {
            selection_mode: SelectionMode::Argmax,
            thread_count: Some(2),
            ..PipelineConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn bad_config_is_a_validation_error() {
        let mut c = PipelineConfig::default();
        c.thresholds.iou = 1.5;
        let text = serde_json::to_string(&c).unwrap();
        assert!(matches!(PipelineConfig::from_json(&text), Err(Error::Validation(_))));
        assert!(matches!(PipelineConfig::from_json("{\"x\": 1}"), Err(Error::Validation(_))));
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
