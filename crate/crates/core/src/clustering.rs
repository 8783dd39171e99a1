//! Inter-mask graph over surviving masks, connected components and
//! single-step cluster feature aggregation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::injection::{MaskGaussianSets, MaskIndexField, SurvivingMasks, INDEX_CAPACITY, SENTINEL};
use crate::scene_io::FeatureTable;

/// IoU of two ascending id lists. Two empty sets have IoU 0.
pub fn mask_iou(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn intersection_size(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Cosine similarity in double precision.
pub fn feature_sim(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Graph over surviving masks (global ids). Edges are stored once as
/// `(a, b)` with `a <= b`, self-loops included, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskGraph {
    pub nodes: Vec<u32>,
    pub edges: Vec<(u32, u32)>,
}

impl MaskGraph {
    /// A graph holding only the self-loops of `nodes`.
    pub fn self_loops(nodes: Vec<u32>) -> Self {
        let edges = nodes.iter().map(|&k| (k, k)).collect();
        Self { nodes, edges }
    }

    pub fn has_edge(&self, a: u32, b: u32) -> bool {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search(&key).is_ok()
    }

    /// Edges between distinct masks.
    pub fn links(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.edges.iter().copied().filter(|(a, b)| a != b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// Mask pairs sharing at least one Gaussian that were scored.
    pub candidate_pairs_scored: u64,
    /// Passes over the candidate pairs (one per graph build).
    pub pair_passes: u32,
    /// Mask features folded into cluster means.
    pub masks_aggregated: u64,
    /// Passes over the masks during aggregation.
    pub aggregation_passes: u32,
}

/// Build the mask graph. A pair of surviving masks is linked when the two
/// Gaussian sets share at least one Gaussian, their IoU is at least
/// `tau_iou` and their feature similarity at least `tau_feat`.
pub fn build_graph(
    sets: &MaskGaussianSets,
    features: &FeatureTable,
    surviving: &SurvivingMasks,
    tau_iou: f64,
    tau_feat: f64,
    stats: &mut ClusterStats,
) -> Result<MaskGraph> {
    if features.rows() != sets.mask_count() {
        return Err(Error::Data(format!(
            "{} feature rows for {} masks",
            features.rows(),
            sets.mask_count()
        )));
    }
    let m = surviving.len();

    // Inverted index: Gaussian -> compact ids of the surviving masks holding it.
    let n = sets.gaussian_count();
    let mut offsets = vec![0u32; n + 1];
    for g in 0..n {
        let deg = sets
            .influence(g)
            .iter()
            .filter(|(k, _)| surviving.contains(*k))
            .count();
        offsets[g + 1] = offsets[g] + deg as u32;
    }
    let mut inverted = Vec::with_capacity(offsets[n] as usize);
    for g in 0..n {
        inverted.extend(sets.influence(g).iter().filter_map(|(k, _)| surviving.compact(*k)));
    }

    let per_mask: Vec<(u64, Vec<(u32, u32)>)> = (0..m)
        .into_par_iter()
        .map_init(
            || (vec![0u32; m], Vec::new()),
            |(counts, touched), a| {
                let ka = surviving.global(a);
                let set_a = &sets.sets[ka as usize];
                for &g in set_a {
                    let row = &inverted[offsets[g as usize] as usize..offsets[g as usize + 1] as usize];
                    for &b in row {
                        if b as usize > a {
                            if counts[b as usize] == 0 {
                                touched.push(b);
                            }
                            counts[b as usize] += 1;
                        }
                    }
                }
                touched.sort_unstable();
                let mut edges = Vec::new();
                for &b in touched.iter() {
                    let inter = counts[b as usize] as usize;
                    counts[b as usize] = 0;
                    let kb = surviving.global(b as usize);
                    let set_b = &sets.sets[kb as usize];
                    let iou = inter as f64 / (set_a.len() + set_b.len() - inter) as f64;
                    if iou >= tau_iou && feature_sim(features.row(ka as usize), features.row(kb as usize)) >= tau_feat {
                        edges.push((ka, kb));
                    }
                }
                let scored = touched.len() as u64;
                touched.clear();
                (scored, edges)
            },
        )
        .collect();

    let mut edges = Vec::new();
    for (a, (scored, links)) in per_mask.into_iter().enumerate() {
        stats.candidate_pairs_scored += scored;
        let ka = surviving.global(a);
        edges.push((ka, ka));
        edges.extend(links);
    }
    stats.pair_passes += 1;
    Ok(MaskGraph {
        nodes: surviving.ids().to_vec(),
        edges,
    })
}

/// Disjoint-set forest with path compression and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    pub fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

/// Partition of graph nodes into clusters `0..cluster_count`, numbered by
/// each component's smallest node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    /// Ascending node ids.
    pub nodes: Vec<u32>,
    /// Cluster of `nodes[i]`.
    pub cluster_of: Vec<u32>,
    pub cluster_count: usize,
}

impl Partition {
    pub fn cluster_of_node(&self, node: u32) -> Option<u32> {
        self.nodes.binary_search(&node).ok().map(|i| self.cluster_of[i])
    }

    /// Members of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (&k, &c) in self.nodes.iter().zip(&self.cluster_of) {
            out[c as usize].push(k);
        }
        out
    }

    /// Number clusters by smallest member from any node-to-label map.
    pub fn from_labels(nodes: Vec<u32>, labels: &[u32]) -> Self {
        let mut remap = rustc_hash::FxHashMap::default();
        let cluster_of = labels
            .iter()
            .map(|l| {
                let next = remap.len() as u32;
                *remap.entry(*l).or_insert(next)
            })
            .collect();
        Self {
            nodes,
            cluster_count: remap.len(),
            cluster_of,
        }
    }
}

/// Connected components of `graph` by union-find.
pub fn connected_components(graph: &MaskGraph) -> Partition {
    let mut nodes = graph.nodes.clone();
    nodes.sort_unstable();
    let pos = |k: u32| nodes.binary_search(&k).expect("edge endpoint is a graph node") as u32;
    let mut uf = UnionFind::new(nodes.len());
    for &(a, b) in &graph.edges {
        uf.union(pos(a), pos(b));
    }
    let roots: Vec<u32> = (0..nodes.len() as u32).map(|i| uf.find(i)).collect();
    Partition::from_labels(nodes, &roots)
}

/// Mean of each cluster's member features, L2-normalized. Row-major
/// `cluster_count x dim`.
pub fn aggregate_features(
    partition: &Partition,
    features: &FeatureTable,
    stats: &mut ClusterStats,
) -> Vec<f32> {
    let dim = features.dim();
    let mut sums = vec![0.0f64; partition.cluster_count * dim];
    let mut counts = vec![0u32; partition.cluster_count];
    for (&k, &c) in partition.nodes.iter().zip(&partition.cluster_of) {
        let acc = &mut sums[c as usize * dim..(c as usize + 1) * dim];
        for (s, &f) in acc.iter_mut().zip(features.row(k as usize)) {
            *s += f as f64;
        }
        counts[c as usize] += 1;
        stats.masks_aggregated += 1;
    }
    stats.aggregation_passes += 1;
    let mut out = vec![0.0f32; sums.len()];
    for c in 0..partition.cluster_count {
        let mean = &sums[c * dim..(c + 1) * dim];
        let inv = counts[c] as f64;
        let norm = mean.iter().map(|v| (v / inv) * (v / inv)).sum::<f64>().sqrt();
        for (o, &v) in out[c * dim..(c + 1) * dim].iter_mut().zip(mean) {
            *o = if norm > 0.0 { (v / inv / norm) as f32 } else { 0.0 };
        }
    }
    out
}

/// Clusters of the surviving masks, their features and the per-Gaussian
/// 2-byte cluster field.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTable {
    dim: usize,
    members: Vec<Vec<u32>>,
    features: Vec<f32>,
    field: Box<[u16]>,
    gaussians: Vec<Vec<u32>>,
}

impl ClusterTable {
    /// Assemble a table, deriving each cluster's Gaussians from `field`.
    pub fn new(dim: usize, members: Vec<Vec<u32>>, features: Vec<f32>, field: Vec<u16>) -> Result<Self> {
        let c = members.len();
        if c > INDEX_CAPACITY {
            return Err(Error::Capacity {
                what: "cluster",
                count: c,
                limit: INDEX_CAPACITY,
            });
        }
        if dim == 0 || features.len() != c * dim {
            return Err(Error::Dimension(format!(
                "{} cluster feature values for {c} clusters of dimension {dim}",
                features.len()
            )));
        }
        let mut gaussians = vec![Vec::new(); c];
        for (g, &v) in field.iter().enumerate() {
            if v == SENTINEL {
                continue;
            }
            let list = gaussians.get_mut(v as usize).ok_or_else(|| {
                Error::Data(format!("Gaussian {g} carries cluster {v} but only {c} clusters exist"))
            })?;
            list.push(g as u32);
        }
        Ok(Self {
            dim,
            members,
            features,
            field: field.into_boxed_slice(),
            gaussians,
        })
    }

    pub fn cluster_count(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Normalized feature of cluster `c`.
    pub fn feature(&self, c: usize) -> &[f32] {
        &self.features[c * self.dim..(c + 1) * self.dim]
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    /// Global mask ids in cluster `c`, ascending.
    pub fn members(&self, c: usize) -> &[u32] {
        &self.members[c]
    }

    /// Gaussians whose assigned mask belongs to cluster `c`, ascending.
    pub fn gaussians(&self, c: usize) -> &[u32] {
        &self.gaussians[c]
    }

    /// Per-Gaussian cluster id, `SENTINEL` when unassigned.
    pub fn field(&self) -> &[u16] {
        &self.field
    }

    pub fn field_allocated_bytes(&self) -> usize {
        std::mem::size_of_val::<[u16]>(&self.field)
    }
}

/// Compose the mask index field with the mask-to-cluster map.
pub fn build_cluster_field(
    index_field: &MaskIndexField,
    surviving: &SurvivingMasks,
    partition: &Partition,
) -> Result<Vec<u16>> {
    if partition.cluster_count > INDEX_CAPACITY {
        return Err(Error::Capacity {
            what: "cluster",
            count: partition.cluster_count,
            limit: INDEX_CAPACITY,
        });
    }
    let by_compact: Vec<u16> = surviving
        .ids()
        .iter()
        .map(|&k| {
            partition
                .cluster_of_node(k)
                .map(|c| c as u16)
                .ok_or_else(|| Error::Data(format!("surviving mask {k} has no cluster")))
        })
        .collect::<Result<_>>()?;
    Ok(index_field
        .values()
        .iter()
        .map(|&v| if v == SENTINEL { SENTINEL } else { by_compact[v as usize] })
        .collect())
}

/// Run graph construction, components and aggregation as one step.
pub fn cluster_masks(
    sets: &MaskGaussianSets,
    features: &FeatureTable,
    surviving: &SurvivingMasks,
    index_field: &MaskIndexField,
    tau_iou: f64,
    tau_feat: f64,
) -> Result<(ClusterTable, MaskGraph, ClusterStats)> {
    let mut stats = ClusterStats::default();
    let graph = build_graph(sets, features, surviving, tau_iou, tau_feat, &mut stats)?;
    let partition = connected_components(&graph);
    let cluster_features = aggregate_features(&partition, features, &mut stats);
    let field = build_cluster_field(index_field, surviving, &partition)?;
    let table = ClusterTable::new(features.dim(), partition.members(), cluster_features, field)?;
    Ok((table, graph, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::{filter_masks, Thresholds};

    #[test]
    fn iou_examples() {
        assert_eq!(mask_iou(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(mask_iou(&[1, 2, 3], &[2, 3, 4]), 0.5);
        assert_eq!(mask_iou(&[1, 2], &[3, 4]), 0.0);
        assert_eq!(mask_iou(&[], &[]), 0.0);
    }

    #[test]
    fn similarity_examples() {
        assert!((feature_sim(&[0.6, 0.8], &[0.6, 0.8]) - 1.0).abs() < 1e-12);
        assert_eq!(feature_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((feature_sim(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
    }

    /// Two masks whose sets overlap by the given IoU, with features at the
    /// given cosine.
    fn pair(inter: u32, union: u32, cos: f64) -> (MaskGaussianSets, FeatureTable) {
        let a = union - (union - inter) / 2;
        let mut triples: Vec<(u32, u32, f64)> = (0..a).map(|g| (g, 0, 1.0)).collect();
        triples.extend((a - inter..union).map(|g| (g, 1, 1.0)));
        let sets = MaskGaussianSets::from_triples(union as usize, 2, triples);
        let sin = (1.0 - cos * cos).sqrt();
        let feats = FeatureTable::new(2, vec![1.0, 0.0, cos as f32, sin as f32]).unwrap();
        (sets, feats)
    }

    fn linked(sets: &MaskGaussianSets, feats: &FeatureTable, t: Thresholds) -> bool {
        let kept = filter_masks(sets, 1).unwrap();
        let mut stats = ClusterStats::default();
        let g = build_graph(sets, feats, &kept, t.iou, t.feat, &mut stats).unwrap();
        assert_eq!(stats.candidate_pairs_scored, 1);
        g.has_edge(0, 1)
    }

    #[test]
    fn both_gates_must_pass() {
        let (sets, feats) = pair(7, 10, 0.8);
        assert!((mask_iou(&sets.sets[0], &sets.sets[1]) - 0.7).abs() < 1e-12);
        assert!(linked(&sets, &feats, Thresholds::LERF));

        let (sets, feats) = pair(5, 10, 0.99);
        assert!(!linked(&sets, &feats, Thresholds::LERF));
    }

    #[test]
    fn gates_are_inclusive() {
        let (sets, feats) = pair(6, 10, 1.0);
        assert!(linked(&sets, &feats, Thresholds { iou: 0.6, feat: 1.0, ..Thresholds::LERF }));
    }

    #[test]
    fn components_by_transitivity() {
        let graph = MaskGraph {
            nodes: vec![0, 1, 2, 3],
            edges: vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (3, 3)],
        };
        let p = connected_components(&graph);
        assert_eq!(p.members(), vec![vec![0, 1, 2], vec![3]]);

        let p = connected_components(&MaskGraph::self_loops(vec![2, 5, 9]));
        assert_eq!(p.cluster_of, vec![0, 1, 2]);
    }

    #[test]
    fn cluster_ids_follow_smallest_member() {
        let graph = MaskGraph {
            nodes: vec![0, 1, 2, 3],
            edges: vec![(0, 3), (1, 1), (2, 2)],
        };
        let p = connected_components(&graph);
        assert_eq!(p.cluster_of, vec![0, 1, 2, 0]);
    }

    #[test]
    fn aggregation_closed_forms() {
        let feats = FeatureTable::new(2, vec![3.0, 4.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = Partition {
            nodes: vec![0, 1, 2],
            cluster_of: vec![0, 1, 1],
            cluster_count: 2,
        };
        let mut stats = ClusterStats::default();
        let f = aggregate_features(&p, &feats, &mut stats);
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((f[0] - 0.6).abs() < 1e-7 && (f[1] - 0.8).abs() < 1e-7);
        assert!((f[2] - h).abs() < 1e-7 && (f[3] - h).abs() < 1e-7);
        assert_eq!(stats.masks_aggregated, 3);
        assert_eq!(stats.aggregation_passes, 1);
    }

    #[test]
    fn field_composition() {
        let sets = MaskGaussianSets::from_triples(
            3,
            8,
            (0..8).map(|k| (0, k, 1.0)).chain([(1, 7, 2.0)]).collect(),
        );
        let kept = filter_masks(&sets, 1).unwrap();
        let index = MaskIndexField::from_values(vec![0, 7, SENTINEL]);
        let p = Partition {
            nodes: (0..8).collect(),
            cluster_of: vec![0, 0, 1, 1, 1, 1, 1, 2],
            cluster_count: 3,
        };
        assert_eq!(build_cluster_field(&index, &kept, &p).unwrap(), vec![0, 2, SENTINEL]);
    }
}
