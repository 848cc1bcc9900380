//! Directed host/flow multigraph and neighborhood-sampled edge mini-batches.
//!
//! Hosts become nodes with dense ids in first-seen order; every flow becomes
//! one directed edge carrying that flow's (scaled) feature vector. Parallel
//! flows between the same host pair stay distinct edges.

use crate::{Error, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Index of the flow in the caller's record set.
    pub flow_index: usize,
}

#[derive(Debug, Clone)]
pub struct FlowGraph {
    hosts: Vec<String>,
    edges: Vec<Edge>,
    features: Array2<f64>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl FlowGraph {
    /// Build from parallel lists of endpoints, per-flow features, and the
    /// flows' indices in the caller's record set.
    pub fn build(
        endpoints: &[(&str, &str)],
        features: Array2<f64>,
        flow_indices: &[usize],
    ) -> Result<FlowGraph> {
        if endpoints.len() != features.nrows() || endpoints.len() != flow_indices.len() {
            return Err(Error::dim("graph build", endpoints.len(), features.nrows()));
        }
        let mut host_ids: HashMap<String, usize> = HashMap::new();
        let mut hosts = Vec::new();
        let mut intern = |name: &str, hosts: &mut Vec<String>| -> Result<usize> {
            if name.is_empty() {
                return Err(Error::InvalidConfig("empty endpoint identifier".into()));
            }
            Ok(*host_ids.entry(name.to_string()).or_insert_with(|| {
                hosts.push(name.to_string());
                hosts.len() - 1
            }))
        };
        let mut edges = Vec::with_capacity(endpoints.len());
        for (i, (src, dst)) in endpoints.iter().enumerate() {
            let s = intern(src, &mut hosts)?;
            let d = intern(dst, &mut hosts)?;
            edges.push(Edge {
                src: s,
                dst: d,
                flow_index: flow_indices[i],
            });
        }
        let mut out_edges = vec![Vec::new(); hosts.len()];
        let mut in_edges = vec![Vec::new(); hosts.len()];
        for (e, edge) in edges.iter().enumerate() {
            out_edges[edge.src].push(e);
            in_edges[edge.dst].push(e);
        }
        Ok(FlowGraph {
            hosts,
            edges,
            features,
            out_edges,
            in_edges,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.hosts.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn host(&self, node: usize) -> &str {
        &self.hosts[node]
    }

    pub fn edge(&self, id: usize) -> &Edge {
        &self.edges[id]
    }

    pub fn edge_features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Distinct incident edge ids of a node. In- and out-edges by default; a
    /// self-loop is listed once.
    pub fn incident_edges(&self, node: usize, bidirectional: bool) -> Vec<usize> {
        let mut out = self.out_edges[node].clone();
        if bidirectional {
            for &e in &self.in_edges[node] {
                if self.edges[e].src != self.edges[e].dst {
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn max_degree(&self, bidirectional: bool) -> usize {
        (0..self.n_nodes())
            .map(|n| self.incident_edges(n, bidirectional).len())
            .max()
            .unwrap_or(0)
    }

    /// Partition all edge ids into mini-batches for one epoch. Every edge
    /// appears exactly once; the final batch may be short.
    pub fn batch_iterator(&self, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
        epoch_batches(self.n_edges(), batch_size, shuffle, seed)
    }

    /// Copy of the graph keeping only flows with `flow_index >= min_flow_index`.
    /// Supports time-window deployments where stale edges are evicted; node
    /// ids are reassigned in first-seen order of the retained edges.
    pub fn evict_flows_before(&self, min_flow_index: usize) -> Result<FlowGraph> {
        let keep: Vec<usize> = (0..self.n_edges())
            .filter(|&e| self.edges[e].flow_index >= min_flow_index)
            .collect();
        let endpoints: Vec<(&str, &str)> = keep
            .iter()
            .map(|&e| {
                (
                    self.hosts[self.edges[e].src].as_str(),
                    self.hosts[self.edges[e].dst].as_str(),
                )
            })
            .collect();
        let mut features = Array2::zeros((keep.len(), self.feature_dim()));
        for (i, &e) in keep.iter().enumerate() {
            features.row_mut(i).assign(&self.features.row(e));
        }
        let flow_indices: Vec<usize> = keep.iter().map(|&e| self.edges[e].flow_index).collect();
        FlowGraph::build(&endpoints, features, &flow_indices)
    }

    /// Debug dump: `<stem>.nodes.csv` (node id, host) and `<stem>.edges.csv`
    /// (edge id, endpoints, flow index, features).
    pub fn dump_csv(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mut nodes = std::fs::File::create(stem.with_extension("nodes.csv"))?;
        writeln!(nodes, "node_id,host")?;
        for (i, h) in self.hosts.iter().enumerate() {
            writeln!(nodes, "{i},{h}")?;
        }
        let mut edges = std::fs::File::create(stem.with_extension("edges.csv"))?;
        let feat_cols: Vec<String> = (0..self.feature_dim()).map(|j| format!("f{j}")).collect();
        writeln!(edges, "edge_id,src,dst,flow_index,{}", feat_cols.join(","))?;
        for (e, edge) in self.edges.iter().enumerate() {
            let feats: Vec<String> = self
                .features
                .row(e)
                .iter()
                .map(|v| v.to_string())
                .collect();
            writeln!(
                edges,
                "{e},{},{},{},{}",
                edge.src,
                edge.dst,
                edge.flow_index,
                feats.join(",")
            )?;
        }
        Ok(())
    }

    /// Sample the k-hop neighborhood of a set of target edges.
    ///
    /// Expansion is breadth-wise from the targets' endpoint nodes. Each node
    /// is expanded at most once per batch: its incident edges are sampled
    /// uniformly without replacement up to `fanout`. Newly reached nodes form
    /// the next hop's frontier. Deterministic for a fixed seed.
    pub fn sample_edge_batch(
        &self,
        target_edges: &[usize],
        hops: usize,
        fanout: usize,
        bidirectional: bool,
        seed: u64,
    ) -> Result<EdgeBatch> {
        if hops == 0 || fanout == 0 {
            return Err(Error::InvalidConfig("hops and fanout must be at least 1".into()));
        }
        for &e in target_edges {
            if e >= self.n_edges() {
                return Err(Error::InvalidEdgeId(e));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut node_local: HashMap<usize, usize> = HashMap::new();
        let mut nodes: Vec<usize> = Vec::new();
        let local = |g: usize, nodes: &mut Vec<usize>, node_local: &mut HashMap<usize, usize>| {
            *node_local.entry(g).or_insert_with(|| {
                nodes.push(g);
                nodes.len() - 1
            })
        };

        let mut edge_local: HashMap<usize, usize> = HashMap::new();
        let mut sub_edges: Vec<SubEdge> = Vec::new();

        let mut target_local = Vec::with_capacity(target_edges.len());
        let mut frontier: Vec<usize> = Vec::new();
        for &e in target_edges {
            let edge = self.edges[e];
            let s = local(edge.src, &mut nodes, &mut node_local);
            let d = local(edge.dst, &mut nodes, &mut node_local);
            for n in [s, d] {
                if !frontier.contains(&n) {
                    frontier.push(n);
                }
            }
            let idx = *edge_local.entry(e).or_insert_with(|| {
                sub_edges.push(SubEdge {
                    edge_id: e,
                    src: s,
                    dst: d,
                });
                sub_edges.len() - 1
            });
            target_local.push(idx);
        }

        let mut sampled_adjacency: Vec<Vec<AdjacentEdge>> = vec![Vec::new(); nodes.len()];
        let mut expanded = vec![false; nodes.len()];
        for _ in 0..hops {
            let mut next_frontier = Vec::new();
            for &v in &frontier {
                if expanded[v] {
                    continue;
                }
                expanded[v] = true;
                let mut incident = self.incident_edges(nodes[v], bidirectional);
                if incident.len() > fanout {
                    incident.partial_shuffle(&mut rng, fanout);
                    incident.truncate(fanout);
                }
                for e in incident {
                    let edge = self.edges[e];
                    let other_global = if edge.src == nodes[v] { edge.dst } else { edge.src };
                    let s = local(edge.src, &mut nodes, &mut node_local);
                    let d = local(edge.dst, &mut nodes, &mut node_local);
                    while sampled_adjacency.len() < nodes.len() {
                        sampled_adjacency.push(Vec::new());
                        expanded.push(false);
                        next_frontier.push(sampled_adjacency.len() - 1);
                    }
                    let other = node_local[&other_global];
                    let sub_idx = *edge_local.entry(e).or_insert_with(|| {
                        sub_edges.push(SubEdge {
                            edge_id: e,
                            src: s,
                            dst: d,
                        });
                        sub_edges.len() - 1
                    });
                    sampled_adjacency[v].push(AdjacentEdge {
                        sub_edge: sub_idx,
                        other,
                    });
                }
            }
            frontier = next_frontier;
        }

        let mut features = Array2::zeros((sub_edges.len(), self.feature_dim()));
        for (i, se) in sub_edges.iter().enumerate() {
            features.row_mut(i).assign(&self.features.row(se.edge_id));
        }

        Ok(EdgeBatch {
            target_edges: target_edges.to_vec(),
            target_local,
            nodes,
            sub_edges,
            sampled_adjacency,
            features,
        })
    }
}

/// Edge of a sampled subgraph, endpoints in subgraph-local node ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubEdge {
    pub edge_id: usize,
    pub src: usize,
    pub dst: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdjacentEdge {
    pub sub_edge: usize,
    /// Local id of the endpoint opposite the owning node (the node itself
    /// for self-loops).
    pub other: usize,
}

/// A mini-batch of target edges with their sampled neighborhood subgraph.
#[derive(Debug, Clone)]
pub struct EdgeBatch {
    pub target_edges: Vec<usize>,
    /// Position of each target edge within `sub_edges`.
    pub target_local: Vec<usize>,
    /// Global node ids; position is the subgraph-local id.
    pub nodes: Vec<usize>,
    pub sub_edges: Vec<SubEdge>,
    /// Per local node, the sampled incident edges (empty if never expanded).
    pub sampled_adjacency: Vec<Vec<AdjacentEdge>>,
    /// Feature rows aligned with `sub_edges`.
    pub features: Array2<f64>,
}

impl EdgeBatch {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Chunk `0..n_edges` into batches, optionally shuffling the order per epoch.
pub fn epoch_batches(n_edges: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut ids: Vec<usize> = (0..n_edges).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ids.shuffle(&mut rng);
    }
    ids.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_graph(pairs: &[(&str, &str)]) -> FlowGraph {
        let features = Array2::from_shape_fn((pairs.len(), 2), |(i, j)| (i * 2 + j) as f64);
        let idx: Vec<usize> = (0..pairs.len()).collect();
        FlowGraph::build(pairs, features, &idx).unwrap()
    }

    #[test]
    fn parallel_flows_stay_distinct_edges() {
        let g = toy_graph(&[("A", "B"), ("A", "B"), ("B", "C")]);
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.n_edges(), 3);
        assert_eq!(g.edge(0).src, g.edge(1).src);
        assert_eq!(g.edge(0).dst, g.edge(1).dst);
        // first-seen node order
        assert_eq!(g.host(0), "A");
        assert_eq!(g.host(1), "B");
        assert_eq!(g.host(2), "C");
    }

    #[test]
    fn empty_input_builds_empty_graph() {
        let g = FlowGraph::build(&[], Array2::zeros((0, 4)), &[]).unwrap();
        assert_eq!(g.n_nodes(), 0);
        assert_eq!(g.n_edges(), 0);
    }

    #[test]
    fn empty_endpoint_rejected() {
        let r = FlowGraph::build(&[("", "B")], Array2::zeros((1, 1)), &[0]);
        assert!(r.is_err());
    }

    #[test]
    fn fanout_caps_sampling_without_replacement() {
        // star: node A has 5 incident edges
        let g = toy_graph(&[("A", "B"), ("A", "C"), ("A", "D"), ("E", "A"), ("F", "A")]);
        let batch = g.sample_edge_batch(&[0], 1, 3, true, 9).unwrap();
        let a_local = batch.nodes.iter().position(|&n| n == 0).unwrap();
        let sampled = &batch.sampled_adjacency[a_local];
        assert_eq!(sampled.len(), 3);
        let mut ids: Vec<usize> = sampled.iter().map(|a| batch.sub_edges[a.sub_edge].edge_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 3, "sampling must be without replacement");
    }

    #[test]
    fn huge_fanout_keeps_full_neighborhood() {
        let g = toy_graph(&[
            ("A", "B"),
            ("A", "C"),
            ("A", "D"),
            ("E", "A"),
            ("F", "A"),
            ("A", "G"),
            ("A", "H"),
            ("I", "A"),
            ("J", "A"),
            ("A", "K"),
        ]);
        let batch = g.sample_edge_batch(&[0], 1, 32_768, true, 0).unwrap();
        let a_local = batch.nodes.iter().position(|&n| n == 0).unwrap();
        assert_eq!(batch.sampled_adjacency[a_local].len(), 10);
    }

    #[test]
    fn one_hop_subgraph_is_incident_to_target_endpoints() {
        let g = toy_graph(&[
            ("A", "B"),
            ("B", "C"),
            ("C", "D"),
            ("D", "E"),
            ("E", "A"),
            ("B", "D"),
        ]);
        let batch = g.sample_edge_batch(&[0], 1, 32_768, true, 1).unwrap();
        let (u, v) = (g.edge(0).src, g.edge(0).dst);
        for se in &batch.sub_edges {
            let e = g.edge(se.edge_id);
            assert!(
                e.src == u || e.dst == u || e.src == v || e.dst == v,
                "edge {:?} not incident to target endpoints",
                e
            );
        }
        assert!(batch.target_local.iter().all(|&t| t < batch.sub_edges.len()));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let g = toy_graph(&[
            ("A", "B"),
            ("A", "C"),
            ("A", "D"),
            ("A", "E"),
            ("A", "F"),
            ("B", "C"),
        ]);
        let a = g.sample_edge_batch(&[5], 2, 2, true, 77).unwrap();
        let b = g.sample_edge_batch(&[5], 2, 2, true, 77).unwrap();
        assert_eq!(a.sub_edges, b.sub_edges);
        assert_eq!(a.sampled_adjacency, b.sampled_adjacency);
    }

    #[test]
    fn invalid_edge_id_errors() {
        let g = toy_graph(&[("A", "B")]);
        assert!(matches!(
            g.sample_edge_batch(&[3], 1, 1, true, 0),
            Err(Error::InvalidEdgeId(3))
        ));
    }

    #[test]
    fn batch_sizes_partition_the_edge_set() {
        let sizes: Vec<usize> = epoch_batches(100, 32, false, 0).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let no_shuffle_a = epoch_batches(50, 8, false, 1);
        let no_shuffle_b = epoch_batches(50, 8, false, 2);
        assert_eq!(no_shuffle_a, no_shuffle_b, "shuffle off ignores the seed");
        let s1 = epoch_batches(50, 8, true, 3);
        let s2 = epoch_batches(50, 8, true, 3);
        assert_eq!(s1, s2, "shuffled order is reproducible per seed");
    }

    #[test]
    fn eviction_drops_stale_edges() {
        let g = toy_graph(&[("A", "B"), ("B", "C"), ("C", "A"), ("A", "C")]);
        let recent = g.evict_flows_before(2).unwrap();
        assert_eq!(recent.n_edges(), 2);
        assert_eq!(recent.edge(0).flow_index, 2);
        assert_eq!(recent.edge(1).flow_index, 3);
    }

    #[test]
    fn self_loop_counted_once() {
        let g = toy_graph(&[("A", "A"), ("A", "B")]);
        assert_eq!(g.incident_edges(0, true).len(), 2);
    }

    proptest! {
        /// Sampled subgraphs only contain edges of the parent graph, per-node
        /// sampled incidence respects the fanout, and every target edge is in
        /// the subgraph.
        #[test]
        fn sampled_subgraph_is_a_subgraph(
            n_edges in 1usize..40,
            fanout in 1usize..6,
            hops in 1usize..3,
            seed in 0u64..10,
        ) {
            let hosts = ["A", "B", "C", "D", "E", "F"];
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let pairs: Vec<(&str, &str)> = (0..n_edges)
                .map(|_| {
                    let s = hosts[rand::Rng::random_range(&mut rng, 0..hosts.len())];
                    let d = hosts[rand::Rng::random_range(&mut rng, 0..hosts.len())];
                    (s, d)
                })
                .collect();
            let g = toy_graph(&pairs);
            let targets: Vec<usize> = (0..n_edges).step_by(3).collect();
            let batch = g.sample_edge_batch(&targets, hops, fanout, true, seed).unwrap();

            for se in &batch.sub_edges {
                prop_assert!(se.edge_id < g.n_edges());
                prop_assert_eq!(batch.nodes[se.src], g.edge(se.edge_id).src);
                prop_assert_eq!(batch.nodes[se.dst], g.edge(se.edge_id).dst);
            }
            for adj in &batch.sampled_adjacency {
                prop_assert!(adj.len() <= fanout);
                let mut ids: Vec<usize> = adj.iter().map(|a| a.sub_edge).collect();
                ids.sort_unstable();
                let before = ids.len();
                ids.dedup();
                prop_assert_eq!(ids.len(), before, "duplicate sampled edge");
            }
            for (i, &t) in targets.iter().enumerate() {
                prop_assert_eq!(batch.sub_edges[batch.target_local[i]].edge_id, t);
            }
        }

        /// An epoch's batches cover every edge exactly once.
        #[test]
        fn epoch_covers_all_edges(n in 1usize..200, bs in 1usize..50, seed in 0u64..5) {
            let batches = epoch_batches(n, bs, true, seed);
            let mut seen = vec![false; n];
            for b in &batches {
                for &e in b {
                    prop_assert!(!seen[e], "edge {} twice", e);
                    seen[e] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }
}
