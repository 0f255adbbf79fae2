//! Road-network topology: undirected graph over road segments, compressed
//! sparse row adjacency, exact hop frontiers and induced k-hop subgraphs.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Number of point-of-interest categories tracked per segment
/// (school, shop, hospital, transit, other).
pub const NUM_POI_CATEGORIES: usize = 5;

/// Width of the per-segment static feature vector.
pub const SPATIAL_FEATURES: usize = 4 + NUM_POI_CATEGORIES;

/// Static attributes of one road segment: structural fields plus POI counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAttrs {
    pub road_type: u32,
    pub lanes: u32,
    pub length_m: f64,
    pub speed_limit_kmh: f64,
    pub poi_counts: [u32; NUM_POI_CATEGORIES],
}

impl SegmentAttrs {
    /// Raw (un-normalized) static feature vector for this segment.
    pub fn features(&self) -> [f64; SPATIAL_FEATURES] {
        let mut f = [0.0; SPATIAL_FEATURES];
        f[0] = f64::from(self.road_type);
        f[1] = f64::from(self.lanes);
        f[2] = self.length_m;
        f[3] = self.speed_limit_kmh;
        for (i, &c) in self.poi_counts.iter().enumerate() {
            f[4 + i] = f64::from(c);
        }
        f
    }
}

/// Undirected road network: segments as nodes, connections as edges.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    pub num_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub static_attrs: Vec<SegmentAttrs>,
}

impl RoadGraph {
    pub fn validate(&self) -> Result<()> {
        if self.static_attrs.len() != self.num_nodes {
            return Err(Error::GraphValidation(format!(
                "{} attribute records for {} nodes",
                self.static_attrs.len(),
                self.num_nodes
            )));
        }
        let mut seen = HashSet::new();
        for &(i, j) in &self.edges {
            if i >= self.num_nodes || j >= self.num_nodes {
                return Err(Error::GraphValidation(format!(
                    "edge ({i}, {j}) references a node outside 0..{}",
                    self.num_nodes
                )));
            }
            if i == j {
                return Err(Error::GraphValidation(format!("self-loop at node {i}")));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(Error::GraphValidation(format!(
                    "duplicate edge ({}, {})",
                    key.0, key.1
                )));
            }
        }
        Ok(())
    }
}

/// Symmetric adjacency in compressed sparse row form; neighbor lists are
/// strictly increasing so the layout is canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdjacency {
    pub row_offsets: Vec<usize>,
    pub neighbor_ids: Vec<usize>,
}

impl SparseAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.neighbor_ids.len() / 2
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbor_ids[self.row_offsets[node]..self.row_offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.row_offsets[node + 1] - self.row_offsets[node]
    }
}

/// Validate a road graph and build its canonical CSR adjacency.
pub fn build_adjacency(graph: &RoadGraph) -> Result<SparseAdjacency> {
    graph.validate()?;
    let mut lists: Vec<Vec<usize>> = vec![Vec::new(); graph.num_nodes];
    for &(i, j) in &graph.edges {
        lists[i].push(j);
        lists[j].push(i);
    }
    let mut row_offsets = Vec::with_capacity(graph.num_nodes + 1);
    let mut neighbor_ids = Vec::with_capacity(graph.edges.len() * 2);
    row_offsets.push(0);
    for mut l in lists {
        l.sort_unstable();
        neighbor_ids.extend_from_slice(&l);
        row_offsets.push(neighbor_ids.len());
    }
    Ok(SparseAdjacency {
        row_offsets,
        neighbor_ids,
    })
}

/// Nodes at shortest-path distance exactly `s` from `center`, sorted.
pub fn khop_frontier(adj: &SparseAdjacency, center: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 {
        return Err(Error::Precondition(
            "frontier hop count must be at least 1".into(),
        ));
    }
    if center >= adj.num_nodes() {
        return Err(Error::Range(format!(
            "center {center} >= {}",
            adj.num_nodes()
        )));
    }
    let dist = bfs_distances(adj, center, s);
    let mut out: Vec<usize> = dist
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d == Some(s))
        .map(|(n, _)| n)
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Induced subgraph on every node within `k` hops of `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    /// Original id of the center node.
    pub center: usize,
    /// Original node ids, sorted ascending; position = local id.
    pub nodes: Vec<usize>,
    /// Local id of the center.
    pub local_center: usize,
    /// Induced edges in local ids, each with lo < hi, sorted.
    pub local_edges: Vec<(usize, usize)>,
    /// Shortest-path distance from the center, indexed by local id.
    pub hop_of: Vec<usize>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Local id of an original node, if it is in the subgraph.
    pub fn local_of(&self, original: usize) -> Option<usize> {
        self.nodes.binary_search(&original).ok()
    }

    /// Local sorted neighbor lists over the induced edges.
    pub fn local_adjacency(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.local_edges {
            lists[a].push(b);
            lists[b].push(a);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }

    /// For each local node, the nodes at exact distance `s` (1..=max_s)
    /// measured inside the subgraph. `rings[i][s-1]` is sorted.
    pub fn local_rings(&self, max_s: usize) -> Vec<Vec<Vec<usize>>> {
        let adj = self.local_adjacency();
        let n = self.nodes.len();
        let mut rings = vec![vec![Vec::new(); max_s]; n];
        let mut dist: Vec<Option<usize>> = vec![None; n];
        let mut queue = std::collections::VecDeque::new();
        for start in 0..n {
            dist.iter_mut().for_each(|d| *d = None);
            dist[start] = Some(0);
            queue.clear();
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                let du = dist[u].unwrap();
                if du >= max_s {
                    continue;
                }
                for &v in &adj[u] {
                    if dist[v].is_none() {
                        dist[v] = Some(du + 1);
                        rings[start][du].push(v);
                        queue.push_back(v);
                    }
                }
            }
            for ring in &mut rings[start] {
                ring.sort_unstable();
            }
        }
        rings
    }
}

/// Extract the k-hop subgraph around `center`: frontier union plus induced
/// edges, with a stable original-to-local remapping.
pub fn khop_subgraph(adj: &SparseAdjacency, center: usize, k: usize) -> Result<Subgraph> {
    if k == 0 {
        return Err(Error::Precondition(
            "subgraph radius must be at least 1".into(),
        ));
    }
    if center >= adj.num_nodes() {
        return Err(Error::Range(format!(
            "center {center} >= {}",
            adj.num_nodes()
        )));
    }
    let dist = bfs_distances(adj, center, k);
    let mut nodes: Vec<usize> = dist
        .iter()
        .enumerate()
        .filter(|&(_, d)| d.is_some())
        .map(|(n, _)| n)
        .collect();
    nodes.sort_unstable();
    let local = |orig: usize| nodes.binary_search(&orig).unwrap();
    let hop_of: Vec<usize> = nodes.iter().map(|&n| dist[n].unwrap()).collect();
    let mut local_edges = Vec::new();
    for (li, &orig) in nodes.iter().enumerate() {
        for &nb in adj.neighbors(orig) {
            if nb > orig && dist[nb].is_some() {
                local_edges.push((li, local(nb)));
            }
        }
    }
    local_edges.sort_unstable();
    Ok(Subgraph {
        center,
        local_center: local(center),
        nodes,
        local_edges,
        hop_of,
    })
}

fn bfs_distances(adj: &SparseAdjacency, center: usize, max_depth: usize) -> Vec<Option<usize>> {
    let mut dist: Vec<Option<usize>> = vec![None; adj.num_nodes()];
    dist[center] = Some(0);
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(center);
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap();
        if du >= max_depth {
            continue;
        }
        for &v in adj.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

// ---- edge-list file format --------------------------------------------------

/// Parse the `graph.txt` format: a `num_nodes=<N>` header followed by one
/// `i j` pair per line.
pub fn parse_edge_list<R: BufRead>(reader: R, file: &str) -> Result<(usize, Vec<(usize, usize)>)> {
    let mut lines = reader.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| ingest_err(file, 1, "empty file"))?
        .1?;
    let num_nodes = header
        .trim()
        .strip_prefix("num_nodes=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| ingest_err(file, 1, "expected 'num_nodes=<N>' header"))?;
    let mut edges = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let mut parts = t.split_whitespace();
        let parse = |p: Option<&str>| -> Result<usize> {
            p.and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| ingest_err(file, idx + 1, "expected 'i j' edge line"))
        };
        let i = parse(parts.next())?;
        let j = parse(parts.next())?;
        if parts.next().is_some() {
            return Err(ingest_err(file, idx + 1, "trailing tokens on edge line"));
        }
        edges.push((i, j));
    }
    Ok((num_nodes, edges))
}

pub fn write_edge_list<W: Write>(
    mut w: W,
    num_nodes: usize,
    edges: &[(usize, usize)],
) -> Result<()> {
    writeln!(w, "num_nodes={num_nodes}")?;
    for &(i, j) in edges {
        writeln!(w, "{i} {j}")?;
    }
    Ok(())
}

fn ingest_err(file: &str, line: usize, msg: &str) -> Error {
    Error::Ingestion {
        file: file.to_string(),
        line,
        msg: msg.to_string(),
    }
}
