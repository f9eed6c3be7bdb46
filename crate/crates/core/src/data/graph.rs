use std::cmp::Ordering;
use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RoadNode {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

/// Directed edge between node indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadEdge {
    pub src: usize,
    pub dst: usize,
    pub distance_m: f64,
}

/// Road network. Nodes are kept sorted by id so that every per-road array in
/// the crate shares one ordering.
#[derive(Clone, Debug)]
pub struct RoadGraph {
    nodes: Vec<RoadNode>,
    edges: Vec<RoadEdge>,
    index: HashMap<String, usize>,
}

/// Numeric ids sort numerically, everything else lexicographically.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

impl RoadGraph {
    /// Builds a graph from nodes and `(src_id, dst_id, distance_m)` edges.
    pub fn new(mut nodes: Vec<RoadNode>, edges: Vec<(String, String, f64)>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::data("road graph has no nodes"));
        }
        nodes.sort_by(|a, b| compare_ids(&a.id, &b.id));
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if !(n.lat.is_finite() && n.lon.is_finite()) || n.lat.abs() > 90.0 || n.lon.abs() > 180.0 {
                return Err(Error::data(format!("road `{}` has invalid coordinates", n.id)));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicated road_id `{}`", n.id)));
            }
        }
        let mut out = Vec::with_capacity(edges.len());
        for (s, d, dist) in edges {
            let src = *index
                .get(&s)
                .ok_or_else(|| Error::data(format!("edge source `{s}` is not a known road")))?;
            let dst = *index
                .get(&d)
                .ok_or_else(|| Error::data(format!("edge target `{d}` is not a known road")))?;
            if !(dist > 0.0 && dist.is_finite()) {
                return Err(Error::data(format!("edge {s}->{d} has non-positive distance {dist}")));
            }
            out.push(RoadEdge {
                src,
                dst,
                distance_m: dist,
            });
        }
        Ok(RoadGraph {
            nodes,
            edges: out,
            index,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[RoadNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[RoadEdge] {
        &self.edges
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Undirected adjacency lists (sorted, deduplicated, no self loops).
    pub fn symmetric_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            if e.src != e.dst {
                adj[e.src].push(e.dst);
                adj[e.dst].push(e.src);
            }
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}
