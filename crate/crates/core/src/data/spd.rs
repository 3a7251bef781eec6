use std::collections::VecDeque;

use super::graph::MultimodalGraph;

/// Number of distance buckets: 0, 1, 2, 3 or more, unreachable.
pub const NUM_SPD_BUCKETS: usize = 5;
pub const UNREACHABLE_BUCKET: usize = 4;
const FAR_BUCKET: usize = 3;

pub fn bucket_of_distance(d: Option<usize>) -> usize {
    match d {
        None => UNREACHABLE_BUCKET,
        Some(d) => d.min(FAR_BUCKET),
    }
}

/// Pairwise distance buckets over a node set, row-major `len x len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpdBucketTable {
    pub nodes: Vec<usize>,
    pub buckets: Vec<usize>,
}

impl SpdBucketTable {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        self.buckets[i * self.nodes.len() + j]
    }
}

/// Distances in the full graph between members of `nodes`. Each source runs a
/// BFS cut off after depth 2; anything deeper in the same component is "3+".
pub fn spd_buckets(graph: &MultimodalGraph, nodes: &[usize]) -> SpdBucketTable {
    let s = nodes.len();
    let mut buckets = vec![0; s * s];
    let mut dist = vec![usize::MAX; graph.num_nodes()];
    let mut touched = Vec::new();
    for (i, &src) in nodes.iter().enumerate() {
        dist[src] = 0;
        touched.push(src);
        let mut queue = VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            if dist[v] >= FAR_BUCKET - 1 {
                continue;
            }
            for &u in graph.neighbors(v) {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    touched.push(u);
                    queue.push_back(u);
                }
            }
        }
        for (j, &dst) in nodes.iter().enumerate() {
            buckets[i * s + j] = if dist[dst] != usize::MAX {
                dist[dst]
            } else if graph.same_component(src, dst) {
                FAR_BUCKET
            } else {
                UNREACHABLE_BUCKET
            };
        }
        for v in touched.drain(..) {
            dist[v] = usize::MAX;
        }
    }
    SpdBucketTable {
        nodes: nodes.to_vec(),
        buckets,
    }
}
