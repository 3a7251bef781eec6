use serde::{Deserialize, Serialize};

use crate::data::MultimodalGraph;
use crate::error::{MarioError, Result};
use crate::gvlm::Embeddings;
use crate::modality::Modality;
use crate::numerics::{cosine_f32, Rng};

/// Region names in report order: the three exclusive singles, the three
/// exclusive pairs, then the triple overlap.
pub const VENN_REGIONS: [&str; 7] = [
    "txt",
    "vis",
    "mm",
    "txt+vis",
    "txt+mm",
    "vis+mm",
    "txt+vis+mm",
];

/// Exclusive coverage of the nodes solved by at least one template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VennReport {
    /// Proportions in [`VENN_REGIONS`] order, normalized by `union`.
    pub regions: [f64; 7],
    pub counts: [usize; 7],
    pub union: usize,
    pub total: usize,
    /// No node is correct under any template; all regions are zero.
    pub empty: bool,
}

fn region(t: bool, i: bool, m: bool) -> Option<usize> {
    match (t, i, m) {
        (false, false, false) => None,
        (true, false, false) => Some(0),
        (false, true, false) => Some(1),
        (false, false, true) => Some(2),
        (true, true, false) => Some(3),
        (true, false, true) => Some(4),
        (false, true, true) => Some(5),
        (true, true, true) => Some(6),
    }
}

/// Splits the union of per-template correctness masks (`txt, vis, mm`) into
/// its seven exclusive regions.
pub fn venn_analysis(masks: [&[bool]; 3]) -> Result<VennReport> {
    let total = masks[0].len();
    if masks.iter().any(|m| m.len() != total) {
        return Err(MarioError::Contract(format!(
            "masks of lengths {}, {}, {}",
            masks[0].len(),
            masks[1].len(),
            masks[2].len()
        )));
    }
    let mut counts = [0usize; 7];
    for k in 0..total {
        if let Some(r) = region(masks[0][k], masks[1][k], masks[2][k]) {
            counts[r] += 1;
        }
    }
    let union: usize = counts.iter().sum();
    let regions = if union == 0 {
        [0.0; 7]
    } else {
        counts.map(|c| c as f64 / union as f64)
    };
    Ok(VennReport {
        regions,
        counts,
        union,
        total,
        empty: union == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub paired: f64,
    pub mismatched: f64,
    pub gap: f64,
    pub pairs: usize,
}

/// Mean text-image cosine of each node against the mean over `pairs` seeded
/// random cross-node pairs.
pub fn alignment_report(emb: &Embeddings, pairs: usize, seed: u64) -> Result<AlignmentReport> {
    let n = emb.len();
    if n < 2 {
        return Err(MarioError::Contract(format!(
            "alignment needs at least 2 nodes, got {n}"
        )));
    }
    let mut paired = 0.0;
    for v in 0..n {
        paired += cosine_f32(&emb.text[v], &emb.image[v])?;
    }
    paired /= n as f64;
    let mut rng = Rng::with_stream(seed, 70);
    let mut mismatched = 0.0;
    for _ in 0..pairs {
        let i = rng.below(n);
        let j = (i + 1 + rng.below(n - 1)) % n;
        mismatched += cosine_f32(&emb.text[i], &emb.image[j])?;
    }
    if pairs > 0 {
        mismatched /= pairs as f64;
    }
    Ok(AlignmentReport {
        paired,
        mismatched,
        gap: paired - mismatched,
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingMap {
    pub choices: Vec<(usize, Modality)>,
    /// Edges with both endpoints routed.
    pub edges: usize,
    /// Fraction of those edges whose endpoints chose the same template; 1 when
    /// there are none.
    pub agreement: f64,
}

pub fn routing_map(graph: &MultimodalGraph, choices: &[(usize, Modality)]) -> Result<RoutingMap> {
    let mut chosen: Vec<Option<Modality>> = vec![None; graph.num_nodes()];
    for &(v, m) in choices {
        if v >= graph.num_nodes() {
            return Err(MarioError::Contract(format!(
                "routed node {v} is not in the graph"
            )));
        }
        chosen[v] = Some(m);
    }
    let (mut edges, mut same) = (0usize, 0usize);
    for &(u, v) in graph.edges() {
        if let (Some(a), Some(b)) = (chosen[u], chosen[v]) {
            edges += 1;
            same += (a == b) as usize;
        }
    }
    Ok(RoutingMap {
        choices: choices.to_vec(),
        edges,
        agreement: if edges == 0 {
            1.0
        } else {
            same as f64 / edges as f64
        },
    })
}
