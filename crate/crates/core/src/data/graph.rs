use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{MarioError, Result};
use crate::modality::Modality;

/// Shape metadata shared by every node of a graph (`graph.json`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Text tokens per node.
    pub m: usize,
    /// Image patches per node.
    pub n: usize,
    /// Patch feature width.
    pub d_in: usize,
    pub vocab_txt: usize,
}

/// One node's attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub label: usize,
    pub tokens: Vec<u32>,
    pub raw_text: String,
    /// `n * d_in` values, patch-major.
    pub patches: Vec<f32>,
    pub regime: Option<Modality>,
}

/// Undirected, labeled graph whose nodes carry a token sequence, a raw text
/// string and a set of patch feature vectors. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalGraph {
    meta: GraphMeta,
    nodes: Vec<NodeData>,
    /// Canonical `(min, max)` pairs in insertion order.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    component: Vec<usize>,
}

impl MultimodalGraph {
    /// Validates and builds a graph. Errors describe the offending node or edge
    /// by index; loaders translate those into file lines.
    pub fn new(meta: GraphMeta, nodes: Vec<NodeData>, edges: Vec<(usize, usize)>) -> Result<Self> {
        if nodes.len() != meta.num_nodes {
            return Err(MarioError::Contract(format!(
                "{} nodes given, metadata says {}",
                nodes.len(),
                meta.num_nodes
            )));
        }
        for (i, node) in nodes.iter().enumerate() {
            validate_node(&meta, node)
                .map_err(|m| MarioError::Contract(format!("node {i}: {m}")))?;
        }
        let mut adjacency = vec![Vec::new(); meta.num_nodes];
        let mut seen = BTreeSet::new();
        let mut canon = Vec::with_capacity(edges.len());
        for (k, &(u, v)) in edges.iter().enumerate() {
            let (a, b) = check_edge(&meta, u, v, &seen)
                .map_err(|m| MarioError::Contract(format!("edge {k}: {m}")))?;
            seen.insert((a, b));
            canon.push((a, b));
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        let component = components(&adjacency);
        Ok(MultimodalGraph {
            meta,
            nodes,
            edges: canon,
            adjacency,
            component,
        })
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub fn num_nodes(&self) -> usize {
        self.meta.num_nodes
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn node(&self, v: usize) -> &NodeData {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[NodeData] {
        &self.nodes
    }

    pub fn label(&self, v: usize) -> usize {
        self.nodes[v].label
    }

    pub fn labels(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    pub fn regime(&self, v: usize) -> Option<Modality> {
        self.nodes[v].regime
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Sorted neighbor list.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    pub fn same_component(&self, u: usize, v: usize) -> bool {
        self.component[u] == self.component[v]
    }

    /// Nodes at shortest-path distance exactly 1 and exactly 2, each sorted.
    pub fn hops(&self, v: usize) -> (Vec<usize>, Vec<usize>) {
        self.hops_of_set(&[v])
    }

    /// Hop sets of a node set treated as one super-node: hop 1 is every
    /// neighbor outside the set, hop 2 every node two steps away.
    pub fn hops_of_set(&self, set: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let inside: BTreeSet<usize> = set.iter().copied().collect();
        let mut one = BTreeSet::new();
        for &v in set {
            for &u in &self.adjacency[v] {
                if !inside.contains(&u) {
                    one.insert(u);
                }
            }
        }
        let mut two = BTreeSet::new();
        for &u in &one {
            for &w in &self.adjacency[u] {
                if !inside.contains(&w) && !one.contains(&w) {
                    two.insert(w);
                }
            }
        }
        (one.into_iter().collect(), two.into_iter().collect())
    }

    /// The same nodes with a different edge set (used for link-prediction
    /// topology views).
    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        MultimodalGraph::new(self.meta, self.nodes.clone(), edges)
    }

    /// Patch `p` of node `v`.
    pub fn patch(&self, v: usize, p: usize) -> &[f32] {
        let d = self.meta.d_in;
        &self.nodes[v].patches[p * d..(p + 1) * d]
    }

    /// Disjoint union. Node ids and class ids of graph `k` are offset by the
    /// totals of graphs `0..k`, so label spaces never collide. Returns the
    /// source index of every node of the union.
    pub fn disjoint_union(graphs: &[&MultimodalGraph]) -> Result<(Self, Vec<usize>)> {
        let first = graphs
            .first()
            .ok_or_else(|| MarioError::Contract("union of no graphs".into()))?;
        let shape = (
            first.meta.m,
            first.meta.n,
            first.meta.d_in,
            first.meta.vocab_txt,
        );
        let mut meta = GraphMeta {
            num_nodes: 0,
            num_classes: 0,
            ..first.meta
        };
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        let mut source = Vec::new();
        for (k, g) in graphs.iter().enumerate() {
            if (g.meta.m, g.meta.n, g.meta.d_in, g.meta.vocab_txt) != shape {
                return Err(MarioError::Config(format!(
                    "graph {k} has different feature shapes"
                )));
            }
            let (off, cls) = (meta.num_nodes, meta.num_classes);
            nodes.extend(g.nodes.iter().map(|n| NodeData {
                label: n.label + cls,
                ..n.clone()
            }));
            edges.extend(g.edges.iter().map(|&(u, v)| (u + off, v + off)));
            source.extend(std::iter::repeat(k).take(g.num_nodes()));
            meta.num_nodes += g.num_nodes();
            meta.num_classes += g.num_classes();
        }
        Ok((MultimodalGraph::new(meta, nodes, edges)?, source))
    }
}

pub(crate) fn validate_node(meta: &GraphMeta, node: &NodeData) -> std::result::Result<(), String> {
    if node.label >= meta.num_classes {
        return Err(format!(
            "label {} out of range (num_classes {})",
            node.label, meta.num_classes
        ));
    }
    if node.tokens.len() != meta.m {
        return Err(format!(
            "{} tokens, expected m = {}",
            node.tokens.len(),
            meta.m
        ));
    }
    if let Some(t) = node.tokens.iter().find(|&&t| t as usize >= meta.vocab_txt) {
        return Err(format!(
            "token {t} outside vocabulary of {}",
            meta.vocab_txt
        ));
    }
    if node.patches.len() != meta.n * meta.d_in {
        return Err(format!(
            "{} patch values, expected n * d_in = {}",
            node.patches.len(),
            meta.n * meta.d_in
        ));
    }
    if node.patches.iter().any(|x| !x.is_finite()) {
        return Err("non-finite patch value".into());
    }
    Ok(())
}

pub(crate) fn check_edge(
    meta: &GraphMeta,
    u: usize,
    v: usize,
    seen: &BTreeSet<(usize, usize)>,
) -> std::result::Result<(usize, usize), String> {
    if u >= meta.num_nodes || v >= meta.num_nodes {
        return Err(format!(
            "endpoint out of range ({u}, {v}) for {} nodes",
            meta.num_nodes
        ));
    }
    if u == v {
        return Err(format!("self-loop on node {u}"));
    }
    let key = (u.min(v), u.max(v));
    if seen.contains(&key) {
        return Err(format!("duplicate edge ({u}, {v})"));
    }
    Ok(key)
}

fn components(adj: &[Vec<usize>]) -> Vec<usize> {
    let mut comp = vec![usize::MAX; adj.len()];
    let mut next = 0;
    for s in 0..adj.len() {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = next;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if comp[u] == usize::MAX {
                    comp[u] = next;
                    queue.push_back(u);
                }
            }
        }
        next += 1;
    }
    comp
}

/// Fraction of edges whose endpoints carry different labels; 0 without edges.
pub fn heterophily_ratio(graph: &MultimodalGraph) -> f64 {
    if graph.num_edges() == 0 {
        return 0.0;
    }
    let cross = graph
        .edges()
        .iter()
        .filter(|&&(u, v)| graph.label(u) != graph.label(v))
        .count();
    cross as f64 / graph.num_edges() as f64
}
