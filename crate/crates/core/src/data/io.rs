//! Directory format: `graph.json`, `nodes.jsonl`, `edges.jsonl`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{check_edge, validate_node, GraphMeta, MultimodalGraph, NodeData};
use crate::error::{MarioError, Result};
use crate::modality::Modality;

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    label: usize,
    tokens: Vec<u32>,
    raw_text: String,
    patches: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regime: Option<Modality>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    u: usize,
    v: usize,
}

pub fn save_graph(graph: &MultimodalGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("graph.json"),
        serde_json::to_string_pretty(graph.meta())?,
    )?;

    let d = graph.meta().d_in;
    let mut w = BufWriter::new(fs::File::create(dir.join("nodes.jsonl"))?);
    for (id, node) in graph.nodes().iter().enumerate() {
        let rec = NodeRecord {
            id,
            label: node.label,
            tokens: node.tokens.clone(),
            raw_text: node.raw_text.clone(),
            patches: node.patches.chunks(d.max(1)).map(|c| c.to_vec()).collect(),
            regime: node.regime,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join("edges.jsonl"))?);
    for &(u, v) in graph.edges() {
        serde_json::to_writer(&mut w, &EdgeRecord { u, v })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Non-blank lines with their 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| MarioError::data(path, None, e.to_string()))
}

pub fn load_graph(dir: impl AsRef<Path>) -> Result<MultimodalGraph> {
    let dir = dir.as_ref();
    let meta_path = dir.join("graph.json");
    let meta: GraphMeta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| MarioError::data(&meta_path, Some(e.line()), e.to_string()))?;

    let nodes_path = dir.join("nodes.jsonl");
    let err =
        |line: usize, msg: String| MarioError::data(&nodes_path, (line > 0).then_some(line), msg);
    let mut slots: Vec<Option<NodeData>> = vec![None; meta.num_nodes];
    for (line, text) in lines(&read(&nodes_path)?) {
        let rec: NodeRecord = serde_json::from_str(text).map_err(|e| err(line, e.to_string()))?;
        if rec.id >= meta.num_nodes {
            return Err(err(
                line,
                format!(
                    "node id {} out of range (num_nodes {})",
                    rec.id, meta.num_nodes
                ),
            ));
        }
        if slots[rec.id].is_some() {
            return Err(err(line, format!("duplicate node id {}", rec.id)));
        }
        if let Some(p) = rec.patches.iter().find(|p| p.len() != meta.d_in) {
            return Err(err(
                line,
                format!("patch of width {}, expected d_in = {}", p.len(), meta.d_in),
            ));
        }
        let node = NodeData {
            label: rec.label,
            tokens: rec.tokens,
            raw_text: rec.raw_text,
            patches: rec.patches.concat(),
            regime: rec.regime,
        };
        validate_node(&meta, &node).map_err(|m| err(line, m))?;
        slots[rec.id] = Some(node);
    }
    let mut nodes = Vec::with_capacity(meta.num_nodes);
    for (id, slot) in slots.into_iter().enumerate() {
        nodes.push(slot.ok_or_else(|| err(0, format!("node {id} missing")))?);
    }

    let edges_path = dir.join("edges.jsonl");
    let mut seen = BTreeSet::new();
    let mut edges = Vec::new();
    for (line, text) in lines(&read(&edges_path)?) {
        let e: EdgeRecord = serde_json::from_str(text)
            .map_err(|e| MarioError::data(&edges_path, Some(line), e.to_string()))?;
        let key = check_edge(&meta, e.u, e.v, &seen)
            .map_err(|m| MarioError::data(&edges_path, Some(line), m))?;
        seen.insert(key);
        edges.push((e.u, e.v));
    }
    MultimodalGraph::new(meta, nodes, edges)
}
