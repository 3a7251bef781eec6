//! Stage-2 front end: graph tokens through a shared projector, per-hop
//! neighbor selection, the three modality templates and prompt assembly.


use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MultimodalGraph, Task};
use crate::error::{MarioError, Result};
use crate::gvlm::Embeddings;
use crate::lm::{GraphInputs, Vocab};
use crate::modality::Modality;
use crate::nn::Mlp;
use crate::numerics::{Bound, Checkpoint, ParamStore, Rng, Tape, Var};

/// One prompt position: a vocabulary token or a node's projected text (`Gt`)
/// or image (`Gi`) feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Item {
    Tok(u32),
    Gt(usize),
    Gi(usize),
}

impl Item {
    pub fn source_node(self) -> Option<usize> {
        match self {
            Item::Tok(_) => None,
            Item::Gt(v) | Item::Gi(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub kind: Modality,
    pub items: Vec<Item>,
    pub target: Vec<u32>,
    /// Length of the instruction prefix of `items`.
    pub instruction_len: usize,
    /// Length of the raw-text segment that follows the instruction.
    pub raw_len: usize,
}

impl PromptSequence {
    /// Items plus target tokens.
    pub fn total_len(&self) -> usize {
        self.items.len() + self.target.len()
    }

    pub fn graph_token_sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().filter_map(|i| i.source_node())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    /// Neighbors kept per hop.
    pub k: usize,
    /// Maximum prompt length including the target.
    pub limit: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { k: 3, limit: 512 }
    }
}

/// Projected graph-token rows living on a tape, keyed by [`Item`].
#[derive(Debug, Clone)]
pub struct GraphTokens {
    rows: Var,
    index: HashMap<Item, usize>,
}

impl GraphTokens {
    pub fn new(rows: Var, keys: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.into_iter().enumerate() {
            if matches!(k, Item::Tok(_)) || index.insert(k, i).is_some() {
                return Err(MarioError::Contract(format!("bad graph-token key {k:?}")));
            }
        }
        Ok(GraphTokens { rows, index })
    }

    pub fn rows(&self) -> Var {
        self.rows
    }

    pub fn row(&self, item: &Item) -> Result<usize> {
        self.index
            .get(item)
            .copied()
            .ok_or_else(|| MarioError::Contract(format!("no projected row for {item:?}")))
    }
}

/// Two-layer GELU map from Stage-1 feature space to the LM embedding space,
/// shared by text and image features.
#[derive(Debug, Clone)]
pub struct Projector {
    pub store: ParamStore,
    pub mlp: Mlp,
}

#[derive(Serialize, Deserialize)]
struct ProjectorManifest {
    d: usize,
    d_lm: usize,
}

impl Projector {
    pub fn new(d: usize, d_lm: usize, seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 40);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "projector", &[d, d_lm, d_lm], &mut rng);
        Projector { store, mlp }
    }

    pub fn d(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn d_lm(&self) -> usize {
        self.mlp.out_dim()
    }

    fn feature_rows(&self, emb: &Embeddings, nodes: &[usize]) -> Result<(Vec<f64>, Vec<Item>)> {
        if emb.d != self.d() {
            return Err(MarioError::Contract(format!(
                "projector expects width {}, embeddings have {}",
                self.d(),
                emb.d
            )));
        }
        let mut flat = Vec::with_capacity(2 * nodes.len() * emb.d);
        let mut keys = Vec::with_capacity(2 * nodes.len());
        for &v in nodes {
            if v >= emb.len() {
                return Err(MarioError::Contract(format!("node {v} has no embedding")));
            }
            flat.extend(emb.text[v].iter().map(|&x| x as f64));
            keys.push(Item::Gt(v));
        }
        for &v in nodes {
            flat.extend(emb.image[v].iter().map(|&x| x as f64));
            keys.push(Item::Gi(v));
        }
        Ok((flat, keys))
    }

    /// Projects the (frozen) text and image features of distinct `nodes`.
    pub fn project(
        &self,
        tape: &mut Tape,
        p: &Bound,
        emb: &Embeddings,
        nodes: &[usize],
    ) -> Result<GraphTokens> {
        let (flat, keys) = self.feature_rows(emb, nodes)?;
        let x = tape.constant(keys.len(), emb.d, flat)?;
        let y = self.mlp.forward(tape, p, x)?;
        GraphTokens::new(y, keys)
    }

    pub fn project_values(&self, emb: &Embeddings, nodes: &[usize]) -> Result<GraphInputs> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (flat, keys) = self.feature_rows(emb, nodes)?;
        let x = tape.constant(keys.len(), emb.d, flat)?;
        let y = self.mlp.forward(&mut tape, &p, x)?;
        let rows = tape
            .value(y)
            .chunks(self.d_lm())
            .map(|r| r.to_vec())
            .collect();
        Ok(GraphInputs { rows, keys })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let m = ProjectorManifest {
            d: self.d(),
            d_lm: self.d_lm(),
        };
        fs::write(
            dir.join("projector.json"),
            serde_json::to_string_pretty(&m)?,
        )?;
        self.store.to_checkpoint().save(dir.join("projector.ckpt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: ProjectorManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("projector.json"))?)?;
        let mut p = Projector::new(m.d, m.d_lm, 0);
        p.store
            .load_checkpoint(&Checkpoint::load(dir.join("projector.ckpt"))?)?;
        Ok(p)
    }
}

/// `[h_text ‖ h_image]` of a node.
pub fn concat_embedding(emb: &Embeddings, v: usize) -> Vec<f64> {
    emb.text[v]
        .iter()
        .chain(&emb.image[v])
        .map(|&x| x as f64)
        .collect()
}

fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Top-`k` of `candidates` by cosine against `query`, descending, ties by
/// ascending id. With `allowed`, candidates outside the mask are skipped.
pub fn rank_candidates(
    emb: &Embeddings,
    query: &[f64],
    candidates: &[usize],
    k: usize,
    allowed: Option<&[bool]>,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = candidates
        .iter()
        .copied()
        .filter(|&u| allowed.is_none_or(|m| m[u]))
        .map(|u| (u, cosine_or_zero(query, &concat_embedding(emb, u))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborSelection {
    pub hop1: Vec<(usize, f64)>,
    pub hop2: Vec<(usize, f64)>,
}

impl NeighborSelection {
    /// Selected nodes, hop 1 first.
    pub fn nodes(&self) -> Vec<usize> {
        self.hop1
            .iter()
            .chain(&self.hop2)
            .map(|&(u, _)| u)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.hop1.len() + self.hop2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per hop, the `k` neighbors of `anchor` most similar to it. `allowed`
/// restricts candidates (e.g. to training nodes).
pub fn select_neighbors(
    graph: &MultimodalGraph,
    emb: &Embeddings,
    anchor: usize,
    k: usize,
    allowed: Option<&[bool]>,
) -> NeighborSelection {
    let (one, two) = graph.hops(anchor);
    let q = concat_embedding(emb, anchor);
    NeighborSelection {
        hop1: rank_candidates(emb, &q, &one, k, allowed),
        hop2: rank_candidates(emb, &q, &two, k, allowed),
    }
}

/// Two link endpoints pooled into one query.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoNode {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    /// Common neighbors ranked against the pooled embedding.
    pub candidates: Vec<(usize, f64)>,
}

impl PseudoNode {
    pub fn concat(&self) -> Vec<f64> {
        self.text.iter().chain(&self.image).copied().collect()
    }
}

pub fn lp_pseudo_node(graph: &MultimodalGraph, emb: &Embeddings, a: usize, b: usize) -> PseudoNode {
    let mean = |x: &[f32], y: &[f32]| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(&p, &q)| (p as f64 + q as f64) / 2.0)
            .collect()
    };
    let text = mean(&emb.text[a], &emb.text[b]);
    let image = mean(&emb.image[a], &emb.image[b]);
    let nb = graph.neighbors(b);
    let common: Vec<usize> = graph
        .neighbors(a)
        .iter()
        .copied()
        .filter(|u| nb.binary_search(u).is_ok() && *u != a && *u != b)
        .collect();
    let mut pn = PseudoNode {
        text,
        image,
        candidates: Vec::new(),
    };
    pn.candidates = rank_candidates(emb, &pn.concat(), &common, common.len(), None);
    pn
}

/// The graph-token part of one template: anchor tokens, then one entry per
/// selected neighbor (its tokens plus, for classification, its label token).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroup {
    pub kind: Modality,
    pub anchor: Vec<Item>,
    pub hop1: Vec<Vec<Item>>,
    pub hop2: Vec<Vec<Item>>,
}

fn node_items(kind: Modality, v: usize) -> Vec<Item> {
    match kind {
        Modality::Txt => vec![Item::Gt(v)],
        Modality::Vis => vec![Item::Gi(v)],
        Modality::Mm => vec![Item::Gt(v), Item::Gi(v)],
    }
}

impl TokenGroup {
    pub fn graph_token_count(&self) -> usize {
        self.anchor
            .iter()
            .chain(self.hop1.iter().flatten())
            .chain(self.hop2.iter().flatten())
            .filter(|i| i.source_node().is_some())
            .count()
    }

    /// Source nodes in serialization order (anchor first).
    pub fn node_order(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for i in self
            .anchor
            .iter()
            .chain(self.hop1.iter().flatten())
            .chain(self.hop2.iter().flatten())
        {
            if let Some(v) = i.source_node() {
                if out.last() != Some(&v) {
                    out.push(v);
                }
            }
        }
        out
    }
}

/// `S_txt`, `S_vis`, `S_mm` for `anchors` (one node, or both link endpoints).
/// `label_tokens`, when given, maps a node id to the label token attached to
/// each neighbor entry.
pub fn build_token_groups(
    anchors: &[usize],
    selection: &NeighborSelection,
    label_tokens: Option<&dyn Fn(usize) -> u32>,
) -> [TokenGroup; 3] {
    Modality::ALL.map(|kind| {
        let entry = |&(u, _): &(usize, f64)| {
            let mut e = node_items(kind, u);
            if let Some(f) = label_tokens {
                e.push(Item::Tok(f(u)));
            }
            e
        };
        TokenGroup {
            kind,
            anchor: anchors.iter().flat_map(|&v| node_items(kind, v)).collect(),
            hop1: selection.hop1.iter().map(entry).collect(),
            hop2: selection.hop2.iter().map(entry).collect(),
        }
    })
}

/// Task instruction in the surrogate vocabulary. Classification lists every
/// label token; both end with the raw-text marker.
pub fn instruction(task: Task, vocab: &Vocab, num_classes: usize) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    match task {
        Task::Nc => {
            out.push(vocab.special("classify"));
            out.push(vocab.special("categories"));
            for c in 0..num_classes {
                out.push(vocab.label(c)?);
            }
        }
        Task::Lp => {
            out.extend([vocab.special("link"), vocab.yes(), vocab.no()]);
        }
    }
    out.push(vocab.special("raw"));
    Ok(out)
}

/// Raw-text segment: the node's words, or for a link both endpoints' words
/// behind `node1`/`node2` markers.
pub fn raw_segment(graph: &MultimodalGraph, vocab: &Vocab, anchors: &[usize]) -> Vec<u32> {
    match anchors {
        [v] => vocab.encode(&graph.node(*v).raw_text),
        _ => {
            let mut out = Vec::new();
            for (k, &v) in anchors.iter().enumerate() {
                out.push(vocab.special(if k == 0 { "node1" } else { "node2" }));
                out.extend(vocab.encode(&graph.node(v).raw_text));
            }
            out
        }
    }
}

/// `I ⊕ r ⊕ S`, where `S` is the anchor tokens, `hop1` with its entries,
/// `hop2` with its entries and the `answer` cue. When the prompt plus target
/// exceeds `limit`, trailing neighbor entries are dropped first, then trailing
/// raw-text tokens.
pub fn assemble_prompt(
    instruction: &[u32],
    raw: &[u32],
    group: &TokenGroup,
    target: Vec<u32>,
    vocab: &Vocab,
    limit: usize,
) -> Result<PromptSequence> {
    let fixed = instruction.len() + group.anchor.len() + 3 + target.len();
    if fixed > limit {
        return Err(MarioError::Config(format!(
            "instruction, anchor tokens and target need {fixed} positions, limit is {limit}"
        )));
    }
    let mut room = limit - fixed;
    let raw_kept = raw.len().min(room);
    room -= raw_kept;
    let mut keep = [0usize; 2];
    'outer: for (h, entries) in [&group.hop1, &group.hop2].into_iter().enumerate() {
        for e in entries {
            if e.len() > room {
                break 'outer;
            }
            room -= e.len();
            keep[h] += 1;
        }
    }
    let mut items: Vec<Item> = instruction.iter().map(|&t| Item::Tok(t)).collect();
    items.extend(raw[..raw_kept].iter().map(|&t| Item::Tok(t)));
    items.extend(group.anchor.iter().copied());
    items.push(Item::Tok(vocab.special("hop1")));
    items.extend(group.hop1[..keep[0]].iter().flatten().copied());
    items.push(Item::Tok(vocab.special("hop2")));
    items.extend(group.hop2[..keep[1]].iter().flatten().copied());
    items.push(Item::Tok(vocab.special("answer")));
    Ok(PromptSequence {
        kind: group.kind,
        items,
        target,
        instruction_len: instruction.len(),
        raw_len: raw_kept,
    })
}

/// Builds the template prompts of nodes and links over fixed Stage-1
/// embeddings.
#[derive(Debug, Clone)]
pub struct PromptBank<'a> {
    pub graph: &'a MultimodalGraph,
    pub emb: &'a Embeddings,
    pub vocab: &'a Vocab,
    pub config: PromptConfig,
    /// Nodes usable as in-context exemplars; `None` allows all.
    pub allowed: Option<Vec<bool>>,
}

impl<'a> PromptBank<'a> {
    /// Prompts for classifying `v`, one per requested kind, target = its
    /// label token.
    pub fn node_prompts(&self, v: usize, kinds: &[Modality]) -> Result<Vec<PromptSequence>> {
        let mut sel = select_neighbors(
            self.graph,
            self.emb,
            v,
            self.config.k,
            self.allowed.as_deref(),
        );
        sel.hop1.retain(|&(u, _)| u != v);
        sel.hop2.retain(|&(u, _)| u != v);
        let labels = |u: usize| {
            self.vocab
                .label(self.graph.label(u))
                .expect("label checked")
        };
        let groups = build_token_groups(&[v], &sel, Some(&labels));
        let inst = instruction(Task::Nc, self.vocab, self.graph.num_classes())?;
        let raw = raw_segment(self.graph, self.vocab, &[v]);
        let target = vec![self.vocab.label(self.graph.label(v))?];
        kinds
            .iter()
            .map(|&k| {
                assemble_prompt(
                    &inst,
                    &raw,
                    &groups[k.index()],
                    target.clone(),
                    self.vocab,
                    self.config.limit,
                )
            })
            .collect()
    }

    /// Prompts asking whether `a` and `b` are linked, target `yes`/`no`.
    pub fn pair_prompts(
        &self,
        a: usize,
        b: usize,
        linked: bool,
        kinds: &[Modality],
    ) -> Result<Vec<PromptSequence>> {
        let pn = lp_pseudo_node(self.graph, self.emb, a, b);
        let mut hop1 = pn.candidates;
        if let Some(m) = &self.allowed {
            hop1.retain(|&(u, _)| m[u]);
        }
        hop1.truncate(self.config.k);
        let sel = NeighborSelection {
            hop1,
            hop2: Vec::new(),
        };
        let anchors: Vec<usize> = if a == b { vec![a] } else { vec![a, b] };
        let groups = build_token_groups(&anchors, &sel, None);
        let inst = instruction(Task::Lp, self.vocab, self.graph.num_classes())?;
        let raw = raw_segment(self.graph, self.vocab, &[a, b]);
        let target = vec![if linked {
            self.vocab.yes()
        } else {
            self.vocab.no()
        }];
        kinds
            .iter()
            .map(|&k| {
                assemble_prompt(
                    &inst,
                    &raw,
                    &groups[k.index()],
                    target.clone(),
                    self.vocab,
                    self.config.limit,
                )
            })
            .collect()
    }
}

#[derive(Serialize)]
struct PromptRecord<'a> {
    node: usize,
    kind: Modality,
    items: &'a [Item],
    target: &'a [u32],
}

/// Debug dump, one JSON line per prompt.
pub fn write_prompts<'a>(
    path: impl AsRef<Path>,
    prompts: impl IntoIterator<Item = (usize, &'a PromptSequence)>,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (node, p) in prompts {
        let rec = PromptRecord {
            node,
            kind: p.kind,
            items: &p.items,
            target: &p.target,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
