use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{infonce_loss, Gvlm, TowerConfig};
use crate::data::MultimodalGraph;
use crate::error::{MarioError, Result};
use crate::numerics::{Adam, Optimizer, Rng, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub tower: TowerConfig,
    pub epochs: usize,
    pub lr: f64,
    /// Nodes per sampled mixer context.
    pub context_size: usize,
    /// Contexts encoded per step; their nodes form one contrastive batch.
    pub contexts_per_step: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            tower: TowerConfig::default(),
            epochs: 10,
            lr: 1e-3,
            context_size: 10,
            contexts_per_step: 4,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub model: Gvlm,
    /// Mean contrastive loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// An anchor plus up to `size - 1` distinct allowed nodes, drawn first from
/// its 1- and 2-hop neighborhood and then, if that runs out, from all allowed
/// nodes.
pub fn sample_context(
    graph: &MultimodalGraph,
    anchor: usize,
    allowed: &[usize],
    size: usize,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut ok = vec![false; graph.num_nodes()];
    for &v in allowed {
        ok[v] = true;
    }
    ok[anchor] = false;
    let (one, two) = graph.hops(anchor);
    let mut near: Vec<usize> = one.into_iter().chain(two).filter(|&v| ok[v]).collect();
    rng.shuffle(&mut near);
    let mut out = vec![anchor];
    for v in near {
        if out.len() >= size {
            break;
        }
        ok[v] = false;
        out.push(v);
    }
    let mut rest: Vec<usize> = allowed.iter().copied().filter(|&v| ok[v]).collect();
    rng.shuffle(&mut rest);
    out.extend(rest.into_iter().take(size.saturating_sub(out.len())));
    out
}

/// Deterministic context used when embedding `v` for downstream use: `v`,
/// then its 1-hop neighbors, then 2-hop, each ascending, cut at `size`.
pub fn inference_context(graph: &MultimodalGraph, v: usize, size: usize) -> Vec<usize> {
    let (one, two) = graph.hops(v);
    std::iter::once(v)
        .chain(one)
        .chain(two)
        .take(size.max(1))
        .collect()
}

/// Trains a fresh model. Checkpoints go to `checkpoint_dir` after every epoch;
/// a non-finite loss aborts with the last checkpoint left in place.
pub fn train_stage1(
    graph: &MultimodalGraph,
    train_nodes: &[usize],
    config: &Stage1Config,
    checkpoint_dir: Option<&Path>,
) -> Result<Stage1Output> {
    if train_nodes.is_empty() {
        return Err(MarioError::Contract("stage 1 needs training nodes".into()));
    }
    let tower = config.tower.clone().for_graph(graph.meta());
    let mut model = Gvlm::new(tower, config.seed)?;
    let mut opt = Adam::with_lr(config.lr);
    let mut rng = Rng::with_stream(config.seed, 21);
    let size = config.context_size.max(2);
    let per_step = config.contexts_per_step.max(1);
    let steps = train_nodes.len().div_ceil(size * per_step);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut anchors = train_nodes.to_vec();
        rng.shuffle(&mut anchors);
        let mut total = 0.0;
        for step in anchors.chunks(per_step).take(steps) {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let mut used = vec![false; graph.num_nodes()];
            let (mut texts, mut images) = (Vec::new(), Vec::new());
            for &anchor in step {
                if used[anchor] {
                    continue;
                }
                let free: Vec<usize> = train_nodes.iter().copied().filter(|&v| !used[v]).collect();
                let ctx = sample_context(graph, anchor, &free, size, &mut rng);
                for &v in &ctx {
                    used[v] = true;
                }
                let (t, i) = model.encode_on_tape(&mut tape, &p, graph, &ctx)?;
                texts.push(t);
                images.push(i);
            }
            let t = tape.concat_rows(&texts)?;
            let i = tape.concat_rows(&images)?;
            let log_tau = model.log_tau_var(&p);
            let loss = infonce_loss(&mut tape, t, i, log_tau)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(MarioError::Numerical(format!(
                    "stage 1 loss {value} in epoch {epoch}"
                )));
            }
            tape.backward(loss)?;
            let mut grads = p.gradients(&tape, &model.store);
            grads.clip_norm(config.grad_clip);
            opt.step(&mut model.store, &grads)?;
            total += value;
        }
        let mean = total / steps as f64;
        log::info!("stage 1 epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        if let Some(dir) = checkpoint_dir {
            model.save(dir)?;
        }
    }
    Ok(Stage1Output {
        model,
        epoch_losses,
    })
}

/// Final embeddings of every node, each computed in its inference context.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub d: usize,
    pub text: Vec<Vec<f32>>,
    pub image: Vec<Vec<f32>>,
}

impl Embeddings {
    pub fn compute(model: &Gvlm, graph: &MultimodalGraph, context_size: usize) -> Result<Self> {
        let mut text = Vec::with_capacity(graph.num_nodes());
        let mut image = Vec::with_capacity(graph.num_nodes());
        for v in 0..graph.num_nodes() {
            let e = model
                .encode(graph, &inference_context(graph, v, context_size))?
                .swap_remove(0);
            text.push(e.text);
            image.push(e.image);
        }
        Ok(Embeddings {
            d: model.config.d,
            text,
            image,
        })
    }

    pub fn len(&self) -> usize {
        self.text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// Rows in the given order, e.g. to embed a union of graphs.
    pub fn concat(parts: &[&Embeddings]) -> Embeddings {
        Embeddings {
            d: parts.first().map_or(0, |p| p.d),
            text: parts.iter().flat_map(|p| p.text.iter().cloned()).collect(),
            image: parts.iter().flat_map(|p| p.image.iter().cloned()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRecord {
    id: usize,
    text: Vec<f32>,
    image: Vec<f32>,
}

pub fn save_embeddings(emb: &Embeddings, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, (t, i)) in emb.text.iter().zip(&emb.image).enumerate() {
        serde_json::to_writer(
            &mut w,
            &EmbeddingRecord {
                id,
                text: t.clone(),
                image: i.clone(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let text = fs::read_to_string(&path)?;
    let mut out = Embeddings {
        d: 0,
        text: Vec::new(),
        image: Vec::new(),
    };
    for (k, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: EmbeddingRecord = serde_json::from_str(line)
            .map_err(|e| MarioError::data(&path, Some(k + 1), e.to_string()))?;
        if rec.id != out.text.len()
            || rec.text.len() != rec.image.len()
            || (out.d != 0 && rec.text.len() != out.d)
        {
            return Err(MarioError::data(
                &path,
                Some(k + 1),
                "ids must be consecutive and widths equal",
            ));
        }
        out.d = rec.text.len();
        out.text.push(rec.text);
        out.image.push(rec.image);
    }
    Ok(out)
}
