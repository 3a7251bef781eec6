//! Stage 1: text and image transformer towers whose CLS summaries are mixed
//! across a sampled node set by graph-biased attention, trained with a
//! symmetric contrastive loss.

mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{spd_buckets, GraphMeta, MultimodalGraph, SpdBucketTable, NUM_SPD_BUCKETS};
use crate::error::{MarioError, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::numerics::{Bound, Checkpoint, ParamId, ParamStore, Rng, Tape, Var};

pub use train::{
    inference_context, load_embeddings, sample_context, save_embeddings, train_stage1, Embeddings,
    Stage1Config, Stage1Output,
};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TowerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    /// Initial temperature; trained in log space.
    pub tau: f64,
    /// Number of leading rounds that mix CLS summaries across nodes.
    pub mixer_layers: usize,
    /// When false the mixer is the identity (structure-blind ablation).
    pub use_mixer: bool,
    pub m: usize,
    pub n: usize,
    pub d_in: usize,
    pub vocab_txt: usize,
}

impl Default for TowerConfig {
    fn default() -> Self {
        TowerConfig {
            layers: 2,
            heads: 4,
            d: 32,
            tau: 0.07,
            mixer_layers: 1,
            use_mixer: true,
            m: 16,
            n: 4,
            d_in: 16,
            vocab_txt: 64,
        }
    }
}

impl TowerConfig {
    /// Copies sequence shapes from a graph.
    pub fn for_graph(mut self, meta: &GraphMeta) -> Self {
        self.m = meta.m;
        self.n = meta.n;
        self.d_in = meta.d_in;
        self.vocab_txt = meta.vocab_txt;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(MarioError::Config(format!(
                "need layers >= 1 and d ({}) divisible by heads ({})",
                self.d, self.heads
            )));
        }
        if !(self.tau > 0.0) {
            return Err(MarioError::Config(format!(
                "temperature {} must be positive",
                self.tau
            )));
        }
        if self.mixer_layers > self.layers {
            return Err(MarioError::Config("more mixer rounds than layers".into()));
        }
        Ok(())
    }

    fn check_graph(&self, meta: &GraphMeta) -> Result<()> {
        if (meta.m, meta.n, meta.d_in, meta.vocab_txt)
            != (self.m, self.n, self.d_in, self.vocab_txt)
        {
            return Err(MarioError::Config(format!(
                "model built for m={} n={} d_in={} vocab={}, graph has m={} n={} d_in={} vocab={}",
                self.m,
                self.n,
                self.d_in,
                self.vocab_txt,
                meta.m,
                meta.n,
                meta.d_in,
                meta.vocab_txt
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Text,
    Image,
}

/// Query/key/value maps (`d x d`, head `h` owns columns `h*d/H..`) and the
/// `H x NUM_SPD_BUCKETS` distance bias of one mixer round of one tower.
#[derive(Debug, Clone)]
pub struct MixerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bias: ParamId,
}

impl MixerParams {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        MixerParams {
            wq: store.add_uniform(format!("{name}.wq"), &[d, d], d, rng),
            wk: store.add_uniform(format!("{name}.wk"), &[d, d], d, rng),
            wv: store.add_uniform(format!("{name}.wv"), &[d, d], d, rng),
            bias: store.add_const(format!("{name}.bias"), &[heads, NUM_SPD_BUCKETS], 0.0),
        }
    }
}

#[derive(Debug, Clone)]
struct TowerParams {
    /// Text: row 0 is CLS, row `t+1` token `t`. Image: the single CLS row.
    table: ParamId,
    pos: ParamId,
    proj: Option<Linear>,
    blocks: Vec<TransformerBlock>,
    mixers: Vec<MixerParams>,
}

/// The Stage-1 graph vision-language model.
#[derive(Debug, Clone)]
pub struct Gvlm {
    pub config: TowerConfig,
    pub store: ParamStore,
    text: TowerParams,
    image: TowerParams,
    log_tau: ParamId,
}

/// Final CLS pair of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedEmbedding {
    pub text: Vec<f32>,
    pub image: Vec<f32>,
}

impl Gvlm {
    pub fn new(config: TowerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, 20);
        let mut store = ParamStore::new();
        let d = config.d;
        let mut tower = |store: &mut ParamStore,
                         name: &str,
                         rows: usize,
                         len: usize,
                         proj_in: Option<usize>| {
            let table = store.add_uniform(format!("{name}.table"), &[rows, d], d, &mut rng);
            let pos = store.add_uniform(format!("{name}.pos"), &[len + 1, d], d, &mut rng);
            let proj =
                proj_in.map(|i| Linear::new(store, &format!("{name}.proj"), i, d, true, &mut rng));
            let blocks = (0..config.layers)
                .map(|l| {
                    TransformerBlock::new(
                        store,
                        &format!("{name}.block{l}"),
                        d,
                        config.heads,
                        &mut rng,
                    )
                })
                .collect();
            let mixers = (0..config.mixer_layers)
                .map(|l| {
                    MixerParams::new(
                        store,
                        &format!("{name}.mixer{l}"),
                        d,
                        config.heads,
                        &mut rng,
                    )
                })
                .collect();
            TowerParams {
                table,
                pos,
                proj,
                blocks,
                mixers,
            }
        };
        let text = tower(&mut store, "text", config.vocab_txt + 1, config.m, None);
        let image = tower(&mut store, "image", 1, config.n, Some(config.d_in));
        let log_tau = store.add_const("log_tau", &[1], config.tau.ln() as f32);
        Ok(Gvlm {
            config,
            store,
            text,
            image,
            log_tau,
        })
    }

    fn tower(&self, t: Tower) -> &TowerParams {
        match t {
            Tower::Text => &self.text,
            Tower::Image => &self.image,
        }
    }

    pub fn seq_len(&self, t: Tower) -> usize {
        1 + match t {
            Tower::Text => self.config.m,
            Tower::Image => self.config.n,
        }
    }

    pub fn tau(&self) -> f64 {
        (self.store.get(self.log_tau).data()[0] as f64).exp()
    }

    pub fn log_tau_var(&self, p: &Bound) -> Var {
        p[self.log_tau]
    }

    pub fn mixer(&self, t: Tower, round: usize) -> &MixerParams {
        &self.tower(t).mixers[round]
    }

    pub fn blocks(&self, t: Tower) -> &[TransformerBlock] {
        &self.tower(t).blocks
    }

    /// Layer-0 sequences of `nodes`, stacked: `(|nodes| * seq_len) x d` with
    /// every sequence's CLS at its first row.
    pub fn embed_layer0(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &MultimodalGraph,
        nodes: &[usize],
        t: Tower,
    ) -> Result<Var> {
        self.config.check_graph(graph.meta())?;
        let tw = self.tower(t);
        let len = self.seq_len(t);
        let pos_rows: Vec<usize> = (0..nodes.len()).flat_map(|_| 0..len).collect();
        let pos = tape.select_rows(p[tw.pos], &pos_rows)?;
        let content = match t {
            Tower::Text => {
                let mut rows = Vec::with_capacity(nodes.len() * len);
                for &v in nodes {
                    rows.push(0);
                    for &tok in &graph.node(v).tokens {
                        if tok as usize >= self.config.vocab_txt {
                            return Err(MarioError::Contract(format!(
                                "token {tok} of node {v} outside vocabulary"
                            )));
                        }
                        rows.push(tok as usize + 1);
                    }
                }
                tape.select_rows(p[tw.table], &rows)?
            }
            Tower::Image => {
                let (n, d_in) = (self.config.n, self.config.d_in);
                let mut feats = Vec::with_capacity(nodes.len() * n * d_in);
                for &v in nodes {
                    feats.extend(graph.node(v).patches.iter().map(|&x| x as f64));
                }
                let x = tape.constant(nodes.len() * n, d_in, feats)?;
                let proj = tw
                    .proj
                    .as_ref()
                    .expect("image tower projects patches")
                    .forward(tape, p, x)?;
                let both = tape.concat_rows(&[p[tw.table], proj])?;
                let rows: Vec<usize> = (0..nodes.len())
                    .flat_map(|k| std::iter::once(0).chain((0..n).map(move |j| 1 + k * n + j)))
                    .collect();
                tape.select_rows(both, &rows)?
            }
        };
        tape.add(content, pos)
    }

    /// Runs both towers over `nodes` (which share one mixer context) and
    /// returns the final text and image CLS matrices, `|nodes| x d` each.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &MultimodalGraph,
        nodes: &[usize],
    ) -> Result<(Var, Var)> {
        if nodes.is_empty() {
            return Err(MarioError::Contract(
                "encode needs at least one node".into(),
            ));
        }
        let spd = spd_buckets(graph, nodes);
        let text = self.run_tower(tape, p, graph, nodes, &spd, Tower::Text)?;
        let image = self.run_tower(tape, p, graph, nodes, &spd, Tower::Image)?;
        Ok((text, image))
    }

    fn run_tower(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graph: &MultimodalGraph,
        nodes: &[usize],
        spd: &SpdBucketTable,
        t: Tower,
    ) -> Result<Var> {
        let len = self.seq_len(t);
        let s = nodes.len();
        let tw = self.tower(t);
        let mut x = self.embed_layer0(tape, p, graph, nodes, t)?;
        for (l, block) in tw.blocks.iter().enumerate() {
            x = block.forward(tape, p, x, s, len, false)?;
            if self.config.use_mixer && l < tw.mixers.len() {
                let cls = gather_cls(tape, x, s, len)?;
                let mixed = mixer_attention(tape, p, &tw.mixers[l], cls, spd, self.config.heads)?;
                x = reinject(tape, x, len, mixed)?;
            }
        }
        gather_cls(tape, x, s, len)
    }

    /// Embeddings of `nodes` under one shared mixer context, no gradients.
    pub fn encode(
        &self,
        graph: &MultimodalGraph,
        nodes: &[usize],
    ) -> Result<Vec<AlignedEmbedding>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let (t, i) = self.encode_on_tape(&mut tape, &p, graph, nodes)?;
        let d = self.config.d;
        let out: Vec<AlignedEmbedding> = tape
            .value(t)
            .chunks(d)
            .zip(tape.value(i).chunks(d))
            .map(|(a, b)| AlignedEmbedding {
                text: a.iter().map(|&x| x as f32).collect(),
                image: b.iter().map(|&x| x as f32).collect(),
            })
            .collect();
        if out
            .iter()
            .any(|e| e.text.iter().chain(&e.image).any(|x| !x.is_finite()))
        {
            return Err(MarioError::Numerical("non-finite embedding".into()));
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("gvlm.json"),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        self.store.to_checkpoint().save(dir.join("gvlm.ckpt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: TowerConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("gvlm.json"))?)?;
        let mut model = Gvlm::new(config, 0)?;
        model
            .store
            .load_checkpoint(&Checkpoint::load(dir.join("gvlm.ckpt"))?)?;
        Ok(model)
    }
}

/// Rows `0, len, 2*len, ...` of stacked sequences.
pub fn gather_cls(tape: &mut Tape, states: Var, count: usize, len: usize) -> Result<Var> {
    let rows: Vec<usize> = (0..count).map(|k| k * len).collect();
    tape.select_rows(states, &rows)
}

/// Replaces every sequence's first row by the matching row of `mixed`.
pub fn reinject(tape: &mut Tape, states: Var, len: usize, mixed: Var) -> Result<Var> {
    let count = tape.shape(mixed).0;
    if tape.shape(states).0 != count * len {
        return Err(MarioError::Contract(format!(
            "reinject: {} rows is not {count} sequences of {len}",
            tape.shape(states).0
        )));
    }
    let rows: Vec<usize> = (0..count).map(|k| k * len).collect();
    tape.scatter_rows(states, &rows, mixed)
}

/// Multi-head attention among CLS rows with a learned scalar bias per head and
/// distance bucket.
pub fn mixer_attention(
    tape: &mut Tape,
    p: &Bound,
    mixer: &MixerParams,
    cls: Var,
    spd: &SpdBucketTable,
    heads: usize,
) -> Result<Var> {
    let s = tape.shape(cls).0;
    if spd.len() != s {
        return Err(MarioError::Contract(format!(
            "{s} CLS rows, distance table over {}",
            spd.len()
        )));
    }
    let q = tape.matmul(cls, p[mixer.wq])?;
    let k = tape.matmul(cls, p[mixer.wk])?;
    let v = tape.matmul(cls, p[mixer.wv])?;
    let mut index = Vec::with_capacity(heads * s * s);
    for h in 0..heads {
        for i in 0..s {
            for j in 0..s {
                index.push(h * NUM_SPD_BUCKETS + spd.get(i, j));
            }
        }
    }
    let bias = tape.gather(p[mixer.bias], &index, heads * s, s)?;
    tape.attention(q, k, v, Some(bias), 1, s, heads, false)
}

/// Symmetric contrastive loss over a batch of text/image rows (`B x d` each)
/// with cosine similarities divided by `exp(log_tau)`.
pub fn infonce_loss(tape: &mut Tape, text: Var, image: Var, log_tau: Var) -> Result<Var> {
    let (b, _) = tape.shape(text);
    if tape.shape(image) != tape.shape(text) || b == 0 {
        return Err(MarioError::Contract(
            "infonce: text and image batches must match and be nonempty".into(),
        ));
    }
    for (name, v) in [("text", text), ("image", image)] {
        let (_, d) = tape.shape(v);
        if tape
            .value(v)
            .chunks(d.max(1))
            .any(|r| r.iter().map(|x| x * x).sum::<f64>() == 0.0)
        {
            return Err(MarioError::Domain(format!("zero-norm {name} embedding")));
        }
    }
    let t = tape.l2_normalize_rows(text, NORM_EPS);
    let i = tape.l2_normalize_rows(image, NORM_EPS);
    let sim = tape.matmul_nt(t, i)?;
    let neg_log_tau = tape.neg(log_tau);
    let inv_tau = tape.exp(neg_log_tau);
    let logits = tape.scale_by(sim, inv_tau)?;
    let diag: Vec<usize> = (0..b).map(|k| k * b + k).collect();
    let rows = tape.log_softmax_rows(logits);
    let rows = tape.gather(rows, &diag, b, 1)?;
    let logits_t = tape.transpose(logits);
    let cols = tape.log_softmax_rows(logits_t);
    let cols = tape.gather(cols, &diag, b, 1)?;
    let both = tape.add(rows, cols)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Loss value for plain matrices (rows are embeddings) at temperature `tau`.
pub fn infonce_value(text: &[Vec<f64>], image: &[Vec<f64>], tau: f64) -> Result<f64> {
    let b = text.len();
    let d = text.first().map_or(0, |r| r.len());
    let mut tape = Tape::new();
    let t = tape.constant(b, d, text.concat())?;
    let i = tape.constant(
        image.len(),
        image.first().map_or(0, |r| r.len()),
        image.concat(),
    )?;
    let log_tau = tape.scalar_const(tau.ln());
    let l = infonce_loss(&mut tape, t, i, log_tau)?;
    Ok(tape.scalar(l))
}
