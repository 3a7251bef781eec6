//! Tiny causal decoder standing in for the instruction-tuned LLM: mixed
//! vocabulary/graph-token inputs, summed next-token NLL of the target, low-rank
//! adapters on frozen weights, restricted-argmax prediction.

pub mod vocab;


use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{MarioError, Result};
use crate::nn::{LayerNorm, LoraFactors, TransformerBlock};
use crate::numerics::{Bound, Checkpoint, ParamId, ParamStore, Rng, Tape, Var};
use crate::prompt::{GraphTokens, Item, PromptSequence};

pub use vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub vocab_size: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    /// Maximum input length; equal to the prompt truncation limit.
    pub context: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            vocab_size: 0,
            d_lm: 64,
            layers: 2,
            heads: 4,
            context: 512,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_lm == 0 || self.context == 0 {
            return Err(MarioError::Config(
                "surrogate LM needs vocab_size, d_lm and context > 0".into(),
            ));
        }
        if self.heads == 0 || self.d_lm % self.heads != 0 {
            return Err(MarioError::Config(format!(
                "d_lm {} not divisible by {} heads",
                self.d_lm, self.heads
            )));
        }
        Ok(())
    }
}

/// Adapted maps are named by their role inside a block: `q`, `k`, `v`, `o`
/// (attention) and `up`, `down` (feed-forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: ["q", "k", "v", "o"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

const LORA_TARGETS: [&str; 6] = ["q", "k", "v", "o", "up", "down"];

#[derive(Serialize, Deserialize)]
struct LmManifest {
    config: SurrogateConfig,
    lora: Option<LoraConfig>,
}

/// Pre-norm decoder with learned positions and an output head tied to the
/// token embedding table.
#[derive(Debug)]
pub struct SurrogateLm {
    pub config: SurrogateConfig,
    pub store: ParamStore,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    lora: Option<LoraConfig>,
    calls: AtomicU64,
}

impl Clone for SurrogateLm {
    fn clone(&self) -> Self {
        SurrogateLm {
            config: self.config.clone(),
            store: self.store.clone(),
            embed: self.embed,
            pos: self.pos,
            blocks: self.blocks.clone(),
            ln_f: self.ln_f.clone(),
            lora: self.lora.clone(),
            calls: AtomicU64::new(self.scoring_calls()),
        }
    }
}

impl SurrogateLm {
    pub fn new(config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, 30);
        let mut store = ParamStore::new();
        let d = config.d_lm;
        let embed = store.add_normal("lm.embed", &[config.vocab_size, d], 0.25, &mut rng);
        let pos = store.add_normal("lm.pos", &[config.context, d], 0.1, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| {
                TransformerBlock::new(
                    &mut store,
                    &format!("lm.block{l}"),
                    d,
                    config.heads,
                    &mut rng,
                )
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "lm.ln_f", d);
        Ok(SurrogateLm {
            config,
            store,
            embed,
            pos,
            blocks,
            ln_f,
            lora: None,
            calls: AtomicU64::new(0),
        })
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    /// Freezes every base weight and attaches adapters with `B = 0`.
    pub fn apply_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(MarioError::Config("adapters already attached".into()));
        }
        if cfg.rank == 0 {
            return Err(MarioError::Config("adapter rank must be positive".into()));
        }
        if let Some(bad) = cfg
            .targets
            .iter()
            .find(|t| !LORA_TARGETS.contains(&t.as_str()))
        {
            return Err(MarioError::Config(format!(
                "unknown adapter target '{bad}' (expected one of {LORA_TARGETS:?})"
            )));
        }
        self.store.freeze_all();
        let mut rng = Rng::with_stream(seed, 31);
        for block in &mut self.blocks {
            for (role, lin) in LORA_TARGETS.iter().zip(block.linears_mut()) {
                if !cfg.targets.iter().any(|t| t == role) {
                    continue;
                }
                let a = self.store.add_uniform(
                    format!("{}.lora_a", lin.name),
                    &[cfg.rank, lin.in_dim],
                    lin.in_dim,
                    &mut rng,
                );
                let b = self.store.add_const(
                    format!("{}.lora_b", lin.name),
                    &[lin.out_dim, cfg.rank],
                    0.0,
                );
                lin.lora = Some(LoraFactors {
                    a,
                    b,
                    rank: cfg.rank,
                    alpha: cfg.alpha,
                });
            }
        }
        self.lora = Some(cfg.clone());
        Ok(())
    }

    /// Copy with every adapter folded into its base weight, `W + (α/r)·(BA)ᵀ`
    /// in the `x·W` convention, and the adapter path switched off.
    pub fn merged(&self) -> SurrogateLm {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for lin in block.linears_mut() {
                let Some(l) = lin.lora.take() else { continue };
                let a = out.store.get(l.a).data().to_vec();
                let b = out.store.get(l.b).data().to_vec();
                let s = l.scale();
                let (din, dout, r) = (lin.in_dim, lin.out_dim, l.rank);
                let w = out.store.get_mut(lin.weight).data_mut();
                for i in 0..din {
                    for o in 0..dout {
                        let delta: f64 = (0..r)
                            .map(|k| a[k * din + i] as f64 * b[o * r + k] as f64)
                            .sum();
                        w[i * dout + o] = (w[i * dout + o] as f64 + s * delta) as f32;
                    }
                }
            }
        }
        out.lora = None;
        out
    }

    /// Number of `loss`/`predict` evaluations since creation or the last reset.
    pub fn scoring_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    /// Input matrix for `items` followed by `extra` vocabulary tokens.
    pub fn embed_items(
        &self,
        tape: &mut Tape,
        p: &Bound,
        items: &[Item],
        extra: &[u32],
        graph: Option<&GraphTokens>,
    ) -> Result<Var> {
        let len = items.len() + extra.len();
        if len == 0 {
            return Err(MarioError::Contract("empty LM input".into()));
        }
        if len > self.config.context {
            return Err(MarioError::Contract(format!(
                "input of {len} items exceeds the context of {}",
                self.config.context
            )));
        }
        let vocab = self.config.vocab_size;
        let check = |t: u32| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                Err(MarioError::Contract(format!(
                    "token {t} outside vocabulary of {vocab}"
                )))
            }
        };
        let mut index = Vec::with_capacity(len);
        for item in items {
            index.push(match *item {
                Item::Tok(t) => check(t)?,
                _ => {
                    let g = graph.ok_or_else(|| {
                        MarioError::Contract("graph token without projected rows".into())
                    })?;
                    vocab + g.row(item)?
                }
            });
        }
        for &t in extra {
            index.push(check(t)?);
        }
        let source = match graph {
            Some(g) => tape.concat_rows(&[p[self.embed], g.rows()])?,
            None => p[self.embed],
        };
        let x = tape.select_rows(source, &index)?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.select_rows(p[self.pos], &positions)?;
        tape.add(x, pos)
    }

    /// Final hidden states (after the last layer norm), one row per input.
    pub fn hidden(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let len = tape.shape(x).0;
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, p, h, 1, len, true)?;
        }
        self.ln_f.forward(tape, p, h)
    }

    pub fn head(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        tape.matmul_nt(h, p[self.embed])
    }

    /// Next-token logits at every position, `len x V`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        items: &[Item],
        graph: Option<&GraphTokens>,
    ) -> Result<Var> {
        let x = self.embed_items(tape, p, items, &[], graph)?;
        let h = self.hidden(tape, p, x)?;
        self.head(tape, p, h)
    }

    /// Summed negative log-likelihood of the prompt's target tokens, each
    /// conditioned on the prompt and the target tokens before it.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prompt: &PromptSequence,
        graph: Option<&GraphTokens>,
    ) -> Result<Var> {
        let target = &prompt.target;
        if target.is_empty() || prompt.items.is_empty() {
            return Err(MarioError::Contract(
                "empty prompt or supervision target".into(),
            ));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let x = self.embed_items(tape, p, &prompt.items, &target[..target.len() - 1], graph)?;
        let h = self.hidden(tape, p, x)?;
        let first = prompt.items.len() - 1;
        let rows: Vec<usize> = (first..first + target.len()).collect();
        let h = tape.select_rows(h, &rows)?;
        let logits = self.head(tape, p, h)?;
        let logp = tape.log_softmax_rows(logits);
        let v = self.config.vocab_size;
        let picks: Vec<usize> = target
            .iter()
            .enumerate()
            .map(|(i, &t)| i * v + t as usize)
            .collect();
        let picked = tape.gather(logp, &picks, target.len(), 1)?;
        let total = tape.sum(picked);
        Ok(tape.neg(total))
    }

    /// Loss value on a fresh tape.
    pub fn loss_value(&self, prompt: &PromptSequence, graph: &GraphInputs) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let g = graph.on_tape(&mut tape)?;
        let l = self.loss(&mut tape, &p, prompt, g.as_ref())?;
        Ok(tape.scalar(l))
    }

    /// Logits for the first generated token after the prompt.
    pub fn next_token_logits(
        &self,
        prompt: &PromptSequence,
        graph: &GraphInputs,
    ) -> Result<Vec<f64>> {
        if prompt.items.is_empty() {
            return Err(MarioError::Contract("empty prompt".into()));
        }
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let g = graph.on_tape(&mut tape)?;
        let x = self.embed_items(&mut tape, &p, &prompt.items, &[], g.as_ref())?;
        let h = self.hidden(&mut tape, &p, x)?;
        let last = tape.select_rows(h, &[prompt.items.len() - 1])?;
        let logits = self.head(&mut tape, &p, last)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Highest-scoring token among `answers` at the first generated position;
    /// ties go to the earlier answer.
    pub fn predict(
        &self,
        prompt: &PromptSequence,
        graph: &GraphInputs,
        answers: &[u32],
    ) -> Result<u32> {
        if answers.is_empty() {
            return Err(MarioError::Contract("empty answer set".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let logits = self.next_token_logits(prompt, graph)?;
        let mut best = answers[0];
        for &a in &answers[1..] {
            let la = *logits
                .get(a as usize)
                .ok_or_else(|| MarioError::Contract(format!("answer {a} outside vocabulary")))?;
            if la > logits[best as usize] {
                best = a;
            }
        }
        Ok(best)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = LmManifest {
            config: self.config.clone(),
            lora: self.lora.clone(),
        };
        std::fs::write(
            dir.join("lm.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        self.store.to_checkpoint().save(dir.join("lm.ckpt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: LmManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("lm.json"))?)?;
        let mut lm = SurrogateLm::new(manifest.config, 0)?;
        if let Some(cfg) = &manifest.lora {
            lm.apply_lora(cfg, 0)?;
        }
        lm.store
            .load_checkpoint(&Checkpoint::load(dir.join("lm.ckpt"))?)?;
        Ok(lm)
    }
}

/// Graph-token embeddings for a forward pass outside of training: either
/// none, or fixed rows keyed like [`GraphTokens`].
#[derive(Debug, Clone, Default)]
pub struct GraphInputs {
    pub rows: Vec<Vec<f64>>,
    pub keys: Vec<Item>,
}

impl GraphInputs {
    pub fn none() -> Self {
        GraphInputs::default()
    }

    pub fn on_tape(&self, tape: &mut Tape) -> Result<Option<GraphTokens>> {
        if self.rows.is_empty() {
            return Ok(None);
        }
        let cols = self.rows[0].len();
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        let rows = tape.constant(self.rows.len(), cols, flat)?;
        Ok(Some(GraphTokens::new(rows, self.keys.clone())?))
    }
}
