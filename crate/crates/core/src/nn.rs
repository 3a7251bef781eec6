//! Layers shared by the Stage-1 towers, the prompt projector, the router and
//! the surrogate language model. Parameters live in a [`ParamStore`]; layers
//! only hold ids.

use crate::error::Result;
use crate::numerics::{Bound, ParamId, ParamStore, Rng, Tape, Var};

/// Low-rank update on a [`Linear`]: adds `(alpha/rank)·x·Aᵀ·Bᵀ` with
/// `A: rank x in` and `B: out x rank`.
#[derive(Debug, Clone)]
pub struct LoraFactors {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraFactors {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Affine map `y = x·W + b` with `W: in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LoraFactors>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng));
        Linear {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            lora: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut y = tape.matmul(x, p[self.weight])?;
        if let Some(l) = &self.lora {
            let xa = tape.matmul_nt(x, p[l.a])?;
            let delta = tape.matmul_nt(xa, p[l.b])?;
            let delta = tape.scale(delta, l.scale());
            y = tape.add(y, delta)?;
        }
        if let Some(b) = self.bias {
            y = tape.add_row(y, p[b])?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))` with a
/// 4x GELU feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), d, d, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            up: Linear::new(store, &format!("{name}.ffn.up"), d, 4 * d, true, rng),
            down: Linear::new(store, &format!("{name}.ffn.down"), 4 * d, d, true, rng),
            heads,
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.up,
            &mut self.down,
        ]
    }

    /// `x` stacks `n_seq` sequences of length `seq` along rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        n_seq: usize,
        seq: usize,
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, h)?;
        let k = self.k.forward(tape, p, h)?;
        let v = self.v.forward(tape, p, h)?;
        let a = tape.attention(q, k, v, None, n_seq, seq, self.heads, causal)?;
        let a = self.o.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.up.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.down.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Stack of affine layers with GELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, p, x)?;
            if i < last {
                x = tape.gelu(x);
            }
        }
        Ok(x)
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}
