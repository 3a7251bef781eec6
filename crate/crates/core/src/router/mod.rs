//! Modality-adaptive prompt router: input features from fixed Stage-1
//! embeddings, an MLP over the three templates, the loss posterior used as
//! its teacher, and the combined Stage-2 objective.

#[cfg(test)]
mod tests;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MultimodalGraph;
use crate::error::{MarioError, Result};
use crate::gvlm::Embeddings;
use crate::modality::Modality;
use crate::nn::Mlp;
use crate::numerics::{
    argmax, kl_divergence, softmax, Bound, Checkpoint, ParamStore, Rng, Tape, Var,
};

/// Floor applied to router probabilities inside the KL term.
pub const LOG_PROB_FLOOR: f64 = -18.420_680_743_952_367; // ln 1e-8

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouterConfig {
    pub hidden: Vec<usize>,
    /// Weight of the KL term.
    pub lambda: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            hidden: vec![256, 128, 64],
            lambda: 0.01,
        }
    }
}

/// Router input for an anchor set (one node, or both link endpoints pooled):
/// `[h_text; h_image; φ1; φ2; ln max(deg, 1)]`, where `φh` averages the
/// text and image features over the hop-`h` neighborhood and `deg` is the
/// size of the 1-hop neighborhood.
pub fn router_input(graph: &MultimodalGraph, emb: &Embeddings, anchors: &[usize]) -> Vec<f64> {
    let d = emb.d;
    let mut z = vec![0.0; 4 * d + 1];
    for &v in anchors {
        for k in 0..d {
            z[k] += emb.text[v][k] as f64 / anchors.len() as f64;
            z[d + k] += emb.image[v][k] as f64 / anchors.len() as f64;
        }
    }
    let (one, two) = if anchors.len() == 1 {
        graph.hops(anchors[0])
    } else {
        graph.hops_of_set(anchors)
    };
    for (slot, hop) in [(2 * d, &one), (3 * d, &two)] {
        if hop.is_empty() {
            continue;
        }
        let w = 1.0 / (2.0 * hop.len() as f64);
        for &u in hop {
            for k in 0..d {
                z[slot + k] += w * (emb.text[u][k] as f64 + emb.image[u][k] as f64);
            }
        }
    }
    z[4 * d] = (one.len().max(1) as f64).ln();
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDistribution {
    pub logits: [f64; 3],
    pub probs: [f64; 3],
}

impl RoutingDistribution {
    pub fn from_logits(logits: [f64; 3]) -> Result<Self> {
        let p = softmax(&logits)?;
        Ok(RoutingDistribution {
            logits,
            probs: [p[0], p[1], p[2]],
        })
    }

    pub fn choice(&self) -> Modality {
        route_inference(&self.probs)
    }
}

/// Hard routing: the most probable template, ties resolved `txt < vis < mm`.
pub fn route_inference(p: &[f64; 3]) -> Modality {
    Modality::from_index(argmax(p)).expect("three templates")
}

/// `softmax(-losses)`: the template with the lowest loss gets the most mass.
pub fn posterior(losses: &[f64; 3]) -> Result<[f64; 3]> {
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(MarioError::Domain(format!(
            "template losses {losses:?} are not finite"
        )));
    }
    let q = softmax(&losses.map(|l| -l))?;
    Ok([q[0], q[1], q[2]])
}

/// Batch mean of `Σ_k q_k ℓ_k + λ·KL(q ‖ p)` with `q = posterior(ℓ)`.
pub fn stage2_loss_value(batch: &[([f64; 3], [f64; 3])], lambda: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(MarioError::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for (losses, p) in batch {
        let q = posterior(losses)?;
        let expected: f64 = q.iter().zip(losses).map(|(a, b)| a * b).sum();
        total += expected + lambda * kl_divergence(&q, p)?;
    }
    Ok(total / batch.len() as f64)
}

/// Stage-2 objective on the tape. `losses[b]` are the three template losses
/// of batch element `b` (1x1 vars), `logits` is `B x 3`. The posterior is
/// computed from loss values and enters as a constant, so the LM side is
/// trained through `Σ q ℓ` and the router only through the KL term.
pub fn stage2_loss(tape: &mut Tape, losses: &[[Var; 3]], logits: Var, lambda: f64) -> Result<Var> {
    let b = losses.len();
    if b == 0 || tape.shape(logits) != (b, 3) {
        return Err(MarioError::Contract(format!(
            "stage 2 loss: {b} loss triples, logits {:?}",
            tape.shape(logits)
        )));
    }
    let mut q = Vec::with_capacity(3 * b);
    for triple in losses {
        let vals = triple.map(|v| tape.scalar(v));
        q.extend(posterior(&vals)?);
    }
    let flat: Vec<Var> = losses.iter().flatten().copied().collect();
    let l = tape.concat_rows(&flat)?;
    let qc = tape.constant(3 * b, 1, q.clone())?;
    let weighted = tape.mul(l, qc)?;
    let expected = tape.sum(weighted);

    let logp = tape.log_softmax_rows(logits);
    let logp = tape.clamp_min(logp, LOG_PROB_FLOOR);
    let qm = tape.constant(b, 3, q.clone())?;
    let cross = tape.mul(logp, qm)?;
    let cross = tape.sum(cross);
    let neg_entropy: f64 = q.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
    let kl = tape.neg(cross);
    let kl = tape.add_scalar(kl, neg_entropy);
    let kl = tape.scale(kl, lambda);

    let total = tape.add(expected, kl)?;
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Four affine layers with GELU between them, output order `(txt, vis, mm)`.
#[derive(Debug, Clone)]
pub struct Router {
    pub config: RouterConfig,
    pub store: ParamStore,
    pub mlp: Mlp,
}

#[derive(Serialize, Deserialize)]
struct RouterManifest {
    input_dim: usize,
    config: RouterConfig,
}

impl Router {
    /// Router for Stage-1 width `d` (input `4d + 1`).
    pub fn new(d: usize, config: RouterConfig, seed: u64) -> Self {
        Router::with_input_dim(4 * d + 1, config, seed)
    }

    pub fn with_input_dim(input_dim: usize, config: RouterConfig, seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 50);
        let mut store = ParamStore::new();
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(config.hidden.iter().copied())
            .chain(std::iter::once(3))
            .collect();
        let mlp = Mlp::new(&mut store, "router", &dims, &mut rng);
        Router { config, store, mlp }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    /// Logits for a batch of inputs, `B x 3`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: &[Vec<f64>]) -> Result<Var> {
        let dim = self.input_dim();
        if let Some(bad) = z.iter().find(|r| r.len() != dim) {
            return Err(MarioError::Contract(format!(
                "router input of length {}, expected {dim}",
                bad.len()
            )));
        }
        let flat: Vec<f64> = z.iter().flatten().copied().collect();
        let x = tape.constant(z.len(), dim, flat)?;
        self.mlp.forward(tape, p, x)
    }

    pub fn distribution(&self, z: &[f64]) -> Result<RoutingDistribution> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let s = self.forward(&mut tape, &p, &[z.to_vec()])?;
        let v = tape.value(s);
        RoutingDistribution::from_logits([v[0], v[1], v[2]])
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let m = RouterManifest {
            input_dim: self.input_dim(),
            config: self.config.clone(),
        };
        fs::write(dir.join("router.json"), serde_json::to_string_pretty(&m)?)?;
        self.store.to_checkpoint().save(dir.join("router.ckpt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: RouterManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("router.json"))?)?;
        let mut r = Router::with_input_dim(m.input_dim, m.config, 0);
        r.store
            .load_checkpoint(&Checkpoint::load(dir.join("router.ckpt"))?)?;
        Ok(r)
    }
}

#[derive(Serialize)]
struct RouteRecord {
    node: usize,
    p: [f64; 3],
    choice: Modality,
}

/// One JSON line per routed node.
pub fn write_routes(path: impl AsRef<Path>, routes: &[(usize, RoutingDistribution)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (node, r) in routes {
        serde_json::to_writer(
            &mut w,
            &RouteRecord {
                node: *node,
                p: r.probs,
                choice: r.choice(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
