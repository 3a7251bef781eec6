//! Planted-preference graph generator.
//!
//! Every class owns a disjoint topic of text tokens and a prototype patch
//! vector. A node's regime decides which modality carries its class: `txt`
//! nodes get topic tokens and noise patches, `vis` nodes the reverse, `mm`
//! nodes both (each at `mm_strength`). Edges follow a two-level block model.

use serde::{Deserialize, Serialize};

use super::graph::{GraphMeta, MultimodalGraph, NodeData};
use crate::error::{MarioError, Result};
use crate::modality::Modality;
use crate::numerics::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Regime probabilities in `txt, vis, mm` order.
    pub pi: [f64; 3],
    pub p_in: f64,
    pub p_out: f64,
    /// Patch noise scale.
    pub sigma: f64,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub d_in: usize,
    pub vocab_txt: usize,
    /// Tokens per class topic.
    pub topic_size: usize,
    /// Probability that an informative token is drawn from the class topic.
    pub token_signal: f64,
    /// Signal multiplier for both modalities of `mm` nodes.
    pub mm_strength: f64,
    /// Words of filler raw text per node.
    pub raw_len: usize,
    /// Seed for topics and prototypes; defaults to `seed`. Two graphs with the
    /// same prototype seed share class semantics.
    pub prototype_seed: Option<u64>,
    /// Draw one regime per class instead of per node.
    pub regime_by_class: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_nodes: 600,
            num_classes: 4,
            pi: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            p_in: 0.05,
            p_out: 0.005,
            sigma: 1.0,
            seed: 0,
            m: 16,
            n: 4,
            d_in: 16,
            vocab_txt: 64,
            topic_size: 8,
            token_signal: 0.5,
            mm_strength: 1.0,
            raw_len: 4,
            prototype_seed: None,
            regime_by_class: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MarioError::Config(m));
        if self.pi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad(format!("regime probabilities {:?} outside [0, 1]", self.pi));
        }
        if (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!(
                "regime probabilities {:?} do not sum to 1",
                self.pi
            ));
        }
        for (name, p) in [
            ("p_in", self.p_in),
            ("p_out", self.p_out),
            ("token_signal", self.token_signal),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.num_nodes == 0 || self.num_classes == 0 {
            return bad("graph needs at least one node and one class".into());
        }
        if self.num_classes * self.topic_size > self.vocab_txt || self.topic_size == 0 {
            return bad(format!(
                "{} topics of {} tokens do not fit a vocabulary of {}",
                self.num_classes, self.topic_size, self.vocab_txt
            ));
        }
        if !(self.sigma >= 0.0) || !(self.mm_strength >= 0.0) {
            return bad("sigma and mm_strength must be nonnegative".into());
        }
        Ok(())
    }
}

/// Class-level parameters shared by every graph drawn with one prototype seed.
struct Prototypes {
    topics: Vec<Vec<u32>>,
    patches: Vec<Vec<f64>>,
}

fn prototypes(spec: &SyntheticSpec) -> Prototypes {
    let mut rng = Rng::with_stream(spec.prototype_seed.unwrap_or(spec.seed), 1);
    let mut vocab: Vec<u32> = (0..spec.vocab_txt as u32).collect();
    rng.shuffle(&mut vocab);
    let topics = vocab
        .chunks(spec.topic_size)
        .take(spec.num_classes)
        .map(|c| c.to_vec())
        .collect();
    let patches = (0..spec.num_classes)
        .map(|_| (0..spec.d_in).map(|_| rng.normal()).collect())
        .collect();
    Prototypes { topics, patches }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultimodalGraph> {
    spec.validate()?;
    let protos = prototypes(spec);
    let (nn, c) = (spec.num_nodes, spec.num_classes);

    let mut rng = Rng::with_stream(spec.seed, 2);
    let mut labels: Vec<usize> = (0..nn).map(|i| i % c).collect();
    rng.shuffle(&mut labels);
    let class_regime: Vec<usize> = (0..c).map(|_| rng.categorical(&spec.pi)).collect();
    let regimes: Vec<Modality> = labels
        .iter()
        .map(|&l| {
            let r = if spec.regime_by_class {
                class_regime[l]
            } else {
                rng.categorical(&spec.pi)
            };
            Modality::from_index(r).expect("three regimes")
        })
        .collect();

    let mut rng = Rng::with_stream(spec.seed, 3);
    let noise_std = (1.0 + spec.sigma * spec.sigma).sqrt();
    let nodes = labels
        .iter()
        .zip(&regimes)
        .map(|(&label, &regime)| {
            let strength = if regime == Modality::Mm {
                spec.mm_strength
            } else {
                1.0
            };
            let tokens = (0..spec.m)
                .map(|_| {
                    if regime.uses_text() && rng.bernoulli(spec.token_signal * strength.min(1.0)) {
                        protos.topics[label][rng.below(spec.topic_size)]
                    } else {
                        rng.below(spec.vocab_txt) as u32
                    }
                })
                .collect();
            let mut patches = Vec::with_capacity(spec.n * spec.d_in);
            for _ in 0..spec.n {
                for k in 0..spec.d_in {
                    let x = if regime.uses_image() {
                        strength * protos.patches[label][k] + spec.sigma * rng.normal()
                    } else {
                        noise_std * rng.normal()
                    };
                    patches.push(x as f32);
                }
            }
            let raw_text = (0..spec.raw_len)
                .map(|_| format!("w{}", rng.below(spec.vocab_txt)))
                .collect::<Vec<_>>()
                .join(" ");
            NodeData {
                label,
                tokens,
                raw_text,
                patches,
                regime: Some(regime),
            }
        })
        .collect();

    let mut rng = Rng::with_stream(spec.seed, 4);
    let mut edges = Vec::new();
    for u in 0..nn {
        for v in u + 1..nn {
            let p = if labels[u] == labels[v] {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.bernoulli(p) {
                edges.push((u, v));
            }
        }
    }

    let meta = GraphMeta {
        num_nodes: nn,
        num_classes: c,
        m: spec.m,
        n: spec.n,
        d_in: spec.d_in,
        vocab_txt: spec.vocab_txt,
    };
    MultimodalGraph::new(meta, nodes, edges)
}
