use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::graph::MultimodalGraph;
use crate::error::{MarioError, Result};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nc,
    Lp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Train, Role::Val, Role::Test];

    fn index(self) -> usize {
        self as usize
    }
}

/// Labeled node pairs of one link-prediction role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSplit {
    pub train: PairSet,
    pub val: PairSet,
    pub test: PairSet,
    /// Edges left for message passing once every sampled positive is removed.
    pub topology: Vec<(usize, usize)>,
}

impl LinkSplit {
    pub fn role(&self, r: Role) -> &PairSet {
        match r {
            Role::Train => &self.train,
            Role::Val => &self.val,
            Role::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub roles: Vec<Role>,
    pub link: Option<LinkSplit>,
}

impl SplitAssignment {
    pub fn nodes(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&v| self.roles[v] == role)
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.roles {
            c[r.index()] += 1;
        }
        c
    }
}

const LP_SIZES: [usize; 3] = [3000, 2000, 1000];

/// Role sequence of length `total` hitting `targets` exactly, with every
/// prefix as close to proportional as possible (largest deficit first).
fn role_sequence(targets: [usize; 3], total: usize) -> Vec<Role> {
    let mut assigned = [0usize; 3];
    (1..=total)
        .map(|i| {
            let deficit =
                |r: usize| targets[r] as f64 * i as f64 / total as f64 - assigned[r] as f64;
            let mut best = 0;
            for r in 1..3 {
                if deficit(r) > deficit(best) + 1e-12 {
                    best = r;
                }
            }
            assigned[best] += 1;
            Role::ALL[best]
        })
        .collect()
}

fn node_roles(graph: &MultimodalGraph, rng: &mut Rng) -> Vec<Role> {
    let n = graph.num_nodes();
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    let seq = role_sequence([train, val, n - train - val], n);

    let mut by_class = vec![Vec::new(); graph.num_classes()];
    for v in 0..n {
        by_class[graph.label(v)].push(v);
    }
    let order: Vec<usize> = if by_class.iter().any(|c| !c.is_empty() && c.len() < 3) {
        log::warn!("a class has fewer than 3 members; falling back to an unstratified split");
        let mut all: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut all);
        all
    } else {
        by_class
            .into_iter()
            .flat_map(|mut c| {
                rng.shuffle(&mut c);
                c
            })
            .collect()
    };
    let mut roles = vec![Role::Train; n];
    for (v, r) in order.into_iter().zip(seq) {
        roles[v] = r;
    }
    roles
}

fn link_split(graph: &MultimodalGraph, rng: &mut Rng) -> Result<LinkSplit> {
    let e = graph.num_edges();
    let sizes = if e >= 2 * LP_SIZES.iter().sum::<usize>() {
        LP_SIZES
    } else {
        let total = e / 2;
        let train = total / 2;
        let val = total / 3;
        [train, val, total - train - val]
    };
    let needed: usize = sizes.iter().sum();
    let n = graph.num_nodes();
    let non_edges = n * n.saturating_sub(1) / 2 - e;
    if non_edges < needed {
        return Err(MarioError::Config(format!(
            "graph has {non_edges} non-edges, {needed} negatives requested"
        )));
    }

    let mut order: Vec<usize> = (0..e).collect();
    rng.shuffle(&mut order);
    let mut negatives = BTreeSet::new();
    let mut sets: Vec<PairSet> = Vec::with_capacity(3);
    let mut start = 0;
    for &size in &sizes {
        let positive: Vec<_> = order[start..start + size]
            .iter()
            .map(|&i| graph.edges()[i])
            .collect();
        start += size;
        let mut negative = Vec::with_capacity(size);
        while negative.len() < size {
            let (u, v) = (rng.below(n), rng.below(n));
            let key = (u.min(v), u.max(v));
            if u != v && !graph.has_edge(u, v) && negatives.insert(key) {
                negative.push(key);
            }
        }
        sets.push(PairSet { positive, negative });
    }
    let mut removed = vec![false; e];
    for &i in &order[..needed] {
        removed[i] = true;
    }
    let topology = graph
        .edges()
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(&p, _)| p)
        .collect();
    let test = sets.pop().expect("three roles");
    let val = sets.pop().expect("three roles");
    let train = sets.pop().expect("three roles");
    Ok(LinkSplit {
        train,
        val,
        test,
        topology,
    })
}

/// Node roles are a label-stratified 6:2:2 split in both tasks; link
/// prediction additionally samples positive and negative pairs per role.
pub fn make_splits(graph: &MultimodalGraph, task: Task, seed: u64) -> Result<SplitAssignment> {
    if graph.num_nodes() == 0 {
        return Err(MarioError::Contract("cannot split an empty graph".into()));
    }
    let mut rng = Rng::with_stream(seed, 10);
    let roles = node_roles(graph, &mut rng);
    let link = match task {
        Task::Nc => None,
        Task::Lp => Some(link_split(graph, &mut Rng::with_stream(seed, 11))?),
    };
    Ok(SplitAssignment { roles, link })
}
