//! Training loops, evaluation and reporting around the two-stage pipeline.

mod analysis;
mod config;
mod eval;
mod stage2;


use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use analysis::{
    alignment_report, routing_map, venn_analysis, AlignmentReport, RoutingMap, VennReport,
    VENN_REGIONS,
};
pub use config::{Mode, RunConfig, RunPaths, Stage2Config};
pub use eval::{append_jsonl, evaluate, transfer_eval, EvalReport};
pub use stage2::{
    run_stage2, train_step, Stage2Models, Stage2Optimizers, Stage2Output, Stage2Trace,
};

use crate::data::{make_splits, MultimodalGraph, Role, SplitAssignment, Task};
use crate::error::{MarioError, Result};
use crate::gvlm::{train_stage1, Embeddings, Gvlm};
use crate::lm::Vocab;
use crate::modality::Modality;
use crate::prompt::{PromptBank, PromptSequence};
use crate::router::router_input;

/// One supervised item: a node to classify or a candidate link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Example {
    Node(usize),
    Pair { a: usize, b: usize, linked: bool },
}

impl Example {
    pub fn anchors(&self) -> Vec<usize> {
        match *self {
            Example::Node(v) => vec![v],
            Example::Pair { a, b, .. } if a == b => vec![a],
            Example::Pair { a, b, .. } => vec![a, b],
        }
    }

    /// Class index of the gold answer: the label for nodes, 1/0 for
    /// linked/unlinked pairs.
    pub fn class(&self, graph: &MultimodalGraph) -> usize {
        match *self {
            Example::Node(v) => graph.label(v),
            Example::Pair { linked, .. } => linked as usize,
        }
    }
}

/// The graph a task actually sees plus its splits. For link prediction the
/// graph keeps only the training-topology edges. `sources` maps nodes to
/// their input graph when several graphs were mixed.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: Task,
    pub graph: MultimodalGraph,
    pub splits: SplitAssignment,
    pub sources: Option<Vec<usize>>,
}

impl TaskData {
    pub fn new(graph: &MultimodalGraph, task: Task, seed: u64) -> Result<Self> {
        let splits = make_splits(graph, task, seed)?;
        let graph = match &splits.link {
            Some(link) => graph.with_edges(link.topology.clone())?,
            None => graph.clone(),
        };
        Ok(TaskData {
            task,
            graph,
            splits,
            sources: None,
        })
    }

    /// Mix-training data: the graphs are laid side by side with disjoint node
    /// ids and label namespaces.
    pub fn mixed(graphs: &[&MultimodalGraph], task: Task, seed: u64) -> Result<Self> {
        let (union, sources) = MultimodalGraph::disjoint_union(graphs)?;
        let mut data = TaskData::new(&union, task, seed)?;
        data.sources = Some(sources);
        Ok(data)
    }

    pub fn examples(&self, role: Role) -> Vec<Example> {
        match &self.splits.link {
            None => self
                .splits
                .nodes(role)
                .into_iter()
                .map(Example::Node)
                .collect(),
            Some(link) => {
                let set = link.role(role);
                let pos = set
                    .positive
                    .iter()
                    .map(|&(a, b)| Example::Pair { a, b, linked: true });
                let neg = set.negative.iter().map(|&(a, b)| Example::Pair {
                    a,
                    b,
                    linked: false,
                });
                pos.chain(neg).collect()
            }
        }
    }

    /// Nodes whose labels may appear as exemplars: training nodes for node
    /// classification, everything for link prediction.
    pub fn allowed(&self) -> Option<Vec<bool>> {
        match self.task {
            Task::Nc => Some(
                self.splits
                    .roles
                    .iter()
                    .map(|&r| r == Role::Train)
                    .collect(),
            ),
            Task::Lp => None,
        }
    }

    pub fn num_answers(&self) -> usize {
        match self.task {
            Task::Nc => self.graph.num_classes(),
            Task::Lp => 2,
        }
    }

    pub fn source_of(&self, ex: &Example) -> usize {
        match &self.sources {
            None => 0,
            Some(s) => s[ex.anchors()[0]],
        }
    }

    pub fn num_sources(&self) -> usize {
        self.sources
            .as_ref()
            .map_or(1, |s| s.iter().max().map_or(1, |m| m + 1))
    }
}

/// The frozen Stage-1 encoder and how it embeds graphs.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub model: Gvlm,
    pub context_size: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Stage1Manifest {
    config_hash: String,
    param_hash: String,
    context_size: usize,
    epoch_losses: Vec<f64>,
}

impl Stage1 {
    pub fn hash(&self) -> String {
        self.model.store.hash()
    }

    pub fn embed(&self, graph: &MultimodalGraph) -> Result<Embeddings> {
        Embeddings::compute(&self.model, graph, self.context_size)
    }

    pub fn save(&self, dir: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.model.save(dir)?;
        let m = Stage1Manifest {
            config_hash: config_hash.to_string(),
            param_hash: self.hash(),
            context_size: self.context_size,
            epoch_losses: self.epoch_losses.clone(),
        };
        std::fs::write(dir.join("stage1.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join("stage1.json");
        if !manifest.exists() {
            return Err(MarioError::Contract(format!(
                "no stage 1 checkpoint in {}",
                dir.display()
            )));
        }
        let m: Stage1Manifest = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        let model = Gvlm::load(dir)?;
        if model.store.hash() != m.param_hash {
            return Err(MarioError::Checkpoint(format!(
                "stage 1 parameters in {} do not match their manifest",
                dir.display()
            )));
        }
        Ok(Stage1 {
            model,
            context_size: m.context_size,
            epoch_losses: m.epoch_losses,
        })
    }
}

/// Trains the encoder on the task graph's training nodes, seeded by the run
/// seed.
pub fn run_stage1(data: &TaskData, config: &RunConfig) -> Result<Stage1> {
    config.validate()?;
    let mut s1 = config.stage1.clone();
    s1.seed = config.seed;
    let out = train_stage1(&data.graph, &data.splits.nodes(Role::Train), &s1, None)?;
    Ok(Stage1 {
        model: out.model,
        context_size: s1.context_size,
        epoch_losses: out.epoch_losses,
    })
}

/// Prompt construction and answer sets for one task graph.
pub struct Prompter<'a> {
    pub data: &'a TaskData,
    pub emb: &'a Embeddings,
    pub vocab: &'a Vocab,
    bank: PromptBank<'a>,
}

impl<'a> Prompter<'a> {
    pub fn new(
        data: &'a TaskData,
        emb: &'a Embeddings,
        vocab: &'a Vocab,
        config: &RunConfig,
    ) -> Self {
        let bank = PromptBank {
            graph: &data.graph,
            emb,
            vocab,
            config: config.prompt.clone(),
            allowed: data.allowed(),
        };
        Prompter {
            data,
            emb,
            vocab,
            bank,
        }
    }

    pub fn prompts(&self, ex: &Example, kinds: &[Modality]) -> Result<Vec<PromptSequence>> {
        match *ex {
            Example::Node(v) => self.bank.node_prompts(v, kinds),
            Example::Pair { a, b, linked } => self.bank.pair_prompts(a, b, linked, kinds),
        }
    }

    pub fn router_input(&self, ex: &Example) -> Vec<f64> {
        router_input(&self.data.graph, self.emb, &ex.anchors())
    }

    /// Candidate answer tokens, indexed by answer class.
    pub fn answers(&self) -> Result<Vec<u32>> {
        match self.data.task {
            Task::Nc => (0..self.data.graph.num_classes())
                .map(|c| self.vocab.label(c))
                .collect(),
            Task::Lp => Ok(vec![self.vocab.no(), self.vocab.yes()]),
        }
    }
}

/// Everything a full run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stage1: Stage1,
    pub stage2: Stage2Output,
    pub report: EvalReport,
}

/// Stage 1, Stage 2 and test evaluation in `config.mode`. With
/// `config.paths.out` set, checkpoints land in `out/stage1`, `out/stage2` and
/// the report is appended to `out/reports.jsonl`.
pub fn run_pipeline(graph: &MultimodalGraph, config: &RunConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let data = TaskData::new(graph, config.task, config.seed)?;
    let stage1 = run_stage1(&data, config)?;
    let out_dir: Option<PathBuf> = config.paths.out.clone();
    if let Some(out) = &out_dir {
        stage1.save(out.join("stage1"), &config.hash())?;
    }
    let emb = stage1.embed(&data.graph)?;
    let stage2 = run_stage2(&data, &stage1, &emb, config)?;
    let report = evaluate(&data, &emb, &stage2.models, Role::Test, config.mode)?;
    if let Some(out) = &out_dir {
        stage2.models.save(out.join("stage2"))?;
        append_jsonl(out.join("reports.jsonl"), &report)?;
    }
    Ok(PipelineOutput {
        stage1,
        stage2,
        report,
    })
}
