use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::stage2::Stage2Models;
use super::{Example, Prompter, Stage1, TaskData};
use crate::data::{MultimodalGraph, Role, Task};
use crate::error::{MarioError, Result};
use crate::gvlm::Embeddings;
use crate::modality::Modality;

/// Outcome of scoring one split. Equality ignores `wall_clock_ms`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub mode: Mode,
    pub split: Role,
    pub config_hash: String,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Accuracy per answer class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub examples: Vec<Example>,
    /// Correctness of each example, aligned with `examples`.
    pub correct_mask: Vec<bool>,
    /// Template each example was scored with.
    pub templates: Vec<Modality>,
    /// Examples per template, `txt, vis, mm` order.
    pub routing_histogram: [usize; 3],
    pub lm_calls: u64,
    /// Stage-2 objective per training epoch of the evaluated models.
    pub loss_trace: Vec<f64>,
    pub wall_clock_ms: u128,
}

impl PartialEq for EvalReport {
    fn eq(&self, other: &Self) -> bool {
        self.task == other.task
            && self.mode == other.mode
            && self.split == other.split
            && self.config_hash == other.config_hash
            && self.total == other.total
            && self.correct == other.correct
            && self.accuracy == other.accuracy
            && self.per_class == other.per_class
            && self.examples == other.examples
            && self.correct_mask == other.correct_mask
            && self.templates == other.templates
            && self.routing_histogram == other.routing_histogram
            && self.lm_calls == other.lm_calls
            && self.loss_trace == other.loss_trace
    }
}

type Tally = (usize, f64, Vec<Option<f64>>, [usize; 3]);

/// Correct count, accuracy, per-class accuracy and template histogram;
/// `classes[i]` is the gold answer class of example `i`.
pub(super) fn tally(
    classes: &[usize],
    num_classes: usize,
    correct_mask: &[bool],
    templates: &[Modality],
) -> Tally {
    let correct = correct_mask.iter().filter(|&&c| c).count();
    let accuracy = if classes.is_empty() {
        0.0
    } else {
        correct as f64 / classes.len() as f64
    };
    let mut hits = vec![0usize; num_classes];
    let mut seen = vec![0usize; num_classes];
    for (&c, &ok) in classes.iter().zip(correct_mask) {
        seen[c] += 1;
        hits[c] += ok as usize;
    }
    let per_class = hits
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
        .collect();
    let mut hist = [0; 3];
    for t in templates {
        hist[t.index()] += 1;
    }
    (correct, accuracy, per_class, hist)
}

/// Scores every example of `split`. `mario` routes each example to one
/// template and builds only that prompt; fixed modes bypass the router.
/// Either way each example costs exactly one LM scoring call.
pub fn evaluate(
    data: &TaskData,
    emb: &Embeddings,
    models: &Stage2Models,
    split: Role,
    mode: Mode,
) -> Result<EvalReport> {
    let start = Instant::now();
    if mode == Mode::Mario && models.router.is_none() {
        return Err(MarioError::Config(format!(
            "models trained in {} mode have no router",
            models.mode.as_str()
        )));
    }
    if data.task != models.task {
        return Err(MarioError::Config(format!(
            "models are for {:?}, data for {:?}",
            models.task, data.task
        )));
    }
    let prompter = Prompter::new(data, emb, &models.vocab, &models.config);
    let answers = prompter.answers()?;
    let examples = data.examples(split);
    let calls_before = models.lm.scoring_calls();
    let mut correct_mask = Vec::with_capacity(examples.len());
    let mut templates = Vec::with_capacity(examples.len());
    let mut classes = Vec::with_capacity(examples.len());
    for ex in &examples {
        let kind = match (mode.template(), &models.router) {
            (Some(k), _) => k,
            (None, Some(router)) => router.distribution(&prompter.router_input(ex))?.choice(),
            (None, None) => unreachable!("checked above"),
        };
        let prompt = prompter.prompts(ex, &[kind])?.swap_remove(0);
        let nodes: Vec<usize> = {
            let mut seen = Vec::new();
            for v in prompt.graph_token_sources() {
                if !seen.contains(&v) {
                    seen.push(v);
                }
            }
            seen
        };
        let inputs = models.projector.project_values(emb, &nodes)?;
        let predicted = models.lm.predict(&prompt, &inputs, &answers)?;
        let class = ex.class(&data.graph);
        correct_mask.push(predicted == answers[class]);
        templates.push(kind);
        classes.push(class);
    }
    let lm_calls = models.lm.scoring_calls() - calls_before;
    let (correct, accuracy, per_class, routing_histogram) =
        tally(&classes, answers.len(), &correct_mask, &templates);
    Ok(EvalReport {
        task: data.task,
        mode,
        split,
        config_hash: models.config_hash.clone(),
        total: examples.len(),
        correct,
        accuracy,
        per_class,
        examples,
        correct_mask,
        templates,
        routing_histogram,
        lm_calls,
        loss_trace: models.trace.epoch_losses.clone(),
        wall_clock_ms: start.elapsed().as_millis(),
    })
}

/// Zero-shot evaluation on an unseen graph: the frozen encoder embeds the
/// target, its test split is scored in the mode the models were trained in
/// (`mario` routes, fixed modes use their template). No parameter changes.
pub fn transfer_eval(
    stage1: &Stage1,
    models: &Stage2Models,
    target: &MultimodalGraph,
) -> Result<EvalReport> {
    let meta = target.meta();
    let tower = &stage1.model.config;
    if (meta.m, meta.n, meta.d_in, meta.vocab_txt)
        != (tower.m, tower.n, tower.d_in, tower.vocab_txt)
    {
        return Err(MarioError::Config(format!(
            "target graph shape (m {}, n {}, d_in {}, vocab {}) does not fit the encoder",
            meta.m, meta.n, meta.d_in, meta.vocab_txt
        )));
    }
    if models.task == Task::Nc && target.num_classes() > models.vocab.num_labels() {
        return Err(MarioError::Config(format!(
            "vocabulary mismatch: target has {} classes, models know {} label tokens",
            target.num_classes(),
            models.vocab.num_labels()
        )));
    }
    let data = TaskData::new(target, models.task, models.seed)?;
    let emb = stage1.embed(&data.graph)?;
    let before = (stage1.hash(), models.hash());
    let report = evaluate(&data, &emb, models, Role::Test, models.mode)?;
    if (stage1.hash(), models.hash()) != before {
        return Err(MarioError::Contract(
            "parameters changed during transfer evaluation".into(),
        ));
    }
    Ok(report)
}

/// Appends one JSON line to `path`, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&line)?;
    Ok(())
}
