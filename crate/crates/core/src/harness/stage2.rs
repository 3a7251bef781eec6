use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig};
use super::eval::evaluate;
use super::{Example, Prompter, Stage1, TaskData};
use crate::data::{Role, Task};
use crate::error::{MarioError, Result};
use crate::gvlm::Embeddings;
use crate::lm::{SurrogateLm, Vocab};
use crate::modality::Modality;
use crate::numerics::{Adam, Gradients, Optimizer, ParamStore, Rng, Tape, Var};
use crate::prompt::{GraphTokens, Projector, PromptSequence};
use crate::router::{stage2_loss, Router};

/// Per-epoch record of a Stage-2 run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Trace {
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Epoch whose parameters were kept, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub steps: usize,
    /// LM scoring calls issued by training steps (validation excluded).
    pub train_lm_calls: u64,
}

/// Trained Stage-2 components. `router` is present only for `mario` mode.
#[derive(Debug, Clone)]
pub struct Stage2Models {
    pub task: Task,
    pub mode: Mode,
    pub seed: u64,
    pub vocab: Vocab,
    pub lm: SurrogateLm,
    pub projector: Projector,
    pub router: Option<Router>,
    pub config: RunConfig,
    pub config_hash: String,
    pub stage1_hash: String,
    pub trace: Stage2Trace,
}

#[derive(Serialize, Deserialize)]
struct Stage2Manifest {
    task: Task,
    mode: Mode,
    seed: u64,
    config: RunConfig,
    config_hash: String,
    stage1_hash: String,
    trace: Stage2Trace,
}

impl Stage2Models {
    /// Hash over every Stage-2 parameter.
    pub fn hash(&self) -> String {
        let mut h = format!("{}{}", self.lm.store.hash(), self.projector.store.hash());
        if let Some(r) = &self.router {
            h.push_str(&r.store.hash());
        }
        h
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.vocab.save(dir.join("vocab.json"))?;
        self.lm.save(dir)?;
        self.projector.save(dir)?;
        let router_file = dir.join("router.json");
        match &self.router {
            Some(r) => r.save(dir)?,
            None if router_file.exists() => {
                std::fs::remove_file(router_file)?;
                std::fs::remove_file(dir.join("router.ckpt"))?;
            }
            None => {}
        }
        let m = Stage2Manifest {
            task: self.task,
            mode: self.mode,
            seed: self.seed,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            stage1_hash: self.stage1_hash.clone(),
            trace: self.trace.clone(),
        };
        std::fs::write(dir.join("stage2.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join("stage2.json");
        if !manifest.exists() {
            return Err(MarioError::Contract(format!(
                "no stage 2 checkpoint in {}",
                dir.display()
            )));
        }
        let m: Stage2Manifest = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
        let router = if dir.join("router.json").exists() {
            Some(Router::load(dir)?)
        } else {
            None
        };
        Ok(Stage2Models {
            task: m.task,
            mode: m.mode,
            seed: m.seed,
            vocab: Vocab::load(dir.join("vocab.json"))?,
            lm: SurrogateLm::load(dir)?,
            projector: Projector::load(dir)?,
            router,
            config: m.config,
            config_hash: m.config_hash,
            stage1_hash: m.stage1_hash,
            trace: m.trace,
        })
    }

    fn snapshot(&self) -> (ParamStore, ParamStore, Option<ParamStore>) {
        (
            self.lm.store.clone(),
            self.projector.store.clone(),
            self.router.as_ref().map(|r| r.store.clone()),
        )
    }

    fn restore(&mut self, snap: (ParamStore, ParamStore, Option<ParamStore>)) {
        self.lm.store = snap.0;
        self.projector.store = snap.1;
        if let (Some(r), Some(s)) = (&mut self.router, snap.2) {
            r.store = s;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub models: Stage2Models,
    pub trace: Stage2Trace,
}

/// Optimizer state carried across [`train_step`] calls, one Adam per
/// component.
pub struct Stage2Optimizers {
    lm: Adam,
    projector: Adam,
    router: Adam,
}

impl Stage2Optimizers {
    pub fn new(lr: f64) -> Self {
        Stage2Optimizers {
            lm: Adam::with_lr(lr),
            projector: Adam::with_lr(lr),
            router: Adam::with_lr(lr),
        }
    }
}

fn kinds(mode: Mode) -> Vec<Modality> {
    match mode.template() {
        Some(k) => vec![k],
        None => Modality::ALL.to_vec(),
    }
}

/// Fresh, untrained Stage-2 components for a task graph.
fn init_models(
    data: &TaskData,
    stage1: &Stage1,
    emb: &Embeddings,
    config: &RunConfig,
) -> Result<Stage2Models> {
    let vocab = Vocab::new(data.graph.num_classes(), data.graph.meta().vocab_txt);
    let mut lm_cfg = config.lm.clone();
    lm_cfg.vocab_size = vocab.len();
    let mut lm = SurrogateLm::new(lm_cfg, config.seed)?;
    lm.apply_lora(&config.lora, config.seed)?;
    let projector = Projector::new(emb.d, lm.config.d_lm, config.seed);
    let router = match config.mode {
        Mode::Mario => Some(Router::new(emb.d, config.router.clone(), config.seed)),
        _ => None,
    };
    Ok(Stage2Models {
        task: data.task,
        mode: config.mode,
        seed: config.seed,
        vocab,
        lm,
        projector,
        router,
        // paths are where this run happened to write, not part of the model
        config: RunConfig {
            paths: Default::default(),
            ..config.clone()
        },
        config_hash: config.hash(),
        stage1_hash: stage1.hash(),
        trace: Stage2Trace::default(),
    })
}

/// One optimizer step over `batch`. In `mario` mode every example is scored
/// under all three templates and the router is trained through the posterior
/// over their losses; the LM side is weighted by that posterior, or equally
/// when `uniform` is set. Fixed modes score only their own template. Returns
/// the objective value.
pub fn train_step(
    models: &mut Stage2Models,
    prompter: &Prompter,
    opt: &mut Stage2Optimizers,
    batch: &[Example],
    config: &RunConfig,
    uniform: bool,
) -> Result<f64> {
    let kinds = kinds(models.mode);
    let mut prompts: Vec<Vec<PromptSequence>> = Vec::with_capacity(batch.len());
    let mut nodes: Vec<usize> = Vec::new();
    let mut seen = vec![false; prompter.data.graph.num_nodes()];
    for ex in batch {
        let ps = prompter.prompts(ex, &kinds)?;
        for p in &ps {
            for v in p.graph_token_sources() {
                if !seen[v] {
                    seen[v] = true;
                    nodes.push(v);
                }
            }
        }
        prompts.push(ps);
    }

    let mut tape = Tape::new();
    let lp = models.lm.store.bind(&mut tape);
    let pp = models.projector.store.bind(&mut tape);
    let tokens: Option<GraphTokens> = if nodes.is_empty() {
        None
    } else {
        Some(
            models
                .projector
                .project(&mut tape, &pp, prompter.emb, &nodes)?,
        )
    };
    let mut losses: Vec<Vec<Var>> = Vec::with_capacity(batch.len());
    for ps in &prompts {
        let row = ps
            .iter()
            .map(|p| models.lm.loss(&mut tape, &lp, p, tokens.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        losses.push(row);
    }

    let (objective, rp) = match &models.router {
        Some(router) => {
            let rp = router.store.bind(&mut tape);
            let z: Vec<Vec<f64>> = batch.iter().map(|ex| prompter.router_input(ex)).collect();
            let logits = router.forward(&mut tape, &rp, &z)?;
            let triples: Vec<[Var; 3]> = losses.iter().map(|l| [l[0], l[1], l[2]]).collect();
            if !uniform {
                (
                    stage2_loss(&mut tape, &triples, logits, config.router.lambda)?,
                    Some(rp),
                )
            } else {
                // Router term as usual; the LM side sees every template at 1/3.
                let frozen: Vec<[Var; 3]> = triples
                    .iter()
                    .map(|t| t.map(|v| tape.scalar_const(tape.scalar(v))))
                    .collect();
                let router_term = stage2_loss(&mut tape, &frozen, logits, config.router.lambda)?;
                let flat: Vec<Var> = losses.iter().flatten().copied().collect();
                let all = tape.concat_rows(&flat)?;
                let s = tape.sum(all);
                let lm_term = tape.scale(s, 1.0 / (3 * batch.len()) as f64);
                (tape.add(router_term, lm_term)?, Some(rp))
            }
        }
        None => {
            let flat: Vec<Var> = losses.iter().flatten().copied().collect();
            let all = tape.concat_rows(&flat)?;
            let s = tape.sum(all);
            (tape.scale(s, 1.0 / batch.len() as f64), None)
        }
    };
    let value = tape.scalar(objective);
    if !value.is_finite() {
        return Err(MarioError::Numerical(format!("stage 2 objective {value}")));
    }
    tape.backward(objective)?;

    let clip = config.stage2.grad_clip;
    let step = |opt: &mut Adam, store: &mut ParamStore, mut g: Gradients| {
        g.clip_norm(clip);
        opt.step(store, &g)
    };
    let g = lp.gradients(&tape, &models.lm.store);
    step(&mut opt.lm, &mut models.lm.store, g)?;
    let g = pp.gradients(&tape, &models.projector.store);
    step(&mut opt.projector, &mut models.projector.store, g)?;
    if let (Some(router), Some(rp)) = (&mut models.router, rp) {
        let g = rp.gradients(&tape, &router.store);
        step(&mut opt.router, &mut router.store, g)?;
    }
    Ok(value)
}

/// Training order of one epoch. With several sources, each contributes the
/// same number of examples (smaller sources are cycled).
pub(super) fn epoch_order(data: &TaskData, train: &[Example], rng: &mut Rng) -> Vec<Example> {
    let k = data.num_sources();
    if k <= 1 {
        let mut order = train.to_vec();
        rng.shuffle(&mut order);
        return order;
    }
    let mut per: Vec<Vec<Example>> = vec![Vec::new(); k];
    for ex in train {
        per[data.source_of(ex)].push(*ex);
    }
    let target = per.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(k * target);
    for list in &mut per {
        if list.is_empty() {
            continue;
        }
        rng.shuffle(list);
        order.extend(list.iter().cycle().take(target).copied());
    }
    rng.shuffle(&mut order);
    order
}

/// Trains adapters, projector and (in `mario` mode) router on top of a frozen
/// Stage-1 encoder, with early stopping on validation accuracy. The best
/// epoch's parameters are kept.
pub fn run_stage2(
    data: &TaskData,
    stage1: &Stage1,
    emb: &Embeddings,
    config: &RunConfig,
) -> Result<Stage2Output> {
    config.validate()?;
    if data.task != config.task {
        return Err(MarioError::Config(format!(
            "data is for {:?}, config for {:?}",
            data.task, config.task
        )));
    }
    let stage1_before = stage1.hash();
    let mut models = init_models(data, stage1, emb, config)?;
    let vocab = models.vocab.clone();
    let prompter = Prompter::new(data, emb, &vocab, config);
    let train = data.examples(Role::Train);
    if train.is_empty() {
        return Err(MarioError::Contract("no training examples".into()));
    }
    let mut opt = Stage2Optimizers::new(config.stage2.lr);
    let mut rng = Rng::with_stream(config.seed, 60);
    let mut trace = Stage2Trace::default();
    let mut best: Option<(f64, usize)> = None;
    let mut snapshot = None;
    let mut stale = 0;
    let bs = config.stage2.batch_size;

    for epoch in 0..config.stage2.epochs {
        let order = epoch_order(data, &train, &mut rng);
        let calls_before = models.lm.scoring_calls();
        let mut total = 0.0;
        let mut n = 0;
        for batch in order.chunks(bs) {
            let uniform = epoch < config.stage2.warmup_epochs;
            total += train_step(&mut models, &prompter, &mut opt, batch, config, uniform)?;
            n += 1;
        }
        trace.steps += n;
        trace.train_lm_calls += models.lm.scoring_calls() - calls_before;
        trace.epoch_losses.push(total / n as f64);
        let acc = evaluate(data, emb, &models, Role::Val, config.mode)?.accuracy;
        trace.val_accuracy.push(acc);
        log::info!(
            "stage 2 epoch {epoch}: loss {:.4}, val acc {acc:.4}",
            total / n as f64
        );
        if best.is_none_or(|(b, _)| acc > b) {
            best = Some((acc, epoch));
            snapshot = Some(models.snapshot());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.stage2.patience {
                break;
            }
        }
    }
    if let Some(s) = snapshot {
        models.restore(s);
    }
    trace.best_epoch = best.map(|(_, e)| e);
    if stage1.hash() != stage1_before {
        return Err(MarioError::Contract(
            "stage 1 parameters changed during stage 2".into(),
        ));
    }
    models.trace = trace.clone();
    Ok(Stage2Output { models, trace })
}
