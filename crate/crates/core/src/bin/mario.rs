use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mario::data::{generate_synthetic, load_graph, save_graph, Role, SyntheticSpec, Task};
use mario::harness::{
    alignment_report, append_jsonl, evaluate, routing_map, run_stage1, run_stage2, transfer_eval,
    venn_analysis, Mode, RunConfig, Stage1, Stage2Models, TaskData,
};
use mario::router::{router_input, write_routes};
use mario::{MarioError, Modality, Result};

#[derive(Parser)]
#[command(
    name = "mario",
    version,
    about = "Multimodal graph reasoning with modality-adaptive prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic graph from a JSON spec.
    Gen {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the graph-conditioned encoder.
    Stage1 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters, projector and router on a frozen encoder.
    Stage2 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split with trained models.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Append the report to this JSON-lines file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Zero-shot evaluation on an unseen graph.
    Transfer {
        #[arg(long)]
        stage1: PathBuf,
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Analyses of trained models.
    Report {
        #[command(subcommand)]
        kind: ReportKind,
    },
}

#[derive(Subcommand)]
enum ReportKind {
    /// Exclusive coverage of the three templates on a split.
    Venn {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        models: PathBuf,
    },
    /// Paired versus mismatched text-image cosine of the encoder.
    Align {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
    /// Router choices on the test split and their edge agreement.
    Routes {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Write per-node routing distributions here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Nc,
    Lp,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mario,
    FixedTxt,
    FixedVis,
    FixedMm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(t) = self.task {
            c.task = match t {
                TaskArg::Nc => Task::Nc,
                TaskArg::Lp => Task::Lp,
            };
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Mario => Mode::Mario,
                ModeArg::FixedTxt => Mode::FixedTxt,
                ModeArg::FixedVis => Mode::FixedVis,
                ModeArg::FixedMm => Mode::FixedMm,
            };
        }
        c.paths.graph = Some(self.graph.clone());
        let c = c.with_env_seed()?;
        c.validate()?;
        Ok(c)
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// Task data rebuilt with the seed and task the models were trained with.
fn task_data(graph: &Path, models: &Stage2Models) -> Result<TaskData> {
    TaskData::new(&load_graph(graph)?, models.task, models.seed)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, out } => {
            let mut spec = match spec {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => SyntheticSpec::default(),
            };
            if let Ok(s) = std::env::var("MARIO_SEED") {
                spec.seed = s.trim().parse().map_err(|_| {
                    MarioError::Config(format!("MARIO_SEED '{s}' is not an unsigned integer"))
                })?;
            }
            let g = generate_synthetic(&spec)?;
            save_graph(&g, &out)?;
            print(g.meta())
        }
        Command::Stage1 { run, out } => {
            let config = run.config()?;
            let data = TaskData::new(&load_graph(&run.graph)?, config.task, config.seed)?;
            let s1 = run_stage1(&data, &config)?;
            s1.save(&out, &config.hash())?;
            print(&serde_json::json!({ "param_hash": s1.hash(), "epoch_losses": s1.epoch_losses }))
        }
        Command::Stage2 { run, stage1, out } => {
            let config = run.config()?;
            let s1 = Stage1::load(&stage1)?;
            let data = TaskData::new(&load_graph(&run.graph)?, config.task, config.seed)?;
            let emb = s1.embed(&data.graph)?;
            let trained = run_stage2(&data, &s1, &emb, &config)?;
            trained.models.save(&out)?;
            print(&trained.trace)
        }
        Command::Eval {
            run,
            stage1,
            models,
            split,
            report,
        } => {
            let s1 = Stage1::load(&stage1)?;
            let models = Stage2Models::load(&models)?;
            let mode = run
                .mode
                .map_or(Ok(models.mode), |_| run.config().map(|c| c.mode))?;
            if run.task.is_some() && run.config()?.task != models.task {
                return Err(MarioError::Config(
                    "--task differs from the task the models were trained for".into(),
                ));
            }
            let data = task_data(&run.graph, &models)?;
            let emb = s1.embed(&data.graph)?;
            let role = match split {
                SplitArg::Train => Role::Train,
                SplitArg::Val => Role::Val,
                SplitArg::Test => Role::Test,
            };
            let rep = evaluate(&data, &emb, &models, role, mode)?;
            if let Some(path) = report {
                append_jsonl(path, &rep)?;
            }
            print(&serde_json::json!({
                "mode": rep.mode,
                "split": rep.split,
                "accuracy": rep.accuracy,
                "correct": rep.correct,
                "total": rep.total,
                "per_class": rep.per_class,
                "routing_histogram": rep.routing_histogram,
                "lm_calls": rep.lm_calls,
                "config_hash": rep.config_hash,
            }))
        }
        Command::Transfer {
            stage1,
            source,
            target,
            report,
        } => {
            let s1 = Stage1::load(&stage1)?;
            let models = Stage2Models::load(&source)?;
            let rep = transfer_eval(&s1, &models, &load_graph(&target)?)?;
            if let Some(path) = report {
                append_jsonl(path, &rep)?;
            }
            print(
                &serde_json::json!({ "accuracy": rep.accuracy, "total": rep.total, "lm_calls": rep.lm_calls }),
            )
        }
        Command::Report { kind } => match kind {
            ReportKind::Venn {
                run,
                stage1,
                models,
            } => {
                let s1 = Stage1::load(&stage1)?;
                let models = Stage2Models::load(&models)?;
                let data = task_data(&run.graph, &models)?;
                let emb = s1.embed(&data.graph)?;
                let masks = Modality::ALL.map(|k| {
                    evaluate(&data, &emb, &models, Role::Test, Mode::fixed(k))
                        .map(|r| r.correct_mask)
                });
                let [t, i, m] = masks;
                let (t, i, m) = (t?, i?, m?);
                print(&venn_analysis([&t, &i, &m])?)
            }
            ReportKind::Align { run, stage1, pairs } => {
                let config = run.config()?;
                let s1 = Stage1::load(&stage1)?;
                let data = TaskData::new(&load_graph(&run.graph)?, config.task, config.seed)?;
                let emb = s1.embed(&data.graph)?;
                print(&alignment_report(&emb, pairs, config.seed)?)
            }
            ReportKind::Routes {
                run,
                stage1,
                models,
                out,
            } => {
                let s1 = Stage1::load(&stage1)?;
                let models = Stage2Models::load(&models)?;
                let router = models
                    .router
                    .as_ref()
                    .ok_or_else(|| MarioError::Config("models have no router".into()))?;
                let data = task_data(&run.graph, &models)?;
                let emb = s1.embed(&data.graph)?;
                let mut routes = Vec::new();
                for ex in data.examples(Role::Test) {
                    let anchors = ex.anchors();
                    routes.push((
                        anchors[0],
                        router.distribution(&router_input(&data.graph, &emb, &anchors))?,
                    ));
                }
                if let Some(path) = out {
                    write_routes(path, &routes)?;
                }
                let choices: Vec<(usize, Modality)> =
                    routes.iter().map(|(v, r)| (*v, r.choice())).collect();
                let map = routing_map(&data.graph, &choices)?;
                print(
                    &serde_json::json!({ "edges": map.edges, "agreement": map.agreement, "routed": choices.len() }),
                )
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
