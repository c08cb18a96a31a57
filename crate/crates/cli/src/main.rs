use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use prunekit::checkpoint::{Checkpoint, CheckpointMeta};
use prunekit::compact::{compact_checked, CompactionReport};
use prunekit::config::RunConfig;
use prunekit::data::{make_clone_task, make_synthetic_corpus};
use prunekit::model::Model;
use prunekit::plan::{build_plan, GateSet};
use prunekit::records::{collect_stage_reports, render_table, to_jsonl, JsonlWriter, STAGES_FILE, STEPS_FILE};
use prunekit::train::{pretrain, run_pipeline, PipelineKind, PipelineSpec, StepRecord};
use prunekit::{par, Error};

/// Probe inputs used to measure the compaction residual.
const PROBES: usize = 10;

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Learnable structured pruning for a small speech model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on the synthetic multi-speaker corpus.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured number of pretraining steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clone a new speaker from a base checkpoint with one pruning pipeline.
    Clone {
        /// Base checkpoint written by `pretrain`.
        base: PathBuf,
        /// Defaults to the `config.toml` stored next to the base checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pipeline: Option<PipelineKind>,
        /// Seeds the clone task, gate noise and batch order.
        #[arg(long)]
        seed: Option<u64>,
        /// Caps every stage at this many steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Binarize a checkpoint's gates and physically remove pruned structure.
    Compact {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print one table over every stage record found under a directory.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match par::with_threads(par::threads_from_env(), || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 3 for configuration problems, 4 for bad or missing data, 5 for numeric
/// failures, 1 otherwise. Usage errors exit with 2 from the parser.
fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match e {
        Error::Config(_) | Error::ModelConfig(_) | Error::GateConfig(_) | Error::Pipeline(_) => 3,
        Error::Io { .. } | Error::Checkpoint(_) | Error::NoRecords(_) | Error::Plan(_) => 4,
        Error::NumericFailure { .. } | Error::NonFinite(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            seed,
            steps,
            out,
        } => cmd_pretrain(config.as_deref(), seed, steps, &out),
        Command::Clone {
            base,
            config,
            pipeline,
            seed,
            steps,
            out,
        } => cmd_clone(&base, config.as_deref(), pipeline, seed, steps, &out),
        Command::Compact { checkpoint, out } => cmd_compact(&checkpoint, &out),
        Command::Report { dir } => {
            let reports = collect_stage_reports(&dir)?;
            print!("{}", render_table(&reports));
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    // A missing or unreadable config file is a configuration error.
    RunConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()).into(),
        other => other.into(),
    })
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Streams step records to `steps.jsonl`, keeping the first write error.
struct StepLog {
    writer: JsonlWriter,
    err: Option<Error>,
}

impl StepLog {
    fn create(out: &Path) -> Result<Self> {
        Ok(Self {
            writer: JsonlWriter::create(out.join(STEPS_FILE))?,
            err: None,
        })
    }

    fn record(&mut self, rec: &StepRecord) {
        if self.err.is_none() {
            self.err = self.writer.write(rec).err();
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(e) = self.err {
            return Err(e.into());
        }
        Ok(self.writer.finish()?)
    }
}

fn cmd_pretrain(config: Option<&Path>, seed: Option<u64>, steps: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.training.pretrain_steps = s;
    }
    cfg.validate()?;
    create_dir(out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    let model_config = cfg.model.build()?;
    let plan = build_plan(&model_config, cfg.plan)?;
    let gates = GateSet::new(&plan, &cfg.gates)?;
    let corpus = make_synthetic_corpus(cfg.corpus_seed, cfg.data_shape(), &cfg.corpus)?;
    let init = Model::init(model_config, cfg.seed)?;

    let mut log = StepLog::create(out)?;
    let mut first = None;
    let mut last = None;
    let model = pretrain(init, plan, gates, &corpus, &cfg.training, cfg.seed, |r| {
        first.get_or_insert(r.l_tts);
        last = Some(r.l_tts);
        if let Some(e) = r.eval_loss {
            eprintln!("pretrain step {:>5}  train {:.5}  eval {:.5}", r.step, r.l_tts, e);
        }
        log.record(r);
    })?;
    log.finish()?;

    let ck = Checkpoint {
        model,
        gate_config: cfg.gates.clone(),
        plan_options: cfg.plan,
        gates: None,
        step: cfg.training.pretrain_steps as u64,
        meta: CheckpointMeta {
            kind: "pretrain".into(),
            seed: cfg.seed,
            pipeline: None,
            speaker: None,
        },
        compaction: None,
    };
    let path = out.join("base.ckpt");
    ck.save(&path)?;
    if let (Some(a), Some(b)) = (first, last) {
        println!("train loss {a:.5} -> {b:.5}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_clone(
    base_path: &Path,
    config: Option<&Path>,
    pipeline: Option<PipelineKind>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: &Path,
) -> Result<()> {
    let base = Checkpoint::load(base_path).with_context(|| format!("loading {}", base_path.display()))?;
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => {
            let beside = base_path.with_file_name("config.toml");
            if beside.is_file() {
                load_config(&beside)?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(p) = pipeline {
        cfg.pipeline = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.training = cfg.training.with_stage_steps(s);
    }
    cfg.validate()?;
    if base.model.config != cfg.model.build()? {
        bail!(Error::Config(format!(
            "{} was not trained with the model described by the config",
            base_path.display()
        )));
    }
    if base.compaction.is_some() || base.gates.is_some() {
        bail!(Error::Config(format!("{} is not a pretrained base checkpoint", base_path.display())));
    }
    create_dir(out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    let plan = build_plan(&base.model.config, cfg.plan)?;
    let gates = GateSet::new(&plan, &cfg.gates)?;
    let shape = cfg.data_shape();
    let corpus = make_synthetic_corpus(cfg.corpus_seed, shape, &cfg.corpus)?;
    let task = make_clone_task(cfg.corpus_seed, cfg.seed, cfg.clone_slot(), shape, &cfg.corpus)?;
    let spec = PipelineSpec::new(cfg.pipeline, &cfg.training);

    let mut log = StepLog::create(out)?;
    let result = run_pipeline(
        &spec,
        &base.model,
        plan.clone(),
        gates,
        &corpus,
        &task,
        &cfg.training,
        cfg.seed,
        |r| {
            if let Some(e) = r.eval_loss {
                eprintln!(
                    "{} stage {} step {:>5}  train {:.5}  monitor {:.5}  density {:.4}",
                    r.pipeline, r.stage, r.step, r.l_tts, e, r.density
                );
            }
            log.record(r);
        },
    )?;
    log.finish()?;
    write(&out.join(STAGES_FILE), &to_jsonl(&result.stages))?;

    let meta = CheckpointMeta {
        kind: "clone".into(),
        seed: cfg.seed,
        pipeline: Some(cfg.pipeline.name().to_string()),
        speaker: Some(task.speaker),
    };
    let state = result.state;
    let final_ck = Checkpoint {
        model: state.model,
        gate_config: cfg.gates.clone(),
        plan_options: cfg.plan,
        gates: Some(state.gates),
        step: state.step,
        meta,
        compaction: None,
    };
    final_ck.save(out.join("final.ckpt"))?;
    let compacted = compact_into(&final_ck, &out.join("compact.ckpt"))?;
    write(&out.join("compaction.json"), &pretty(&compacted)?)?;

    print!("{}", render_table(&result.stages));
    println!(
        "compacted: {} -> {} parameters (ratio {:.3}, residual {:.2e})",
        compacted.params_before, compacted.params_after, compacted.ratio, compacted.residual
    );
    Ok(())
}

/// Compacts `ck` and saves the result at `out`, returning the cumulative report.
fn compact_into(ck: &Checkpoint, out: &Path) -> Result<CompactionReport> {
    let plan = ck.plan()?;
    let gates = ck.gates_or_init(&plan)?;
    let done = compact_checked(&ck.model, &plan, &gates, PROBES, ck.meta.seed)?;
    if done.report.residual > 1e-5 {
        bail!(Error::NumericFailure {
            step: ck.step as usize,
            detail: format!("compaction changed the model output by {:.3e}", done.report.residual),
        });
    }
    let report = match &ck.compaction {
        Some(prev) => prev.then(&done.report),
        None => done.report,
    };
    let small = Checkpoint {
        model: done.model,
        gate_config: ck.gate_config.clone(),
        plan_options: ck.plan_options,
        gates: Some(done.gates),
        step: ck.step,
        meta: CheckpointMeta {
            kind: "compact".into(),
            ..ck.meta.clone()
        },
        compaction: Some(report.clone()),
    };
    small.save(out)?;
    Ok(report)
}

fn pretty(report: &CompactionReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn cmd_compact(path: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let report = compact_into(&ck, out)?;
    print!("{}", pretty(&report)?);
    Ok(())
}
