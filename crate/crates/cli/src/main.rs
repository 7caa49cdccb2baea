//! `catagg` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use catagg::checkpoint::Checkpoint;
use catagg::config::RunConfig;
use catagg::data::{load_dataset, write_dataset};
use catagg::eval::{evaluate, predict};
use catagg::flow::KeypointSet;
use catagg::gradcheck::{self, OPS};
use catagg::model::Model;
use catagg::tensor::write_tensor_file;
use catagg::train::Trainer;
use catagg::{cost, Error, ParamStore};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "catagg", version, about = "Transformer cost aggregation (CATs / CATs++) on synthetic pairs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// cats | catspp
    #[arg(long)]
    model: Option<String>,
    /// serial | parallel | both
    #[arg(long)]
    mode: Option<String>,
    /// Override a config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> catagg::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> catagg::Result<()> {
        if let Some(m) = &self.model {
            cfg.set("model", m)?;
        }
        if let Some(m) = &self.mode {
            cfg.set("mode", m)?;
        }
        cfg.apply_overrides(&self.set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic training pairs and a manifest
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "warp-magnitude")]
        warp_magnitude: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (its config is used)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write an intermediate checkpoint every N steps
        #[arg(long)]
        save_every: Option<u64>,
        #[arg(long, default_value_t = 50)]
        log_every: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint against the winner-takes-all baseline
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Report file (printed to stdout as well)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "CATAGG_THREADS")]
        threads: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write predicted flow fields (and transferred keypoints)
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        keypoints: bool,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        /// `all` or one op name
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value = "f64")]
        dtype: String,
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
    },
    /// Parameter, memory and timing report
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Errors that mean the command line or its inputs were wrong.
fn is_usage(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<clap::Error>().is_some() {
        return true;
    }
    matches!(e.downcast_ref::<Error>(), Some(Error::Argument(_) | Error::Config(_)))
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Argument(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { out, pairs, seed, warp_magnitude, cfg } => {
            let mut cfg = cfg.resolve()?;
            if let Some(n) = pairs {
                cfg.pairs = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = warp_magnitude {
                cfg.set("data.warp_magnitude", &m.to_string())?;
            }
            if cfg.grid.0 != cfg.grid.1 {
                return Err(usage("gen-data needs a square grid"));
            }
            let manifest = write_dataset(&out, cfg.pairs, cfg.seed, cfg.warp_magnitude, cfg.grid.0)
                .with_context(|| format!("writing dataset to {}", out.display()))?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            println!("wrote {} pairs, manifest {}", cfg.pairs, manifest.display());
        }
        Cmd::Train { data, out, resume, save_every, log_every, cfg } => train(&data, &out, resume, save_every, log_every, &cfg)?,
        Cmd::Eval { checkpoint, data, out, threads, set } => {
            let (mut cfg, store, model) = load_model(checkpoint.as_deref())?;
            cfg.apply_overrides(&set)?;
            if let Some(t) = threads {
                cfg.threads = t;
            }
            let pairs = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            let report = evaluate(&model, &store, &pairs, &cfg.alphas, cfg.threads)?;
            let text = format!("{}{}", echo(&cfg), report.to_text());
            print!("{text}");
            if let Some(o) = out {
                fs::write(&o, &text).with_context(|| format!("writing {}", o.display()))?;
            }
        }
        Cmd::Infer { checkpoint, data, out, keypoints } => {
            let (cfg, store, model) = load_model(checkpoint.as_deref())?;
            let pairs = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            for (i, pair) in pairs.iter().enumerate() {
                let p = predict(&model, &store, pair)?;
                write_tensor_file(out.join(format!("pair{i:04}_flow.catt")), &p.flow.grid)?;
                write_tensor_file(out.join(format!("pair{i:04}_wta_flow.catt")), &p.wta_flow.grid)?;
                if keypoints {
                    let (h, w) = pair.image_size();
                    for (tag, pts) in [("src", &p.src_points), ("gt", &p.gt_points), ("pred", &p.pred_points), ("wta", &p.wta_points)] {
                        KeypointSet::new(pts.clone(), h, w)?.save(out.join(format!("pair{i:04}_kp_{tag}.txt")))?;
                    }
                }
            }
            println!("wrote {} flow fields to {}", pairs.len(), out.display());
        }
        Cmd::Gradcheck { ops, dtype, seeds } => {
            if dtype != "f64" {
                return Err(usage(format!("gradcheck runs in f64 only, got --dtype {dtype}")));
            }
            let names: Vec<&str> = if ops == "all" { OPS.to_vec() } else { vec![ops.as_str()] };
            let t0 = Instant::now();
            let mut failed = 0;
            for op in names {
                let r = gradcheck::check(op, seeds)?;
                let verdict = if r.passed() { "pass" } else { "FAIL" };
                if !r.passed() {
                    failed += 1;
                }
                println!("{:<20} max_rel_err={:.3e} coords={:<5} {verdict}", r.op, r.max_rel_err, r.coordinates);
            }
            println!("gradcheck: {failed} failed, {:.1}s", t0.elapsed().as_secs_f64());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Bench { cfg } => {
            let cfg = cfg.resolve()?;
            let report = cost::bench(&cfg)?;
            print!("{}{}", echo(&cfg), report.to_text());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// The resolved config as `#` comment lines.
fn echo(cfg: &RunConfig) -> String {
    cfg.to_text().lines().map(|l| format!("# {l}\n")).collect()
}

fn load_model(checkpoint: Option<&Path>) -> anyhow::Result<(RunConfig, ParamStore<f32>, Model)> {
    let Some(path) = checkpoint else {
        return Err(usage("--checkpoint is required"));
    };
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = RunConfig::parse(&ck.config)?;
    let (store, model) = build(&cfg)?;
    let mut store = store;
    ck.restore_params(&mut store)?;
    Ok((cfg, store, model))
}

fn build(cfg: &RunConfig) -> catagg::Result<(ParamStore<f32>, Model)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &mut rng, cfg)?;
    Ok((store, model))
}

fn train(
    data: &Path,
    out: &Path,
    resume: Option<PathBuf>,
    save_every: Option<u64>,
    log_every: u64,
    args: &ConfigArgs,
) -> anyhow::Result<()> {
    let (cfg, mut store, model, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let mut cfg = RunConfig::parse(&ck.config)?;
            // only the schedule length may change on resume
            let mut probe = cfg.clone();
            args.apply(&mut probe)?;
            cfg.train.steps = probe.train.steps;
            if probe != cfg {
                bail!(usage("resume takes its config from the checkpoint; only train.steps may be overridden"));
            }
            let (mut store, model) = build(&cfg)?;
            let mut trainer = Trainer::new(cfg.train.clone(), &store, cfg.seed);
            ck.restore(&mut store, &mut trainer)?;
            (cfg, store, model, trainer)
        }
        None => {
            let cfg = args.resolve()?;
            let (store, model) = build(&cfg)?;
            let trainer = Trainer::new(cfg.train.clone(), &store, cfg.seed);
            (cfg, store, model, trainer)
        }
    };
    let pairs = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    print!("{}", echo(&cfg));
    let text = cfg.to_text();
    let t0 = Instant::now();
    while (trainer.step as usize) < cfg.train.steps {
        let loss = trainer.train_step(&model, &mut store, &pairs)?;
        let step = trainer.step;
        if log_every > 0 && (step % log_every == 0 || step as usize == cfg.train.steps) {
            println!("step={step} loss={loss:.6} elapsed={:.1}s", t0.elapsed().as_secs_f64());
        }
        if save_every.is_some_and(|k| k > 0 && step % k == 0) {
            let path = out.with_extension(format!("step{step}.ckpt"));
            Checkpoint::capture(&text, &store, &trainer)?.save(&path)?;
        }
    }
    Checkpoint::capture(&text, &store, &trainer)?.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("saved {} at step {}", out.display(), trainer.step);
    Ok(())
}
