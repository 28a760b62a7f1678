use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use recouple::clip::Modality;
use recouple::frp::clip_guidance;
use recouple::harness::checks::{run_checks, CheckTarget, TOLERANCE};
use recouple::harness::config::{Profile, RunConfig};
use recouple::harness::store::{export_guidance, read_clip, write_dataset};
use recouple::harness::synth::{generate_clip, generate_dataset, SynthSpec, Task};
use recouple::harness::train::{build_network, evaluate, load_data, Evaluation, Trainer};
use recouple::{Error, Result};

#[derive(Parser)]
#[command(name = "recouple", version, about = "Decoupled spatial/temporal RGB-D motion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoints and a metrics log.
    Train(RunArgs),
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the training split instead of the held-out one.
        #[arg(long)]
        train_split: bool,
    },
    /// Export the guidance maps of one clip as PGM images.
    Guidance {
        #[command(flatten)]
        run: RunArgs,
        /// Clip directory; defaults to a synthetic clip.
        #[arg(long = "in", alias = "clip")]
        input: Option<PathBuf>,
        /// Window span (overrides `span`).
        #[arg(long)]
        window: Option<usize>,
        /// Morphology size (overrides `morph_size`).
        #[arg(long)]
        k: Option<usize>,
        /// Synthetic clip index when no directory is given.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_parser = parse_modality, default_value = "rgb")]
        stream: Modality,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// primitives, dsn, rcm, dtn, capf or all.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset to disk.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Clips per class.
        #[arg(long, default_value_t = 8)]
        clips: usize,
        /// motion or paired.
        #[arg(long, default_value = "motion")]
        task: String,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base values when no config file sets one: desk or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    modality: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory of stored clips to train on.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig> {
        let path = self.config.as_deref().or(fallback.filter(|p| p.is_file()));
        let mut cfg = match path {
            Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
            None => RunConfig::profile(self.profile.parse::<Profile>()?),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(m) = &self.modality {
            pairs.push(("modality".into(), m.clone()));
        }
        if let Some(e) = self.epochs {
            pairs.push(("epochs".into(), e.to_string()));
        }
        if let Some(s) = self.seed {
            pairs.push(("seed".into(), s.to_string()));
        }
        if let Some(o) = &self.out {
            pairs.push(("out".into(), o.display().to_string()));
        }
        if let Some(d) = &self.data {
            pairs.push(("data".into(), d.display().to_string()));
        }
        if let Some(d) = &self.eval_data {
            pairs.push(("eval_data".into(), d.display().to_string()));
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_eval(e: &Evaluation) {
    println!("accuracy {:.4}", e.accuracy);
    for (c, acc) in e.per_class().iter().enumerate() {
        println!("  class {c}: {acc:.4}  {:?}", e.confusion[c]);
    }
    if let Some(m) = &e.modes {
        println!("rgb only       {:.4}", m.rgb);
        println!("depth only     {:.4}", m.depth);
        println!("multiplication {:.4}", m.multiplication);
        println!("addition       {:.4}", m.addition);
        println!("capf           {:.4}", m.capf);
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve(None)?;
            let mut trainer = Trainer::new(cfg)?;
            let final_eval = trainer.run(|s, e| {
                println!(
                    "epoch {:>3}  loss {:.4}  train_acc {:.3}  eval_acc {:.3}",
                    s.epoch, s.mean_loss, s.train_acc, e.accuracy
                );
            })?;
            print_eval(&final_eval);
            println!("wrote {}", trainer.config.out.display());
        }
        Command::Eval {
            run,
            checkpoint,
            train_split,
        } => {
            let beside = checkpoint.parent().map(|d| d.join("config.txt"));
            let cfg = run.resolve(beside.as_deref())?;
            let (net, store) = build_network(&cfg, Some(&checkpoint))?;
            let (train, held_out) = load_data(&cfg)?;
            let data = if train_split || held_out.is_empty() { train } else { held_out };
            print_eval(&evaluate(&net, &store, &cfg, &data)?);
        }
        Command::Guidance {
            run,
            input,
            window,
            k,
            index,
            stream,
        } => {
            let mut cfg = run.resolve(None)?;
            cfg.span = window.unwrap_or(cfg.span);
            cfg.morph_size = k.unwrap_or(cfg.morph_size);
            cfg.validate()?;
            let source = match input {
                Some(dir) => read_clip(&dir)?,
                None => generate_clip(&cfg.synth_spec(false)?, index)?,
            };
            let (net, _) = build_network(&cfg, None)?;
            let view = recouple::harness::augment::transform_pair(
                &source,
                &cfg.augment_config(),
                &recouple::harness::augment::Transform::center(&cfg.augment_config()),
            )?;
            let sizes = match &net {
                recouple::model::Network::Unimodal(n) => n.stream.dsn.guidance_sizes(cfg.crop, cfg.crop),
                recouple::model::Network::Multimodal(n) => n.rgb.dsn.guidance_sizes(cfg.crop, cfg.crop),
            };
            let model_cfg = cfg.model_config()?;
            let stacks = clip_guidance(view.get(stream), &model_cfg.frp, &sizes)?;
            let n = export_guidance(&cfg.out, &stacks)?;
            println!("wrote {n} maps to {}", cfg.out.display());
        }
        Command::Gradcheck { module, seed } => {
            let target: CheckTarget = module.parse()?;
            let results = run_checks(target, seed)?;
            let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
            for (name, err) in &results {
                println!("{name:<24} {err:.3e}");
            }
            println!("max rel. error {worst:.3e}");
            return Ok(worst < TOLERANCE);
        }
        Command::Synth {
            classes,
            clips,
            task,
            frames,
            side,
            noise,
            seed,
            out,
        } => {
            let task = match task.parse::<Task>()? {
                Task::Motion(_) => Task::motions(classes)?,
                Task::Paired => Task::Paired,
            };
            let spec = SynthSpec {
                task,
                clips_per_class: clips,
                frames,
                side,
                noise,
                seed,
            };
            let data = generate_dataset(&spec)?;
            write_dataset(&out, &data)?;
            println!("wrote {} clips to {}", data.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
