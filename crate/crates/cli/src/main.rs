//! `dpdm`: pretrain, calibrate, fine-tune privately, sample and evaluate.

mod commands;
mod config;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use crate::commands::RunDir;
use crate::config::Config;

const USAGE: &str = "usage: dpdm <command> [--config PATH] [--seed N] [--out DIR] [--KEY VALUE ...]

commands:
  pretrain         non-private training on the public (pretrain) domain
  finetune         private training, optionally from a pretrain checkpoint (--init)
  sample           draw synthetic images from a checkpoint
  calibrate        noise multiplier for a target (epsilon, delta)
  eval-fid         Frechet distance between real and synthetic embeddings
  eval-downstream  accuracy on real data of classifiers trained on synthetic data
  model-select     rank agreement between synthetic and real validation

DPDM_THREADS caps the number of worker threads.";

fn parse_args(args: &[String]) -> Result<(String, Config)> {
    let Some(command) = args.first() else {
        bail!("{USAGE}");
    };
    if command == "-h" || command == "--help" {
        println!("{USAGE}");
        std::process::exit(0);
    }
    let mut config_path = None;
    let mut overrides = Vec::new();
    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("unexpected argument `{flag}`\n\n{USAGE}");
        };
        let value = it
            .next()
            .with_context(|| format!("flag `{flag}` needs a value"))?;
        if key == "config" {
            config_path = Some(PathBuf::from(value));
        } else {
            overrides.push((key.replace('-', "_"), value.clone()));
        }
    }
    let mut cfg = match config_path {
        Some(p) => Config::load(&p)?,
        None => Config::default(),
    };
    for (k, v) in overrides {
        cfg.set(&k, &v);
    }
    Ok((command.clone(), cfg))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DPDM_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("DPDM_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn run(args: &[String]) -> Result<()> {
    let (command, mut cfg) = parse_args(args)?;
    init_threads()?;
    let out: String = cfg.get("out", format!("runs/{command}"))?;
    let run = RunDir::create(&PathBuf::from(out))?;
    match command.as_str() {
        "pretrain" => commands::pretrain(&mut cfg, &run),
        "finetune" => commands::finetune(&mut cfg, &run),
        "sample" => commands::sample(&mut cfg, &run),
        "calibrate" => commands::calibrate(&mut cfg, &run),
        "eval-fid" => commands::eval_fid(&mut cfg, &run),
        "eval-downstream" => commands::eval_downstream(&mut cfg, &run),
        "model-select" => commands::model_select(&mut cfg, &run),
        other => bail!("unknown command `{other}`\n\n{USAGE}"),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
