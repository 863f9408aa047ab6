use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mvlle::trainer::{load_triplets, Trainer};
use serde_json::json;

use crate::config::resolve;
use crate::{snapshot_in, ConfigArgs};

#[derive(Args)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Held-out manifest evaluated every `train.eval_every` iterations.
    #[arg(long, value_name = "FILE")]
    held_out: Option<PathBuf>,
    /// Output directory for checkpoints, `metrics.csv` and the config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint. Its stored model and training settings are
    /// used; only `--iters` may extend the run.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    /// Overrides `train.total_iters`.
    #[arg(long)]
    iters: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve(args.config.config.as_deref(), &args.config.overrides)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(iters) = args.iters {
        cfg.train.total_iters = iters;
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            if let Some(iters) = args.iters {
                t.cfg.total_iters = iters;
            }
            cfg.model = t.params.config.clone();
            cfg.train = t.cfg.clone();
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    cfg.invocation = Some(json!({
        "command": "train",
        "manifest": args.manifest,
        "held_out": args.held_out,
        "out": args.out,
        "resume": args.resume,
    }));
    let train = load_triplets(&args.manifest)?;
    let held_out = match &args.held_out {
        Some(p) => load_triplets(p)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    cfg.write_snapshot(&snapshot_in(&args.out))?;

    eprintln!(
        "training {} parameters on {} triplets, iterations {}..{}",
        trainer.params.numel(),
        train.len(),
        trainer.iter,
        trainer.cfg.total_iters
    );
    let report_every = (trainer.cfg.total_iters / 20).max(1);
    let rows = trainer.run_with(&train, &held_out, Some(&args.out), |row| {
        if let Some(e) = row.eval {
            eprintln!(
                "iter {:>6}  loss {:.5}  held-out PSNR {:.2} dB  SSIM {:.4}",
                row.iter, row.loss, e.psnr, e.ssim
            );
        } else if row.iter % report_every == 0 {
            eprintln!(
                "iter {:>6}  loss {:.5}  lr {:.1e}",
                row.iter, row.loss, row.lr
            );
        }
    })?;
    let last = Trainer::checkpoint_name(trainer.iter);
    match rows.last() {
        Some(r) => println!(
            "finished at iteration {} with loss {:.5}; checkpoint {}",
            r.iter,
            r.loss,
            args.out.join(&last).display()
        ),
        None => println!("nothing to do: already at iteration {}", trainer.iter),
    }
    Ok(())
}
