use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mvlle::image_io::{load_image, save_image};
use mvlle::network::{enhance, ModelParams};
use serde_json::json;

use crate::config::RunConfig;
use crate::{snapshot_beside, UsageError};

#[derive(Args)]
pub struct EnhanceArgs {
    /// Trained checkpoint (`.rctn`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// The three low-light views in capture order.
    #[arg(long, num_args = 3, value_names = ["A", "B", "C"])]
    views: Vec<PathBuf>,
    /// Which view (0, 1 or 2) to enhance.
    #[arg(long, default_value_t = 1)]
    primary: usize,
    /// Output image; `.ppm` writes PPM, anything else PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also write each stage prediction as `stage_N.png` into this directory.
    #[arg(long, value_name = "DIR")]
    dump_stages: Option<PathBuf>,
}

pub fn run(args: EnhanceArgs) -> Result<()> {
    if args.primary > 2 {
        return Err(
            UsageError(format!("--primary must be 0, 1 or 2, got {}", args.primary)).into(),
        );
    }
    let params = ModelParams::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let views = [
        load_image(&args.views[0])?,
        load_image(&args.views[1])?,
        load_image(&args.views[2])?,
    ];
    let out = enhance(&params, &views, args.primary)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_image(&out.restored, &args.out)?;
    if let Some(dir) = &args.dump_stages {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (t, stage) in out.stages.iter().enumerate() {
            save_image(stage, dir.join(format!("stage_{}.png", t + 1)))?;
        }
    }
    let cfg = RunConfig {
        model: params.config.clone(),
        invocation: Some(json!({
            "command": "enhance",
            "checkpoint": args.checkpoint,
            "views": args.views,
            "primary": args.primary,
            "out": args.out,
            "dump_stages": args.dump_stages,
        })),
        ..RunConfig::default()
    };
    cfg.write_snapshot(&snapshot_beside(&args.out))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
