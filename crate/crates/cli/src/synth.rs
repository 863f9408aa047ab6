use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mvlle::image_io::{
    load_image, manifest_root, quantize_u8, save_image, write_manifest, ManifestEntry, Split,
    TripletManifest,
};
use mvlle::synthesis::{admitted_procedural_triplet, synth_triplet, SimilarityGate};
use mvlle::ImageRGB;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use crate::config::resolve;
use crate::{snapshot_in, ConfigArgs, UsageError};

#[derive(Args)]
pub struct SynthArgs {
    /// JSONL scene list: `{"scene": ID, "views": [A, B, C]}` per line, paths
    /// relative to the file.
    #[arg(long, value_name = "FILE", conflicts_with = "procedural")]
    scenes: Option<PathBuf>,
    /// Generate this many procedural scenes instead of reading a scene list.
    #[arg(long, value_name = "N")]
    procedural: Option<usize>,
    /// Output directory for images and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Put the last N admitted scenes into a separate test manifest.
    #[arg(long, default_value_t = 0, value_name = "N")]
    held_out: usize,
    /// Overrides `synth.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneLine {
    scene: String,
    views: [PathBuf; 3],
}

fn read_scene_list(path: &Path) -> Result<Vec<(String, [ImageRGB; 3])>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let root = manifest_root(path);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: SceneLine = serde_json::from_str(line)
            .map_err(|e| mvlle::Error::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let load = |p: &PathBuf| load_image(root.join(p));
        out.push((
            s.scene,
            [load(&s.views[0])?, load(&s.views[1])?, load(&s.views[2])?],
        ));
    }
    Ok(out)
}

/// Rounds to the 8-bit grid the saved PNGs use, so the stored ground truth is
/// exactly what was degraded.
fn quantized(img: &ImageRGB) -> ImageRGB {
    img.map(|v| quantize_u8(v) as f32 / 255.0)
}

pub fn run(args: SynthArgs) -> Result<()> {
    let mut cfg = resolve(args.config.config.as_deref(), &args.config.overrides)?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    cfg.invocation = Some(json!({
        "command": "synth",
        "scenes": args.scenes,
        "procedural": args.procedural,
        "out": args.out,
        "held_out": args.held_out,
    }));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.seed);
    let gate = SimilarityGate::with_threshold(cfg.synth.gate_threshold);

    let scenes = match (&args.scenes, args.procedural) {
        (Some(path), _) => read_scene_list(path)?,
        (None, Some(n)) => {
            let side = cfg.synth.procedural_side;
            (0..n)
                .map(|i| {
                    let views = admitted_procedural_triplet(
                        side,
                        side,
                        cfg.synth.procedural_shift,
                        &gate,
                        cfg.synth.max_tries,
                        &mut rng,
                    )?;
                    Ok((format!("proc{i:04}"), views))
                })
                .collect::<Result<_>>()?
        }
        (None, None) => {
            return Err(UsageError("pass --scenes FILE or --procedural N".into()).into())
        }
    };

    for sub in ["low", "gt"] {
        let dir = args.out.join(sub);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut entries = Vec::new();
    let mut rejected = 0;
    for (scene, views) in scenes {
        let gt = views.map(|v| quantized(&v));
        if !gate.admits(&gt)? {
            eprintln!("skipping scene {scene}: views fail the similarity gate");
            rejected += 1;
            continue;
        }
        let (low, params) = synth_triplet(&gt, &mut rng, &cfg.synth.noise())?;
        let name = |kind: &str, v: usize| PathBuf::from(kind).join(format!("{scene}_{v}.png"));
        let entry = ManifestEntry {
            scene: scene.clone(),
            low: [name("low", 0), name("low", 1), name("low", 2)],
            gt: [name("gt", 0), name("gt", 1), name("gt", 2)],
            params,
        };
        for v in 0..3 {
            save_image(&low[v], args.out.join(&entry.low[v]))?;
            save_image(&gt[v], args.out.join(&entry.gt[v]))?;
        }
        entries.push(entry);
    }
    if args.held_out > entries.len() {
        bail!(UsageError(format!(
            "--held-out {} exceeds the {} admitted scenes",
            args.held_out,
            entries.len()
        )));
    }
    let test = entries.split_off(entries.len() - args.held_out);
    let n_train = entries.len();
    let manifest = |split: Split, entries: Vec<ManifestEntry>| TripletManifest { split, entries };
    write_manifest(
        &manifest(Split::Train, entries),
        args.out.join("train.jsonl"),
    )?;
    if !test.is_empty() {
        write_manifest(&manifest(Split::Test, test), args.out.join("test.jsonl"))?;
    }
    cfg.write_snapshot(&snapshot_in(&args.out))?;
    println!(
        "wrote {n_train} training and {} test triplets to {} ({rejected} rejected by the gate)",
        args.held_out,
        args.out.display()
    );
    Ok(())
}
