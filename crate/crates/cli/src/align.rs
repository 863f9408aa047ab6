use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mvlle::alignment::{candidate_maps, topk_search, PatchGrid, TopK};
use mvlle::image_io::{load_image, save_image};
use mvlle::network::{enhance, ModelConfig, ModelParams};
use mvlle::ImageRGB;
use serde_json::{json, Value};

use crate::config::resolve;
use crate::{snapshot_in, ConfigArgs, UsageError};

#[derive(Args)]
pub struct AlignArgs {
    /// The three views in capture order.
    #[arg(long, num_args = 3, value_names = ["A", "B", "C"])]
    views: Vec<PathBuf>,
    /// Which view (0, 1 or 2) the others are aligned to.
    #[arg(long, default_value_t = 1)]
    primary: usize,
    /// Report the search made inside this checkpoint's network instead of
    /// searching raw RGB. Its patch, K and radius settings then apply.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which unit's search to report (1-based); needs `--checkpoint`.
    #[arg(long, default_value_t = 1, requires = "checkpoint")]
    unit: usize,
    /// Output directory for `alignment.json` and `alignment.png`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Capture-order top-K lists from the network's patch search at `unit`.
fn network_matches(
    params: &ModelParams<f32>,
    views: &[ImageRGB; 3],
    primary: usize,
    unit: usize,
) -> Result<Vec<TopK>> {
    let out = enhance(params, views, primary)?;
    let per_unit = out.alignments.into_iter().nth(unit - 1).ok_or_else(|| {
        UsageError(format!(
            "--unit {unit} is past the model's {} units",
            params.config.units
        ))
    })?;
    let aux: Vec<usize> = (0..3).filter(|&i| i != primary).collect();
    let [a0, p, a1] = per_unit;
    let mut ordered = [None, None, None];
    ordered[aux[0]] = Some(a0);
    ordered[primary] = Some(p);
    ordered[aux[1]] = Some(a1);
    Ok(ordered
        .into_iter()
        .map(|t| t.expect("every slot filled"))
        .collect())
}

/// Capture-order top-K lists from searching raw RGB patches.
fn rgb_matches(views: &[ImageRGB; 3], primary: usize, cfg: &ModelConfig) -> Result<Vec<TopK>> {
    let (h, w) = views[0].dims();
    let grids = views
        .iter()
        .map(|v| PatchGrid::partition(v.to_tensor::<f32>().data(), 3, h, w, cfg.patch))
        .collect::<mvlle::Result<Vec<_>>>()?;
    Ok(grids
        .iter()
        .map(|g| topk_search(&grids[primary], g, cfg.k, cfg.radius))
        .collect::<mvlle::Result<Vec<_>>>()?)
}

fn matches_json(found: &TopK) -> Value {
    Value::Array(
        found
            .matches
            .iter()
            .map(|cell| {
                Value::Array(
                    cell.iter()
                        .map(|m| json!({"row": m.row, "col": m.col, "rho": m.rho}))
                        .collect(),
                )
            })
            .collect(),
    )
}

fn draw_segment(img: &mut ImageRGB, (y0, x0): (f64, f64), (y1, x1): (f64, f64), color: [f32; 3]) {
    let steps = (y1 - y0).abs().max((x1 - x0).abs()).ceil().max(1.0) as usize;
    let (h, w) = img.dims();
    for i in 0..=steps {
        let f = i as f64 / steps as f64;
        let (y, x) = ((y0 + f * (y1 - y0)).round(), (x0 + f * (x1 - x0)).round());
        if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
            for (c, &v) in color.iter().enumerate() {
                img.set(y as usize, x as usize, c, v);
            }
        }
    }
}

/// Top row: each view reassembled from its best match per primary patch.
/// Bottom row: each view dimmed, with a segment from every primary patch
/// centre to its best match, red at correlation 0 and green at 1, and the
/// starting pixel in white.
fn visualize(views: &[ImageRGB; 3], found: &[TopK], patch: usize) -> Result<ImageRGB> {
    let (h, w) = views[0].dims();
    let mut canvas = ImageRGB::filled(2 * h, 3 * w, 0.0);
    for (v, topk) in found.iter().enumerate() {
        let map = &candidate_maps(topk, h, w, patch)?[0];
        let mut panel = views[v].map(|x| 0.35 * x);
        for y in 0..h {
            for x in 0..w {
                let src = map[y * w + x];
                for c in 0..3 {
                    canvas.set(y, v * w + x, c, views[v].get(src / w, src % w, c));
                }
            }
        }
        let centre = |cell: usize, side: usize| {
            ((cell * patch) as f64 + (patch as f64 - 1.0) / 2.0).min(side as f64 - 1.0)
        };
        for r in 0..topk.rows {
            for c in 0..topk.cols {
                let best = topk.slot(r, c, 0);
                let rho = best.rho.clamp(0.0, 1.0) as f32;
                let from = (centre(r, h), centre(c, w));
                draw_segment(
                    &mut panel,
                    from,
                    (centre(best.row, h), centre(best.col, w)),
                    [1.0 - rho, rho, 0.0],
                );
                draw_segment(&mut panel, from, from, [1.0; 3]);
            }
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    canvas.set(h + y, v * w + x, c, panel.get(y, x, c));
                }
            }
        }
    }
    Ok(canvas)
}

pub fn run(args: AlignArgs) -> Result<()> {
    if args.unit == 0 {
        return Err(UsageError("--unit counts from 1".into()).into());
    }
    if args.primary > 2 {
        return Err(
            UsageError(format!("--primary must be 0, 1 or 2, got {}", args.primary)).into(),
        );
    }
    let mut cfg = resolve(args.config.config.as_deref(), &args.config.overrides)?;
    let params = match &args.checkpoint {
        Some(p) => {
            let params = ModelParams::<f32>::load(p)
                .with_context(|| format!("loading checkpoint {}", p.display()))?;
            cfg.model = params.config.clone();
            Some(params)
        }
        None => None,
    };
    let views = [
        load_image(&args.views[0])?,
        load_image(&args.views[1])?,
        load_image(&args.views[2])?,
    ];
    let (h, w) = views[0].dims();
    if views.iter().any(|v| v.dims() != (h, w)) {
        return Err(mvlle::Error::Dimension("views differ in size".into()).into());
    }
    for v in &views {
        v.ensure_network_size()?;
    }
    let m = &cfg.model;
    let found = match &params {
        Some(p) => network_matches(p, &views, args.primary, args.unit)?,
        None => rgb_matches(&views, args.primary, m)?,
    };

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let report = json!({
        "primary": args.primary,
        "features": if params.is_some() { "network" } else { "rgb" },
        "unit": params.is_some().then_some(args.unit),
        "patch": m.patch,
        "k": m.k,
        "radius": m.radius,
        "rows": found[0].rows,
        "cols": found[0].cols,
        "views": found.iter().enumerate().map(|(v, f)| json!({"view": v, "matches": matches_json(f)})).collect::<Vec<_>>(),
    });
    let json_path = args.out.join("alignment.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", json_path.display()))?;
    save_image(
        &visualize(&views, &found, m.patch)?,
        args.out.join("alignment.png"),
    )?;

    cfg.invocation = Some(json!({
        "command": "align-inspect",
        "views": args.views,
        "primary": args.primary,
        "checkpoint": args.checkpoint,
        "unit": args.unit,
        "out": args.out,
    }));
    cfg.write_snapshot(&snapshot_in(&args.out))?;
    println!("wrote {} and alignment.png", json_path.display());
    Ok(())
}
