use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use mvlle::image_io::{load_image, manifest_root, Mask};
use mvlle::metrics::{ab_mabd, loe, psnr, ssim_image, warping_error, FlowField};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{snapshot_beside, UsageError};

pub const METRICS: [&str; 6] = ["psnr", "ssim", "loe", "ab", "mabd", "warping_error"];

#[derive(Args)]
pub struct EvalArgs {
    /// JSONL job file. Each line is one of
    /// `{"enhanced": E, "reference": R}`,
    /// `{"sequence": [V0, V1, ...]}` or
    /// `{"warp": {"source": A, "target": B, "flow": F, "mask": M}}` (mask optional).
    #[arg(long, value_name = "FILE")]
    jobs: Option<PathBuf>,
    /// Single enhanced image, paired with `--reference`.
    #[arg(long, requires = "reference")]
    enhanced: Option<PathBuf>,
    #[arg(long, requires = "enhanced")]
    reference: Option<PathBuf>,
    /// Comma-separated subset of psnr,ssim,loe,ab,mabd,warping_error.
    /// Metrics left out are reported as null.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<String>>,
    /// Write the JSON report here as well as to standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WarpJob {
    source: PathBuf,
    target: PathBuf,
    flow: PathBuf,
    mask: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum Job {
    Pair {
        enhanced: PathBuf,
        reference: PathBuf,
    },
    Sequence {
        sequence: Vec<PathBuf>,
    },
    Warp {
        warp: WarpJob,
    },
}

/// Report with a fixed key set; metrics that were not requested or had no
/// inputs are null.
#[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Report {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub loe: Option<f64>,
    pub ab: Option<f64>,
    pub mabd: Option<f64>,
    pub warping_error: Option<f64>,
    pub pairs: usize,
    pub sequences: usize,
    pub warps: usize,
}

fn read_jobs(path: &Path) -> Result<Vec<Job>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let root = manifest_root(path);
    let fix = |p: PathBuf| root.join(p);
    let mut jobs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let job: Job = serde_json::from_str(line).map_err(|e| {
            mvlle::Error::Malformed(format!(
                "{}:{}: unrecognized job ({e})",
                path.display(),
                i + 1
            ))
        })?;
        jobs.push(match job {
            Job::Pair {
                enhanced,
                reference,
            } => Job::Pair {
                enhanced: fix(enhanced),
                reference: fix(reference),
            },
            Job::Sequence { sequence } => Job::Sequence {
                sequence: sequence.into_iter().map(fix).collect(),
            },
            Job::Warp { warp } => Job::Warp {
                warp: WarpJob {
                    source: fix(warp.source),
                    target: fix(warp.target),
                    flow: fix(warp.flow),
                    mask: warp.mask.map(fix),
                },
            },
        });
    }
    Ok(jobs)
}

/// Per-job results keyed like [`METRICS`].
type Scores = [Option<f64>; 6];

fn score(job: &Job, want: &[bool; 6]) -> Result<Scores> {
    let mut s: Scores = [None; 6];
    match job {
        Job::Pair {
            enhanced,
            reference,
        } => {
            let (e, r) = (load_image(enhanced)?, load_image(reference)?);
            if want[0] {
                s[0] = Some(psnr(&e, &r)?);
            }
            if want[1] {
                s[1] = Some(ssim_image(&e, &r)?);
            }
            if want[2] {
                s[2] = Some(loe(&e, &r)?);
            }
        }
        Job::Sequence { sequence } => {
            if want[3] || want[4] {
                let imgs = sequence
                    .iter()
                    .map(load_image)
                    .collect::<mvlle::Result<Vec<_>>>()?;
                let (ab, mabd) = ab_mabd(&imgs)?;
                s[3] = want[3].then_some(ab);
                s[4] = want[4].then_some(mabd);
            }
        }
        Job::Warp { warp } => {
            if want[5] {
                let (a, b) = (load_image(&warp.source)?, load_image(&warp.target)?);
                let flow = FlowField::load(&warp.flow)?;
                let mask = match &warp.mask {
                    Some(m) => Mask::load(m)?,
                    None => Mask::all_valid(a.height(), a.width()),
                };
                s[5] = Some(warping_error(&a, &b, &flow, &mask)?);
            }
        }
    }
    Ok(s)
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn run(args: EvalArgs) -> Result<()> {
    let want: [bool; 6] = match &args.metrics {
        None => [true; 6],
        Some(list) => {
            let mut w = [false; 6];
            for m in list {
                let i = METRICS.iter().position(|k| k == m).ok_or_else(|| {
                    UsageError(format!(
                        "unknown metric `{m}`; choose from {}",
                        METRICS.join(",")
                    ))
                })?;
                w[i] = true;
            }
            w
        }
    };
    let mut jobs = match &args.jobs {
        Some(p) => read_jobs(p)?,
        None => Vec::new(),
    };
    if let (Some(e), Some(r)) = (&args.enhanced, &args.reference) {
        jobs.push(Job::Pair {
            enhanced: e.clone(),
            reference: r.clone(),
        });
    }
    if jobs.is_empty() {
        return Err(UsageError(
            "nothing to evaluate: pass --jobs or --enhanced/--reference".into(),
        )
        .into());
    }
    let scores = jobs
        .par_iter()
        .map(|j| score(j, &want))
        .collect::<Result<Vec<_>>>()?;
    let col = |i: usize| mean(scores.iter().map(|s| s[i]));
    let count = |f: fn(&Job) -> bool| jobs.iter().filter(|j| f(j)).count();
    let report = Report {
        psnr: col(0),
        ssim: col(1),
        loe: col(2),
        ab: col(3),
        mabd: col(4),
        warping_error: col(5),
        pairs: count(|j| matches!(j, Job::Pair { .. })),
        sequences: count(|j| matches!(j, Job::Sequence { .. })),
        warps: count(|j| matches!(j, Job::Warp { .. })),
    };
    // non-finite scores (identical images give infinite PSNR) have no JSON
    // number, so they are written as strings
    let mut value = serde_json::to_value(&report)?;
    for (i, k) in METRICS.iter().enumerate() {
        if let Some(v) = col(i).filter(|v| !v.is_finite()) {
            value[*k] = json!(v.to_string());
        }
    }
    let text = serde_json::to_string_pretty(&value)?;
    println!("{text}");
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(out, format!("{text}\n"))
            .with_context(|| format!("writing {}", out.display()))?;
        let cfg = RunConfig {
            invocation: Some(json!({
                "command": "eval",
                "jobs": args.jobs,
                "enhanced": args.enhanced,
                "reference": args.reference,
                "metrics": args.metrics,
                "out": out,
            })),
            ..RunConfig::default()
        };
        cfg.write_snapshot(&snapshot_beside(out))?;
    }
    Ok(())
}
