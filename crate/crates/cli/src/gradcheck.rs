use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mvlle::gradsuite::{run_suite, SUITE_TOLERANCE};
use serde_json::json;

use crate::config::RunConfig;
use crate::snapshot_beside;

#[derive(Args)]
pub struct GradcheckArgs {
    /// Seed for the random check inputs and model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: GradcheckArgs) -> Result<()> {
    let results = run_suite(args.seed)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        println!(
            "{:<width$}  {:.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {SUITE_TOLERANCE:e})");

    if let Some(out) = &args.out {
        let report = json!({
            "seed": args.seed,
            "tolerance": SUITE_TOLERANCE,
            "max_rel_error": worst,
            "checks": results.iter().map(|r| json!({"name": r.name, "max_rel_error": r.max_rel_error})).collect::<Vec<_>>(),
        });
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
        let cfg = RunConfig {
            invocation: Some(json!({"command": "gradcheck", "seed": args.seed, "out": out})),
            ..RunConfig::default()
        };
        cfg.write_snapshot(&snapshot_beside(out))?;
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(mvlle::Error::NumericDomain(format!(
            "gradient checks above tolerance: {}",
            failed.join(", ")
        ))
        .into());
    }
    Ok(())
}
