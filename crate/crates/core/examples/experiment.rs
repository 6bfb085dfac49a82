//! Runs the full swap matrix on the toy translation task and prints the
//! result table.
//!
//!     cargo run --release --example experiment -- [SEEDS] [MAX_STEPS] [OUT_DIR]
//!
//! Without MAX_STEPS the calibrated per-arm budgets are used. Expect well over
//! an hour per seed on a single core.

use std::path::PathBuf;

use peswap::experiment::{run_experiment, ExperimentConfig};

fn main() -> peswap::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut cfg = ExperimentConfig::calibrated(1, seeds);
    if let Some(steps) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg = cfg.with_budget(steps);
    }
    let out = args.get(2).map(PathBuf::from);
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| peswap::Error::Config(format!("{}: {e}", dir.display())))?;
    }

    let report = run_experiment(&cfg, out.as_deref())?;
    print!("{}", report.to_table());
    if let Some(dir) = &out {
        report.write(&dir.join("report.tsv"))?;
    }
    Ok(())
}
