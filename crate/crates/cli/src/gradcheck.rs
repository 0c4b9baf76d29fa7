use anyhow::Result;
use crossdiff_core::gradsuite::{run_suite, GradTarget, SuiteOptions, TargetResult};

use crate::Common;

pub fn options(c: &Common, only: Option<GradTarget>) -> Result<SuiteOptions> {
    let cfg = &c.config;
    Ok(SuiteOptions {
        tol: cfg.get("gradcheck.tol")?,
        step: cfg.get("gradcheck.step")?,
        seeds: cfg.get("gradcheck.seeds")?,
        model_max_coords: cfg.get("gradcheck.max_coords")?,
        only,
    })
}

pub fn report(results: &[TargetResult]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>12} {:>9}  worst\n",
        "check", "seeds", "max rel err", "time"
    );
    for r in results {
        let worst = r.worst.as_ref().map_or("-".to_string(), |(seed, name)| {
            format!("seed {seed} {name}")
        });
        s.push_str(&format!(
            "{:<10} {:>6} {:>12.3e} {:>8.2}s  {}{}\n",
            r.target.name(),
            r.seeds,
            r.max_rel_err,
            r.elapsed.as_secs_f64(),
            worst,
            if r.passed { "" } else { "  FAIL" }
        ));
    }
    s
}

/// Runs the matrix and prints the table. Returns whether every check passed.
pub fn run(c: &Common, only: Option<GradTarget>) -> Result<bool> {
    let opts = options(c, only)?;
    let results = run_suite(&opts)?;
    print!("{}", report(&results));
    Ok(results.iter().all(|r| r.passed))
}
