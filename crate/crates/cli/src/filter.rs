use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use crossdiff_core::implicit::{
    build_subset, read_records, write_jsonl, HttpBackend, LlmBackend, LlmOptions, PatternLibrary,
    RetryPolicy, SubsetOutput, DEFAULT_PROMPT, ENV_URL,
};

use crate::{mark_done, prepare_dir, write_json, Common};

pub struct FilterArgs<'a> {
    pub input: &'a Path,
    pub patterns: Option<&'a Path>,
    pub prompt: Option<&'a Path>,
}

/// Filters with an explicit backend; used directly by tests with scripted backends.
pub fn run_with(
    c: &Common,
    args: &FilterArgs<'_>,
    backend: Option<&dyn LlmBackend>,
) -> Result<SubsetOutput> {
    let lib = match args.patterns {
        Some(p) => PatternLibrary::from_path(p)?,
        None => PatternLibrary::default(),
    };
    let prompt = match args.prompt {
        Some(p) => {
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => DEFAULT_PROMPT.to_string(),
    };
    let records = read_records(BufReader::new(
        File::open(args.input).with_context(|| format!("opening {}", args.input.display()))?,
    ))?;
    prepare_dir(&c.out, &c.config, c.force)?;
    let retry = RetryPolicy {
        attempts: c.config.get("filter.retries")?,
        ..RetryPolicy::default()
    };
    let opts = backend.map(|b| LlmOptions {
        backend: b,
        prompt_template: &prompt,
        retry,
    });
    let out = build_subset(&records, &lib, opts.as_ref())?;
    write_lines(&c.out.join("subset.jsonl"), &out.subset)?;
    write_lines(&c.out.join("audit.jsonl"), &out.audit)?;
    write_json(&c.out.join("stats.json"), &out.stats)?;
    mark_done(&c.out)?;
    Ok(out)
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

pub fn run(c: &Common, args: &FilterArgs<'_>) -> Result<SubsetOutput> {
    let backend = if c.config.get::<bool>("filter.llm")? {
        let timeout = Duration::from_millis(c.config.get("filter.timeout_ms")?);
        Some(
            HttpBackend::from_env(timeout)
                .with_context(|| format!("filter.llm is on but {ENV_URL} is not set"))?,
        )
    } else {
        None
    };
    let out = run_with(c, args, backend.as_ref().map(|b| b as &dyn LlmBackend))?;
    let s = &out.stats;
    println!(
        "{} records: {} explicit excluded, {} rule accepted, {} asked, {} LLM accepted, {} in subset",
        s.total,
        s.explicit_excluded,
        s.rule_accepted,
        s.llm_consulted,
        s.llm_accepted,
        out.subset.len()
    );
    Ok(out)
}
