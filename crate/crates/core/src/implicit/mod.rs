//! Rule-first detection of implicit spatial relations in referring
//! expressions, with an optional LLM fallback for texts the rules miss.
//!
//! For each record: texts with an explicit spatial marker are dropped; texts
//! matching an implicit pattern are accepted; otherwise, when enabled, the
//! LLM is asked and a positive answer is accepted but flagged for review.

mod backend;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use backend::{
    llm_classify, parse_label, BackendError, FnBackend, HttpBackend, LlmBackend, LlmError,
    RetryPolicy, ScriptedBackend, ENV_API_KEY, ENV_URL,
};

pub use crate::scenes::ImplicitCategory;

pub const DEFAULT_PATTERNS: &str = include_str!("patterns.toml");
pub const DEFAULT_PROMPT: &str = include_str!("prompt.txt");

#[derive(Debug, thiserror::Error)]
pub enum ImplicitError {
    #[error("pattern library: {0}")]
    Library(String),
    #[error("pattern {0:?} appears in both the explicit and implicit libraries")]
    Overlap(String),
    #[error("bad pattern {pattern:?}: {source}")]
    Regex {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Deserialize)]
struct LibraryFile {
    explicit: Vec<String>,
    implicit: ImplicitFile,
}

#[derive(Deserialize)]
struct ImplicitFile {
    physical: Vec<String>,
    functional: Vec<String>,
    contextual: Vec<String>,
}

/// Compiled explicit markers and implicit patterns.
#[derive(Clone, Debug)]
pub struct PatternLibrary {
    pub explicit: Vec<String>,
    pub implicit: Vec<(ImplicitCategory, Vec<String>)>,
    explicit_re: Regex,
    implicit_re: Vec<(ImplicitCategory, Regex)>,
}

fn compile(patterns: &[String]) -> Result<Regex, ImplicitError> {
    for p in patterns {
        Regex::new(p).map_err(|source| ImplicitError::Regex {
            pattern: p.clone(),
            source,
        })?;
    }
    let alt = patterns
        .iter()
        .map(|p| format!("(?:{p})"))
        .collect::<Vec<_>>()
        .join("|");
    let src = format!(r"(?i)\b(?:{alt})\b");
    Regex::new(&src).map_err(|source| ImplicitError::Regex {
        pattern: src,
        source,
    })
}

impl PatternLibrary {
    pub fn new(
        explicit: Vec<String>,
        implicit: Vec<(ImplicitCategory, Vec<String>)>,
    ) -> Result<Self, ImplicitError> {
        if explicit.is_empty() {
            return Err(ImplicitError::Library("no explicit markers".into()));
        }
        for (_, pats) in &implicit {
            for p in pats {
                if explicit.iter().any(|e| e.eq_ignore_ascii_case(p)) {
                    return Err(ImplicitError::Overlap(p.clone()));
                }
            }
        }
        let explicit_re = compile(&explicit)?;
        let implicit_re = implicit
            .iter()
            .filter(|(_, p)| !p.is_empty())
            .map(|(c, p)| compile(p).map(|r| (*c, r)))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            explicit,
            implicit,
            explicit_re,
            implicit_re,
        })
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ImplicitError> {
        let f: LibraryFile =
            toml::from_str(s).map_err(|e| ImplicitError::Library(e.to_string()))?;
        Self::new(
            f.explicit,
            vec![
                (ImplicitCategory::Physical, f.implicit.physical),
                (ImplicitCategory::Functional, f.implicit.functional),
                (ImplicitCategory::Contextual, f.implicit.contextual),
            ],
        )
    }

    pub fn from_path(path: &Path) -> Result<Self, ImplicitError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

impl Default for PatternLibrary {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_PATTERNS).expect("bundled pattern library is valid")
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn match_explicit(text: &str, lib: &PatternLibrary) -> bool {
    lib.explicit_re.is_match(&normalize(text))
}

/// First matching category, tried in library order.
pub fn match_implicit(text: &str, lib: &PatternLibrary) -> Option<ImplicitCategory> {
    let t = normalize(text);
    lib.implicit_re
        .iter()
        .find(|(_, r)| r.is_match(&t))
        .map(|(c, _)| *c)
}

/// Outcome for one text.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub explicit: bool,
    pub rule: Option<ImplicitCategory>,
    pub llm: Option<bool>,
    pub accepted: bool,
    /// Rule and LLM disagree. The LLM is only asked on rule-negative texts,
    /// so this is set exactly for LLM-accepted records.
    pub flagged: bool,
}

/// One line of the input corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferRecord {
    pub scene_id: String,
    pub object_id: u64,
    pub ann_id: u64,
    pub description: String,
    pub split: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Rule,
    Llm,
}

/// Accepted record with provenance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetRecord {
    #[serde(flatten)]
    pub record: ReferRecord,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<ImplicitCategory>,
    pub flagged: bool,
}

/// Audit line for every LLM consultation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditEntry {
    pub index: usize,
    pub ann_id: u64,
    pub scene_id: String,
    pub description: String,
    pub llm_label: bool,
    pub flagged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SubsetStats {
    pub total: usize,
    pub explicit_excluded: usize,
    pub rule_accepted: usize,
    pub llm_consulted: usize,
    pub llm_accepted: usize,
    /// Accepted records per input split.
    pub per_split: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetOutput {
    pub subset: Vec<SubsetRecord>,
    pub audit: Vec<AuditEntry>,
    pub verdicts: Vec<Verdict>,
    pub stats: SubsetStats,
}

pub struct LlmOptions<'a> {
    pub backend: &'a dyn LlmBackend,
    pub prompt_template: &'a str,
    pub retry: RetryPolicy,
}

/// Classifies one text; `llm` is consulted only for rule-negative, non-explicit texts.
pub fn classify(
    text: &str,
    lib: &PatternLibrary,
    llm: Option<&LlmOptions<'_>>,
) -> Result<Verdict, ImplicitError> {
    if match_explicit(text, lib) {
        return Ok(Verdict {
            explicit: true,
            rule: None,
            llm: None,
            accepted: false,
            flagged: false,
        });
    }
    if let Some(cat) = match_implicit(text, lib) {
        return Ok(Verdict {
            explicit: false,
            rule: Some(cat),
            llm: None,
            accepted: true,
            flagged: false,
        });
    }
    let llm = match llm {
        Some(o) => Some(llm_classify(text, o.backend, o.prompt_template, &o.retry)?),
        None => None,
    };
    let yes = llm == Some(true);
    Ok(Verdict {
        explicit: false,
        rule: None,
        llm,
        accepted: yes,
        flagged: yes,
    })
}

/// Filters `records`, keeping input order. With `llm = None` the result
/// depends only on the corpus and the library.
pub fn build_subset(
    records: &[ReferRecord],
    lib: &PatternLibrary,
    llm: Option<&LlmOptions<'_>>,
) -> Result<SubsetOutput, ImplicitError> {
    let mut out = SubsetOutput {
        subset: Vec::new(),
        audit: Vec::new(),
        verdicts: Vec::with_capacity(records.len()),
        stats: SubsetStats {
            total: records.len(),
            ..Default::default()
        },
    };
    for (index, r) in records.iter().enumerate() {
        let v = classify(&r.description, lib, llm)?;
        if v.explicit {
            out.stats.explicit_excluded += 1;
        }
        if v.rule.is_some() {
            out.stats.rule_accepted += 1;
        }
        if let Some(label) = v.llm {
            out.stats.llm_consulted += 1;
            if label {
                out.stats.llm_accepted += 1;
            }
            out.audit.push(AuditEntry {
                index,
                ann_id: r.ann_id,
                scene_id: r.scene_id.clone(),
                description: r.description.clone(),
                llm_label: label,
                flagged: v.flagged,
            });
        }
        if v.accepted {
            *out.stats.per_split.entry(r.split.clone()).or_default() += 1;
            out.subset.push(SubsetRecord {
                record: r.clone(),
                source: if v.rule.is_some() {
                    Source::Rule
                } else {
                    Source::Llm
                },
                category: v.rule,
                flagged: v.flagged,
            });
        }
        out.verdicts.push(v);
    }
    Ok(out)
}

pub fn read_records(reader: impl BufRead) -> Result<Vec<ReferRecord>, ImplicitError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| ImplicitError::Corpus {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_library_shape() {
        let lib = PatternLibrary::default();
        assert!(lib.explicit.len() >= 20);
        for m in ["above", "below", "left", "right", "between", "next to"] {
            assert!(lib.explicit.iter().any(|e| e == m), "{m}");
        }
        for (_, p) in &lib.implicit {
            assert!(p.len() >= 8);
        }
    }

    #[test]
    fn explicit_markers() {
        let lib = PatternLibrary::default();
        assert!(match_explicit("the chair above the table", &lib));
        assert!(!match_explicit("the red chair", &lib));
        assert!(match_explicit("ABOVE the shelf", &lib));
        assert!(!match_explicit("the abovementioned lamp", &lib));
        assert!(match_explicit("the lamp  next\tto the bed", &lib));
    }

    #[test]
    fn implicit_categories() {
        let lib = PatternLibrary::default();
        assert_eq!(
            match_implicit("the table resting on the rug", &lib),
            Some(ImplicitCategory::Physical)
        );
        assert_eq!(
            match_implicit("the shelf supporting the vase", &lib),
            Some(ImplicitCategory::Functional)
        );
        assert_eq!(match_implicit("a plain wall", &lib), None);
        // physical wins over functional when both match
        assert_eq!(
            match_implicit("the box holding books resting on the desk", &lib),
            Some(ImplicitCategory::Physical)
        );
    }

    #[test]
    fn overlapping_libraries_rejected() {
        let err = PatternLibrary::new(
            vec!["above".into()],
            vec![(ImplicitCategory::Physical, vec!["Above".into()])],
        );
        assert!(matches!(err, Err(ImplicitError::Overlap(_))));
        assert!(PatternLibrary::new(vec!["(".into()], vec![]).is_err());
    }
}
