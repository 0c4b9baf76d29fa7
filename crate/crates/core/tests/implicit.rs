use std::io::BufReader;
use std::time::Duration;

use crossdiff_core::implicit::*;
use crossdiff_core::scenes::{Corpus, ExpressionFamily, SceneConfig};
use serde::Deserialize;

#[derive(Deserialize)]
struct Labeled {
    #[serde(flatten)]
    record: ReferRecord,
    expected: String,
}

fn labeled() -> Vec<Labeled> {
    let f = std::fs::File::open(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/implicit_labeled.jsonl"
    ))
    .unwrap();
    let recs = read_records(BufReader::new(f)).unwrap();
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/implicit_labeled.jsonl"
    ))
    .unwrap();
    let out: Vec<Labeled> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), out.len());
    out
}

fn label(v: &Verdict) -> String {
    if v.explicit {
        "explicit".into()
    } else {
        v.rule
            .map(|c| c.name().to_string())
            .unwrap_or_else(|| "none".into())
    }
}

#[test]
fn rules_agree_with_hand_labels() {
    let lib = PatternLibrary::default();
    let items = labeled();
    assert_eq!(items.len(), 50);
    let mut disagreements = Vec::new();
    for it in &items {
        let v = classify(&it.record.description, &lib, None).unwrap();
        if label(&v) != it.expected {
            disagreements.push(format!(
                "{:?}: got {}, labeled {}",
                it.record.description,
                label(&v),
                it.expected
            ));
        }
    }
    assert!(disagreements.is_empty(), "{disagreements:#?}");
}

fn rec(i: u64, text: &str) -> ReferRecord {
    ReferRecord {
        scene_id: "scene0000_00".into(),
        object_id: i,
        ann_id: i,
        description: text.into(),
        split: "train".into(),
    }
}

fn fast() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::ZERO,
    }
}

#[test]
fn llm_is_asked_only_about_rule_negatives() {
    let lib = PatternLibrary::default();
    let records = vec![
        rec(0, "the chair above the rug"),
        rec(1, "the lamp resting on the desk"),
        rec(2, "the mug you would grab for coffee"),
    ];
    let plain = build_subset(&records, &lib, None).unwrap();
    assert_eq!(plain.subset.len(), 1);
    assert_eq!(plain.subset[0].record.ann_id, 1);
    assert_eq!(plain.subset[0].source, Source::Rule);
    assert!(plain.audit.is_empty());

    let yes = ScriptedBackend::always(r#"{"label":"yes"}"#);
    let opts = LlmOptions {
        backend: &yes,
        prompt_template: DEFAULT_PROMPT,
        retry: fast(),
    };
    let out = build_subset(&records, &lib, Some(&opts)).unwrap();
    assert_eq!(out.subset.len(), 2);
    assert_eq!(yes.calls().len(), 1);
    assert!(yes.calls()[0].contains("the mug you would grab for coffee"));
    let flagged: Vec<u64> = out
        .subset
        .iter()
        .filter(|r| r.flagged)
        .map(|r| r.record.ann_id)
        .collect();
    assert_eq!(flagged, vec![2]);
    assert_eq!(out.audit.len(), 1);
    assert_eq!(out.stats.explicit_excluded, 1);
    assert_eq!(out.stats.llm_accepted, 1);

    let no = ScriptedBackend::always(r#"{"label":"no"}"#);
    let opts = LlmOptions {
        backend: &no,
        prompt_template: DEFAULT_PROMPT,
        retry: fast(),
    };
    assert_eq!(
        build_subset(&records, &lib, Some(&opts)).unwrap().subset,
        plain.subset
    );
}

#[test]
fn unavailable_backend_aborts() {
    let lib = PatternLibrary::default();
    let down = ScriptedBackend::new(vec![Err(BackendError::Timeout)]);
    let opts = LlmOptions {
        backend: &down,
        prompt_template: DEFAULT_PROMPT,
        retry: fast(),
    };
    let err = build_subset(&[rec(0, "the mug for coffee")], &lib, Some(&opts)).unwrap_err();
    assert!(matches!(
        err,
        ImplicitError::Llm(LlmError::Unavailable { attempts: 3, .. })
    ));
    assert_eq!(down.calls().len(), 3);
}

#[test]
fn rule_only_output_is_stable() {
    let lib = PatternLibrary::default();
    let records: Vec<ReferRecord> = labeled().into_iter().map(|l| l.record).collect();
    let a = build_subset(&records, &lib, None).unwrap();
    let b = build_subset(&records, &lib, None).unwrap();
    let mut ja = Vec::new();
    let mut jb = Vec::new();
    write_jsonl(&mut ja, &a.subset).unwrap();
    write_jsonl(&mut jb, &b.subset).unwrap();
    assert_eq!(ja, jb);
    assert_eq!(a.stats.per_split.values().sum::<usize>(), a.subset.len());
}

#[test]
fn generated_expressions_filter_by_family() {
    let lib = PatternLibrary::default();
    let corpus = Corpus::generate(77, 60, 3, &SceneConfig::default()).unwrap();
    for e in &corpus.entries {
        for x in &e.expressions {
            let v = classify(&x.text, &lib, None).unwrap();
            match x.family {
                ExpressionFamily::Attribute => assert!(!v.explicit && !v.accepted, "{}", x.text),
                ExpressionFamily::Explicit => assert!(v.explicit, "{}", x.text),
                ExpressionFamily::Implicit => assert_eq!(v.rule, x.category, "{}", x.text),
            }
        }
    }
}
