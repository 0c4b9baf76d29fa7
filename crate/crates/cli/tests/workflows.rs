use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crossdiff_cli::eval::ExternalPrediction;
use crossdiff_cli::scenes::{samples, Split};
use crossdiff_core::config::RunConfig;

fn crossdiff(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossdiff"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn defaults_parse_back_to_the_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossdiff(dir.path(), &["defaults"]);
    assert_eq!(code(&o), 0);
    let parsed = RunConfig::parse(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(parsed.hash(), RunConfig::default().hash());
}

#[test]
fn gradcheck_exit_code_follows_the_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let ok = crossdiff(
        &dir.path().join("a"),
        &["--set", "gradcheck.seeds=2", "gradcheck", "--only", "dice"],
    );
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let strict = crossdiff(
        &dir.path().join("b"),
        &[
            "--set",
            "gradcheck.seeds=2",
            "--set",
            "gradcheck.tol=0",
            "gradcheck",
            "--only",
            "dice",
        ],
    );
    assert_eq!(code(&strict), 1);
    assert!(String::from_utf8_lossy(&strict.stdout).contains("FAIL"));
}

#[test]
fn completed_output_is_only_replaced_with_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("scenes");
    let args = [
        "--set",
        "scenes.n_train=2",
        "--set",
        "scenes.n_eval=2",
        "gen-scenes",
    ];
    assert_eq!(code(&crossdiff(&out, &args)), 0);
    let first = fs::read(out.join("train.json")).unwrap();
    let again = crossdiff(&out, &args);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced: Vec<&str> = ["--force"].into_iter().chain(args).collect();
    assert_eq!(code(&crossdiff(&out, &forced)), 0);
    assert_eq!(fs::read(out.join("train.json")).unwrap(), first);
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::default();
    config.set("scenes.n_eval", "6").unwrap();
    let truth: Vec<String> = samples(&config, Split::Eval)
        .unwrap()
        .iter()
        .map(|s| {
            serde_json::to_string(&ExternalPrediction {
                bbox: s.gt_box,
                mask: s.gt_mask.clone(),
            })
            .unwrap()
        })
        .collect();
    let preds = dir.path().join("preds.jsonl");
    fs::write(&preds, truth.join("\n")).unwrap();
    let out = dir.path().join("eval");
    let o = crossdiff(
        &out,
        &[
            "--set",
            "scenes.n_eval=6",
            "eval",
            "--predictions",
            preds.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let overall = &report["overall"];
    assert_eq!(overall["count"], 6);
    for k in ["acc25", "acc50", "mask_acc25", "mask_acc50", "miou"] {
        assert_eq!(overall[k], 1.0, "{k}");
    }

    // one prediction short is an error, not a partial score
    fs::write(&preds, truth[..5].join("\n")).unwrap();
    let short = crossdiff(
        &dir.path().join("eval2"),
        &[
            "--set",
            "scenes.n_eval=6",
            "eval",
            "--predictions",
            preds.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&short), 2);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = crossdiff(dir.path(), &["--set", "model.d_modle=8", "gen-scenes"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_modle"));
}
