use std::fmt::Write as _;
use std::fs;
use std::str::FromStr;

use anyhow::{bail, Result};
use crossdiff_core::model::evaluate;
use crossdiff_core::scenes::{GroupMetrics, SubsetReport};
use serde::Serialize;

use crate::eval::load_model;
use crate::scenes::{samples, Split};
use crate::train::run_dir;
use crate::{mark_done, prepare_dir, write_json, Common, DONE};

/// One grid dimension, parsed from `key=v1,v2,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (k, vs) = s
            .split_once('=')
            .ok_or_else(|| format!("axis {s:?} is not key=v1,v2"))?;
        let values: Vec<String> = vs
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(format!("axis {k:?} has no values"));
        }
        Ok(Self {
            key: k.trim().to_string(),
            values,
        })
    }
}

/// The module on/off grid: PLDA, CLDA and the harmonized loss.
pub fn module_axes() -> Vec<Axis> {
    ["plda.enabled", "clda.enabled", "loss.dgtl_enabled"]
        .into_iter()
        .map(|k| Axis {
            key: k.into(),
            values: vec!["true".into(), "false".into()],
        })
        .collect()
}

/// Every combination, first axis slowest.
pub fn grid(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut out = vec![Vec::new()];
    for a in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                a.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push((a.key.clone(), v.clone()));
                    p
                })
            })
            .collect();
    }
    out
}

/// Held-out metrics averaged over seeds for one subset.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MeanMetrics {
    pub runs: usize,
    pub acc25: f64,
    pub acc50: f64,
    pub miou: f64,
}

impl MeanMetrics {
    fn add(&mut self, g: &Option<GroupMetrics>) {
        if let Some(g) = g {
            self.runs += 1;
            self.acc25 += g.acc25;
            self.acc50 += g.acc50;
            self.miou += g.miou;
        }
    }

    fn finish(mut self) -> Self {
        if self.runs > 0 {
            let n = self.runs as f64;
            self.acc25 /= n;
            self.acc50 /= n;
            self.miou /= n;
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: Vec<(String, String)>,
    pub seeds: Vec<u64>,
    pub overall: MeanMetrics,
    pub unique: MeanMetrics,
    pub multiple: MeanMetrics,
    pub implicit: MeanMetrics,
}

impl AblationRow {
    pub fn label(&self) -> String {
        self.setting
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<60} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "setting", "acc@.25", "acc@.50", "miou", "multiple", "implicit"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<60} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4}",
            r.label(),
            r.overall.acc25,
            r.overall.acc50,
            r.overall.miou,
            r.multiple.acc25,
            r.implicit.acc25
        );
    }
    s
}

/// Trains every grid point for every seed (finished runs under `out/runs`
/// are reused) and reports held-out metrics.
pub fn run(c: &Common, axes: &[Axis], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        bail!("no seeds");
    }
    prepare_dir(&c.out, &c.config, c.force)?;
    let mut rows = Vec::new();
    for setting in grid(axes) {
        let mut sums = [
            MeanMetrics::default(),
            MeanMetrics::default(),
            MeanMetrics::default(),
            MeanMetrics::default(),
        ];
        for &seed in seeds {
            let mut config = c.config.clone();
            for (k, v) in &setting {
                config.set(k, v)?;
            }
            config.set("seed", &seed.to_string())?;
            config.validate()?;
            let sub = Common {
                config,
                out: c.out.join("runs"),
                force: false,
            };
            let dir = run_dir(&sub);
            if !dir.join(DONE).exists() {
                crate::train::run(&sub)?;
            }
            let (config, model) = load_model(&dir)?;
            let report: SubsetReport = evaluate(&model, &samples(&config, Split::Eval)?)?.report;
            for (m, g) in sums.iter_mut().zip([
                &report.overall,
                &report.unique,
                &report.multiple,
                &report.implicit,
            ]) {
                m.add(g);
            }
        }
        let [overall, unique, multiple, implicit] = sums.map(MeanMetrics::finish);
        rows.push(AblationRow {
            setting,
            seeds: seeds.to_vec(),
            overall,
            unique,
            multiple,
            implicit,
        });
    }
    let t = table(&rows);
    fs::write(c.out.join("summary.txt"), &t)?;
    write_json(&c.out.join("summary.json"), &rows)?;
    print!("{t}");
    mark_done(&c.out)?;
    Ok(rows)
}
