//! Flat-file reports: ablation table, CVaR-per-percentile curves, loss
//! curves and a summary. Metrics are recomputed from the episode traces.

use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::harness::artifacts::{write_json, write_text, Artifacts};
use crate::harness::config::ExperimentConfig;
use crate::harness::eval::{report_from_traces, EvalReport};
use crate::harness::train::{checkpoint_losses, prepare_for_checkpoint};
use crate::harness::HarnessError;
use crate::losses::{cvar_estimate, cvar_percentile_curve};
use crate::network::EpochRecord;

/// Order of the ablation ladder; other agents follow alphabetically.
pub const ABLATION_ORDER: [&str; 4] =
    ["baseline-actuation", "trajectory-gmm", "trajectory-gmm-aff", "trajectory-gmm-aff-cvar"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub agent: String,
    pub miles: f64,
    pub collisions: usize,
    pub collisions_per_100mi: f64,
    pub mean_speed_mph: f64,
}

impl From<&EvalReport> for AblationRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            agent: r.agent.clone(),
            miles: r.miles_driven,
            collisions: r.collisions,
            collisions_per_100mi: r.collisions_per_100mi,
            mean_speed_mph: r.mean_speed_mph,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub checkpoint: String,
    pub phase: String,
    pub split: String,
    pub mean: f64,
    pub cvar90: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub generated_unix_s: u64,
    pub config: ExperimentConfig,
    pub ablation: Vec<AblationRow>,
    pub curves: Vec<CurveSummary>,
    pub files: Vec<String>,
}

fn ladder_key(name: &str) -> (usize, String) {
    let rank = ABLATION_ORDER.iter().position(|n| *n == name).unwrap_or(ABLATION_ORDER.len());
    (rank, name.to_string())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("agent,miles,collisions,collisions_per_100mi,mean_speed_mph\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.3},{},{:.3},{:.2}", r.agent, r.miles, r.collisions, r.collisions_per_100mi, r.mean_speed_mph);
    }
    s
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<28} {:>9} {:>10} {:>14} {:>9}\n", "agent", "miles", "collisions", "per 100 mi", "mph");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} {:>9.1} {:>10} {:>14.2} {:>9.1}",
            r.agent, r.miles, r.collisions, r.collisions_per_100mi, r.mean_speed_mph
        );
    }
    s
}

pub fn curve_csv(curve: &[(u32, f64)]) -> String {
    let mut s = String::from("p,cvar\n");
    for (p, c) in curve {
        let _ = writeln!(s, "{p},{c:.9}");
    }
    s
}

pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("phase,epoch,train_loss,val_loss,val_traj_loss,val_cvar90\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{:.9},{:.9},{:.9},{:.9}",
            h.phase, h.epoch, h.train_loss, h.val_loss, h.val_traj_loss, h.val_cvar90
        );
    }
    s
}

/// Writes the report files under `<out>/report`. Needs at least one
/// evaluated agent; CVaR curves additionally need the dataset when any
/// checkpoint exists.
pub fn report(art: &Artifacts, cfg: &ExperimentConfig) -> Result<ReportSummary, HarnessError> {
    let mut evals = art.eval_names()?;
    let checkpoints = art.checkpoint_names()?;
    let mut missing = Vec::new();
    if evals.is_empty() {
        missing.push(art.root.join("eval/<agent>/traces.jsonl").display().to_string());
    }
    if !checkpoints.is_empty() && !art.dataset_path().exists() {
        missing.push(art.dataset_path().display().to_string());
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingInputs(missing));
    }
    evals.sort_by_key(|n| ladder_key(n));
    let dir = art.report_dir();
    let mut files = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), HarnessError> {
        write_text(&dir.join(&name), &text)?;
        files.push(name);
        Ok(())
    };

    let mut ablation = Vec::with_capacity(evals.len());
    for name in &evals {
        ablation.push(AblationRow::from(&report_from_traces(name.clone(), &art.read_traces(name)?)));
    }
    put("ablation.csv".into(), ablation_csv(&ablation))?;
    put("ablation.txt".into(), ablation_text(&ablation))?;

    let mut curves = Vec::new();
    if !checkpoints.is_empty() {
        let dataset = art.read_dataset()?;
        for name in &checkpoints {
            let ck = art.read_checkpoint(name)?;
            put(format!("loss_{name}.csv"), loss_csv(&ck.meta.history))?;
            let data = prepare_for_checkpoint(&ck, &dataset)?;
            let (train, val) = checkpoint_losses(&ck, &data)?;
            let phase = ck.meta.history.last().map_or("init".to_string(), |h| h.phase.clone());
            for (split, losses) in [("train", &train.total), ("val", &val.total)] {
                put(format!("cvar_{name}_{split}.csv"), curve_csv(&cvar_percentile_curve(losses)?))?;
                curves.push(CurveSummary {
                    checkpoint: name.clone(),
                    phase: phase.clone(),
                    split: split.into(),
                    mean: losses.iter().sum::<f64>() / losses.len() as f64,
                    cvar90: cvar_estimate(losses, 0.9)?,
                });
            }
        }
    }
    files.push("summary.json".into());
    let summary = ReportSummary {
        generated_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        config: cfg.clone(),
        ablation,
        curves,
        files,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_schemas() {
        let rows = vec![AblationRow {
            agent: "trajectory-gmm".into(),
            miles: 100.0,
            collisions: 3,
            collisions_per_100mi: 3.0,
            mean_speed_mph: 47.5,
        }];
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "agent,miles,collisions,collisions_per_100mi,mean_speed_mph");
        assert_eq!(csv.lines().nth(1).unwrap(), "trajectory-gmm,100.000,3,3.000,47.50");
        let curve = cvar_percentile_curve(&(1..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
        let text = curve_csv(&curve);
        assert_eq!(text.lines().count(), 21);
        assert!(text.lines().nth(20).unwrap().starts_with("95,"));
    }

    #[test]
    fn ladder_sorts_known_agents_first() {
        let mut names = vec!["expert", "trajectory-gmm-aff-cvar", "baseline-actuation", "trajectory-gmm"];
        names.sort_by_key(|n| ladder_key(n));
        assert_eq!(names, ["baseline-actuation", "trajectory-gmm", "trajectory-gmm-aff-cvar", "expert"]);
    }

    #[test]
    fn missing_inputs_are_named() {
        let dir = std::env::temp_dir().join(format!("tc-report-missing-{}", std::process::id()));
        let err = report(&Artifacts::new(&dir), &ExperimentConfig::default()).unwrap_err();
        match err {
            HarnessError::MissingInputs(names) => assert!(names[0].contains("traces.jsonl")),
            e => panic!("unexpected {e}"),
        }
    }
}
