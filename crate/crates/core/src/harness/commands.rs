//! One function per CLI subcommand. Each reads its inputs from and writes
//! its outputs to an experiment directory.

use std::fmt::Write as _;

use crate::harness::artifacts::{write_json, write_text, Artifacts};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::{build_tracks, generate_dataset};
use crate::harness::eval::{eval_closed_loop, Agent, EvalReport};
use crate::harness::report::{report, ReportSummary};
use crate::harness::train::{finetune_cvar, grid_search_weights, train, GridRow};
use crate::harness::verify::{run_verify, VerifyReport};
use crate::harness::HarnessError;
use crate::network::Model;

/// Records the dataset and a small recording report next to it.
pub fn gen_data(art: &Artifacts, cfg: &ExperimentConfig) -> Result<usize, HarnessError> {
    let (ds, rep) = generate_dataset(cfg)?;
    art.write_dataset(&ds)?;
    write_json(&art.root.join("recording.json"), &rep)?;
    if !rep.expert_collisions.is_empty() {
        return Err(HarnessError::Invalid(format!("expert collided: {:?}", rep.expert_collisions)));
    }
    Ok(ds.records.len())
}

/// Trains the configured model and stores it under its model name. A
/// diverged run still saves the last good checkpoint, then reports failure.
pub fn train_cmd(art: &Artifacts, cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let ds = art.read_dataset()?;
    let out = train(&ds, cfg)?;
    let name = cfg.model.name();
    art.write_checkpoint(&name, &out.checkpoint)?;
    match out.diverged {
        Some(msg) => Err(HarnessError::Diverged(msg)),
        None => Ok(name),
    }
}

/// Fine-tunes `<name>` into `<name>-cvar`.
pub fn finetune_cmd(art: &Artifacts, cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let ds = art.read_dataset()?;
    let base = cfg.model.name();
    let ck = art.read_checkpoint(&base)?;
    let out = finetune_cvar(&ck, &ds, cfg)?;
    let name = format!("{base}-cvar");
    art.write_checkpoint(&name, &out.checkpoint)?;
    match out.diverged {
        Some(msg) => Err(HarnessError::Diverged(msg)),
        None => Ok(name),
    }
}

/// Evaluates `eval.agent` (a checkpoint name or "expert"; the model name
/// when unset) on the validation tracks.
pub fn eval_cmd(art: &Artifacts, cfg: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    let name = cfg.eval.agent.clone().unwrap_or_else(|| cfg.model.name());
    let (_, val) = build_tracks(cfg)?;
    let (report, traces) = if name == "expert" {
        eval_closed_loop(Agent::Expert, &name, &val, cfg)?
    } else {
        let model = Model::new(art.read_checkpoint(&name)?)?;
        eval_closed_loop(Agent::Model(&model), &name, &val, cfg)?
    };
    art.write_eval(&report, &traces)?;
    Ok(report)
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("w_aff,train_loss,val_loss,val_traj_loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.9},{:.9},{:.9}", r.w_aff, r.train_loss, r.val_loss, r.val_traj_loss);
    }
    s
}

pub fn grid_cmd(art: &Artifacts, cfg: &ExperimentConfig) -> Result<(f64, Vec<GridRow>), HarnessError> {
    let ds = art.read_dataset()?;
    let (best, rows) = grid_search_weights(&ds, cfg, &cfg.grid.w_aff)?;
    let dir = art.grid_dir();
    write_text(&dir.join("grid.csv"), &grid_csv(&rows))?;
    write_json(&dir.join("grid.json"), &serde_json::json!({ "best_w_aff": best, "rows": rows }))?;
    Ok((best, rows))
}

pub fn report_cmd(art: &Artifacts, cfg: &ExperimentConfig) -> Result<ReportSummary, HarnessError> {
    report(art, cfg)
}

/// Runs the oracles and writes `verify.json`. The caller decides the exit
/// status from [`VerifyReport::passed`].
pub fn verify_cmd(art: &Artifacts, cfg: &ExperimentConfig) -> Result<VerifyReport, HarnessError> {
    let rep = run_verify(cfg.seed)?;
    write_json(&art.root.join("verify.json"), &rep)?;
    Ok(rep)
}
