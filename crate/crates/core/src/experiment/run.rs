//! Run directories: resolved config, per-stage logs and checkpoints, the
//! evaluation report, and a manifest (plus a failure manifest on error).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::summary_csv;
use crate::jsonl;
use crate::policy::{write_policy, write_value_head};

use super::config::{ExperimentConfig, Stage};
use super::pipeline::Pipeline;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURE_FILE: &str = "failure.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub completed: Vec<Stage>,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureManifest {
    pub stage: Stage,
    pub error: String,
    pub completed: Vec<Stage>,
}

/// Log files a completed stage leaves behind, relative to the run directory.
pub fn stage_logs(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Pretrain => &["pretrain/log.jsonl"],
        Stage::Sft => &["sft/log.jsonl"],
        Stage::SftExtended => &["sft_extended/log.jsonl"],
        Stage::Ppo => &["ppo/metrics.jsonl"],
        Stage::OraclePpo => &["oracle_ppo/metrics.jsonl"],
        Stage::Eval => &["eval/report.jsonl"],
        Stage::LengthStudy => &["length_study/token_wise.jsonl", "length_study/sequence_at_eos.jsonl"],
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("manifest serialises");
    s.push('\n');
    write_text(path, &s)
}

fn persist_stage(p: &Pipeline<f64>, stage: Stage, dir: &Path) -> Result<()> {
    let sub = dir.join(stage.as_str());
    mkdir(&sub)?;
    match stage {
        Stage::Pretrain | Stage::Sft | Stage::SftExtended => {
            let out = match stage {
                Stage::Pretrain => p.pretrained.as_ref(),
                Stage::Sft => p.sft.as_ref(),
                _ => p.sft_extended.as_ref(),
            }
            .expect("stage produced a policy");
            jsonl::write(&sub.join("log.jsonl"), &out.log)?;
            write_policy(&sub.join("checkpoint.bin"), &out.policy)?;
        }
        Stage::Ppo => {
            let out = p.ppo.as_ref().expect("ppo ran");
            jsonl::write(&sub.join("metrics.jsonl"), &out.metrics)?;
            jsonl::write(&sub.join("warmup.jsonl"), &out.warmup)?;
            write_policy(&sub.join("actor.bin"), &out.actor)?;
            write_value_head(&sub.join("critic.bin"), &out.critic)?;
        }
        Stage::OraclePpo => {
            jsonl::write(&sub.join("metrics.jsonl"), p.oracle_ppo.as_ref().expect("oracle ran"))?;
        }
        Stage::Eval => {
            jsonl::write(&sub.join("report.jsonl"), &p.reports)?;
            write_text(&sub.join("summary.csv"), &summary_csv(&p.reports))?;
        }
        Stage::LengthStudy => {
            let ls = p.length_study.as_ref().expect("length study ran");
            jsonl::write(&sub.join("token_wise.jsonl"), &ls.token_wise)?;
            jsonl::write(&sub.join("sequence_at_eos.jsonl"), &ls.sequence_at_eos)?;
        }
    }
    Ok(())
}

fn persist_data(p: &Pipeline<f64>, dir: &Path) -> Result<()> {
    let data = dir.join("data");
    mkdir(&data)?;
    let d = p.data();
    jsonl::write_prompts(&data.join("sft_prompts.jsonl"), &d.sft_prompts)?;
    jsonl::write_demonstrations(&data.join("demos.jsonl"), &d.demos)?;
    if let Some(s2) = &d.stage2_demos {
        jsonl::write_demonstrations(&data.join("annotated_demos.jsonl"), s2)?;
    }
    jsonl::write_prompts(&data.join("ppo_prompts.jsonl"), &d.ppo_prompts)?;
    jsonl::write_demonstrations(&data.join("heldout_demos.jsonl"), &d.heldout.heldout_demos)?;
    Ok(())
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Executes every configured stage, writing each stage's artifacts as soon
/// as it finishes. On a stage error the outputs of earlier stages stay in
/// place and `failure.json` records what broke.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    if dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Config(format!(
            "output_dir {} already holds a run",
            dir.display()
        )));
    }
    mkdir(&dir)?;
    let text = cfg.to_toml()?;
    if ExperimentConfig::from_toml(&text)? != *cfg {
        return Err(Error::Invariant("config does not survive a serialisation round-trip".into()));
    }
    write_text(&dir.join(CONFIG_FILE), &text)?;

    let mut manifest = Manifest {
        name: cfg.name.clone(),
        seed: cfg.seed,
        stages: cfg.stages.clone(),
        completed: vec![],
        status: "running".into(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;

    let mut pipeline = Pipeline::<f64>::new(cfg)?;
    persist_data(&pipeline, &dir)?;
    let mut stages = cfg.stages.clone();
    stages.sort();
    for stage in stages {
        let outcome = pipeline
            .run_stage(stage)
            .and_then(|_| persist_stage(&pipeline, stage, &dir));
        if let Err(e) = outcome {
            manifest.status = "failed".into();
            write_json(&dir.join(MANIFEST_FILE), &manifest)?;
            write_json(
                &dir.join(FAILURE_FILE),
                &FailureManifest {
                    stage,
                    error: e.to_string(),
                    completed: manifest.completed.clone(),
                },
            )?;
            return Err(e);
        }
        manifest.completed.push(stage);
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    manifest.status = "completed".into();
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunSummary { dir, manifest })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}
