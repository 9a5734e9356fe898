//! Stage commands over a run directory. Each stage persists its artifacts,
//! records content hashes, and can be re-run in isolation from the
//! artifacts already on disk.

use std::path::{Path, PathBuf};
use std::time::Instant;

use megatron_core::artifact::sha256_file;
use megatron_core::dataset::load_poisoned_dataset;
use megatron_core::error::Stage;
use megatron_core::harness::{
    derive_sub_triggers, run_experiment, stage_dataset, stage_evaluate, stage_gen_trigger,
    stage_poison, stage_train_surrogate, stage_train_victim, EvalInputs, ExperimentConfig, RunDir,
    PHI_A, PHI_D,
};
use megatron_core::poison::PoisonRecord;
use megatron_core::trigger::{load_trigger, save_trigger, TriggerArtifactMeta};
use megatron_core::vit::{load_checkpoint, save_checkpoint};
use megatron_core::{Error, Result};

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub run_dir: RunDir,
    pub force: bool,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out: &Path, force: bool) -> Result<Self> {
        Ok(Self {
            cfg,
            run_dir: RunDir::new(out)?,
            force,
        })
    }

    /// Write the resolved config snapshot, or check it matches the one the
    /// run directory was started with.
    fn ensure_config_snapshot(&self) -> Result<()> {
        let path = self.run_dir.config_path();
        let rendered = serde_json::to_string_pretty(&self.cfg)
            .map_err(megatron_core::Error::from)?;
        if path.exists() {
            let existing = std::fs::read_to_string(&path)?;
            if existing != rendered {
                return Err(Error::Integrity(format!(
                    "{} was produced by a different configuration; \
                     use a fresh --out directory",
                    path.display()
                )));
            }
            return Ok(());
        }
        std::fs::write(path, rendered)?;
        Ok(())
    }

    fn refuse_overwrite(&self, what: &str, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(Error::UnsafeOverwrite(format!(
                "{what} already exists at {}; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(())
    }
}

pub fn cmd_train_surrogate(ctx: &Ctx) -> Result<PathBuf> {
    ctx.ensure_config_snapshot()?;
    let out = ctx.run_dir.surrogate_path();
    ctx.refuse_overwrite("surrogate checkpoint", &out)?;
    let t0 = Instant::now();
    let dataset = stage_dataset(&ctx.cfg)?;
    let surrogate = stage_train_surrogate(&ctx.cfg, &dataset.train)?;
    save_checkpoint(&surrogate, &out)?;
    ctx.run_dir.record_stage(
        Stage::TrainSurrogate,
        &[("config", ctx.run_dir.config_path().as_path())],
        &[("surrogate", out.as_path())],
    )?;
    ctx.run_dir.log(&format!(
        "stage=train-surrogate wall_clock_secs={:.3}",
        t0.elapsed().as_secs_f64()
    ))?;
    Ok(out)
}

pub fn cmd_gen_trigger(ctx: &Ctx) -> Result<PathBuf> {
    ctx.ensure_config_snapshot()?;
    let surrogate_path = ctx.run_dir.surrogate_path();
    ctx.run_dir
        .verify_upstream(Stage::TrainSurrogate, "surrogate", &surrogate_path)?;
    let out_dir = ctx.run_dir.trigger_dir();
    ctx.refuse_overwrite("trigger artifact", &out_dir.join("trigger.json"))?;
    let t0 = Instant::now();
    let surrogate = load_checkpoint(&surrogate_path)?;
    let dataset = stage_dataset(&ctx.cfg)?;
    let (trigger, _subs) = stage_gen_trigger(&ctx.cfg, &surrogate, &dataset.train)?;
    let meta = TriggerArtifactMeta {
        format_version: 1,
        top: trigger.top,
        left: trigger.left,
        gamma: ctx.cfg.trigger.gamma,
        k: ctx.cfg.poison.k,
        phi_a: PHI_A,
        phi_d: PHI_D,
        final_loss: trigger.final_loss,
        iterations_used: trigger.iterations_used,
        seed: ctx.cfg.trigger_seed(),
        config_hash: sha256_file(&ctx.run_dir.config_path())?,
    };
    save_trigger(&trigger, &meta, &out_dir)?;
    ctx.run_dir.record_stage(
        Stage::GenTrigger,
        &[("surrogate", surrogate_path.as_path())],
        &[("trigger", out_dir.join("trigger.json").as_path())],
    )?;
    ctx.run_dir.log(&format!(
        "stage=gen-trigger wall_clock_secs={:.3}",
        t0.elapsed().as_secs_f64()
    ))?;
    Ok(out_dir)
}

pub fn cmd_poison(ctx: &Ctx) -> Result<PathBuf> {
    ctx.ensure_config_snapshot()?;
    let surrogate_path = ctx.run_dir.surrogate_path();
    let trigger_meta = ctx.run_dir.trigger_dir().join("trigger.json");
    ctx.run_dir
        .verify_upstream(Stage::TrainSurrogate, "surrogate", &surrogate_path)?;
    ctx.run_dir
        .verify_upstream(Stage::GenTrigger, "trigger", &trigger_meta)?;
    let manifest = ctx.run_dir.poisoned_manifest_path();
    ctx.refuse_overwrite("poisoned dataset", &manifest)?;
    let t0 = Instant::now();
    let surrogate = load_checkpoint(&surrogate_path)?;
    let artifact = load_trigger(&ctx.run_dir.trigger_dir())?;
    let subs = derive_sub_triggers(&artifact.trigger, &ctx.cfg)?;
    let dataset = stage_dataset(&ctx.cfg)?;
    let location = (artifact.trigger.top, artifact.trigger.left);
    let (poisoned, records) =
        stage_poison(&ctx.cfg, &surrogate, &dataset.train, &subs, location)?;
    megatron_core::dataset::save_poisoned_dataset(&ctx.run_dir.poisoned_dir(), &poisoned, &records)?;
    ctx.run_dir.record_stage(
        Stage::Poison,
        &[
            ("surrogate", surrogate_path.as_path()),
            ("trigger", trigger_meta.as_path()),
        ],
        &[("poisoned", manifest.as_path())],
    )?;
    ctx.run_dir.log(&format!(
        "stage=poison wall_clock_secs={:.3}",
        t0.elapsed().as_secs_f64()
    ))?;
    Ok(ctx.run_dir.poisoned_dir())
}

pub fn cmd_train_victim(ctx: &Ctx) -> Result<PathBuf> {
    ctx.ensure_config_snapshot()?;
    let manifest = ctx.run_dir.poisoned_manifest_path();
    ctx.run_dir
        .verify_upstream(Stage::Poison, "poisoned", &manifest)?;
    let victim_path = ctx.run_dir.victim_path();
    ctx.refuse_overwrite("victim checkpoint", &victim_path)?;
    let t0 = Instant::now();
    // The victim sees only the poisoned dataset artifact.
    let (poisoned, _entries) = load_poisoned_dataset(&ctx.run_dir.poisoned_dir())?;
    let victim = stage_train_victim(&ctx.cfg, &poisoned)?;
    save_checkpoint(&victim, &victim_path)?;
    // Clean-baseline victim for the no-backdoor reference, same seed.
    let dataset = stage_dataset(&ctx.cfg)?;
    let baseline = stage_train_victim(&ctx.cfg, &dataset.train)?;
    save_checkpoint(&baseline, &ctx.run_dir.baseline_path())?;
    ctx.run_dir.record_stage(
        Stage::TrainVictim,
        &[("poisoned", manifest.as_path())],
        &[
            ("victim", victim_path.as_path()),
            ("baseline", ctx.run_dir.baseline_path().as_path()),
        ],
    )?;
    ctx.run_dir.log(&format!(
        "stage=train-victim wall_clock_secs={:.3}",
        t0.elapsed().as_secs_f64()
    ))?;
    Ok(victim_path)
}

pub fn cmd_evaluate(ctx: &Ctx) -> Result<PathBuf> {
    ctx.ensure_config_snapshot()?;
    let victim_path = ctx.run_dir.victim_path();
    let baseline_path = ctx.run_dir.baseline_path();
    ctx.run_dir
        .verify_upstream(Stage::TrainVictim, "victim", &victim_path)?;
    ctx.run_dir
        .verify_upstream(Stage::TrainVictim, "baseline", &baseline_path)?;
    let trigger_meta = ctx.run_dir.trigger_dir().join("trigger.json");
    ctx.run_dir
        .verify_upstream(Stage::GenTrigger, "trigger", &trigger_meta)?;
    let manifest = ctx.run_dir.poisoned_manifest_path();
    ctx.run_dir
        .verify_upstream(Stage::Poison, "poisoned", &manifest)?;
    let report_path = ctx.run_dir.report_path();
    ctx.refuse_overwrite("report", &report_path)?;

    let t0 = Instant::now();
    let victim = load_checkpoint(&victim_path)?;
    let baseline = load_checkpoint(&baseline_path)?;
    let artifact = load_trigger(&ctx.run_dir.trigger_dir())?;
    let subs = derive_sub_triggers(&artifact.trigger, &ctx.cfg)?;
    let dataset = stage_dataset(&ctx.cfg)?;
    let (poisoned_samples, entries) = load_poisoned_dataset(&ctx.run_dir.poisoned_dir())?;
    let records: Vec<PoisonRecord> = entries
        .iter()
        .filter(|e| e.is_poisoned)
        .map(|e| -> Result<PoisonRecord> {
            let need = |x: Option<f64>| {
                x.ok_or_else(|| Error::Integrity("poison manifest entry missing fields".into()))
            };
            Ok(PoisonRecord {
                poisoned: poisoned_samples[e.sample_id].clone(),
                target_origin: e.sample_id,
                patched_source_id: e
                    .patched_source_id
                    .ok_or_else(|| Error::Integrity("manifest missing source id".into()))?,
                sub_trigger_index: e
                    .sub_trigger_index
                    .ok_or_else(|| Error::Integrity("manifest missing sub-trigger".into()))?,
                initial_feature_dist: need(e.initial_feature_dist)?,
                final_feature_dist: need(e.final_feature_dist)?,
                linf_used: need(e.linf_used)?,
            })
        })
        .collect::<Result<_>>()?;

    let report = stage_evaluate(
        &ctx.cfg,
        &victim,
        &baseline,
        &EvalInputs {
            clean_train: &dataset.train,
            test_set: &dataset.test,
            subs: &subs,
            trigger_location: (artifact.trigger.top, artifact.trigger.left),
            records: &records,
        },
    )?;
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    ctx.run_dir.record_stage(
        Stage::Evaluate,
        &[
            ("victim", victim_path.as_path()),
            ("baseline", baseline_path.as_path()),
        ],
        &[("report", report_path.as_path())],
    )?;
    ctx.run_dir.log(&format!(
        "stage=evaluate wall_clock_secs={:.3}",
        t0.elapsed().as_secs_f64()
    ))?;
    println!("{}", report.summary_table());
    Ok(report_path)
}

/// One-shot full pipeline. Refuses a non-empty output directory unless
/// `--force` is given.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<PathBuf> {
    if out.exists() && !force {
        let non_empty = std::fs::read_dir(out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty {
            return Err(Error::UnsafeOverwrite(format!(
                "output directory {} is not empty; pass --force to reuse it",
                out.display()
            )));
        }
    }
    let report = run_experiment(cfg, out)?;
    println!("{}", report.summary_table());
    Ok(out.join("report.json"))
}
