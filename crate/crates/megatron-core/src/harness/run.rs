//! Run-directory layout, stage integrity bookkeeping, and the one-shot
//! experiment driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{shift_evaluation, ExperimentConfig};
use crate::artifact::{sha256_file, verify_file_hash};
use crate::dataset::{load_dataset, save_poisoned_dataset, Dataset};
use crate::error::{Error, Result, Stage};
use crate::metrics::{cda, l1_distance, psnr, sasr, scda, ssim, AttackReport, SsimConfig, PSNR_CAP_DB};
use crate::poison::{build_poisoned_dataset, AttackMode, PoisonRecord};
use crate::trigger::{
    generate_trigger, make_sub_trigger, save_trigger, split_masks, SubTrigger, Trigger,
    TriggerArtifactMeta,
};
use crate::vit::{save_checkpoint, train, ImageSample, VitModel};

/// Hash bookkeeping for one completed stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    /// Content hashes of the artifacts this stage consumed.
    pub inputs: BTreeMap<String, String>,
    /// Content hashes of the artifacts this stage produced.
    pub outputs: BTreeMap<String, String>,
}

/// Paths and integrity records of one experiment run directory.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        std::fs::create_dir_all(root.join("logs"))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn surrogate_path(&self) -> PathBuf {
        self.root.join("surrogate.ckpt")
    }

    pub fn trigger_dir(&self) -> PathBuf {
        self.root.join("trigger")
    }

    pub fn poisoned_dir(&self) -> PathBuf {
        self.root.join("poisoned")
    }

    pub fn victim_path(&self) -> PathBuf {
        self.root.join("victim.ckpt")
    }

    pub fn baseline_path(&self) -> PathBuf {
        self.root.join("baseline.ckpt")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn stages_path(&self) -> PathBuf {
        self.root.join("stages.json")
    }

    fn log_path(&self) -> PathBuf {
        self.root.join("logs").join("run.log")
    }

    /// Append a wall-clock line to the run log.
    pub fn log(&self, line: &str) -> Result<()> {
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path())?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    fn load_stages(&self) -> Result<BTreeMap<String, StageRecord>> {
        let path = self.stages_path();
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Record a completed stage's input/output hashes.
    pub fn record_stage(
        &self,
        stage: Stage,
        inputs: &[(&str, &Path)],
        outputs: &[(&str, &Path)],
    ) -> Result<()> {
        let mut stages = self.load_stages()?;
        let mut rec = StageRecord::default();
        for (name, path) in inputs {
            rec.inputs.insert(name.to_string(), sha256_file(path)?);
        }
        for (name, path) in outputs {
            rec.outputs.insert(name.to_string(), sha256_file(path)?);
        }
        stages.insert(stage.to_string(), rec);
        std::fs::write(
            self.stages_path(),
            serde_json::to_string_pretty(&stages)?,
        )?;
        Ok(())
    }

    /// Check that an upstream stage ran and its recorded output still
    /// matches the file on disk.
    pub fn verify_upstream(&self, stage: Stage, artifact: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} (produced by `{stage}`) not found at {}",
                artifact,
                path.display()
            )));
        }
        let stages = self.load_stages()?;
        let rec = stages.get(&stage.to_string()).ok_or_else(|| {
            Error::MissingArtifact(format!(
                "stage `{stage}` has no record in {}; run it first",
                self.stages_path().display()
            ))
        })?;
        let expected = rec.outputs.get(artifact).ok_or_else(|| {
            Error::Integrity(format!("stage `{stage}` did not record `{artifact}`"))
        })?;
        verify_file_hash(path, expected)
    }

    /// Hash of the directory's manifest-bearing file for a whole-directory
    /// artifact (the poisoned set is identified by its manifest).
    pub fn poisoned_manifest_path(&self) -> PathBuf {
        self.poisoned_dir().join(crate::dataset::POISON_MANIFEST_FILE)
    }
}

fn stage_err<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        other => other.in_stage(stage),
    })
}

/// Attacker-side training pool: the full training set, or its first half
/// when the config asks for a disjoint pool.
pub fn attacker_pool<'a>(cfg: &ExperimentConfig, train_set: &'a [ImageSample]) -> &'a [ImageSample] {
    if cfg.attacker_pool_disjoint {
        &train_set[..train_set.len() / 2]
    } else {
        train_set
    }
}

/// Load or generate the dataset for this run.
pub fn stage_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    stage_err(Stage::Dataset, load_dataset(&cfg.dataset, &cfg.surrogate_model))
}

/// Train the attacker's surrogate on the clean attacker pool.
pub fn stage_train_surrogate(cfg: &ExperimentConfig, train_set: &[ImageSample]) -> Result<VitModel> {
    stage_err(
        Stage::TrainSurrogate,
        train(
            &cfg.surrogate_model,
            &cfg.surrogate_train,
            attacker_pool(cfg, train_set),
        ),
    )
}

/// Source-label pool indices for trigger generation and evaluation.
fn source_filter(mode: &AttackMode, target_label: usize, label: usize) -> bool {
    match mode {
        AttackMode::OneToOne { source_label } => label == *source_label,
        AttackMode::AnyToOne => label != target_label,
    }
}

/// Optimize the trigger and split it into sub-triggers.
pub fn stage_gen_trigger(
    cfg: &ExperimentConfig,
    surrogate: &VitModel,
    train_set: &[ImageSample],
) -> Result<(Trigger, Vec<SubTrigger>)> {
    let run = || -> Result<(Trigger, Vec<SubTrigger>)> {
        let pool = attacker_pool(cfg, train_set);
        let sources: Vec<ImageSample> = pool
            .iter()
            .filter(|s| source_filter(&cfg.poison.mode, cfg.target_label, s.label))
            .cloned()
            .collect();
        let targets: Vec<ImageSample> = pool
            .iter()
            .filter(|s| s.label == cfg.target_label)
            .cloned()
            .collect();
        let trigger = generate_trigger(
            surrogate,
            &sources,
            &targets,
            cfg.target_label,
            &cfg.trigger,
            cfg.trigger_seed(),
        )?;
        let subs = derive_sub_triggers(&trigger, cfg)?;
        Ok((trigger, subs))
    };
    stage_err(Stage::GenTrigger, run())
}

/// Masked, blended sub-triggers for a trigger under this config.
pub fn derive_sub_triggers(trigger: &Trigger, cfg: &ExperimentConfig) -> Result<Vec<SubTrigger>> {
    let (_, h, w) = trigger.dims();
    let masks = split_masks((h, w), cfg.poison.k)?;
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| make_sub_trigger(trigger, m, PHI_A, PHI_D, i))
        .collect()
}

/// Transparency defaults for the masked and unmasked trigger areas.
pub const PHI_A: f64 = 0.5;
pub const PHI_D: f64 = 0.1;

/// Craft the poisoned training set.
pub fn stage_poison(
    cfg: &ExperimentConfig,
    surrogate: &VitModel,
    train_set: &[ImageSample],
    subs: &[SubTrigger],
    location: (usize, usize),
) -> Result<(Vec<ImageSample>, Vec<PoisonRecord>)> {
    stage_err(
        Stage::Poison,
        build_poisoned_dataset(
            train_set,
            surrogate,
            subs,
            location,
            cfg.target_label,
            &cfg.poison,
            cfg.poison_seed(),
        ),
    )
}

/// Train a victim. This function is the threat-model wall: it accepts a
/// dataset handle and nothing attacker-side.
pub fn stage_train_victim(cfg: &ExperimentConfig, dataset: &[ImageSample]) -> Result<VitModel> {
    stage_err(
        Stage::TrainVictim,
        train(&cfg.victim_model, &cfg.victim_train, dataset),
    )
}

/// Everything the evaluation stage needs besides the models.
pub struct EvalInputs<'a> {
    pub clean_train: &'a [ImageSample],
    pub test_set: &'a [ImageSample],
    pub subs: &'a [SubTrigger],
    pub trigger_location: (usize, usize),
    pub records: &'a [PoisonRecord],
}

/// Compute the full metric suite for a backdoored/baseline victim pair.
pub fn stage_evaluate(
    cfg: &ExperimentConfig,
    victim: &VitModel,
    baseline: &VitModel,
    inputs: &EvalInputs<'_>,
) -> Result<AttackReport> {
    let run = || -> Result<AttackReport> {
        let test = inputs.test_set;
        let source_test: Vec<ImageSample> = test
            .iter()
            .filter(|s| source_filter(&cfg.poison.mode, cfg.target_label, s.label))
            .cloned()
            .collect();
        if source_test.is_empty() {
            return Err(Error::Input("no source-label test samples".into()));
        }
        let sub = &inputs.subs[cfg.evaluation.sub_trigger_index];

        let cda_backdoored = cda(victim, test)?;
        let cda_baseline = cda(baseline, test)?;
        let sasr_backdoored = sasr(
            victim,
            &source_test,
            sub,
            inputs.trigger_location,
            cfg.target_label,
        )?;
        let sasr_baseline = sasr(
            baseline,
            &source_test,
            sub,
            inputs.trigger_location,
            cfg.target_label,
        )?;
        // In the one-to-one regime SCDA is the source-label clean accuracy;
        // in any-to-one the source set spans labels, so it degenerates to
        // clean accuracy over that set.
        let scda_val = match cfg.poison.mode {
            AttackMode::OneToOne { .. } => scda(victim, &source_test)?,
            AttackMode::AnyToOne => cda(victim, &source_test)?,
        };

        // Stealth metrics over (poisoned, original-target) pairs. With no
        // poisons there is no distortion, so the ideal values apply.
        let (mut psnr_acc, mut ssim_acc, mut l1_acc) = (0.0, 0.0, 0.0);
        let ssim_cfg = SsimConfig::default();
        for rec in inputs.records {
            let original = &inputs.clean_train[rec.target_origin];
            psnr_acc += psnr(&rec.poisoned.pixels, &original.pixels, 1.0)?;
            ssim_acc += ssim(&rec.poisoned.pixels, &original.pixels, &ssim_cfg)?;
            l1_acc += l1_distance(&rec.poisoned.pixels, &original.pixels)?;
        }
        let n = inputs.records.len();
        let (psnr_mean, ssim_mean, l1_mean) = if n == 0 {
            (PSNR_CAP_DB, 1.0, 0.0)
        } else {
            let nf = n as f64;
            (psnr_acc / nf, ssim_acc / nf, l1_acc / nf)
        };

        let shift_sasr = shift_evaluation(
            victim,
            &source_test,
            sub,
            inputs.trigger_location,
            &cfg.evaluation.shifts,
            cfg.target_label,
        )?;

        let (defense_sasr, defense_cda) = if cfg.defense.enabled {
            let probe = |set: &[ImageSample]| -> Result<Vec<ImageSample>> {
                set.iter()
                    .enumerate()
                    .map(|(i, s)| {
                        super::patch_defense_probe(
                            s,
                            cfg.defense.drop_rate,
                            cfg.defense.shuffle,
                            cfg.defense_seed().wrapping_add(i as u64),
                            cfg.victim_model.patch_size,
                        )
                    })
                    .collect()
            };
            let patched_sources: Result<Vec<ImageSample>> = source_test
                .iter()
                .map(|s| {
                    crate::trigger::patch_image(
                        s,
                        sub,
                        inputs.trigger_location.0,
                        inputs.trigger_location.1,
                    )
                })
                .collect();
            let defended_sources = probe(&patched_sources?)?;
            let hits: Result<Vec<bool>> = defended_sources
                .iter()
                .map(|s| Ok(victim.predict(s)? == cfg.target_label))
                .collect();
            let hits = hits?;
            let d_sasr = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
            let defended_clean = probe(test)?;
            let d_cda = cda(victim, &defended_clean)?;
            (Some(d_sasr), Some(d_cda))
        } else {
            (None, None)
        };

        Ok(AttackReport {
            cda: cda_backdoored,
            sasr: sasr_backdoored,
            scda: scda_val,
            baseline_cda: cda_baseline,
            baseline_sasr: sasr_baseline,
            psnr_mean,
            ssim_mean,
            l1_mean,
            lpips_mean: None,
            shift_sasr,
            defense_sasr,
            defense_cda,
            poison_count: n,
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
        })
    };
    stage_err(Stage::Evaluate, run())
}

/// Run the whole experiment, persisting every stage artifact into
/// `out_dir` as it completes. Fails with a stage-tagged error; artifacts
/// produced before the failure stay on disk.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<AttackReport> {
    cfg.validate().map_err(|e| e.in_stage(Stage::Dataset))?;
    let run_dir = RunDir::new(out_dir)?;
    std::fs::write(
        run_dir.config_path(),
        serde_json::to_string_pretty(cfg)?,
    )?;
    let config_hash = sha256_file(&run_dir.config_path())?;

    let timed = |run_dir: &RunDir, name: &str, secs: f64| -> Result<()> {
        run_dir.log(&format!("stage={name} wall_clock_secs={secs:.3}"))
    };

    // Dataset.
    let t0 = Instant::now();
    let dataset = stage_dataset(cfg)?;
    timed(&run_dir, "dataset", t0.elapsed().as_secs_f64())?;

    // Surrogate.
    let t0 = Instant::now();
    let surrogate = stage_train_surrogate(cfg, &dataset.train)?;
    save_checkpoint(&surrogate, &run_dir.surrogate_path())?;
    run_dir.record_stage(
        Stage::TrainSurrogate,
        &[("config", run_dir.config_path().as_path())],
        &[("surrogate", run_dir.surrogate_path().as_path())],
    )?;
    timed(&run_dir, "train-surrogate", t0.elapsed().as_secs_f64())?;

    // Trigger.
    let t0 = Instant::now();
    let (trigger, subs) = stage_gen_trigger(cfg, &surrogate, &dataset.train)?;
    let meta = TriggerArtifactMeta {
        format_version: 1,
        top: trigger.top,
        left: trigger.left,
        gamma: cfg.trigger.gamma,
        k: cfg.poison.k,
        phi_a: PHI_A,
        phi_d: PHI_D,
        final_loss: trigger.final_loss,
        iterations_used: trigger.iterations_used,
        seed: cfg.trigger_seed(),
        config_hash: config_hash.clone(),
    };
    save_trigger(&trigger, &meta, &run_dir.trigger_dir())
        .map_err(|e| e.in_stage(Stage::GenTrigger))?;
    run_dir.record_stage(
        Stage::GenTrigger,
        &[("surrogate", run_dir.surrogate_path().as_path())],
        &[(
            "trigger",
            run_dir.trigger_dir().join("trigger.json").as_path(),
        )],
    )?;
    timed(&run_dir, "gen-trigger", t0.elapsed().as_secs_f64())?;

    // Poison.
    let t0 = Instant::now();
    let location = (trigger.top, trigger.left);
    let (poisoned_train, records) =
        stage_poison(cfg, &surrogate, &dataset.train, &subs, location)?;
    save_poisoned_dataset(&run_dir.poisoned_dir(), &poisoned_train, &records)
        .map_err(|e| e.in_stage(Stage::Poison))?;
    run_dir.record_stage(
        Stage::Poison,
        &[(
            "trigger",
            run_dir.trigger_dir().join("trigger.json").as_path(),
        )],
        &[("poisoned", run_dir.poisoned_manifest_path().as_path())],
    )?;
    timed(&run_dir, "poison", t0.elapsed().as_secs_f64())?;

    // Victims: the backdoored one sees only the poisoned dataset; the
    // baseline trains on the clean set with the same seed.
    let t0 = Instant::now();
    let victim = stage_train_victim(cfg, &poisoned_train)?;
    save_checkpoint(&victim, &run_dir.victim_path())?;
    let baseline = stage_train_victim(cfg, &dataset.train)?;
    save_checkpoint(&baseline, &run_dir.baseline_path())?;
    run_dir.record_stage(
        Stage::TrainVictim,
        &[("poisoned", run_dir.poisoned_manifest_path().as_path())],
        &[
            ("victim", run_dir.victim_path().as_path()),
            ("baseline", run_dir.baseline_path().as_path()),
        ],
    )?;
    timed(&run_dir, "train-victim", t0.elapsed().as_secs_f64())?;

    // Evaluation.
    let t0 = Instant::now();
    let report = stage_evaluate(
        cfg,
        &victim,
        &baseline,
        &EvalInputs {
            clean_train: &dataset.train,
            test_set: &dataset.test,
            subs: &subs,
            trigger_location: location,
            records: &records,
        },
    )?;
    std::fs::write(
        run_dir.report_path(),
        serde_json::to_string_pretty(&report)?,
    )?;
    run_dir.record_stage(
        Stage::Evaluate,
        &[
            ("victim", run_dir.victim_path().as_path()),
            ("baseline", run_dir.baseline_path().as_path()),
        ],
        &[("report", run_dir.report_path().as_path())],
    )?;
    timed(&run_dir, "evaluate", t0.elapsed().as_secs_f64())?;

    Ok(report)
}
