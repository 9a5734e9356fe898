//! End-to-end experiment orchestration: surrogate training, trigger
//! generation, poisoning, victim training, evaluation, and the
//! patch-processing defense probe.

mod run;

pub use run::{
    attacker_pool, derive_sub_triggers, run_experiment, stage_dataset, stage_evaluate,
    stage_gen_trigger, stage_poison, stage_train_surrogate, stage_train_victim, EvalInputs,
    RunDir, StageRecord, PHI_A, PHI_D,
};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::ShiftSasr;
use crate::poison::PoisonConfig;
use crate::trigger::{SubTrigger, TriggerConfig};
use crate::vit::{ImageSample, ModelConfig, TrainConfig, VitModel};

/// Version of the on-disk experiment configuration schema.
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Test-time evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Which sub-trigger activates the backdoor at test time. Any index
    /// works; poisoning cycles through all of them.
    pub sub_trigger_index: usize,
    /// Token offsets for the trigger-displacement sweep.
    pub shifts: Vec<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            sub_trigger_index: 0,
            shifts: vec![0, 1, 2],
        }
    }
}

/// Inference-time patch-processing probe settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSpec {
    pub enabled: bool,
    /// Fraction of patches zeroed.
    pub drop_rate: f64,
    /// Whether surviving patches are permuted in pixel space.
    pub shuffle: bool,
}

impl Default for DefenseSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            drop_rate: 0.1,
            shuffle: false,
        }
    }
}

/// Everything one experiment run needs. The victim never sees the
/// surrogate's parameters: the victim-training stage accepts only a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Config-file schema version.
    pub schema_version: u32,
    /// Master seed; stage seeds are derived from it by [`Self::resolve`].
    pub seed: u64,
    pub target_label: usize,
    pub dataset: DatasetSpec,
    pub surrogate_model: ModelConfig,
    pub surrogate_train: TrainConfig,
    /// May differ from the surrogate (cross-architecture setting).
    pub victim_model: ModelConfig,
    pub victim_train: TrainConfig,
    pub trigger: TriggerConfig,
    pub poison: PoisonConfig,
    pub evaluation: EvalSpec,
    pub defense: DefenseSpec,
    /// When set, the surrogate trains on the first half of the training
    /// set only, modelling an attacker with a disjoint data pool.
    pub attacker_pool_disjoint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            target_label: 1,
            dataset: DatasetSpec::default(),
            surrogate_model: ModelConfig::default(),
            surrogate_train: TrainConfig::default(),
            victim_model: ModelConfig::default(),
            victim_train: TrainConfig::default(),
            trigger: TriggerConfig::default(),
            poison: PoisonConfig::default(),
            evaluation: EvalSpec::default(),
            defense: DefenseSpec::default(),
            attacker_pool_disjoint: false,
        }
    }
}

impl ExperimentConfig {
    /// Materialize stage seeds from the master seed. Called once after
    /// parsing (and after any command-line seed override).
    pub fn resolve(mut self) -> Self {
        self.dataset.seed = self.seed.wrapping_add(1);
        self.surrogate_train.seed = self.seed.wrapping_add(2);
        self.victim_train.seed = self.seed.wrapping_add(3);
        self
    }

    /// Per-stage derived seeds (trigger, poison, defense).
    pub fn trigger_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn poison_seed(&self) -> u64 {
        self.seed.wrapping_add(5)
    }

    pub fn defense_seed(&self) -> u64 {
        self.seed.wrapping_add(6)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.surrogate_model.validate()?;
        self.surrogate_train.validate()?;
        self.victim_model.validate()?;
        self.victim_train.validate()?;
        self.trigger.validate(self.surrogate_model.image_size)?;
        self.poison.validate()?;
        if self.target_label >= self.surrogate_model.n_classes {
            return Err(Error::Config(format!(
                "target label {} out of range",
                self.target_label
            )));
        }
        if let crate::poison::AttackMode::OneToOne { source_label } = self.poison.mode {
            if source_label == self.target_label {
                return Err(Error::Config(
                    "source label equals target label".into(),
                ));
            }
            if source_label >= self.surrogate_model.n_classes {
                return Err(Error::Config(format!(
                    "source label {source_label} out of range"
                )));
            }
        }
        if self.surrogate_model.image_size != self.victim_model.image_size
            || self.surrogate_model.channels != self.victim_model.channels
            || self.surrogate_model.n_classes != self.victim_model.n_classes
        {
            return Err(Error::Config(
                "surrogate and victim must share image size, channels and class count".into(),
            ));
        }
        if self.evaluation.sub_trigger_index >= self.poison.k {
            return Err(Error::Config(format!(
                "evaluation sub-trigger index {} out of range for k = {}",
                self.evaluation.sub_trigger_index, self.poison.k
            )));
        }
        if self.defense.enabled && !(0.0..1.0).contains(&self.defense.drop_rate) {
            return Err(Error::Config(format!(
                "defense drop_rate must lie in [0,1), got {}",
                self.defense.drop_rate
            )));
        }
        Ok(())
    }
}

/// Zero a random fraction of patch regions and optionally permute the
/// survivors in pixel space. Deterministic under `seed`.
pub fn patch_defense_probe(
    image: &ImageSample,
    drop_rate: f64,
    shuffle: bool,
    seed: u64,
    patch_size: usize,
) -> Result<ImageSample> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Input(format!(
            "drop_rate must lie in [0,1), got {drop_rate}"
        )));
    }
    let (c, h, w) = image.shape();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Input(format!(
            "patch size {patch_size} does not tile a {h}x{w} image"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let n = gh * gw;
    let n_drop = ((drop_rate * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let dropped: std::collections::BTreeSet<usize> = order[..n_drop].iter().copied().collect();
    let survivors: Vec<usize> = (0..n).filter(|i| !dropped.contains(i)).collect();
    let mut placement = survivors.clone();
    if shuffle {
        placement.shuffle(&mut rng);
    }

    let mut pixels = Array3::<f64>::zeros((c, h, w));
    let copy_patch = |dst: &mut Array3<f64>, from: usize, to: usize, src: &Array3<f64>| {
        let (fi, fj) = (from / gw, from % gw);
        let (ti, tj) = (to / gw, to % gw);
        for ch in 0..c {
            for di in 0..patch_size {
                for dj in 0..patch_size {
                    dst[[ch, ti * patch_size + di, tj * patch_size + dj]] =
                        src[[ch, fi * patch_size + di, fj * patch_size + dj]];
                }
            }
        }
    };
    for (k, &dst) in survivors.iter().enumerate() {
        copy_patch(&mut pixels, placement[k], dst, &image.pixels);
    }
    Ok(ImageSample {
        pixels,
        label: image.label,
    })
}

/// SASR with the sub-trigger displaced horizontally by whole tokens.
/// Offset 0 reproduces the standard SASR exactly.
pub fn shift_evaluation(
    victim: &VitModel,
    source_set: &[ImageSample],
    sub: &SubTrigger,
    base_location: (usize, usize),
    shifts: &[usize],
    target_label: usize,
) -> Result<Vec<ShiftSasr>> {
    let ps = victim.config().patch_size;
    let img = victim.config().image_size;
    let (top, left) = base_location;
    let width = sub.pattern.shape()[2];
    let mut out = Vec::with_capacity(shifts.len());
    for &s in shifts {
        let new_left = left + s * ps;
        if new_left + width > img {
            return Err(Error::Input(format!(
                "shift of {s} tokens pushes the trigger outside the image"
            )));
        }
        let sasr = crate::metrics::sasr(victim, source_set, sub, (top, new_left), target_label)?;
        out.push(ShiftSasr {
            shift_tokens: s,
            sasr,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn img(seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample::new(
            Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.0..1.0)),
            0,
        )
        .unwrap()
    }

    #[test]
    fn probe_identity_when_disabled_parameters() {
        let x = img(1);
        let out = patch_defense_probe(&x, 0.0, false, 7, 4).unwrap();
        assert_eq!(out.pixels, x.pixels);
    }

    #[test]
    fn probe_drops_all_but_one() {
        let x = img(2);
        // 4 patches; drop_rate = 1 − 1/4 leaves exactly one.
        let out = patch_defense_probe(&x, 0.75, false, 3, 4).unwrap();
        let mut nonzero_patches = 0;
        for pi in 0..2 {
            for pj in 0..2 {
                let mut any = false;
                for c in 0..3 {
                    for i in 0..4 {
                        for j in 0..4 {
                            if out.pixels[[c, pi * 4 + i, pj * 4 + j]] != 0.0 {
                                any = true;
                            }
                        }
                    }
                }
                if any {
                    nonzero_patches += 1;
                }
            }
        }
        assert_eq!(nonzero_patches, 1);
    }

    #[test]
    fn probe_is_deterministic() {
        let x = img(3);
        let a = patch_defense_probe(&x, 0.5, true, 11, 4).unwrap();
        let b = patch_defense_probe(&x, 0.5, true, 11, 4).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = patch_defense_probe(&x, 0.5, true, 12, 4).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn probe_shuffle_preserves_surviving_content() {
        let x = img(4);
        let out = patch_defense_probe(&x, 0.5, true, 5, 4).unwrap();
        // Multiset of per-patch sums: survivors must come from the original.
        let patch_sum = |px: &Array3<f64>, pi: usize, pj: usize| {
            let mut s = 0.0;
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        s += px[[c, pi * 4 + i, pj * 4 + j]];
                    }
                }
            }
            s
        };
        let orig: Vec<f64> = (0..4).map(|k| patch_sum(&x.pixels, k / 2, k % 2)).collect();
        for k in 0..4 {
            let s = patch_sum(&out.pixels, k / 2, k % 2);
            if s != 0.0 {
                assert!(orig.iter().any(|&o| (o - s).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn probe_rejects_bad_rate() {
        let x = img(5);
        assert!(patch_defense_probe(&x, 1.0, false, 0, 4).is_err());
    }

    #[test]
    fn config_validation_catches_label_clash() {
        let mut cfg = ExperimentConfig::default();
        cfg.poison.mode = crate::poison::AttackMode::OneToOne { source_label: 1 };
        cfg.target_label = 1;
        assert!(cfg.validate().is_err());
        cfg.poison.mode = crate::poison::AttackMode::OneToOne { source_label: 0 };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn resolve_derives_stage_seeds() {
        let cfg = ExperimentConfig {
            seed: 100,
            ..ExperimentConfig::default()
        }
        .resolve();
        assert_eq!(cfg.dataset.seed, 101);
        assert_eq!(cfg.surrogate_train.seed, 102);
        assert_eq!(cfg.victim_train.seed, 103);
        assert_eq!(cfg.trigger_seed(), 104);
    }
}
