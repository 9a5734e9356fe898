//! Clean-label sample poisoning: match the patched source in feature space
//! while staying inside an L∞ band around a target-label sample.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trigger::{patch_image, SubTrigger};
use crate::vit::{ImageSample, VitModel};

/// Which samples may serve as patched sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttackMode {
    /// Sources come from one fixed label.
    OneToOne { source_label: usize },
    /// Sources come uniformly from every non-target label.
    AnyToOne,
}

/// Poisoning-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoisonConfig {
    /// L∞ budget in pixel units.
    pub epsilon: f64,
    /// Maximum descent steps per sample.
    pub steps: usize,
    pub lr: f64,
    /// Early-stop threshold on the squared feature distance.
    pub tau: f64,
    /// Number of samples to poison when `poison_rate` is unset.
    pub poison_count: usize,
    /// Sub-trigger count; must match the trigger-mask split.
    pub k: usize,
    pub mode: AttackMode,
    /// When set, overrides `poison_count` with `round(rate · train size)`.
    pub poison_rate: Option<f64>,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            steps: 40,
            lr: 0.05,
            tau: 0.0,
            poison_count: 0,
            k: 8,
            mode: AttackMode::AnyToOne,
            poison_rate: Some(0.1),
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Input(format!(
                "epsilon must lie in [0,1], got {}",
                self.epsilon
            )));
        }
        if let Some(rate) = self.poison_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Input(format!(
                    "poison_rate must lie in [0,1], got {rate}"
                )));
            }
        }
        if self.k == 0 {
            return Err(Error::Input("k must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Input("poison lr must be > 0".into()));
        }
        Ok(())
    }

    /// Number of samples to poison for a training set of `train_len`.
    pub fn effective_count(&self, train_len: usize) -> usize {
        match self.poison_rate {
            Some(rate) => (rate * train_len as f64).round() as usize,
            None => self.poison_count,
        }
    }
}

/// Where a poisoned sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the target-label sample x_t in the training set.
    pub target_origin: usize,
    /// Index of the source sample behind x_a in the training set.
    pub patched_source_id: usize,
    pub sub_trigger_index: usize,
}

/// A crafted poisoned sample with its optimization bookkeeping.
#[derive(Debug, Clone)]
pub struct PoisonRecord {
    /// The poisoned sample; its label is the target label, which is its
    /// true visual class.
    pub poisoned: ImageSample,
    pub target_origin: usize,
    pub patched_source_id: usize,
    pub sub_trigger_index: usize,
    /// Euclidean feature distance before/after optimization.
    pub initial_feature_dist: f64,
    pub final_feature_dist: f64,
    /// max |x_p − x_t| actually used.
    pub linf_used: f64,
}

/// Clamp `x` elementwise into `[center − eps, center + eps] ∩ [0,1]`.
pub fn project_linf(
    x: &Array3<f64>,
    center: &Array3<f64>,
    epsilon: f64,
) -> Result<Array3<f64>> {
    if x.shape() != center.shape() {
        return Err(Error::Dimension(format!(
            "shapes {:?} and {:?} differ",
            x.shape(),
            center.shape()
        )));
    }
    let mut out = x.clone();
    out.zip_mut_with(center, |v, &c| {
        *v = v.clamp((c - epsilon).max(0.0), (c + epsilon).min(1.0));
    });
    Ok(out)
}

/// Snap to the 16-bit grid without leaving the L∞ band around `center`.
fn quantize_into_band(x: &Array3<f64>, center: &Array3<f64>, epsilon: f64) -> Array3<f64> {
    const Q: f64 = 65535.0;
    let mut out = x.clone();
    out.zip_mut_with(center, |v, &c| {
        let lo = (c - epsilon).max(0.0);
        let hi = (c + epsilon).min(1.0);
        // Work on integer grid indices so the stored value is bit-identical
        // to what a 16-bit image decode produces.
        let mut k = (v.clamp(0.0, 1.0) * Q).round();
        if k / Q > hi {
            k -= 1.0;
        }
        if k / Q < lo {
            k += 1.0;
        }
        let q = k / Q;
        if q < lo || q > hi {
            // Band narrower than one grid step: fall back to the center's
            // own grid point.
            *v = (c * Q).round() / Q;
        } else {
            *v = q;
        }
    });
    out
}

/// Generic projected descent used by [`poison_sample`]. `loss_and_grad`
/// evaluates the objective and its pixel gradient; the best iterate seen
/// (including the start) is returned along with the initial and best loss.
pub(crate) fn projected_descent(
    loss_and_grad: &(dyn Fn(&Array3<f64>, bool) -> Result<(f64, Option<Array3<f64>>)> + Sync),
    center: &Array3<f64>,
    epsilon: f64,
    lr: f64,
    steps: usize,
    tau: f64,
) -> Result<(Array3<f64>, f64, f64)> {
    let mut x = center.clone();
    let mut best = x.clone();
    let mut best_loss = f64::INFINITY;
    let mut initial = f64::NAN;
    for step in 0..=steps {
        let last = step == steps;
        let (loss, grad) = loss_and_grad(&x, !last)?;
        if !loss.is_finite() {
            return Err(Error::Optimization(format!(
                "poisoning loss became non-finite ({loss}) at step {step}"
            )));
        }
        if step == 0 {
            initial = loss;
        }
        if loss < best_loss {
            best_loss = loss;
            best.assign(&x);
        }
        if last || loss <= tau {
            break;
        }
        let g = grad.expect("gradient requested");
        let stepped = &x - &(g * lr);
        x = project_linf(&stepped, center, epsilon)?;
    }
    Ok((best, initial, best_loss))
}

/// Craft one poisoned sample: start at the target sample and descend the
/// squared feature distance to the patched source inside the ε-band.
///
/// The returned pixels are snapped to the 16-bit grid (still inside the
/// band); if the snap would make the match worse than doing nothing, the
/// target sample itself is returned, so `final_feature_dist ≤
/// initial_feature_dist` holds exactly.
pub fn poison_sample(
    surrogate: &VitModel,
    x_t: &ImageSample,
    x_a: &ImageSample,
    pcfg: &PoisonConfig,
    prov: Provenance,
) -> Result<PoisonRecord> {
    pcfg.validate()?;
    x_t.matches(surrogate.config())?;
    x_a.matches(surrogate.config())?;
    let reference = surrogate.forward(x_a)?.features;

    let eval = |pixels: &Array3<f64>, want_grad: bool| -> Result<(f64, Option<Array3<f64>>)> {
        let sample = ImageSample {
            pixels: pixels.clone(),
            label: x_t.label,
        };
        let mut df = surrogate.forward_diff(&sample)?;
        let loss_id = df.loss_feature_match(&reference)?;
        let loss = df.loss_value(loss_id);
        let grad = if want_grad {
            Some(df.grad_wrt_input(loss_id)?)
        } else {
            None
        };
        Ok((loss, grad))
    };

    let (best, initial_loss, best_loss) = projected_descent(
        &eval,
        &x_t.pixels,
        pcfg.epsilon,
        pcfg.lr,
        pcfg.steps,
        pcfg.tau,
    )?;

    // Snap to the persistence grid, then keep whichever of {snapped best,
    // untouched target} matches better.
    let snapped = quantize_into_band(&best, &x_t.pixels, pcfg.epsilon);
    let (snapped_loss, _) = eval(&snapped, false)?;
    let (final_pixels, final_loss) = if snapped_loss <= initial_loss {
        (snapped, snapped_loss)
    } else {
        (x_t.pixels.clone(), initial_loss)
    };
    let _ = best_loss;

    let linf_used = final_pixels
        .iter()
        .zip(x_t.pixels.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    Ok(PoisonRecord {
        poisoned: ImageSample {
            pixels: final_pixels,
            label: x_t.label,
        },
        target_origin: prov.target_origin,
        patched_source_id: prov.patched_source_id,
        sub_trigger_index: prov.sub_trigger_index,
        initial_feature_dist: initial_loss.sqrt(),
        final_feature_dist: final_loss.sqrt(),
        linf_used,
    })
}

/// Replace `Q` target-label training samples with poisoned versions.
///
/// Sample `j` of the worklist uses sub-trigger `j mod K`, so the `Q`
/// samples fall into ⌈Q/K⌉ groups that cycle through the sub-triggers.
/// Labels are never touched. Deterministic for a fixed seed; per-sample
/// optimization runs in parallel with order-independent assembly.
pub fn build_poisoned_dataset(
    clean_train: &[ImageSample],
    surrogate: &VitModel,
    sub_triggers: &[SubTrigger],
    location: (usize, usize),
    target_label: usize,
    pcfg: &PoisonConfig,
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<PoisonRecord>)> {
    pcfg.validate()?;
    if sub_triggers.len() != pcfg.k {
        return Err(Error::Contract(format!(
            "{} sub-triggers supplied but k = {}",
            sub_triggers.len(),
            pcfg.k
        )));
    }
    let q = pcfg.effective_count(clean_train.len());
    if q == 0 {
        return Ok((clean_train.to_vec(), Vec::new()));
    }

    let target_pool: Vec<usize> = (0..clean_train.len())
        .filter(|&i| clean_train[i].label == target_label)
        .collect();
    let source_pool: Vec<usize> = match pcfg.mode {
        AttackMode::OneToOne { source_label } => {
            if source_label == target_label {
                return Err(Error::Input(
                    "source label must differ from target label".into(),
                ));
            }
            (0..clean_train.len())
                .filter(|&i| clean_train[i].label == source_label)
                .collect()
        }
        AttackMode::AnyToOne => (0..clean_train.len())
            .filter(|&i| clean_train[i].label != target_label)
            .collect(),
    };
    if q > target_pool.len() {
        return Err(Error::Input(format!(
            "need {q} target-label samples but only {} available",
            target_pool.len()
        )));
    }
    if q > source_pool.len() {
        return Err(Error::Input(format!(
            "need {q} source samples but only {} available",
            source_pool.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = target_pool;
    targets.shuffle(&mut rng);
    targets.truncate(q);
    let mut sources = source_pool;
    sources.shuffle(&mut rng);
    sources.truncate(q);

    let (top, left) = location;
    let work: Vec<(usize, usize, usize)> = (0..q)
        .map(|j| (targets[j], sources[j], j % pcfg.k))
        .collect();

    let records: Vec<Result<PoisonRecord>> = work
        .par_iter()
        .map(|&(t_idx, s_idx, k_idx)| {
            let x_a = patch_image(&clean_train[s_idx], &sub_triggers[k_idx], top, left)?;
            poison_sample(
                surrogate,
                &clean_train[t_idx],
                &x_a,
                pcfg,
                Provenance {
                    target_origin: t_idx,
                    patched_source_id: s_idx,
                    sub_trigger_index: k_idx,
                },
            )
        })
        .collect();

    let mut dataset = clean_train.to_vec();
    let mut out = Vec::with_capacity(q);
    for rec in records {
        let rec = rec?;
        dataset[rec.target_origin].pixels = rec.poisoned.pixels.clone();
        out.push(rec);
    }
    // Canonical order (matches the manifest), so downstream aggregation is
    // independent of how the worklist was drawn.
    out.sort_by_key(|r| r.target_origin);
    Ok((dataset, out))
}
