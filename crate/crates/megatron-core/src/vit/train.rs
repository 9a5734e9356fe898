//! Seeded mini-batch SGD with cross-entropy.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::build_forward;
use super::{ImageSample, ModelConfig, TrainConfig, VitModel};
use crate::error::{Error, Result};
use crate::tape::Tape;

/// Train a freshly initialized model on `dataset`.
///
/// Deterministic for a fixed `tc.seed`: initialization, shuffling and the
/// gradient reduction order are all fixed, so repeated calls produce
/// identical parameters regardless of thread count.
pub fn train(config: &ModelConfig, tc: &TrainConfig, dataset: &[ImageSample]) -> Result<VitModel> {
    config.validate()?;
    tc.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    for (i, s) in dataset.iter().enumerate() {
        s.matches(config)
            .map_err(|e| Error::Input(format!("sample {i}: {e}")))?;
        if s.label >= config.n_classes {
            return Err(Error::Input(format!(
                "sample {i} label {} out of range for {} classes",
                s.label, config.n_classes
            )));
        }
    }
    let mut model = VitModel::init(config.clone(), tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for _epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            let step = batch_gradients(&model, dataset, batch)?;
            model
                .params_mut()
                .sgd_step(&step, tc.learning_rate, tc.weight_decay);
        }
    }
    Ok(model)
}

/// Mean cross-entropy gradient over one batch. Per-sample gradients are
/// computed in parallel but summed in sample order.
fn batch_gradients(
    model: &VitModel,
    dataset: &[ImageSample],
    batch: &[usize],
) -> Result<Vec<ArrayD<f64>>> {
    let per_sample: Vec<Result<Vec<ArrayD<f64>>>> = batch
        .par_iter()
        .map(|&idx| sample_gradients(model, &dataset[idx]))
        .collect();
    let mut acc: Option<Vec<ArrayD<f64>>> = None;
    for g in per_sample {
        let g = g?;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => {
                for (ai, gi) in a.iter_mut().zip(g.iter()) {
                    *ai += gi;
                }
            }
        }
    }
    let mut acc = acc.expect("non-empty batch");
    let scale = 1.0 / batch.len() as f64;
    for a in &mut acc {
        *a *= scale;
    }
    Ok(acc)
}

fn sample_gradients(model: &VitModel, sample: &ImageSample) -> Result<Vec<ArrayD<f64>>> {
    let mut tape = Tape::new();
    let ids = build_forward(
        &mut tape,
        model.config(),
        model.params(),
        &sample.pixels,
        None,
    );
    let loss = tape.cross_entropy_logits(ids.logits, sample.label);
    let grads = tape.backward(loss)?;
    Ok(ids
        .params
        .iter()
        .map(|&pid| {
            grads[pid]
                .clone()
                .unwrap_or_else(|| ArrayD::zeros(tape.value(pid).raw_dim()))
        })
        .collect())
}

/// Mean cross-entropy of a model over a dataset (useful for smoke checks).
pub fn mean_cross_entropy(model: &VitModel, dataset: &[ImageSample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let losses: Vec<Result<f64>> = dataset
        .par_iter()
        .map(|s| {
            let stack = model.forward(s)?;
            let z = &stack.logits;
            let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + z.mapv(|v| (v - max).exp()).sum().ln();
            Ok(lse - z[s.label])
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / dataset.len() as f64)
}
