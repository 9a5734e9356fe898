//! Trigger optimization loop: combined latent + diffusion descent with
//! gradient surgery, clipped to the pixel range.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{patch_with_clip_mask, pcgrad, Trigger, TriggerConfig};
use crate::artifact::quantize16;
use crate::error::{Error, Result};
use crate::rollout::{diffusion_area, diffusion_loss_coefficients};
use crate::vit::{ImageSample, VitModel};

/// Optimize a trigger against a surrogate model.
///
/// Each step draws one source-pool and one target-pool sample, patches the
/// source with the current trigger, and descends the combined loss
/// `L_latent + gamma · L_diffusion` with the two gradients merged by
/// [`pcgrad`]. The trigger stays in [0,1] after every step and the returned
/// pattern is snapped to the 16-bit grid so its saved form is identical.
pub fn generate_trigger(
    surrogate: &VitModel,
    sources: &[ImageSample],
    targets: &[ImageSample],
    target_label: usize,
    tcfg: &TriggerConfig,
    seed: u64,
) -> Result<Trigger> {
    let config = surrogate.config();
    tcfg.validate(config.image_size)?;
    if sources.is_empty() {
        return Err(Error::Input("source sample pool is empty".into()));
    }
    if targets.is_empty() {
        return Err(Error::Input("target sample pool is empty".into()));
    }
    if target_label >= config.n_classes {
        return Err(Error::Input(format!(
            "target label {target_label} out of range for {} classes",
            config.n_classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.channels;
    let mut pattern = match tcfg.init_mode {
        super::InitMode::UniformRandom => {
            Array3::from_shape_fn((c, tcfg.height, tcfg.width), |_| rng.gen_range(0.0..1.0))
        }
        super::InitMode::Zeros => Array3::zeros((c, tcfg.height, tcfg.width)),
    };

    let area = diffusion_area(tcfg.rect(), config, tcfg.diffusion_radius)?;
    let p = config.token_count();
    let (coeffs, offset) = diffusion_loss_coefficients(&area, p);

    let mut loss_history = Vec::new();
    let mut iterations_used = 0usize;

    let eval_pair = |rng: &mut ChaCha8Rng,
                         pattern: &Array3<f64>,
                         want_grads: bool|
     -> Result<(f64, Option<(Array3<f64>, Array3<f64>)>)> {
        let src = &sources[rng.gen_range(0..sources.len())];
        let tgt = &targets[rng.gen_range(0..targets.len())];
        let (patched, clip_mask) = patch_with_clip_mask(src, pattern, tcfg.top, tcfg.left)?;

        let target_stack = surrogate.forward(tgt)?;
        let reference = target_stack.last_layer_head_avg();

        let mut df = surrogate.forward_diff(&patched)?;
        let frozen = df.attention_grads(target_label)?;
        let l_alpha = df.loss_latent(&reference)?;
        let l_beta = df.loss_diffusion_frozen(&frozen, &coeffs, offset)?;
        let combined = df.loss_value(l_alpha) + tcfg.gamma * df.loss_value(l_beta);
        if !combined.is_finite() {
            return Err(Error::Optimization(format!(
                "combined trigger loss is not finite: {combined}"
            )));
        }
        if !want_grads {
            return Ok((combined, None));
        }
        let gx_alpha = df.grad_wrt_input(l_alpha)?;
        let gx_beta = df.grad_wrt_input(l_beta)?;
        // Map image-space gradients into trigger space: restrict to the
        // rectangle and zero out clipped pixels.
        let restrict = |gx: &Array3<f64>| -> Array3<f64> {
            let mut out = Array3::<f64>::zeros(pattern.raw_dim());
            for ch in 0..c {
                for i in 0..tcfg.height {
                    for j in 0..tcfg.width {
                        out[[ch, i, j]] =
                            gx[[ch, tcfg.top + i, tcfg.left + j]] * clip_mask[[ch, i, j]];
                    }
                }
            }
            out
        };
        Ok((combined, Some((restrict(&gx_alpha), restrict(&gx_beta)))))
    };

    for iter in 0..tcfg.max_iters {
        let (combined, grads) = eval_pair(&mut rng, &pattern, true)?;
        loss_history.push(combined);
        if combined <= tcfg.tau {
            iterations_used = iter;
            break;
        }
        let (g_alpha, g_beta) = grads.expect("gradients requested");
        let delta = pcgrad(&g_alpha, &(g_beta * tcfg.gamma), tcfg.pcgrad_mode);
        pattern.zip_mut_with(&delta, |t, &d| *t = (*t - tcfg.lr * d).clamp(0.0, 1.0));
        iterations_used = iter + 1;
    }
    if loss_history.is_empty() {
        // Zero-iteration request: still record the loss of the initial trigger.
        let (combined, _) = eval_pair(&mut rng, &pattern, false)?;
        loss_history.push(combined);
    }

    Ok(Trigger {
        pattern: quantize16(&pattern),
        top: tcfg.top,
        left: tcfg.left,
        final_loss: *loss_history.last().expect("non-empty history"),
        iterations_used,
        loss_history,
    })
}
