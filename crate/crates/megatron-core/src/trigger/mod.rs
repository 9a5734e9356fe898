//! Trigger optimization, masking into sub-triggers, and image patching.

mod artifact;
mod generate;
mod pcgrad;

pub use artifact::{load_trigger, save_trigger, TriggerArtifact, TriggerArtifactMeta};
pub use generate::generate_trigger;
pub use pcgrad::{pcgrad, PcGradMode};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::PixelRect;
use crate::vit::ImageSample;

/// How the trigger tensor is initialized before optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Uniform random in [0,1].
    #[default]
    UniformRandom,
    Zeros,
}

/// Trigger generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerConfig {
    pub width: usize,
    pub height: usize,
    /// Top-left pixel of the trigger placement.
    pub top: usize,
    pub left: usize,
    /// Weight of the diffusion loss in the combined objective.
    pub gamma: f64,
    pub lr: f64,
    pub max_iters: usize,
    /// Early-stop threshold on the combined loss.
    pub tau: f64,
    pub init_mode: InitMode,
    /// Dilation of the attention diffusion area, in tokens.
    pub diffusion_radius: usize,
    pub pcgrad_mode: PcGradMode,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            top: 20,
            left: 20,
            gamma: 1.0,
            lr: 0.05,
            max_iters: 200,
            tau: 0.0,
            init_mode: InitMode::UniformRandom,
            diffusion_radius: 0,
            pcgrad_mode: PcGradMode::Standard,
        }
    }
}

impl TriggerConfig {
    pub fn rect(&self) -> PixelRect {
        PixelRect {
            top: self.top,
            left: self.left,
            height: self.height,
            width: self.width,
        }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Input("gamma must be >= 0".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input("trigger must be non-empty".into()));
        }
        if self.top + self.height > image_size || self.left + self.width > image_size {
            return Err(Error::Input(format!(
                "trigger rectangle exceeds the {image_size}x{image_size} image"
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Input("trigger lr must be > 0".into()));
        }
        Ok(())
    }
}

/// An optimized trigger pattern.
#[derive(Debug, Clone)]
pub struct Trigger {
    /// (channels, height, width), values in [0,1] on the 16-bit grid.
    pub pattern: Array3<f64>,
    pub top: usize,
    pub left: usize,
    /// Combined loss observed at the last optimization step.
    pub final_loss: f64,
    pub iterations_used: usize,
    /// Combined loss per optimization step, for descent diagnostics.
    pub loss_history: Vec<f64>,
}

impl Trigger {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.pattern.shape();
        (s[0], s[1], s[2])
    }
}

/// One masked, transparency-blended fragment of the trigger.
#[derive(Debug, Clone)]
pub struct SubTrigger {
    /// Blended pattern over the full trigger rectangle.
    pub pattern: Array3<f64>,
    /// Binary mask of this fragment's area, (height, width).
    pub mask: Array2<f64>,
    pub index: usize,
    pub phi_a: f64,
    pub phi_d: f64,
}

/// Split the full trigger mask into `k` disjoint horizontal bands.
///
/// Pixels are banded in flattened row-major order: each band gets
/// ⌊n/k⌋ pixels and the remainder goes to the last band, so when `k`
/// divides the row count the bands are whole pixel rows.
pub fn split_masks(trigger_dims: (usize, usize), k: usize) -> Result<Vec<Array2<f64>>> {
    let (h, w) = trigger_dims;
    let n = h * w;
    if k == 0 {
        return Err(Error::Input("sub-trigger count must be >= 1".into()));
    }
    if k > n {
        return Err(Error::Input(format!(
            "cannot split {n} trigger pixels into {k} masks"
        )));
    }
    let base = n / k;
    let mut masks = Vec::with_capacity(k);
    for i in 0..k {
        let start = i * base;
        let end = if i == k - 1 { n } else { (i + 1) * base };
        let mut m = Array2::<f64>::zeros((h, w));
        for flat in start..end {
            m[[flat / w, flat % w]] = 1.0;
        }
        masks.push(m);
    }
    Ok(masks)
}

/// Blend a sub-trigger: `phi_a · mask ⊙ T + phi_d · (1 − mask) ⊙ T`.
pub fn make_sub_trigger(
    trigger: &Trigger,
    mask: &Array2<f64>,
    phi_a: f64,
    phi_d: f64,
    index: usize,
) -> Result<SubTrigger> {
    if !(0.0..=1.0).contains(&phi_a) || !(0.0..=1.0).contains(&phi_d) {
        return Err(Error::Input(format!(
            "transparency values must lie in [0,1], got phi_a={phi_a}, phi_d={phi_d}"
        )));
    }
    let (_, h, w) = trigger.dims();
    if mask.shape() != [h, w] {
        return Err(Error::Dimension(format!(
            "mask shape {:?} does not match trigger ({h},{w})",
            mask.shape()
        )));
    }
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Input("mask must be binary".into()));
    }
    let mut pattern = trigger.pattern.clone();
    for mut chan in pattern.axis_iter_mut(Axis(0)) {
        chan.indexed_iter_mut().for_each(|((i, j), v)| {
            let m = mask[[i, j]];
            *v *= phi_a * m + phi_d * (1.0 - m);
        });
    }
    Ok(SubTrigger {
        pattern,
        mask: mask.clone(),
        index,
        phi_a,
        phi_d,
    })
}

/// Add a sub-trigger to an image at (top, left), clipping into [0,1].
/// Pixels outside the trigger rectangle are untouched; the label is kept.
pub fn patch_image(image: &ImageSample, sub: &SubTrigger, top: usize, left: usize) -> Result<ImageSample> {
    patch_with_pattern(image, &sub.pattern, top, left)
}

/// Additive patch with an arbitrary pattern tensor (used during trigger
/// generation, where the unblended trigger is applied).
pub fn patch_with_pattern(
    image: &ImageSample,
    pattern: &Array3<f64>,
    top: usize,
    left: usize,
) -> Result<ImageSample> {
    let (pc, ph, pw) = (pattern.shape()[0], pattern.shape()[1], pattern.shape()[2]);
    let (c, h, w) = image.shape();
    if pc != c {
        return Err(Error::Dimension(format!(
            "pattern has {pc} channels but image has {c}"
        )));
    }
    if top + ph > h || left + pw > w {
        return Err(Error::Input(format!(
            "placement ({top},{left}) of a {ph}x{pw} pattern exceeds the {h}x{w} image"
        )));
    }
    let mut pixels = image.pixels.clone();
    for ch in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                let v = pixels[[ch, top + i, left + j]] + pattern[[ch, i, j]];
                pixels[[ch, top + i, left + j]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(ImageSample {
        pixels,
        label: image.label,
    })
}

/// Like [`patch_with_pattern`], also returning a pass-through mask over the
/// trigger rectangle: 1 where the sum stayed inside [0,1] (the clip is the
/// identity there), 0 where it was clipped.
pub(crate) fn patch_with_clip_mask(
    image: &ImageSample,
    pattern: &Array3<f64>,
    top: usize,
    left: usize,
) -> Result<(ImageSample, Array3<f64>)> {
    let patched = patch_with_pattern(image, pattern, top, left)?;
    let (c, ph, pw) = (pattern.shape()[0], pattern.shape()[1], pattern.shape()[2]);
    let mut mask = Array3::<f64>::zeros((c, ph, pw));
    for ch in 0..c {
        for i in 0..ph {
            for j in 0..pw {
                let raw = image.pixels[[ch, top + i, left + j]] + pattern[[ch, i, j]];
                if (0.0..=1.0).contains(&raw) {
                    mask[[ch, i, j]] = 1.0;
                }
            }
        }
    }
    Ok((patched, mask))
}

/// Squared Frobenius distance between two head-averaged attention tensors.
pub fn latent_loss(
    attn_last_patched: &Array3<f64>,
    attn_last_target: &Array3<f64>,
) -> Result<f64> {
    if attn_last_patched.shape() != attn_last_target.shape() {
        return Err(Error::Dimension(format!(
            "attention shapes {:?} and {:?} differ",
            attn_last_patched.shape(),
            attn_last_target.shape()
        )));
    }
    let a = attn_last_patched.mean_axis(Axis(0)).expect("non-empty heads");
    let b = attn_last_target.mean_axis(Axis(0)).expect("non-empty heads");
    Ok((&a - &b).iter().map(|&v| v * v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trigger_of(pattern: Array3<f64>) -> Trigger {
        Trigger {
            pattern,
            top: 0,
            left: 0,
            final_loss: 0.0,
            iterations_used: 0,
            loss_history: Vec::new(),
        }
    }

    #[test]
    fn latent_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(0.0..1.0));
        assert_abs_diff_eq!(latent_loss(&a, &a).unwrap(), 0.0, epsilon = 1e-15);

        // Single-head tensors differing by one entry of 0.5.
        let x = Array3::<f64>::zeros((1, 3, 3));
        let mut y = x.clone();
        y[[0, 1, 2]] = 0.5;
        assert_abs_diff_eq!(latent_loss(&x, &y).unwrap(), 0.25, epsilon = 1e-15);

        // Random pair vs direct summation oracle.
        let b = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(0.0..1.0));
        let am = a.mean_axis(Axis(0)).unwrap();
        let bm = b.mean_axis(Axis(0)).unwrap();
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let d = am[[i, j]] - bm[[i, j]];
                oracle += d * d;
            }
        }
        assert!((latent_loss(&a, &b).unwrap() - oracle).abs() < 1e-10);

        let c = Array3::<f64>::zeros((2, 4, 4));
        assert!(latent_loss(&a, &c).is_err());
    }

    #[test]
    fn split_masks_single() {
        let masks = split_masks((4, 4), 1).unwrap();
        assert_eq!(masks.len(), 1);
        assert!(masks[0].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn split_masks_32x32_into_8_bands() {
        let masks = split_masks((32, 32), 8).unwrap();
        assert_eq!(masks.len(), 8);
        for (i, m) in masks.iter().enumerate() {
            assert_eq!(m.sum() as usize, 128);
            // Band i covers rows 4i..4i+4 exactly.
            for r in 0..32 {
                let row_sum: f64 = m.row(r).sum();
                if r >= 4 * i && r < 4 * (i + 1) {
                    assert_eq!(row_sum as usize, 32);
                } else {
                    assert_eq!(row_sum as usize, 0);
                }
            }
        }
    }

    #[test]
    fn split_masks_more_bands_than_rows() {
        let masks = split_masks((8, 8), 32).unwrap();
        assert_eq!(masks.len(), 32);
        let total: f64 = masks.iter().map(|m| m.sum()).sum();
        assert_eq!(total as usize, 64);
    }

    #[test]
    fn split_masks_too_many_rejected() {
        assert!(split_masks((2, 2), 5).is_err());
        assert!(split_masks((2, 2), 0).is_err());
    }

    #[test]
    fn sub_trigger_blend_cases() {
        let t = trigger_of(Array3::ones((3, 4, 4)));
        let masks = split_masks((4, 4), 2).unwrap();

        // phi_a = phi_d collapses to a uniform scale.
        let s = make_sub_trigger(&t, &masks[0], 0.3, 0.3, 0).unwrap();
        assert!(s.pattern.iter().all(|&v| (v - 0.3).abs() < 1e-15));

        // phi_a=1, phi_d=0 keeps the masked area only.
        let s = make_sub_trigger(&t, &masks[0], 1.0, 0.0, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i < 2 { 1.0 } else { 0.0 };
                assert_eq!(s.pattern[[0, i, j]], expect);
            }
        }

        // Defaults: 0.5 on the top half, 0.1 on the bottom half.
        let s = make_sub_trigger(&t, &masks[0], 0.5, 0.1, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i < 2 { 0.5 } else { 0.1 };
                assert_abs_diff_eq!(s.pattern[[1, i, j]], expect, epsilon = 1e-15);
            }
        }

        assert!(make_sub_trigger(&t, &masks[0], 1.5, 0.1, 0).is_err());
    }

    #[test]
    fn patching_cases() {
        let img = ImageSample::new(Array3::zeros((3, 8, 8)), 1).unwrap();
        let t = trigger_of(Array3::from_elem((3, 2, 2), 0.5));
        let mask = split_masks((2, 2), 1).unwrap().remove(0);

        // All-zero sub-trigger leaves the image unchanged.
        let zero = make_sub_trigger(&trigger_of(Array3::zeros((3, 2, 2))), &mask, 0.5, 0.1, 0)
            .unwrap();
        let out = patch_image(&img, &zero, 3, 3).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.label, 1);

        // Black image plus 0.5 pattern.
        let half = make_sub_trigger(&t, &mask, 1.0, 1.0, 0).unwrap();
        let out = patch_image(&img, &half, 3, 3).unwrap();
        assert_eq!(out.pixels[[0, 3, 3]], 0.5);
        assert_eq!(out.pixels[[0, 5, 5]], 0.0);

        // White image clips to 1.
        let white = ImageSample::new(Array3::ones((3, 8, 8)), 0).unwrap();
        let out = patch_image(&white, &half, 0, 0).unwrap();
        assert!(out.pixels.iter().all(|&v| v == 1.0));

        // Out-of-bounds placement.
        assert!(patch_image(&img, &half, 7, 7).is_err());
    }

    #[test]
    fn clip_mask_marks_saturated_pixels() {
        let mut px = Array3::zeros((1, 4, 4));
        px[[0, 0, 0]] = 0.9;
        let img = ImageSample::new(px, 0).unwrap();
        let pattern = Array3::from_elem((1, 2, 2), 0.5);
        let (patched, mask) = patch_with_clip_mask(&img, &pattern, 0, 0).unwrap();
        assert_eq!(mask[[0, 0, 0]], 0.0); // 0.9 + 0.5 clipped
        assert_eq!(mask[[0, 0, 1]], 1.0);
        assert_eq!(patched.pixels[[0, 0, 0]], 1.0);
        assert_eq!(patched.pixels[[0, 1, 1]], 0.5);
    }

    proptest! {
        /// Masks partition the trigger for any valid K.
        #[test]
        fn masks_partition(h in 1usize..12, w in 1usize..12, k in 1usize..16) {
            prop_assume!(k <= h * w);
            let masks = split_masks((h, w), k).unwrap();
            let mut sum = Array2::<f64>::zeros((h, w));
            for m in &masks {
                // Pairwise disjointness: no cell may be covered twice.
                for (s, &v) in sum.iter_mut().zip(m.iter()) {
                    prop_assert!(!(*s == 1.0 && v == 1.0));
                    *s += v;
                }
            }
            prop_assert!(sum.iter().all(|&v| v == 1.0));
        }

        /// Blending is linear in the trigger pattern.
        #[test]
        fn sub_trigger_linearity(c in 0.0f64..1.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = Array3::from_shape_fn((3, 4, 4), |_| rng.gen_range(0.0..1.0));
            let t1 = trigger_of(base.clone());
            let t2 = trigger_of(base.mapv(|v| c * v));
            let mask = split_masks((4, 4), 4).unwrap().remove(1);
            let s1 = make_sub_trigger(&t1, &mask, 0.5, 0.1, 1).unwrap();
            let s2 = make_sub_trigger(&t2, &mask, 0.5, 0.1, 1).unwrap();
            for (a, b) in s1.pattern.iter().zip(s2.pattern.iter()) {
                prop_assert!((c * a - b).abs() < 1e-12);
            }
        }
    }
}
