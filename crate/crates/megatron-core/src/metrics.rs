//! Attack-effectiveness metrics (CDA, SASR, SCDA) and stealth metrics
//! (PSNR, SSIM, L1), plus the pluggable perceptual-metric interface.

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trigger::{patch_image, SubTrigger};
use crate::vit::{ImageSample, VitModel};

/// PSNR returned for a zero-MSE pair, so reports stay finite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Sliding-window SSIM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    /// Window side in pixels.
    pub window: usize,
    /// Exponents on the luminance/contrast/structure terms, each in [0,1].
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Stabilizers.
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        // Field-standard constants for unit-range pixels.
        Self {
            window: 8,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            c1: (0.01f64).powi(2),
            c2: (0.03f64).powi(2),
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Input("ssim window must be >= 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("ssim {name} must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Fraction of samples the model classifies as their ground-truth label.
pub fn cda(model: &VitModel, clean_set: &[ImageSample]) -> Result<f64> {
    if clean_set.is_empty() {
        return Err(Error::Input("clean set is empty".into()));
    }
    let hits: Result<Vec<bool>> = clean_set
        .par_iter()
        .map(|s| Ok(model.predict(s)? == s.label))
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Fraction of patched source samples classified as the target label.
pub fn sasr(
    model: &VitModel,
    source_set: &[ImageSample],
    sub: &SubTrigger,
    location: (usize, usize),
    target_label: usize,
) -> Result<f64> {
    if source_set.is_empty() {
        return Err(Error::Input("source set is empty".into()));
    }
    let (top, left) = location;
    let hits: Result<Vec<bool>> = source_set
        .par_iter()
        .map(|s| {
            let patched = patch_image(s, sub, top, left)?;
            Ok(model.predict(&patched)? == target_label)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Fraction of clean source-label samples still classified as that label.
/// All samples must carry the same label.
pub fn scda(model: &VitModel, source_set: &[ImageSample]) -> Result<f64> {
    if source_set.is_empty() {
        return Err(Error::Input("source set is empty".into()));
    }
    let label = source_set[0].label;
    if source_set.iter().any(|s| s.label != label) {
        return Err(Error::Input(
            "scda expects a single-label source set".into(),
        ));
    }
    let hits: Result<Vec<bool>> = source_set
        .par_iter()
        .map(|s| Ok(model.predict(s)? == label))
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// 10·log₁₀(peak²/MSE), capped at [`PSNR_CAP_DB`] when the images match.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Input("peak must be > 0".into()));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * ((peak * peak) / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute pixel difference.
pub fn l1_distance(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

fn signed_pow(base: f64, exp: f64) -> f64 {
    if exp == 1.0 {
        base
    } else {
        base.signum() * base.abs().powf(exp)
    }
}

/// Mean SSIM over dense sliding windows, channels averaged.
///
/// Per window: luminance `(2μμ'+C1)/(μ²+μ'²+C1)`, contrast
/// `(2σσ'+C2)/(σ²+σ'²+C2)`, structure `(σ_ab+C3)/(σσ'+C3)` with `C3=C2/2`,
/// combined as `l^α·c^β·s^γ`. Variances are population (divide by n).
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if cfg.window > h || cfg.window > w {
        return Err(Error::Input(format!(
            "ssim window {} larger than image {h}x{w}",
            cfg.window
        )));
    }
    let win = cfg.window;
    let n = (win * win) as f64;
    let c3 = cfg.c2 / 2.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 0..=(h - win) {
            for j in 0..=(w - win) {
                let mut sa = 0.0;
                let mut sb = 0.0;
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for di in 0..win {
                    for dj in 0..win {
                        let x = a[[ch, i + di, j + dj]];
                        let y = b[[ch, i + di, j + dj]];
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let mu_a = sa / n;
                let mu_b = sb / n;
                let var_a = (saa / n - mu_a * mu_a).max(0.0);
                let var_b = (sbb / n - mu_b * mu_b).max(0.0);
                let cov = sab / n - mu_a * mu_b;
                let (sd_a, sd_b) = (var_a.sqrt(), var_b.sqrt());
                let lum = (2.0 * mu_a * mu_b + cfg.c1) / (mu_a * mu_a + mu_b * mu_b + cfg.c1);
                let con = (2.0 * sd_a * sd_b + cfg.c2) / (var_a + var_b + cfg.c2);
                let stru = (cov + c3) / (sd_a * sd_b + c3);
                total += signed_pow(lum, cfg.alpha)
                    * signed_pow(con, cfg.beta)
                    * signed_pow(stru, cfg.gamma);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// External perceptual-distance provider (e.g. a learned metric served out
/// of process). The toolkit never computes one itself.
pub trait PerceptualMetric: Sync {
    fn distance(&self, a: &Array3<f64>, b: &Array3<f64>) -> std::result::Result<f64, String>;
}

/// Perceptual distance through an optional provider: `Ok(None)` when no
/// provider is configured, an error when the provider fails — never a
/// fabricated number.
pub fn lpips_stub(
    a: &Array3<f64>,
    b: &Array3<f64>,
    provider: Option<&dyn PerceptualMetric>,
) -> Result<Option<f64>> {
    match provider {
        None => Ok(None),
        Some(p) => p
            .distance(a, b)
            .map(Some)
            .map_err(|e| Error::Input(format!("perceptual metric unavailable: {e}"))),
    }
}

/// All effectiveness and stealth metrics for one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackReport {
    /// Clean-data accuracy of the backdoored victim.
    pub cda: f64,
    /// Attack success rate on patched source-label inputs.
    pub sasr: f64,
    /// Clean accuracy restricted to the source label.
    pub scda: f64,
    /// Clean-data accuracy of the clean-baseline victim.
    pub baseline_cda: f64,
    /// Trigger-misclassification rate of the clean-baseline victim under
    /// the same patched inputs — the no-backdoor reference for SASR.
    pub baseline_sasr: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub l1_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpips_mean: Option<f64>,
    /// SASR with the sub-trigger displaced by whole tokens at test time.
    pub shift_sasr: Vec<ShiftSasr>,
    /// SASR/CDA of the backdoored victim under the patch-processing probe,
    /// when the probe is enabled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defense_sasr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub defense_cda: Option<f64>,
    pub poison_count: usize,
    pub seed: u64,
    /// Fully-resolved experiment configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSasr {
    /// Offset in whole tokens, applied along both grid axes.
    pub shift_tokens: usize,
    pub sasr: f64,
}

impl AttackReport {
    /// Human-readable summary table with ≥ 6 significant digits.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let mut row = |k: &str, v: String| {
            out.push_str(&format!("{k:<22} {v}\n"));
        };
        row("metric", "value".into());
        row("cda", format!("{:.6}", self.cda));
        row("sasr", format!("{:.6}", self.sasr));
        row("scda", format!("{:.6}", self.scda));
        row("baseline_cda", format!("{:.6}", self.baseline_cda));
        row("baseline_sasr", format!("{:.6}", self.baseline_sasr));
        row("psnr_mean", format!("{:.6}", self.psnr_mean));
        row("ssim_mean", format!("{:.6}", self.ssim_mean));
        row("l1_mean", format!("{:.6}", self.l1_mean));
        match self.lpips_mean {
            Some(v) => row("lpips_mean", format!("{v:.6}")),
            None => row("lpips_mean", "absent (no provider)".into()),
        }
        for s in &self.shift_sasr {
            row(
                &format!("sasr_shift_{}", s.shift_tokens),
                format!("{:.6}", s.sasr),
            );
        }
        if let Some(v) = self.defense_sasr {
            row("defense_sasr", format!("{v:.6}"));
        }
        if let Some(v) = self.defense_cda {
            row("defense_cda", format!("{v:.6}"));
        }
        row("poison_count", format!("{}", self.poison_count));
        row("seed", format!("{}", self.seed));
        out
    }
}
