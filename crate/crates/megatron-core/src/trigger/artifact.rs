//! Trigger artifact: lossless pattern image plus sidecar metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Trigger;
use crate::artifact::{is_quantized16, load_pixels_png, save_pixels_png};
use crate::error::{Error, Result};

pub const TRIGGER_PATTERN_FILE: &str = "pattern.png";
pub const TRIGGER_META_FILE: &str = "trigger.json";
const FORMAT_VERSION: u32 = 1;

/// Sidecar metadata persisted next to the pattern image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerArtifactMeta {
    pub format_version: u32,
    pub top: usize,
    pub left: usize,
    pub gamma: f64,
    pub k: usize,
    pub phi_a: f64,
    pub phi_d: f64,
    pub final_loss: f64,
    pub iterations_used: usize,
    pub seed: u64,
    /// SHA-256 of the experiment configuration that produced this trigger.
    pub config_hash: String,
}

/// A trigger together with its persisted metadata.
#[derive(Debug, Clone)]
pub struct TriggerArtifact {
    pub trigger: Trigger,
    pub meta: TriggerArtifactMeta,
}

/// Write `pattern.png` (16-bit, lossless) and `trigger.json` into `dir`.
/// The pattern must already lie on the 16-bit grid so the round trip is
/// bit-exact; [`super::generate_trigger`] guarantees that.
pub fn save_trigger(trigger: &Trigger, meta: &TriggerArtifactMeta, dir: &Path) -> Result<()> {
    if !is_quantized16(&trigger.pattern) {
        return Err(Error::Contract(
            "trigger pattern is not on the 16-bit grid; quantize before saving".into(),
        ));
    }
    std::fs::create_dir_all(dir)?;
    save_pixels_png(&trigger.pattern, &dir.join(TRIGGER_PATTERN_FILE))?;
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.top = trigger.top;
    meta.left = trigger.left;
    meta.final_loss = trigger.final_loss;
    meta.iterations_used = trigger.iterations_used;
    let json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(dir.join(TRIGGER_META_FILE), json)?;
    Ok(())
}

pub fn load_trigger(dir: &Path) -> Result<TriggerArtifact> {
    let meta_path = dir.join(TRIGGER_META_FILE);
    let raw = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", meta_path.display())))?;
    let meta: TriggerArtifactMeta = serde_json::from_str(&raw)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Input(format!(
            "trigger format version {} unsupported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let pattern = load_pixels_png(&dir.join(TRIGGER_PATTERN_FILE))?;
    Ok(TriggerArtifact {
        trigger: Trigger {
            pattern,
            top: meta.top,
            left: meta.left,
            final_loss: meta.final_loss,
            iterations_used: meta.iterations_used,
            loss_history: Vec::new(),
        },
        meta,
    })
}
