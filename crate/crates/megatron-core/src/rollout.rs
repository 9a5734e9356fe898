//! Gradient-attention rollout, class-token importance scores, and the
//! attention diffusion area around a trigger.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::vit::{AttentionStack, ModelConfig};

/// Class-token row of the rolled-out matrix plus token-grid geometry.
#[derive(Debug, Clone)]
pub struct ImportanceScores {
    /// Length-p vector; entry 0 is the class-token self term.
    pub scores: Array1<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl ImportanceScores {
    pub fn token_count(&self) -> usize {
        self.scores.len()
    }
}

/// Token set the diffusion loss concentrates importance on.
#[derive(Debug, Clone)]
pub struct DiffusionArea {
    /// All tokens in the area (trigger tokens plus dilation), class token excluded.
    pub token_indices: BTreeSet<usize>,
    /// Tokens covering the trigger rectangle.
    pub trigger_tokens: BTreeSet<usize>,
    /// Chebyshev dilation radius in tokens.
    pub radius: usize,
}

impl DiffusionArea {
    /// |D|
    pub fn q(&self) -> usize {
        self.token_indices.len()
    }

    /// m — size of the trigger-token set.
    pub fn m(&self) -> usize {
        self.trigger_tokens.len()
    }
}

/// Pixel-space rectangle (top-left corner plus extent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Roll attention-times-gradient matrices through the layers:
/// `R_0 = mean_h(attn_0) ⊙ mean_h(grad_0)`, then
/// `R_l = (mean_h(attn_l) ⊙ mean_h(grad_l)) · R_{l-1}`.
///
/// Heads are averaged before the elementwise product. No clamping and no
/// residual term are applied; see [`grad_attention_rollout_with`] for the
/// clamped variant.
pub fn grad_attention_rollout(stack: &AttentionStack) -> Result<Array2<f64>> {
    grad_attention_rollout_with(stack, false)
}

/// Rollout with optional clamping of each `attn ⊙ grad` product at zero.
pub fn grad_attention_rollout_with(stack: &AttentionStack, clamp: bool) -> Result<Array2<f64>> {
    let grads = stack
        .attn_grad
        .as_ref()
        .ok_or_else(|| Error::Contract("attention gradients missing from stack".into()))?;
    if stack.attn.is_empty() {
        return Err(Error::Contract("stack has no layers".into()));
    }
    if grads.len() != stack.attn.len() {
        return Err(Error::Dimension(format!(
            "gradient layer count {} does not match attention layer count {}",
            grads.len(),
            stack.attn.len()
        )));
    }
    let mut rolled: Option<Array2<f64>> = None;
    for (a, g) in stack.attn.iter().zip(grads.iter()) {
        if a.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "attention shape {:?} does not match gradient shape {:?}",
                a.shape(),
                g.shape()
            )));
        }
        let abar = a.mean_axis(Axis(0)).expect("non-empty heads");
        let gbar = g.mean_axis(Axis(0)).expect("non-empty heads");
        let mut w = abar * gbar;
        if clamp {
            w.mapv_inplace(|v| v.max(0.0));
        }
        rolled = Some(match rolled {
            None => w,
            Some(prev) => w.dot(&prev),
        });
    }
    Ok(rolled.expect("at least one layer"))
}

/// Row 0 of the rolled-out matrix. The token grid is inferred as square
/// (p − 1 must be a perfect square).
pub fn importance_scores(rolled: &Array2<f64>) -> Result<ImportanceScores> {
    if rolled.nrows() != rolled.ncols() {
        return Err(Error::Dimension(format!(
            "rolled-out matrix is {}x{}, expected square",
            rolled.nrows(),
            rolled.ncols()
        )));
    }
    let p = rolled.nrows();
    if p < 2 {
        return Err(Error::Dimension("need at least one image token".into()));
    }
    let side = ((p - 1) as f64).sqrt().round() as usize;
    if side * side != p - 1 {
        return Err(Error::Dimension(format!(
            "token count {p} does not describe a square grid"
        )));
    }
    Ok(ImportanceScores {
        scores: rolled.row(0).to_owned(),
        grid_rows: side,
        grid_cols: side,
    })
}

/// Tokens overlapped by a pixel rectangle, dilated by a Chebyshev radius on
/// the token grid. The class token is never included. Areas larger than
/// three times the trigger-token count are rejected.
pub fn diffusion_area(
    trigger_rect: PixelRect,
    config: &ModelConfig,
    radius: usize,
) -> Result<DiffusionArea> {
    config.validate()?;
    let img = config.image_size;
    if trigger_rect.height == 0 || trigger_rect.width == 0 {
        return Err(Error::Input("trigger rectangle must be non-empty".into()));
    }
    if trigger_rect.top + trigger_rect.height > img || trigger_rect.left + trigger_rect.width > img
    {
        return Err(Error::Input(format!(
            "trigger rectangle {trigger_rect:?} lies outside the {img}x{img} image"
        )));
    }
    let ps = config.patch_size;
    let side = config.grid_side();
    let row0 = trigger_rect.top / ps;
    let row1 = (trigger_rect.top + trigger_rect.height - 1) / ps;
    let col0 = trigger_rect.left / ps;
    let col1 = (trigger_rect.left + trigger_rect.width - 1) / ps;

    let token_at = |r: usize, c: usize| 1 + r * side + c;
    let mut trigger_tokens = BTreeSet::new();
    for r in row0..=row1 {
        for c in col0..=col1 {
            trigger_tokens.insert(token_at(r, c));
        }
    }
    let mut token_indices = BTreeSet::new();
    for r in row0.saturating_sub(radius)..=(row1 + radius).min(side - 1) {
        for c in col0.saturating_sub(radius)..=(col1 + radius).min(side - 1) {
            token_indices.insert(token_at(r, c));
        }
    }
    let (q, m) = (token_indices.len(), trigger_tokens.len());
    if q > 3 * m {
        return Err(Error::Bound(format!(
            "diffusion area has {q} tokens, more than three times the {m} trigger tokens; \
             reduce the radius"
        )));
    }
    Ok(DiffusionArea {
        token_indices,
        trigger_tokens,
        radius,
    })
}

/// Σ_{i∈D}(1 − scores[i]) + Σ_{i∉D, i≥1} scores[i].
pub fn diffusion_loss(scores: &ImportanceScores, area: &DiffusionArea) -> Result<f64> {
    let p = scores.token_count();
    if let Some(&max) = area.token_indices.iter().next_back() {
        if max >= p {
            return Err(Error::Input(format!(
                "area token index {max} out of range for {p} scores"
            )));
        }
    }
    let mut loss = 0.0;
    for i in 1..p {
        if area.token_indices.contains(&i) {
            loss += 1.0 - scores.scores[i];
        } else {
            loss += scores.scores[i];
        }
    }
    Ok(loss)
}

/// Per-token coefficients for the diffusion loss as a linear functional:
/// `loss = offset + Σ coeffs[i]·scores[i]` with coeffs[0] = 0, −1 inside the
/// area and +1 outside; offset = |D|.
pub fn diffusion_loss_coefficients(area: &DiffusionArea, p: usize) -> (Array1<f64>, f64) {
    let mut coeffs = Array1::<f64>::zeros(p);
    for i in 1..p {
        coeffs[i] = if area.token_indices.contains(&i) {
            -1.0
        } else {
            1.0
        };
    }
    (coeffs, area.q() as f64)
}

/// Decompose the diffusion-loss gap between two score vectors.
///
/// With the area fixed to tokens 1..=m on both sides:
/// `gap = L_with − L_without`,
/// `bracket = Σ_{i=1..m}(without_i − with_i) − Σ_{i=q+1..p−1}(without_i − with_i)`,
/// `tail = Σ_{i=m+1..q}(with_i − without_i)`,
/// and `gap = bracket + tail` exactly. Returns (gap, bracket, tail).
pub fn beta_gap_decomposition(
    scores_with: &ImportanceScores,
    scores_without: &ImportanceScores,
    m: usize,
    q: usize,
    p: usize,
) -> Result<(f64, f64, f64)> {
    if scores_with.token_count() != p || scores_without.token_count() != p {
        return Err(Error::Input(format!(
            "score vectors must have length {p}, got {} and {}",
            scores_with.token_count(),
            scores_without.token_count()
        )));
    }
    if m == 0 || m > q || q >= p {
        return Err(Error::Input(format!(
            "need 1 <= m <= q < p, got m={m}, q={q}, p={p}"
        )));
    }
    let w = &scores_with.scores;
    let o = &scores_without.scores;
    let loss = |s: &Array1<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 1..p {
            if i <= m {
                acc += 1.0 - s[i];
            } else {
                acc += s[i];
            }
        }
        acc
    };
    let gap = loss(w) - loss(o);
    let mut bracket = 0.0;
    for i in 1..=m {
        bracket += o[i] - w[i];
    }
    for i in (q + 1)..p {
        bracket -= o[i] - w[i];
    }
    let mut tail = 0.0;
    for i in (m + 1)..=q {
        tail += w[i] - o[i];
    }
    Ok((gap, bracket, tail))
}

/// Write the image-token scores as a rows×cols plain text matrix.
pub fn export_scores_text(scores: &ImportanceScores) -> String {
    let mut out = String::new();
    for r in 0..scores.grid_rows {
        let row: Vec<String> = (0..scores.grid_cols)
            .map(|c| format!("{:.9e}", scores.scores[1 + r * scores.grid_cols + c]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Render the image-token scores as a grayscale heatmap (one pixel per
/// token), normalized to the score range.
pub fn render_heatmap(scores: &ImportanceScores) -> image::GrayImage {
    let (rows, cols) = (scores.grid_rows, scores.grid_cols);
    let body = scores.scores.slice(ndarray::s![1..]);
    let min = body.fold(f64::INFINITY, |m, &v| m.min(v));
    let max = body.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let span = (max - min).max(1e-12);
    image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        let v = scores.scores[1 + y as usize * cols + x as usize];
        image::Luma([(((v - min) / span) * 255.0).round() as u8])
    })
}
