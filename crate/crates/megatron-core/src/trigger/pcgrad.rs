//! Gradient surgery for the two trigger losses.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

/// Conflict-branch behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PcGradMode {
    /// Project the first gradient onto the plane orthogonal to the second:
    /// `δ = g_α − (g_α·g_β/‖g_β‖²)·g_β`, so `δ·g_β = 0`.
    #[default]
    Standard,
    /// `δ = g_α + (g_α·g_β/‖g_β‖²)·g_β` — the additive form, kept for
    /// fidelity experiments.
    LiteralEq8,
}

/// Combine two gradients. When they do not conflict (cosine ≥ 0, or either
/// is zero) the result is the plain sum; otherwise the conflict branch of
/// the selected mode applies. The second gradient is expected to carry its
/// loss weight already.
pub fn pcgrad<D: Dimension>(
    g_alpha: &Array<f64, D>,
    g_beta: &Array<f64, D>,
    mode: PcGradMode,
) -> Array<f64, D> {
    assert_eq!(
        g_alpha.raw_dim(),
        g_beta.raw_dim(),
        "pcgrad inputs must have identical shapes"
    );
    let dot: f64 = g_alpha.iter().zip(g_beta.iter()).map(|(a, b)| a * b).sum();
    let na: f64 = g_alpha.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = g_beta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || dot >= 0.0 {
        return g_alpha + g_beta;
    }
    let coef = dot / (nb * nb);
    match mode {
        PcGradMode::Standard => g_alpha - &(g_beta * coef),
        PcGradMode::LiteralEq8 => g_alpha + &(g_beta * coef),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;
    use proptest::prelude::*;

    #[test]
    fn orthogonal_gradients_sum() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        let d = pcgrad(&a, &b, PcGradMode::Standard);
        assert_eq!(d, arr1(&[1.0, 1.0]));
    }

    #[test]
    fn fully_conflicting_gradients_cancel() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[-1.0, 0.0]);
        let d = pcgrad(&a, &b, PcGradMode::Standard);
        assert_abs_diff_eq!(d[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn aligned_gradients_sum() {
        let a = arr1(&[1.0, 1.0]);
        let b = arr1(&[2.0, 2.0]);
        let d = pcgrad(&a, &b, PcGradMode::Standard);
        assert_eq!(d, arr1(&[3.0, 3.0]));
    }

    #[test]
    fn zero_beta_is_non_conflict() {
        let a = arr1(&[1.0, 2.0]);
        let b = arr1(&[0.0, 0.0]);
        assert_eq!(pcgrad(&a, &b, PcGradMode::Standard), a);
    }

    #[test]
    fn literal_mode_amplifies_conflict() {
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[-1.0, 0.0]);
        // coef = -1/1; δ = a + coef·b = (1,0) + (1,0) = (2,0).
        let d = pcgrad(&a, &b, PcGradMode::LiteralEq8);
        assert_eq!(d, arr1(&[2.0, 0.0]));
    }

    proptest! {
        /// Standard conflict branch is orthogonal to g_β; non-conflict is the
        /// exact sum.
        #[test]
        fn standard_branch_properties(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let ga = arr1(&a);
            let gb = arr1(&b);
            let d = pcgrad(&ga, &gb, PcGradMode::Standard);
            let dot: f64 = ga.dot(&gb);
            let nb2: f64 = gb.dot(&gb);
            if dot < 0.0 && nb2 > 0.0 {
                let res = d.dot(&gb).abs();
                let scale = (d.dot(&d).sqrt() * nb2.sqrt()).max(1e-12);
                prop_assert!(res / scale < 1e-10);
            } else {
                for (x, (ai, bi)) in d.iter().zip(a.iter().zip(b.iter())) {
                    prop_assert_eq!(*x, ai + bi);
                }
            }
        }

        /// Scaling g_β by c > 0 leaves the standard conflict result unchanged.
        #[test]
        fn conflict_result_scale_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            let ga = arr1(&a);
            let gb = arr1(&b);
            let dot: f64 = ga.dot(&gb);
            prop_assume!(dot < 0.0);
            let d1 = pcgrad(&ga, &gb, PcGradMode::Standard);
            let d2 = pcgrad(&ga, &(gb.mapv(|v| c * v)), PcGradMode::Standard);
            for (x, y) in d1.iter().zip(d2.iter()) {
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
