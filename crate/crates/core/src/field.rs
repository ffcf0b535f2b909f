//! Sigmoid occupancy and smooth-minimum SDF blending.
//!
//! Two sigmoid orientations are used on purpose:
//! - the rendering sigmoid `sigma(a * x)` increases with its argument and is
//!   applied to the SDF directly inside the alpha formula ([`crate::render`]);
//! - the occupancy gate `sigma(-a * phi)` increases as the SDF goes negative,
//!   i.e. toward occupied space, and gates dynamic aggregation and the
//!   similarity-flow loss.

use crate::adjoint::Real;

/// Learnable sharpness and fixed blend temperature. One instance is shared
/// by blending, occupancy gating, and rendering.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SharpnessParams {
    /// Sigmoid sharpness (1/m); must stay positive.
    pub sharpness: f64,
    /// Blend temperature; must stay positive.
    pub temperature: f64,
}

impl SharpnessParams {
    pub fn new(sharpness: f64, temperature: f64) -> Self {
        assert!(sharpness > 0.0 && temperature > 0.0);
        SharpnessParams { sharpness, temperature }
    }
}

impl Default for SharpnessParams {
    fn default() -> Self {
        SharpnessParams { sharpness: 10.0, temperature: 2.0 }
    }
}

/// Numerically stable logistic `1 / (1 + e^-x)`.
pub fn sigmoid<S: Real>(x: S) -> S {
    if x.val() >= 0.0 {
        ((-x).exp() + 1.0).recip()
    } else {
        let e = x.exp();
        e / (e + 1.0)
    }
}

/// `ln(1 + e^x)` without overflow; derivative is the logistic.
pub fn softplus<S: Real>(x: S) -> S {
    x.relu() + (-x.abs()).exp().ln_1p()
}

/// Rendering sigmoid: increases with `x`.
pub fn rendering_sigmoid<S: Real>(x: S, sharpness: S) -> S {
    sigmoid(sharpness * x)
}

/// Occupancy gate: probability-like, 1 deep inside surfaces, 0 in free space.
pub fn occupancy<S: Real>(sdf: S, sharpness: S) -> S {
    sigmoid(-(sharpness * sdf))
}

/// Plain-f64 convenience for the two documented sigmoid orientations.
pub fn sigmoid_occ(phi: f64, sharpness: f64) -> f64 {
    occupancy(phi, sharpness)
}

/// Temperature-scaled log-sum-exp smooth minimum:
/// `-(tau/a) * ln(e^(-a*x/tau) + e^(-a*y/tau))`.
///
/// Evaluated in the shifted form `min(x, y) - (tau/a) * ln(1 + e^(-a*|x-y|/tau))`,
/// which never overflows and satisfies
/// `min(x, y) - (tau/a) * ln(2) <= result <= min(x, y)`.
pub fn smooth_min<S: Real>(x: S, y: S, sharpness: S, temperature: f64) -> S {
    let k = sharpness * (1.0 / temperature);
    let m = x.min(y);
    let gap = (x - y).abs();
    m - (-(k * gap)).exp().ln_1p() / k
}

/// Blend static and dynamic SDFs into the full-scene SDF.
pub fn blend_sdf(phi_static: f64, phi_dynamic: f64, p: &SharpnessParams) -> f64 {
    smooth_min(phi_static, phi_dynamic, p.sharpness, p.temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{Tape, Var};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        for a in [0.1, 1.0, 10.0, 200.0] {
            assert_eq!(sigmoid_occ(0.0, a), 0.5);
        }
    }

    #[test]
    fn occupancy_asymptotes() {
        assert!(sigmoid_occ(1e6, 10.0) < 1e-12);
        assert!(sigmoid_occ(-1e6, 10.0) > 1.0 - 1e-12);
    }

    #[test]
    fn occupancy_closed_form_value() {
        // 1 / (1 + e^-2)
        assert_relative_eq!(sigmoid_occ(-0.2, 10.0), 0.8807970779778823, epsilon = 1e-12);
    }

    #[test]
    fn blend_symmetric_case() {
        // x = y = v gives v - ln(2)/k.
        let p = SharpnessParams::new(4.0, 2.0);
        let k = p.sharpness / p.temperature;
        let v = 0.7;
        assert_relative_eq!(blend_sdf(v, v, &p), v - (2.0f64).ln() / k, epsilon = 1e-12);
    }

    #[test]
    fn blend_dominant_term() {
        let p = SharpnessParams::new(100.0, 2.0);
        assert!((blend_sdf(0.0, 10.0, &p) - 0.0).abs() < 1e-9);
    }

    #[test]
    fn blend_closed_form_value() {
        let p = SharpnessParams::new(1.0, 1.0);
        let expected = -((-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert_relative_eq!(blend_sdf(1.0, 2.0, &p), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.6867383124818128, epsilon = 1e-10);
    }

    #[test]
    fn blend_survives_extreme_magnitudes() {
        let p = SharpnessParams::new(100.0, 0.5);
        let out = blend_sdf(-5000.0, 4000.0, &p);
        assert!(out.is_finite());
        assert_relative_eq!(out, -5000.0, max_relative = 1e-12);
    }

    #[test]
    fn taped_blend_gradient_matches_finite_differences() {
        let eval = |x: f64, y: f64, a: f64| -> f64 { smooth_min(x, y, a, 2.0) };
        let (x, y, a) = (0.4, -0.3, 7.0);
        let tape = Tape::new();
        let vx = tape.leaf(x, 0);
        let vy = tape.leaf(y, 1);
        let va = tape.leaf(a, 2);
        let out: Var = smooth_min(vx, vy, va, 2.0);
        assert_eq!(out.val(), eval(x, y, a));
        let mut g = [0.0; 3];
        for (slot, gv) in tape.backward_sparse(out, 1.0) {
            g[slot as usize] += gv;
        }
        let h = 1e-6;
        let fd = [
            (eval(x + h, y, a) - eval(x - h, y, a)) / (2.0 * h),
            (eval(x, y + h, a) - eval(x, y - h, a)) / (2.0 * h),
            (eval(x, y, a + h) - eval(x, y, a - h)) / (2.0 * h),
        ];
        for i in 0..3 {
            assert!((g[i] - fd[i]).abs() < 1e-7, "{} vs {}", g[i], fd[i]);
        }
    }

    proptest! {
        #[test]
        fn sigmoid_complement(phi in -50.0f64..50.0, a in 0.01f64..200.0) {
            let s = sigmoid_occ(phi, a) + sigmoid_occ(-phi, a);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn blend_is_symmetric_and_bounded(
            x in -10.0f64..10.0, y in -10.0f64..10.0,
            k in prop::sample::select(vec![1.0, 10.0, 100.0]),
        ) {
            let p = SharpnessParams::new(k, 1.0);
            let b = blend_sdf(x, y, &p);
            let b_swapped = blend_sdf(y, x, &p);
            prop_assert!((b - b_swapped).abs() < 1e-12);
            let m = x.min(y);
            prop_assert!(b <= m + 1e-12);
            prop_assert!(b >= m - (2.0f64).ln() / k - 1e-12);
        }
    }
}
