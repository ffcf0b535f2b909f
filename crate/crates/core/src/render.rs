//! Differentiable ray rendering over SDF fields.
//!
//! A ray is sampled at uniform depths between volume entry and exit. Each
//! adjacent sample pair yields a termination probability
//! `alpha = max((Phi(phi_m) - Phi(phi_{m+1})) / Phi(phi_m), 0)` with the
//! increasing sigmoid `Phi` applied to the SDF, transmittance is the running
//! product of survival, and rendered depth/color are weight-averaged sums.
//! Weights are deliberately NOT renormalized; the normalized depth
//! `depth / weight_sum` is exposed separately for evaluation.

use nalgebra::Vector3;

use crate::adjoint::Real;
use crate::field::softplus;
use crate::grid::GridSpec;
use crate::scene::ray_aabb;

/// Uniform sample positions along one ray, in the field's coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
    pub spacing: f64,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.depths.len()
    }
    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Sample `count >= 2` uniformly spaced depths from volume entry to exit
/// (entry is 0 when the origin is inside). `None` when the ray misses the
/// volume entirely.
pub fn sample_ray(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    spec: &GridSpec,
    count: usize,
) -> Option<RaySamples> {
    assert!(count >= 2);
    let (entry, exit) = ray_aabb(origin, dir, &spec.origin, &spec.max_corner())?;
    if exit <= entry {
        return None;
    }
    let spacing = (exit - entry) / (count - 1) as f64;
    let depths: Vec<f64> = (0..count).map(|m| entry + spacing * m as f64).collect();
    let points = depths.iter().map(|&d| origin + dir * d).collect();
    Some(RaySamples { depths, points, spacing })
}

/// Termination probability between two consecutive SDF samples.
///
/// Evaluated in log space so extreme `sharpness * phi` products neither
/// overflow nor divide by a denormal sigmoid.
pub fn neus_alpha<S: Real>(phi_m: S, phi_next: S, sharpness: S) -> S {
    let s_m = sharpness * phi_m;
    let s_n = sharpness * phi_next;
    // Phi(s_n) / Phi(s_m) = exp(softplus(-s_m) - softplus(-s_n))
    let ratio = (softplus(-s_m) - softplus(-s_n)).exp();
    (-ratio + 1.0).relu()
}

/// Per-ray rendering products.
#[derive(Debug, Clone)]
pub struct RenderOut<S> {
    pub alphas: Vec<S>,
    pub transmittance: Vec<S>,
    pub weights: Vec<S>,
    /// Unnormalized weighted depth sum.
    pub depth: S,
    pub color: Option<[S; 3]>,
    pub weight_sum: S,
}

impl<S: Real> RenderOut<S> {
    /// Depth normalized by the accumulated weight, for evaluation.
    pub fn normalized_depth(&self) -> f64 {
        let w = self.weight_sum.val();
        if w > 1e-12 {
            self.depth.val() / w
        } else {
            0.0
        }
    }
}

/// Render a ray from precomputed per-sample SDF values (and optional
/// per-sample colors). The final sample gets alpha 0 since it has no
/// successor.
pub fn render<S: Real>(
    depths: &[f64],
    sdf: &[S],
    colors: Option<&[[S; 3]]>,
    sharpness: S,
) -> RenderOut<S> {
    let m = sdf.len();
    assert_eq!(depths.len(), m);
    assert!(m >= 2);
    let zero = sharpness * 0.0;
    let one = zero + 1.0;
    let mut alphas = Vec::with_capacity(m);
    for i in 0..m - 1 {
        alphas.push(neus_alpha(sdf[i], sdf[i + 1], sharpness));
    }
    alphas.push(zero);
    let mut transmittance = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    let mut t = one;
    for i in 0..m {
        transmittance.push(t);
        weights.push(t * alphas[i]);
        if i + 1 < m {
            t = t * (-alphas[i] + 1.0);
        }
    }
    let depth_terms: Vec<S> = weights.iter().zip(depths).map(|(&w, &d)| w * d).collect();
    let depth = crate::adjoint::pairwise_sum(&depth_terms).unwrap();
    let weight_sum = crate::adjoint::pairwise_sum(&weights).unwrap();
    let color = colors.map(|cs| {
        let mut out = [zero; 3];
        for ch in 0..3 {
            let terms: Vec<S> = weights.iter().zip(cs).map(|(&w, c)| w * c[ch]).collect();
            out[ch] = crate::adjoint::pairwise_sum(&terms).unwrap();
        }
        out
    });
    RenderOut { alphas, transmittance, weights, depth, color, weight_sum }
}

/// Render a ray by querying an SDF closure at each sample point (plain f64
/// path used by evaluation and tests).
pub fn render_query(
    samples: &RaySamples,
    sdf: impl Fn(&Vector3<f64>) -> f64,
    color: Option<&dyn Fn(&Vector3<f64>) -> [f64; 3]>,
    sharpness: f64,
) -> RenderOut<f64> {
    let phis: Vec<f64> = samples.points.iter().map(|p| sdf(p)).collect();
    let cols: Option<Vec<[f64; 3]>> =
        color.map(|c| samples.points.iter().map(|p| c(p)).collect());
    render(&samples.depths, &phis, cols.as_deref(), sharpness)
}
