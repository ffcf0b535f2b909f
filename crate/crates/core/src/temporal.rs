//! Cross-frame field aggregation in ego-aligned coordinates.
//!
//! The static field is averaged directly across the three frames around the
//! center timestep. The dynamic field samples its neighbors at flow-warped
//! positions, gated by the dynamic occupancy of the center frame; gradients
//! reach the flow grids through the warped sample positions, which is the
//! implicit flow-learning path.

use nalgebra::{Isometry3, Vector3};

use crate::adjoint::Real;
use crate::field::{occupancy, smooth_min, SharpnessParams};
use crate::grid::{sample_at, sample_at_var, FieldScalar, GridSpec, GridView};

/// Aggregation ratio plus the shared sharpness parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggParams {
    /// Blend ratio toward the neighbor average, in [0, 1].
    pub ratio: f64,
    pub sharpness: SharpnessParams,
}

impl Default for AggParams {
    fn default() -> Self {
        AggParams { ratio: 0.5, sharpness: SharpnessParams::default() }
    }
}

/// Per-module ablation switches for temporal aggregation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggSwitches {
    pub static_on: bool,
    pub dynamic_on: bool,
    /// Sample neighbor frames without gradients (ablation aid).
    pub neighbor_stopgrad: bool,
}

impl Default for AggSwitches {
    fn default() -> Self {
        AggSwitches { static_on: true, dynamic_on: true, neighbor_stopgrad: false }
    }
}

/// Grid views of one frame's fields.
#[derive(Clone, Copy)]
pub struct FrameGrids<'a> {
    pub static_sdf: GridView<'a>,
    pub dynamic_sdf: GridView<'a>,
    pub color: [GridView<'a>; 3],
}

/// The three-frame window around the center timestep, plus the center
/// frame's flow grids. All grids share one [`GridSpec`] in their own ego
/// frames; `poses[i]` maps frame i's ego coordinates to world.
#[derive(Clone)]
pub struct FrameFields<'a> {
    pub spec: GridSpec,
    pub frames: Vec<FrameGrids<'a>>,
    pub center: usize,
    pub poses: Vec<Isometry3<f64>>,
    pub flow_back: [GridView<'a>; 3],
    pub flow_fwd: [GridView<'a>; 3],
}

impl<'a> FrameFields<'a> {
    pub fn center_grids(&self) -> &FrameGrids<'a> {
        &self.frames[self.center]
    }

    pub fn has_neighbors(&self) -> bool {
        self.center > 0 && self.center + 1 < self.frames.len()
    }

    /// Relative transform taking center-frame ego coordinates into frame
    /// `u`'s ego coordinates.
    pub fn center_to_frame(&self, u: usize) -> Isometry3<f64> {
        self.poses[u].inverse() * self.poses[self.center]
    }
}

/// Express a frame-`t` ego point in frame-`u` ego coordinates.
pub fn align_point(
    x: &Vector3<f64>,
    pose_t: &Isometry3<f64>,
    pose_u: &Isometry3<f64>,
) -> Vector3<f64> {
    (pose_u.inverse() * pose_t * nalgebra::Point3::from(*x)).coords
}

fn transform_var<S: Real>(iso: &Isometry3<f64>, p: [S; 3]) -> [S; 3] {
    let r = iso.rotation.to_rotation_matrix();
    let m = r.matrix();
    let t = iso.translation.vector;
    [
        p[0] * m[(0, 0)] + p[1] * m[(0, 1)] + p[2] * m[(0, 2)] + t[0],
        p[0] * m[(1, 0)] + p[1] * m[(1, 1)] + p[2] * m[(1, 2)] + t[1],
        p[0] * m[(2, 0)] + p[1] * m[(2, 1)] + p[2] * m[(2, 2)] + t[2],
    ]
}

fn sample_maybe_stopped<S: FieldScalar>(
    cx: S::Cx,
    view: GridView<'_>,
    spec: &GridSpec,
    x: &Vector3<f64>,
    stopgrad: bool,
) -> S {
    if stopgrad {
        S::lift(cx, sample_at::<f64>((), view, spec, x))
    } else {
        sample_at(cx, view, spec, x)
    }
}

/// Aggregated static SDF at a center-frame ego point.
///
/// Falls back to the center sample alone when neighbors are missing or the
/// ratio is zero.
pub fn aggregate_static<S: FieldScalar>(
    cx: S::Cx,
    ff: &FrameFields<'_>,
    ratio: f64,
    switches: &AggSwitches,
    x: &Vector3<f64>,
) -> S {
    let center: S = sample_at(cx, ff.center_grids().static_sdf, &ff.spec, x);
    if !switches.static_on || ratio == 0.0 || !ff.has_neighbors() {
        return center;
    }
    let prev_x = align_point(x, &ff.poses[ff.center], &ff.poses[ff.center - 1]);
    let next_x = align_point(x, &ff.poses[ff.center], &ff.poses[ff.center + 1]);
    let prev: S = sample_maybe_stopped(
        cx,
        ff.frames[ff.center - 1].static_sdf,
        &ff.spec,
        &prev_x,
        switches.neighbor_stopgrad,
    );
    let next: S = sample_maybe_stopped(
        cx,
        ff.frames[ff.center + 1].static_sdf,
        &ff.spec,
        &next_x,
        switches.neighbor_stopgrad,
    );
    let neighbor_avg = (prev + next) * 0.5;
    center + (neighbor_avg - center) * ratio
}

/// Aggregated dynamic SDF at a center-frame ego point, with flow-warped
/// neighbor samples and occupancy gating.
pub fn aggregate_dynamic<S: FieldScalar>(
    cx: S::Cx,
    ff: &FrameFields<'_>,
    ratio: f64,
    switches: &AggSwitches,
    sharpness: S,
    x: &Vector3<f64>,
) -> S {
    let center: S = sample_at(cx, ff.center_grids().dynamic_sdf, &ff.spec, x);
    if !switches.dynamic_on || ratio == 0.0 || !ff.has_neighbors() {
        return center;
    }
    let gate = occupancy(center, sharpness) * ratio;

    let warp = |flow: &[GridView<'_>; 3], neighbor: usize| -> S {
        let mut pos = [center; 3];
        for (ch, item) in pos.iter_mut().enumerate() {
            let f: S = if switches.neighbor_stopgrad {
                S::lift(cx, sample_at::<f64>((), flow[ch], &ff.spec, x))
            } else {
                sample_at(cx, flow[ch], &ff.spec, x)
            };
            *item = f + x[ch];
        }
        let aligned = transform_var(&ff.center_to_frame(neighbor), pos);
        if switches.neighbor_stopgrad {
            let p = Vector3::new(aligned[0].val(), aligned[1].val(), aligned[2].val());
            S::lift(cx, sample_at::<f64>((), ff.frames[neighbor].dynamic_sdf, &ff.spec, &p))
        } else {
            sample_at_var(cx, ff.frames[neighbor].dynamic_sdf, &ff.spec, aligned)
        }
    };
    let prev = warp(&ff.flow_back, ff.center - 1);
    let next = warp(&ff.flow_fwd, ff.center + 1);
    let neighbor_avg = (prev + next) * 0.5;
    center + gate * (neighbor_avg - center)
}

/// Blended aggregated SDF: smooth minimum of the two aggregates.
pub fn blend_aggregated<S: FieldScalar>(
    cx: S::Cx,
    ff: &FrameFields<'_>,
    params: &AggParams,
    switches: &AggSwitches,
    sharpness: S,
    x: &Vector3<f64>,
) -> S {
    let s = aggregate_static(cx, ff, params.ratio, switches, x);
    let d = aggregate_dynamic(cx, ff, params.ratio, switches, sharpness, x);
    smooth_min(s, d, sharpness, params.sharpness.temperature)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ScalarGrid3;
    use approx::assert_relative_eq;
    use nalgebra::Translation3;

    fn spec() -> GridSpec {
        GridSpec::new(Vector3::new(-2.0, -2.0, -2.0), Vector3::new(4.0, 4.0, 4.0), 0.5).unwrap()
    }

    struct Owned {
        spec: GridSpec,
        static_sdf: Vec<ScalarGrid3>,
        dynamic_sdf: Vec<ScalarGrid3>,
        color: Vec<[ScalarGrid3; 3]>,
        flow_back: [ScalarGrid3; 3],
        flow_fwd: [ScalarGrid3; 3],
        poses: Vec<Isometry3<f64>>,
    }

    impl Owned {
        fn uniform(spec: GridSpec, statics: [f64; 3], dynamics: [f64; 3]) -> Self {
            Owned {
                spec,
                static_sdf: statics.iter().map(|&v| ScalarGrid3::constant(spec, v)).collect(),
                dynamic_sdf: dynamics.iter().map(|&v| ScalarGrid3::constant(spec, v)).collect(),
                color: (0..3)
                    .map(|_| {
                        [
                            ScalarGrid3::constant(spec, 0.5),
                            ScalarGrid3::constant(spec, 0.5),
                            ScalarGrid3::constant(spec, 0.5),
                        ]
                    })
                    .collect(),
                flow_back: [
                    ScalarGrid3::constant(spec, 0.0),
                    ScalarGrid3::constant(spec, 0.0),
                    ScalarGrid3::constant(spec, 0.0),
                ],
                flow_fwd: [
                    ScalarGrid3::constant(spec, 0.0),
                    ScalarGrid3::constant(spec, 0.0),
                    ScalarGrid3::constant(spec, 0.0),
                ],
                poses: vec![Isometry3::identity(); 3],
            }
        }

        fn fields(&self) -> FrameFields<'_> {
            FrameFields {
                spec: self.spec,
                frames: (0..3)
                    .map(|f| FrameGrids {
                        static_sdf: self.static_sdf[f].view(),
                        dynamic_sdf: self.dynamic_sdf[f].view(),
                        color: [
                            self.color[f][0].view(),
                            self.color[f][1].view(),
                            self.color[f][2].view(),
                        ],
                    })
                    .collect(),
                center: 1,
                poses: self.poses.clone(),
                flow_back: [
                    self.flow_back[0].view(),
                    self.flow_back[1].view(),
                    self.flow_back[2].view(),
                ],
                flow_fwd: [
                    self.flow_fwd[0].view(),
                    self.flow_fwd[1].view(),
                    self.flow_fwd[2].view(),
                ],
            }
        }
    }

    #[test]
    fn align_point_cases() {
        let x = Vector3::new(1.0, 2.0, 3.0);
        let id = Isometry3::identity();
        assert_eq!(align_point(&x, &id, &id), x);

        let shifted = Isometry3::from_parts(
            Translation3::new(1.0, 0.0, 0.0),
            nalgebra::UnitQuaternion::identity(),
        );
        let out = align_point(&x, &id, &shifted);
        assert_relative_eq!(out.x, 0.0, epsilon = 1e-12);

        let pose_u = Isometry3::from_parts(
            Translation3::new(0.3, -0.7, 0.2),
            nalgebra::UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.4),
        );
        let there = align_point(&x, &id, &pose_u);
        let back = align_point(&there, &pose_u, &id);
        assert_relative_eq!(back, x, epsilon = 1e-12);
    }

    #[test]
    fn static_aggregation_arithmetic() {
        let owned = Owned::uniform(spec(), [1.0, 0.0, 3.0], [10.0, 10.0, 10.0]);
        let ff = owned.fields();
        let sw = AggSwitches::default();
        let x = Vector3::new(0.3, -0.2, 0.1);
        // lambda = 0.5: 0.5 * (1 + 3)/2 + 0.5 * 0 = 1.0
        let v: f64 = aggregate_static((), &ff, 0.5, &sw, &x);
        assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        // lambda = 0 leaves the center value untouched.
        let v0: f64 = aggregate_static((), &ff, 0.0, &sw, &x);
        assert_eq!(v0, 0.0);
        // All equal stays equal.
        let owned_eq = Owned::uniform(spec(), [2.0, 2.0, 2.0], [10.0; 3]);
        let v_eq: f64 = aggregate_static((), &owned_eq.fields(), 0.5, &sw, &x);
        assert_relative_eq!(v_eq, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn dynamic_aggregation_gating_limits() {
        let sw = AggSwitches::default();
        let x = Vector3::new(0.1, 0.4, -0.3);
        // Free space: gate ~ 0, neighbors ignored.
        let owned = Owned::uniform(spec(), [10.0; 3], [-5.0, 8.0, -5.0]);
        let v: f64 = aggregate_dynamic((), &owned.fields(), 0.5, &sw, 10.0, &x);
        assert_relative_eq!(v, 8.0, epsilon = 1e-3);
        // Zero flow and all dynamic fields equal reduces to the static rule.
        let owned_eq = Owned::uniform(spec(), [1.0, 0.0, 3.0], [1.0, 0.0, 3.0]);
        let ff = owned_eq.fields();
        let dyn_v: f64 = aggregate_dynamic((), &ff, 0.5, &sw, 10.0, &x);
        // Occupancy at phi = 0 is 0.5, so gate = 0.25: 0 + 0.25 * (2 - 0).
        assert_relative_eq!(dyn_v, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn aggregates_stay_in_convex_hull() {
        let mut owned = Owned::uniform(spec(), [0.0; 3], [0.0; 3]);
        let mut seed = 0.123f64;
        for f in 0..3 {
            for v in owned.static_sdf[f].values.iter_mut() {
                seed = (seed * 9301.0 + 0.2113).fract();
                *v = seed * 4.0 - 2.0;
            }
            for v in owned.dynamic_sdf[f].values.iter_mut() {
                seed = (seed * 9301.0 + 0.2113).fract();
                *v = seed * 4.0 - 2.0;
            }
        }
        let ff = owned.fields();
        let sw = AggSwitches::default();
        for n in 0..50 {
            let x = Vector3::new(
                -1.8 + 0.07 * n as f64,
                1.7 - 0.06 * n as f64,
                -1.5 + 0.05 * n as f64,
            );
            let c: f64 = sample_at((), ff.center_grids().static_sdf, &ff.spec, &x);
            let p: f64 = sample_at((), ff.frames[0].static_sdf, &ff.spec, &x);
            let nx: f64 = sample_at((), ff.frames[2].static_sdf, &ff.spec, &x);
            let agg: f64 = aggregate_static((), &ff, 0.5, &sw, &x);
            let lo = c.min(p).min(nx) - 1e-12;
            let hi = c.max(p).max(nx) + 1e-12;
            assert!(agg >= lo && agg <= hi);

            let cd: f64 = sample_at((), ff.center_grids().dynamic_sdf, &ff.spec, &x);
            let pd: f64 = sample_at((), ff.frames[0].dynamic_sdf, &ff.spec, &x);
            let nd: f64 = sample_at((), ff.frames[2].dynamic_sdf, &ff.spec, &x);
            let aggd: f64 = aggregate_dynamic((), &ff, 0.5, &sw, 10.0, &x);
            let lo = cd.min(pd).min(nd) - 1e-12;
            let hi = cd.max(pd).max(nd) + 1e-12;
            assert!(aggd >= lo && aggd <= hi);
        }
    }

    #[test]
    fn blend_of_absent_dynamic_tracks_static() {
        let owned = Owned::uniform(spec(), [0.4, 0.4, 0.4], [10.0; 3]);
        let ff = owned.fields();
        let params = AggParams { ratio: 0.5, sharpness: SharpnessParams::new(100.0, 2.0) };
        let sw = AggSwitches::default();
        let x = Vector3::new(0.0, 0.0, 0.0);
        let b: f64 = blend_aggregated((), &ff, &params, &sw, 100.0, &x);
        assert_relative_eq!(b, 0.4, epsilon = 1e-6);
    }

    #[test]
    fn ground_truth_flow_aligns_translated_mover() {
        // Dynamic SDF of a sphere translated +1 m in x between frames; flow
        // grids set to the rigid displacement make the aggregate agree with
        // the center frame, while zero flow smears it.
        let sp = spec();
        let sphere = |c: Vector3<f64>| move |p: Vector3<f64>| (p - c).norm() - 0.6;
        let mut owned = Owned::uniform(sp, [10.0; 3], [0.0; 3]);
        owned.dynamic_sdf[0] = ScalarGrid3::from_fn(sp, sphere(Vector3::new(-1.0, 0.0, 0.0)));
        owned.dynamic_sdf[1] = ScalarGrid3::from_fn(sp, sphere(Vector3::new(0.0, 0.0, 0.0)));
        owned.dynamic_sdf[2] = ScalarGrid3::from_fn(sp, sphere(Vector3::new(1.0, 0.0, 0.0)));
        owned.flow_back[0] = ScalarGrid3::constant(sp, -1.0);
        owned.flow_fwd[0] = ScalarGrid3::constant(sp, 1.0);
        let ff = owned.fields();
        let sw = AggSwitches::default();
        let probe = Vector3::new(0.3, 0.2, 0.1);
        let center: f64 = sample_at((), ff.center_grids().dynamic_sdf, &ff.spec, &probe);
        let with_flow: f64 = aggregate_dynamic((), &ff, 0.5, &sw, 50.0, &probe);
        assert!((with_flow - center).abs() < sp.resolution / 2.0);

        // Zero flow: neighbors sampled at the unwarped point disagree.
        let owned_zero = {
            let mut o = Owned::uniform(sp, [10.0; 3], [0.0; 3]);
            o.dynamic_sdf[0] = ScalarGrid3::from_fn(sp, sphere(Vector3::new(-1.0, 0.0, 0.0)));
            o.dynamic_sdf[1] = ScalarGrid3::from_fn(sp, sphere(Vector3::new(0.0, 0.0, 0.0)));
            o.dynamic_sdf[2] = ScalarGrid3::from_fn(sp, sphere(Vector3::new(1.0, 0.0, 0.0)));
            o
        };
        let ff0 = owned_zero.fields();
        let without_flow: f64 = aggregate_dynamic((), &ff0, 0.5, &sw, 50.0, &probe);
        assert!((without_flow - center).abs() > (with_flow - center).abs());
    }

    #[test]
    fn flow_gradient_matches_finite_differences() {
        let sp = spec();
        let mut owned = Owned::uniform(sp, [10.0; 3], [0.0; 3]);
        let wavy = |p: Vector3<f64>| 0.4 * (p.x * 1.3).sin() + 0.3 * (p.y * 0.9).cos() + 0.1 * p.z;
        owned.dynamic_sdf[0] = ScalarGrid3::from_fn(sp, wavy);
        owned.dynamic_sdf[1] = ScalarGrid3::from_fn(sp, |p| wavy(p) - 0.2);
        owned.dynamic_sdf[2] = ScalarGrid3::from_fn(sp, |p| wavy(p) + 0.15);
        for ch in 0..3 {
            owned.flow_back[ch] = ScalarGrid3::constant(sp, 0.08 + 0.02 * ch as f64);
            owned.flow_fwd[ch] = ScalarGrid3::constant(sp, -0.06 + 0.03 * ch as f64);
        }
        // Probe at a cell center: warped positions stay off cell faces.
        let probe = sp.cell_center(3, 4, 3);

        // Dense parameter vector: flow_back then flow_fwd channels.
        let n = sp.cell_count();
        let eval = |owned: &Owned| -> f64 {
            aggregate_dynamic((), &owned.fields(), 0.5, &AggSwitches::default(), 10.0, &probe)
        };
        let tape = crate::adjoint::Tape::new();
        let ff = owned.fields();
        let mut ff_bound = ff.clone();
        for ch in 0..3 {
            ff_bound.flow_back[ch] = GridView {
                values: ff.flow_back[ch].values,
                base_slot: Some((ch * n) as u32),
            };
            ff_bound.flow_fwd[ch] = GridView {
                values: ff.flow_fwd[ch].values,
                base_slot: Some(((3 + ch) * n) as u32),
            };
        }
        let sharp = tape.constant(10.0);
        let out = aggregate_dynamic(&tape, &ff_bound, 0.5, &AggSwitches::default(), sharp, &probe);
        assert_eq!(out.val(), eval(&owned));
        let mut grads = std::collections::BTreeMap::new();
        for (slot, g) in tape.backward_sparse(out, 1.0) {
            *grads.entry(slot).or_insert(0.0) += g;
        }
        let h = 1e-5;
        for (&slot, &g) in grads.iter() {
            let (dir_fwd, ch, cell) = {
                let s = slot as usize;
                (s >= 3 * n, (s / n) % 3, s % n)
            };
            let mut plus = owned.clone_shallow();
            let mut minus = owned.clone_shallow();
            {
                let target = if dir_fwd { &mut plus.flow_fwd } else { &mut plus.flow_back };
                target[ch].values[cell] += h;
            }
            {
                let target = if dir_fwd { &mut minus.flow_fwd } else { &mut minus.flow_back };
                target[ch].values[cell] -= h;
            }
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = fd.abs().max(g.abs()).max(1e-6);
            assert!(
                (g - fd).abs() / denom < 1e-3,
                "slot {slot}: adjoint {g} vs fd {fd}"
            );
        }
        assert!(!grads.is_empty());
    }

    impl Owned {
        fn clone_shallow(&self) -> Owned {
            Owned {
                spec: self.spec,
                static_sdf: self.static_sdf.clone(),
                dynamic_sdf: self.dynamic_sdf.clone(),
                color: self.color.clone(),
                flow_back: self.flow_back.clone(),
                flow_fwd: self.flow_fwd.clone(),
                poses: self.poses.clone(),
            }
        }
    }
}
