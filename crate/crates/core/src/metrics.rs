//! Ray-based evaluation: RayIoU over depth thresholds, mean absolute
//! velocity error at dynamic true positives, and 3D flow end-point error.
//!
//! Evaluation queries the inference-time model: the blended center-frame
//! fields without temporal aggregation. A ray counts as a predicted hit when
//! its accumulated rendering weight exceeds 0.5; its depth estimate is the
//! weight-normalized rendered depth.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grid::VectorGrid3;
use crate::loss::{FieldSel, LossConfig, LossCtx, ModelMode};
use crate::render::{render, sample_ray};
use crate::scene::SceneOracle;
use crate::temporal::{aggregate_dynamic, aggregate_static, blend_aggregated, AggSwitches};

pub const PRED_HIT_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Depth-error thresholds (m) for RayIoU.
    pub thresholds: Vec<f64>,
    /// Threshold (m) selecting the true positives used for mAVE.
    pub mave_threshold: f64,
    /// Number of future ego poses to query in addition to the current one.
    pub poses_ahead: usize,
    pub azimuth_count: usize,
    pub elevation_count: usize,
    pub elevation_range: (f64, f64),
    pub samples_per_ray: usize,
    /// Points sampled inside dynamic bodies for the flow end-point error.
    pub epe_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.25, 0.5, 1.0],
            mave_threshold: 0.5,
            poses_ahead: 8,
            azimuth_count: 48,
            elevation_count: 6,
            elevation_range: (-0.5, 0.15),
            samples_per_ray: 256,
            epe_samples: 256,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayIouRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<RayIouRow>,
    pub mean_iou: f64,
    /// Mean absolute velocity error (m/s); NaN with no dynamic TPs.
    pub mave: f64,
    /// Mean flow end-point error (m per frame); NaN with no sample points.
    pub epe3d: f64,
}

impl MetricsReport {
    pub fn iou_at(&self, threshold: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.threshold - threshold).abs() < 1e-12)
            .map(|r| r.iou)
    }
}

/// One evaluation ray's pred/gt measurements, exposed so oracle-equivalence
/// tests can re-classify them independently.
#[derive(Debug, Clone, Copy)]
pub struct EvalRay {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub gt_range: Option<f64>,
    pub gt_dynamic: bool,
    pub pred_hit: bool,
    pub pred_depth: f64,
}

/// Render-side view of a trained model for evaluation.
pub struct ModelEval<'a> {
    pub ctx: LossCtx<'a>,
    pub samples_per_ray: usize,
}

impl<'a> ModelEval<'a> {
    /// Evaluation context: aggregation switched off (inference-time model).
    pub fn inference_cfg(mut cfg: LossConfig) -> LossConfig {
        cfg.switches = AggSwitches { static_on: false, dynamic_on: false, neighbor_stopgrad: false };
        cfg
    }

    /// Predicted (hit, normalized depth) for a world-space ray.
    pub fn predict(&self, origin_w: &Vector3<f64>, dir_w: &Vector3<f64>) -> (bool, f64) {
        let pose = &self.ctx.ff.poses[self.ctx.ff.center];
        let inv = pose.inverse();
        let origin = (inv * nalgebra::Point3::from(*origin_w)).coords;
        let dir = inv.rotation * dir_w;
        let Some(samples) = sample_ray(&origin, &dir, &self.ctx.ff.spec, self.samples_per_ray)
        else {
            return (false, 0.0);
        };
        let sharp = self.ctx.sharpness_value();
        let sel = match self.ctx.cfg.mode {
            ModelMode::SingleSdf => FieldSel::AggStatic,
            ModelMode::Disentangled => FieldSel::Blended,
        };
        let phis: Vec<f64> = samples
            .points
            .iter()
            .map(|p| match sel {
                FieldSel::AggStatic => {
                    aggregate_static((), &self.ctx.ff, self.ctx.cfg.agg.ratio, &self.ctx.cfg.switches, p)
                }
                FieldSel::AggDynamic => aggregate_dynamic(
                    (),
                    &self.ctx.ff,
                    self.ctx.cfg.agg.ratio,
                    &self.ctx.cfg.switches,
                    sharp,
                    p,
                ),
                FieldSel::Blended => blend_aggregated(
                    (),
                    &self.ctx.ff,
                    &self.ctx.cfg.agg,
                    &self.ctx.cfg.switches,
                    sharp,
                    p,
                ),
            })
            .collect();
        let out = render(&samples.depths, &phis, None, sharp);
        (out.weight_sum > PRED_HIT_WEIGHT, out.normalized_depth())
    }
}

/// Cast the evaluation ray lattice from the current and future ego poses and
/// measure pred/gt per ray.
pub fn eval_rays(model: &ModelEval<'_>, oracle: &SceneOracle, frame: i64, cfg: &EvalConfig) -> Vec<EvalRay> {
    let mut rays = Vec::new();
    for p in 0..=cfg.poses_ahead {
        let pose = oracle.ego.pose((frame + p as i64) as f64);
        let origin = pose.translation.vector;
        for ei in 0..cfg.elevation_count {
            let el = if cfg.elevation_count == 1 {
                0.5 * (cfg.elevation_range.0 + cfg.elevation_range.1)
            } else {
                cfg.elevation_range.0
                    + (cfg.elevation_range.1 - cfg.elevation_range.0) * ei as f64
                        / (cfg.elevation_count - 1) as f64
            };
            for ai in 0..cfg.azimuth_count {
                let az = std::f64::consts::TAU * (ai as f64 + 0.5) / cfg.azimuth_count as f64;
                let dir = pose.rotation
                    * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                rays.push((origin, dir));
            }
        }
    }
    rays.par_iter()
        .map(|(origin, dir)| {
            let gt = oracle.cast_ray(origin, dir, frame as f64);
            let (pred_hit, pred_depth) = model.predict(origin, dir);
            EvalRay {
                origin: *origin,
                dir: *dir,
                gt_range: gt.as_ref().map(|h| h.range),
                gt_dynamic: gt.as_ref().map(|h| h.dynamic).unwrap_or(false),
                pred_hit,
                pred_depth,
            }
        })
        .collect()
}

/// Classify measured rays at one threshold.
///
/// TP: both hit and |depth error| < threshold. FP: predicted hit that is not
/// a TP. FN: ground-truth hit that is not a TP (a bad-depth ray counts as
/// both FP and FN). Rays where both sides miss are ignored.
pub fn classify_rays_at(rays: &[EvalRay], threshold: f64) -> RayIouRow {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for r in rays {
        let gt_hit = r.gt_range.is_some();
        let is_tp = gt_hit
            && r.pred_hit
            && (r.pred_depth - r.gt_range.unwrap()).abs() < threshold;
        if is_tp {
            tp += 1;
        } else {
            if r.pred_hit {
                fp += 1;
            }
            if gt_hit {
                fn_ += 1;
            }
        }
    }
    let denom = tp + fp + fn_;
    let iou = if denom == 0 { f64::NAN } else { tp as f64 / denom as f64 };
    RayIouRow { threshold, tp, fp, fn_, iou }
}

/// RayIoU per threshold over the evaluation lattice.
pub fn ray_iou(rays: &[EvalRay], cfg: &EvalConfig) -> (Vec<RayIouRow>, f64) {
    let rows: Vec<RayIouRow> = cfg
        .thresholds
        .iter()
        .map(|&t| classify_rays_at(rays, t))
        .collect();
    let mean = rows.iter().map(|r| r.iou).sum::<f64>() / rows.len() as f64;
    (rows, mean)
}

/// Mean absolute velocity error over dynamic true positives at the mAVE
/// threshold. The predicted flow is sampled at the predicted endpoint,
/// converted to m/s with the frame period.
pub fn mave(
    rays: &[EvalRay],
    pred_flow: &VectorGrid3,
    oracle: &SceneOracle,
    frame: i64,
    cfg: &EvalConfig,
) -> f64 {
    let pose = oracle.ego.pose(frame as f64);
    let inv = pose.inverse();
    let mut errs = Vec::new();
    for r in rays {
        let Some(gt_range) = r.gt_range else { continue };
        let is_tp = r.pred_hit && (r.pred_depth - gt_range).abs() < cfg.mave_threshold;
        if !is_tp || !r.gt_dynamic {
            continue;
        }
        let end_w = r.origin + r.dir * r.pred_depth;
        let end_ego = (inv * nalgebra::Point3::from(end_w)).coords;
        let f_ego = pred_flow.sample(&end_ego);
        let v_pred = (pose.rotation * f_ego) / oracle.frame_dt;
        // Nudge past the sphere-tracing tolerance so the endpoint sits
        // strictly inside the body it hit.
        let gt_end = r.origin + r.dir * (gt_range + 1e-4);
        let v_gt = oracle.gt_velocity(&gt_end, frame as f64);
        errs.push((v_pred - v_gt).norm());
    }
    if errs.is_empty() {
        log::warn!("mave: no dynamic true positives");
        return f64::NAN;
    }
    errs.iter().sum::<f64>() / errs.len() as f64
}

/// Sample world points strictly inside dynamic primitives at the frame.
pub fn dynamic_interior_points(oracle: &SceneOracle, frame: i64, cfg: &EvalConfig) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut points = Vec::with_capacity(cfg.epe_samples);
    let dynamics: Vec<&crate::scene::ScenePrimitive> =
        oracle.primitives.iter().filter(|p| p.dynamic).collect();
    if dynamics.is_empty() {
        return points;
    }
    let mut guard = 0;
    while points.len() < cfg.epe_samples && guard < cfg.epe_samples * 1000 {
        guard += 1;
        let prim = dynamics[rng.gen_range(0..dynamics.len())];
        let c = prim.center_at(frame as f64);
        let radius = match prim.shape {
            crate::scene::PrimitiveShape::Sphere { radius } => radius,
            crate::scene::PrimitiveShape::Box { half_extents } => {
                half_extents.iter().cloned().fold(0.0, f64::max) * 1.74
            }
            crate::scene::PrimitiveShape::GroundPlane { .. } => continue,
        };
        let cand = c + Vector3::new(
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
            rng.gen_range(-radius..radius),
        );
        if prim.sdf(&cand, frame as f64) < -1e-6 {
            points.push(cand);
        }
    }
    points
}

/// Mean 3D end-point error (m per frame) of the forward flow against the
/// oracle, at world points inside dynamic bodies.
pub fn epe3d(
    pred_flow: &VectorGrid3,
    oracle: &SceneOracle,
    frame: i64,
    points: &[Vector3<f64>],
) -> f64 {
    if points.is_empty() {
        log::warn!("epe3d: empty sample set");
        return f64::NAN;
    }
    let pose = oracle.ego.pose(frame as f64);
    let inv = pose.inverse();
    let sum: f64 = points
        .iter()
        .map(|x| {
            let x_ego = (inv * nalgebra::Point3::from(*x)).coords;
            let f_world = pose.rotation * pred_flow.sample(&x_ego);
            (f_world - oracle.gt_flow(x, frame as f64, true)).norm()
        })
        .sum();
    sum / points.len() as f64
}

/// Full evaluation of a model against the oracle.
pub fn evaluate(
    model: &ModelEval<'_>,
    pred_flow: &VectorGrid3,
    oracle: &SceneOracle,
    frame: i64,
    cfg: &EvalConfig,
) -> MetricsReport {
    let rays = eval_rays(model, oracle, frame, cfg);
    let (rows, mean_iou) = ray_iou(&rays, cfg);
    let mave_v = mave(&rays, pred_flow, oracle, frame, cfg);
    let pts = dynamic_interior_points(oracle, frame, cfg);
    let epe = epe3d(pred_flow, oracle, frame, &pts);
    MetricsReport { rows, mean_iou, mave: mave_v, epe3d: epe }
}
