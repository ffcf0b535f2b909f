//! Trainable state layout and the first-order optimization loop.
//!
//! All parameters live in one flat f64 vector: per stored frame the static
//! SDF, dynamic SDF, and three color channel grids; then the center frame's
//! backward and forward flow channel grids; then log(sharpness) as the final
//! slot. Optimizing the log keeps the sharpness positive.

use nalgebra::{Isometry3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{GridSpec, GridView, VectorGrid3};
use crate::loss::{
    total_loss, LossBreakdown, LossConfig, LossCtx, LossError, ModelMode, PatchTask,
    TotalLossInputs, TERM_COUNT,
};
use crate::scene::{EgoTrajectory, ImageRgb, PinholeSpec, Ray, RayBatch, RayLabel, SensorKind};
use crate::simflow::{make_sim_labels, SimFlowParams, SimLabels};
use crate::temporal::{FrameFields, FrameGrids};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss diverged at iteration {iteration}: total {total}")]
    Diverged { iteration: usize, total: f64 },
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Field kinds per frame, in layout order.
const GRIDS_PER_FRAME: usize = 5; // static, dynamic, color r/g/b

#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub spec: GridSpec,
    pub n_frames: usize,
    pub center: usize,
}

impl ParamLayout {
    pub fn new(spec: GridSpec, n_frames: usize, center: usize) -> Self {
        assert!(center < n_frames);
        ParamLayout { spec, n_frames, center }
    }

    fn grid_len(&self) -> usize {
        self.spec.cell_count()
    }

    pub fn total_len(&self) -> usize {
        self.grid_len() * (GRIDS_PER_FRAME * self.n_frames + 6) + 1
    }

    fn frame_grid_offset(&self, frame: usize, which: usize) -> usize {
        (frame * GRIDS_PER_FRAME + which) * self.grid_len()
    }

    pub fn static_sdf_offset(&self, frame: usize) -> usize {
        self.frame_grid_offset(frame, 0)
    }

    pub fn dynamic_sdf_offset(&self, frame: usize) -> usize {
        self.frame_grid_offset(frame, 1)
    }

    pub fn color_offset(&self, frame: usize, channel: usize) -> usize {
        self.frame_grid_offset(frame, 2 + channel)
    }

    pub fn flow_offset(&self, forward: bool, channel: usize) -> usize {
        let base = self.n_frames * GRIDS_PER_FRAME * self.grid_len();
        base + (if forward { 3 } else { 0 } + channel) * self.grid_len()
    }

    pub fn log_sharpness_slot(&self) -> usize {
        self.total_len() - 1
    }

    /// Bound grid views over a parameter vector.
    pub fn fields<'a>(&self, params: &'a [f64], poses: &[Isometry3<f64>]) -> FrameFields<'a> {
        assert_eq!(params.len(), self.total_len());
        assert_eq!(poses.len(), self.n_frames);
        let n = self.grid_len();
        let view = |offset: usize| GridView {
            values: &params[offset..offset + n],
            base_slot: Some(offset as u32),
        };
        FrameFields {
            spec: self.spec,
            frames: (0..self.n_frames)
                .map(|f| FrameGrids {
                    static_sdf: view(self.static_sdf_offset(f)),
                    dynamic_sdf: view(self.dynamic_sdf_offset(f)),
                    color: [
                        view(self.color_offset(f, 0)),
                        view(self.color_offset(f, 1)),
                        view(self.color_offset(f, 2)),
                    ],
                })
                .collect(),
            center: self.center,
            poses: poses.to_vec(),
            flow_back: [
                view(self.flow_offset(false, 0)),
                view(self.flow_offset(false, 1)),
                view(self.flow_offset(false, 2)),
            ],
            flow_fwd: [
                view(self.flow_offset(true, 0)),
                view(self.flow_offset(true, 1)),
                view(self.flow_offset(true, 2)),
            ],
        }
    }
}

/// Initial field values.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InitParams {
    pub static_sdf: f64,
    pub dynamic_sdf: f64,
    pub color: f64,
    pub sharpness: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        // Free-space start biased toward static explanation.
        InitParams { static_sdf: 0.5, dynamic_sdf: 1.0, color: 0.5, sharpness: 10.0 }
    }
}

/// The trainable model: the three-frame field window around a center
/// timestep.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub layout: ParamLayout,
    pub params: Vec<f64>,
    /// Frame numbers of the stored grids, e.g. [t-1, t, t+1].
    pub frames: Vec<i64>,
    pub poses: Vec<Isometry3<f64>>,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(spec: GridSpec, center_frame: i64, ego: &EgoTrajectory, init: InitParams) -> Self {
        let frames = vec![center_frame - 1, center_frame, center_frame + 1];
        let layout = ParamLayout::new(spec, frames.len(), 1);
        let mut params = vec![0.0; layout.total_len()];
        let n = spec.cell_count();
        for f in 0..frames.len() {
            params[layout.static_sdf_offset(f)..layout.static_sdf_offset(f) + n]
                .fill(init.static_sdf);
            params[layout.dynamic_sdf_offset(f)..layout.dynamic_sdf_offset(f) + n]
                .fill(init.dynamic_sdf);
            for ch in 0..3 {
                params[layout.color_offset(f, ch)..layout.color_offset(f, ch) + n]
                    .fill(init.color);
            }
        }
        let slot = layout.log_sharpness_slot();
        params[slot] = init.sharpness.ln();
        let poses = frames.iter().map(|&t| ego.pose(t as f64)).collect();
        TrainState { layout, params, frames, poses, iteration: 0 }
    }

    pub fn center_frame(&self) -> i64 {
        self.frames[self.layout.center]
    }

    pub fn fields(&self) -> FrameFields<'_> {
        self.layout.fields(&self.params, &self.poses)
    }

    pub fn sharpness(&self) -> f64 {
        self.params[self.layout.log_sharpness_slot()].exp()
    }

    pub fn loss_ctx<'a>(&'a self, ego: &'a EgoTrajectory, cfg: LossConfig) -> LossCtx<'a> {
        LossCtx {
            ff: self.fields(),
            log_sharpness: [self.params[self.layout.log_sharpness_slot()]],
            sharpness_slot: Some(self.layout.log_sharpness_slot() as u32),
            ego,
            center_frame: self.center_frame(),
            cfg,
        }
    }

    /// Assemble a flow grid from the flat parameters.
    pub fn flow_grid(&self, forward: bool) -> VectorGrid3 {
        let n = self.layout.grid_len();
        let off = |ch| self.flow_values(forward, ch);
        let mut grid = VectorGrid3::zeros(self.layout.spec);
        for c in 0..n {
            grid.values[c] = Vector3::new(off(0)[c], off(1)[c], off(2)[c]);
        }
        grid
    }

    fn flow_values(&self, forward: bool, channel: usize) -> &[f64] {
        let o = self.layout.flow_offset(forward, channel);
        &self.params[o..o + self.layout.grid_len()]
    }

    /// Overwrite the SDF grids from an oracle closure (testing aid).
    pub fn init_from_sdf(
        &mut self,
        mut static_sdf: impl FnMut(usize, Vector3<f64>) -> f64,
        mut dynamic_sdf: impl FnMut(usize, Vector3<f64>) -> f64,
    ) {
        let spec = self.layout.spec;
        for f in 0..self.frames.len() {
            for k in 0..spec.dims[2] {
                for j in 0..spec.dims[1] {
                    for i in 0..spec.dims[0] {
                        let x = spec.cell_center(i, j, k);
                        let idx = spec.index(i, j, k);
                        self.params[self.layout.static_sdf_offset(f) + idx] = static_sdf(f, x);
                        self.params[self.layout.dynamic_sdf_offset(f) + idx] = dynamic_sdf(f, x);
                    }
                }
            }
        }
    }
}

/// Adaptive-moment optimizer over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr_grids: f64, lr_last: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let last = params.len() - 1;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let lr = if i == last { lr_last } else { lr_grids };
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Optimization schedule.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub iterations: usize,
    pub lr_grids: f64,
    pub lr_sharpness: f64,
    pub rays_per_iter: usize,
    /// Sample count along each training ray.
    pub samples_per_ray: usize,
    pub patches_per_iter: usize,
    pub patch_size: usize,
    pub reg_points_per_iter: usize,
    /// Rebuild similarity pseudo-labels every this many iterations.
    pub sim_refresh_period: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 2000,
            lr_grids: 1e-2,
            lr_sharpness: 1e-3,
            rays_per_iter: 128,
            samples_per_ray: 96,
            patches_per_iter: 2,
            patch_size: 8,
            reg_points_per_iter: 128,
            sim_refresh_period: 10,
            seed: 0,
        }
    }
}

/// Supervision data prepared once per experiment.
pub struct TrainData {
    pub static_pool: Vec<(i64, Ray)>,
    pub dynamic_pool: Vec<(i64, Ray)>,
    pub cams: Vec<PinholeSpec>,
    /// Target images at the center frame, one per camera.
    pub targets: Vec<ImageRgb>,
    /// Source images: (camera index, frame, image).
    pub sources: Vec<(usize, i64, ImageRgb)>,
    pub ego: EgoTrajectory,
    pub center_frame: i64,
}

/// Select the supervisable LiDAR rays: hits whose endpoints, expressed in
/// the center ego frame, lie inside the representation volume. Static rays
/// come from the +-(window-1) frame neighborhood, dynamic rays from the
/// center frame only.
pub fn build_ray_pools(
    batches: &[RayBatch],
    ego: &EgoTrajectory,
    center_frame: i64,
    spec: &GridSpec,
    window: usize,
    mode: ModelMode,
) -> (Vec<(i64, Ray)>, Vec<(i64, Ray)>) {
    let center_pose = ego.pose(center_frame as f64);
    let inv = center_pose.inverse();
    let mut static_pool = Vec::new();
    let mut dynamic_pool = Vec::new();
    for batch in batches {
        if batch.kind != SensorKind::Lidar {
            continue;
        }
        let k = (batch.frame - center_frame).unsigned_abs() as usize;
        if k >= window {
            continue;
        }
        for ray in &batch.rays {
            let Some(end_w) = ray.endpoint() else { continue };
            let end_c = (inv * nalgebra::Point3::from(end_w)).coords;
            if !spec.contains(&end_c) {
                continue;
            }
            let label = match mode {
                ModelMode::SingleSdf => RayLabel::Static,
                ModelMode::Disentangled => ray.label,
            };
            match label {
                RayLabel::Static => static_pool.push((batch.frame, *ray)),
                RayLabel::Dynamic if batch.frame == center_frame => {
                    dynamic_pool.push((batch.frame, *ray))
                }
                _ => {}
            }
        }
    }
    (static_pool, dynamic_pool)
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iteration: usize,
    pub means: [f64; TERM_COUNT],
    pub total: f64,
}

pub struct TrainLog {
    pub rows: Vec<TraceRow>,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Run the optimization loop. Deterministic for a fixed seed: the RNG draws
/// happen in a fixed order and the loss reduction is thread-count
/// independent.
pub fn optimize(
    state: &mut TrainState,
    adam: &mut Adam,
    data: &TrainData,
    cfg: LossConfig,
    sim_params: &SimFlowParams,
    schedule: &Schedule,
) -> Result<TrainLog, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut rows = Vec::with_capacity(schedule.iterations);
    let mut sim_labels: Option<SimLabels> = None;
    let use_sim = cfg.weights.lambda_sim != 0.0
        && cfg.mode == ModelMode::Disentangled
        && !data.dynamic_pool.is_empty();
    let spec = state.layout.spec;
    let inset = spec.resolution;

    for iter in 0..schedule.iterations {
        // Half static, half dynamic rays; all static when no dynamics exist.
        let n_rays = schedule.rays_per_iter;
        let (n_static, n_dynamic) = if data.dynamic_pool.is_empty() {
            (n_rays, 0)
        } else {
            (n_rays / 2, n_rays - n_rays / 2)
        };
        let static_rays: Vec<(i64, Ray)> = if data.static_pool.is_empty() {
            Vec::new()
        } else {
            (0..n_static)
                .map(|_| data.static_pool[rng.gen_range(0..data.static_pool.len())])
                .collect()
        };
        let dynamic_rays: Vec<(i64, Ray)> = if n_dynamic > 0 {
            (0..n_dynamic)
                .map(|_| data.dynamic_pool[rng.gen_range(0..data.dynamic_pool.len())])
                .collect()
        } else {
            Vec::new()
        };

        let mut patches = Vec::new();
        for _ in 0..schedule.patches_per_iter {
            if data.cams.is_empty() {
                break;
            }
            let ci = rng.gen_range(0..data.cams.len());
            let cam = &data.cams[ci];
            if cam.width < schedule.patch_size || cam.height < schedule.patch_size {
                continue;
            }
            let x0 = rng.gen_range(0..=cam.width - schedule.patch_size);
            let y0 = rng.gen_range(0..=cam.height - schedule.patch_size);
            let sources: Vec<(i64, &ImageRgb)> = data
                .sources
                .iter()
                .filter(|(c, _, _)| *c == ci)
                .map(|(_, f, img)| (*f, img))
                .collect();
            patches.push(PatchTask {
                cam,
                frame: data.center_frame,
                x0,
                y0,
                width: schedule.patch_size,
                height: schedule.patch_size,
                target: &data.targets[ci],
                sources,
                samples_per_ray: schedule.samples_per_ray,
            });
        }

        let reg_points: Vec<Vector3<f64>> = (0..schedule.reg_points_per_iter)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(spec.origin.x + inset..spec.max_corner().x - inset),
                    rng.gen_range(spec.origin.y + inset..spec.max_corner().y - inset),
                    rng.gen_range(spec.origin.z + inset..spec.max_corner().z - inset),
                )
            })
            .collect();

        if use_sim && (iter % schedule.sim_refresh_period == 0 || sim_labels.is_none()) {
            let ctx = state.loss_ctx(&data.ego, cfg);
            sim_labels = Some(make_sim_labels(&ctx.ff, sim_params, state.sharpness()));
        }

        let (breakdown, grads) = {
            let ctx = state.loss_ctx(&data.ego, cfg);
            let inputs = TotalLossInputs {
                static_rays: &static_rays,
                dynamic_rays: &dynamic_rays,
                patches: &patches,
                reg_points: &reg_points,
                sim: if use_sim { sim_labels.as_ref() } else { None },
                samples_per_ray: schedule.samples_per_ray,
            };
            total_loss(&ctx, &inputs, state.params.len())?
        };
        if !breakdown.total.is_finite() || breakdown.total > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { iteration: iter, total: breakdown.total });
        }
        adam.update(&mut state.params, &grads, schedule.lr_grids, schedule.lr_sharpness);
        state.iteration += 1;
        rows.push(TraceRow { iteration: iter, means: breakdown.means, total: breakdown.total });
        if iter % 200 == 0 {
            log::info!(
                "iter {iter}: total {:.6} range {:.6}",
                breakdown.total,
                breakdown.means[crate::loss::TermId::Range as usize]
            );
        }
    }
    Ok(TrainLog { rows })
}

/// Compare adjoint gradients of the full objective against central finite
/// differences on a set of parameter slots.
pub struct GradCheckReport {
    /// (slot, analytic, finite difference, relative error)
    pub entries: Vec<(usize, f64, f64, f64)>,
    pub max_rel_err: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn gradcheck(
    state: &mut TrainState,
    ego: &EgoTrajectory,
    cfg: LossConfig,
    static_rays: &[(i64, Ray)],
    dynamic_rays: &[(i64, Ray)],
    patches: &[PatchTask<'_>],
    reg_points: &[Vector3<f64>],
    sim: Option<&SimLabels>,
    samples_per_ray: usize,
    slots: &[usize],
    step: f64,
) -> Result<GradCheckReport, TrainError> {
    let eval = |state: &TrainState| -> Result<(LossBreakdown, Vec<f64>), LossError> {
        let ctx = state.loss_ctx(ego, cfg);
        let inputs = TotalLossInputs {
            static_rays,
            dynamic_rays,
            patches,
            reg_points,
            sim,
            samples_per_ray,
        };
        total_loss(&ctx, &inputs, state.params.len())
    };
    let (_, grads) = eval(state)?;
    let mut entries = Vec::with_capacity(slots.len());
    let mut max_rel = 0.0f64;
    for &slot in slots {
        let orig = state.params[slot];
        state.params[slot] = orig + step;
        let plus = eval(state)?.0.total;
        state.params[slot] = orig - step;
        let minus = eval(state)?.0.total;
        state.params[slot] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let g = grads[slot];
        let denom = fd.abs().max(g.abs()).max(1e-7);
        let rel = (g - fd).abs() / denom;
        max_rel = max_rel.max(rel);
        entries.push((slot, g, fd, rel));
    }
    Ok(GradCheckReport { entries, max_rel_err: max_rel })
}
