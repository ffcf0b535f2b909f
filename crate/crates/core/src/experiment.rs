//! Experiment orchestration: configuration, default scenes, the end-to-end
//! run (generate, label, train, evaluate, emit artifacts), and ablation
//! comparison tables.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::grid::GridSpec;
use crate::io;
use crate::label::{classify_rays, FrameMasks, MaskSet};
use crate::loss::{LossConfig, LossWeights, ModelMode, TERM_NAMES};
use crate::metrics::{evaluate, EvalConfig, MetricsReport, ModelEval};
use crate::optim::{
    build_ray_pools, optimize, Adam, InitParams, Schedule, TrainData, TrainError, TrainLog,
    TrainState,
};
use crate::render::sample_ray;
use crate::scene::{
    make_batches, BatchOptions, EgoTrajectory, ImageRgb, LidarSpec, PinholeSpec, PrimitiveShape,
    RayBatch, SceneError, SceneOracle, ScenePrimitive,
};
use crate::simflow::SimFlowParams;
use crate::temporal::{AggParams, AggSwitches};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("comparison: {0}")]
    Compare(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    pub origin: [f64; 3],
    pub extent: [f64; 3],
    pub resolution: f64,
}

/// Scene description: primitives, sensors, ego motion, timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub name: String,
    pub volume: VolumeConfig,
    pub primitives: Vec<ScenePrimitive>,
    pub ego: EgoTrajectory,
    pub frame_dt: f64,
    pub cameras: Vec<PinholeSpec>,
    pub lidar: Option<LidarSpec>,
    #[serde(default)]
    pub background: [f64; 3],
}

impl SceneConfig {
    pub fn grid_spec(&self) -> Result<GridSpec, ExperimentError> {
        GridSpec::new(
            Vector3::from(self.volume.origin),
            Vector3::from(self.volume.extent),
            self.volume.resolution,
        )
        .map_err(|e| ExperimentError::Config(format!("scene.volume: {e}")))
    }

    pub fn build(&self) -> Result<SceneOracle, ExperimentError> {
        let spec = self.grid_spec()?;
        let mut oracle = SceneOracle::new(self.primitives.clone(), self.frame_dt, spec, self.ego)
            .map_err(|e| ExperimentError::Config(format!("scene.primitives: {e}")))?;
        oracle.background = self.background;
        Ok(oracle)
    }
}

/// Ablation switches mirroring the model variants under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// No temporal aggregation at all.
    NoTa,
    /// Static aggregation only.
    NoDynTa,
    /// Similarity-flow loss disabled.
    NoSim,
    /// One SDF for the whole scene.
    SingleSdf,
}

impl Ablation {
    pub fn tag(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoTa => "no-ta",
            Ablation::NoDynTa => "no-dyn-ta",
            Ablation::NoSim => "no-sim",
            Ablation::SingleSdf => "single-sdf",
        }
    }

    pub fn parse(s: &str) -> Option<Ablation> {
        match s {
            "full" => Some(Ablation::Full),
            "no-ta" => Some(Ablation::NoTa),
            "no-dyn-ta" => Some(Ablation::NoDynTa),
            "no-sim" => Some(Ablation::NoSim),
            "single-sdf" => Some(Ablation::SingleSdf),
            _ => None,
        }
    }
}

/// The complete experiment description, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub weights: LossWeights,
    pub agg: AggParams,
    pub sim: SimFlowParams,
    pub eval: EvalConfig,
    pub schedule: Schedule,
    pub init: InitParams,
    pub seed: u64,
    /// Static supervision window: rays from frames t +- k, k < window.
    pub window: usize,
    pub center_frame: i64,
    #[serde(default)]
    pub normalize_depth: bool,
    #[serde(default = "default_true")]
    pub reg_all_frames: bool,
    /// Run the mask-projection labeling pipeline instead of keeping oracle
    /// ray labels.
    #[serde(default)]
    pub relabel_with_masks: bool,
    #[serde(default)]
    pub label_noise_rate: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Semantic validation; errors name the offending field.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let err = |msg: String| Err(ExperimentError::Config(msg));
        self.scene.grid_spec()?;
        self.scene.build()?;
        if self.scene.cameras.is_empty() && self.scene.lidar.is_none() {
            return err("scene.cameras/scene.lidar: at least one sensor required".into());
        }
        if self.schedule.iterations == 0 {
            return err("schedule.iterations: must be positive".into());
        }
        if self.schedule.rays_per_iter == 0 {
            return err("schedule.rays_per_iter: must be positive".into());
        }
        if self.schedule.patch_size < 3 && self.schedule.patches_per_iter > 0 {
            return err("schedule.patch_size: must be at least 3".into());
        }
        if self.schedule.sim_refresh_period == 0 {
            return err("schedule.sim_refresh_period: must be positive".into());
        }
        if self.window == 0 {
            return err("window: must be at least 1".into());
        }
        if self.sim.window < 3 || self.sim.window % 2 == 0 {
            return err("sim.window: must be odd and >= 3".into());
        }
        if self.sim.decay <= 0.0 {
            return err("sim.decay: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.agg.ratio) {
            return err("agg.ratio: must lie in [0, 1]".into());
        }
        if self.agg.sharpness.sharpness <= 0.0 || self.agg.sharpness.temperature <= 0.0 {
            return err("agg.sharpness: sharpness and temperature must be positive".into());
        }
        if self.eval.thresholds.is_empty() || self.eval.thresholds.iter().any(|&t| t <= 0.0) {
            return err("eval.thresholds: must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return err("label_noise_rate: must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        let mut switches = AggSwitches::default();
        let mut weights = self.weights;
        let mut mode = ModelMode::Disentangled;
        match self.ablation {
            Ablation::Full => {}
            Ablation::NoTa => {
                switches.static_on = false;
                switches.dynamic_on = false;
            }
            Ablation::NoDynTa => switches.dynamic_on = false,
            Ablation::NoSim => weights.lambda_sim = 0.0,
            Ablation::SingleSdf => mode = ModelMode::SingleSdf,
        }
        LossConfig {
            weights,
            agg: self.agg,
            switches,
            mode,
            normalize_depth: self.normalize_depth,
            reg_all_frames: self.reg_all_frames,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// The default desk-scale static scene: a ground plane and two boxes.
pub fn default_static_scene() -> SceneConfig {
    SceneConfig {
        name: "desk-static".into(),
        volume: VolumeConfig {
            origin: [-6.4, -6.4, -3.2],
            extent: [12.8, 12.8, 6.4],
            resolution: 0.2,
        },
        primitives: vec![
            ScenePrimitive {
                shape: PrimitiveShape::GroundPlane { height: -1.6 },
                center: [0.0; 3],
                velocity: [0.0; 3],
                albedo: [0.35, 0.35, 0.35],
                dynamic: false,
            },
            ScenePrimitive {
                shape: PrimitiveShape::Box { half_extents: [0.8, 0.6, 0.5] },
                center: [-2.5, 2.0, -1.1],
                velocity: [0.0; 3],
                albedo: [0.15, 0.55, 0.2],
                dynamic: false,
            },
            ScenePrimitive {
                shape: PrimitiveShape::Box { half_extents: [0.6, 0.9, 0.7] },
                center: [2.2, 2.8, -0.9],
                velocity: [0.0; 3],
                albedo: [0.2, 0.25, 0.7],
                dynamic: false,
            },
        ],
        ego: EgoTrajectory {
            position0: [0.0, 0.0, 0.0],
            velocity: [0.15, 0.0, 0.0],
            yaw0: 0.0,
            yaw_rate: 0.0,
        },
        frame_dt: 0.1,
        cameras: vec![PinholeSpec::with_fov(96, 64, 1.2, [0.2, 0.0, 0.4])],
        lidar: Some(LidarSpec {
            azimuth_count: 96,
            elevation_count: 10,
            azimuth_range: (0.0, std::f64::consts::TAU),
            elevation_range: (-0.45, 0.25),
            origin_in_ego: [0.0, 0.0, 0.4],
        }),
        background: [0.0; 3],
    }
}

/// Default dynamic scene: the static scene plus one sphere mover crossing in
/// front of the sensors at two cells per frame.
pub fn default_dynamic_scene() -> SceneConfig {
    let mut scene = default_static_scene();
    scene.name = "desk-dynamic".into();
    scene.primitives.push(ScenePrimitive {
        shape: PrimitiveShape::Sphere { radius: 0.8 },
        center: [3.2, -1.2, -0.75],
        velocity: [0.4, 0.0, 0.0],
        albedo: [0.85, 0.15, 0.1],
        dynamic: true,
    });
    scene
}

pub fn default_config(scene: SceneConfig) -> ExperimentConfig {
    ExperimentConfig {
        scene,
        weights: LossWeights::default(),
        agg: AggParams::default(),
        sim: SimFlowParams { window: 11, decay: 0.75, cell_size: 0.2 },
        eval: EvalConfig::default(),
        schedule: Schedule::default(),
        init: InitParams::default(),
        seed: 7,
        window: 20,
        center_frame: 0,
        normalize_depth: false,
        reg_all_frames: true,
        relabel_with_masks: false,
        label_noise_rate: 0.0,
        ablation: Ablation::Full,
    }
}

/// Everything a finished run leaves behind.
pub struct RunSummary {
    pub report: MetricsReport,
    pub initial_range_loss: f64,
    pub final_range_loss: f64,
    pub out_dir: PathBuf,
}

fn trace_csv(path: &Path, log: &TrainLog) -> std::io::Result<()> {
    let mut header = vec!["iteration"];
    header.extend_from_slice(&TERM_NAMES);
    header.push("total");
    let rows: Vec<Vec<String>> = log
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.iteration.to_string()];
            row.extend(r.means.iter().map(|m| m.to_string()));
            row.push(r.total.to_string());
            row
        })
        .collect();
    io::write_csv(path, &header, &rows)
}

fn metrics_csv(path: &Path, cfg: &ExperimentConfig, report: &MetricsReport) -> std::io::Result<()> {
    let mut header: Vec<String> = vec![
        "variant".into(),
        "scene".into(),
        "seed".into(),
        "iterations".into(),
    ];
    for row in &report.rows {
        header.push(format!("iou@{}", row.threshold));
    }
    header.extend(["mean_iou".into(), "mave".into(), "epe3d".into()]);
    let mut row = vec![
        cfg.ablation.tag().to_string(),
        cfg.scene.name.clone(),
        cfg.seed.to_string(),
        cfg.schedule.iterations.to_string(),
    ];
    for r in &report.rows {
        row.push(r.iou.to_string());
    }
    row.push(report.mean_iou.to_string());
    row.push(report.mave.to_string());
    row.push(report.epe3d.to_string());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_csv(path, &header_refs, &[row])
}

fn save_checkpoint(dir: &Path, state: &TrainState, adam: &Adam) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let spec = state.layout.spec;
    let grid_of = |offset: usize| {
        let n = spec.cell_count();
        crate::grid::ScalarGrid3 {
            spec,
            values: state.params[offset..offset + n].to_vec(),
        }
    };
    for (f, &frame) in state.frames.iter().enumerate() {
        let tag = |name: &str| dir.join(format!("{name}_f{frame}.grid"));
        crate::grid::save_grid(&tag("static_sdf"), &grid_of(state.layout.static_sdf_offset(f)))
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        crate::grid::save_grid(&tag("dynamic_sdf"), &grid_of(state.layout.dynamic_sdf_offset(f)))
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        for (ch, tag_ch) in ["r", "g", "b"].iter().enumerate() {
            crate::grid::save_grid(
                &dir.join(format!("color_{tag_ch}_f{frame}.grid")),
                &grid_of(state.layout.color_offset(f, ch)),
            )
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
    }
    crate::grid::save_vector_grid(&dir.join("flow_back.grid"), &state.flow_grid(false))
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    crate::grid::save_vector_grid(&dir.join("flow_fwd.grid"), &state.flow_grid(true))
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    // Scalar state and optimizer moments, full precision.
    let manifest = serde_json::json!({
        "frames": state.frames,
        "sharpness": state.sharpness(),
        "log_sharpness": state.params[state.layout.log_sharpness_slot()],
        "iteration": state.iteration,
        "adam_step": adam.step,
    });
    std::fs::write(dir.join("state.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    write_f64_blob(&dir.join("adam_m.grid"), &adam.m)?;
    write_f64_blob(&dir.join("adam_v.grid"), &adam.v)?;
    Ok(())
}

/// Flat f64 vector in the same header+payload container as grid files.
fn write_f64_blob(path: &Path, values: &[f64]) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    let header = serde_json::json!({"dtype": "f64", "count": values.len(), "channels": 1});
    f.write_all(header.to_string().as_bytes())?;
    f.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)
}

/// Render the model's depth and color as seen by a camera (evaluation aid).
fn render_views(
    model: &ModelEval<'_>,
    oracle: &SceneOracle,
    cam: &PinholeSpec,
    frame: i64,
) -> (Vec<f64>, ImageRgb) {
    let cam_pose = oracle.ego.pose(frame as f64) * cam.pose_in_ego();
    let origin = (cam_pose * nalgebra::Point3::origin()).coords;
    let mut depths = vec![f64::NAN; cam.width * cam.height];
    let mut img = ImageRgb {
        width: cam.width,
        height: cam.height,
        pixels: vec![[0.0; 3]; cam.width * cam.height],
    };
    let sharp = model.ctx.sharpness_value();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = cam_pose.rotation * cam.pixel_ray(u, v);
            let (hit, depth) = model.predict(&origin, &dir);
            if hit {
                depths[v * cam.width + u] = depth;
            }
            // Color render on the blended field.
            let pose = &model.ctx.ff.poses[model.ctx.ff.center];
            let inv = pose.inverse();
            let o = (inv * nalgebra::Point3::from(origin)).coords;
            let d = inv.rotation * dir;
            if let Some(samples) = sample_ray(&o, &d, &model.ctx.ff.spec, model.samples_per_ray) {
                let phis: Vec<f64> = samples
                    .points
                    .iter()
                    .map(|p| {
                        crate::temporal::blend_aggregated(
                            (),
                            &model.ctx.ff,
                            &model.ctx.cfg.agg,
                            &model.ctx.cfg.switches,
                            sharp,
                            p,
                        )
                    })
                    .collect();
                let grids = model.ctx.ff.center_grids();
                let colors: Vec<[f64; 3]> = samples
                    .points
                    .iter()
                    .map(|p| {
                        [
                            crate::grid::sample_at((), grids.color[0], &model.ctx.ff.spec, p),
                            crate::grid::sample_at((), grids.color[1], &model.ctx.ff.spec, p),
                            crate::grid::sample_at((), grids.color[2], &model.ctx.ff.spec, p),
                        ]
                    })
                    .collect();
                let out = crate::render::render(&samples.depths, &phis, Some(&colors), sharp);
                img.pixels[v * cam.width + u] = out.color.unwrap();
            }
        }
    }
    (depths, img)
}

/// Generate data, train, evaluate, and write all artifacts under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let oracle = cfg.scene.build()?;
    let spec = oracle.spec;
    let t = cfg.center_frame;
    let k = cfg.window as i64;

    // Supervisory LiDAR batches over the static window.
    let opts = BatchOptions {
        samples_per_ray: cfg.schedule.samples_per_ray,
        label_noise_rate: cfg.label_noise_rate,
    };
    let mut batches = make_batches(
        &oracle,
        &[],
        cfg.scene.lidar.as_ref(),
        (t - (k - 1))..=(t + (k - 1)),
        cfg.seed,
        opts,
    )?;

    if cfg.relabel_with_masks {
        relabel_batches(&mut batches, &oracle, &cfg.scene.cameras);
    }

    let loss_cfg = cfg.loss_config();
    let (static_pool, dynamic_pool) =
        build_ray_pools(&batches, &oracle.ego, t, &spec, cfg.window, loss_cfg.mode);
    log::info!(
        "ray pools: {} static, {} dynamic",
        static_pool.len(),
        dynamic_pool.len()
    );

    // Photometric targets and sources.
    let targets: Vec<ImageRgb> =
        cfg.scene.cameras.iter().map(|c| oracle.render_image(c, t)).collect();
    let mut sources = Vec::new();
    for (ci, cam) in cfg.scene.cameras.iter().enumerate() {
        for src in [t - 1, t + 1] {
            sources.push((ci, src, oracle.render_image(cam, src)));
        }
    }

    let data = TrainData {
        static_pool,
        dynamic_pool,
        cams: cfg.scene.cameras.clone(),
        targets,
        sources,
        ego: oracle.ego,
        center_frame: t,
    };

    let mut state = TrainState::new(spec, t, &oracle.ego, cfg.init);
    let mut adam = Adam::new(state.params.len());
    let log = optimize(&mut state, &mut adam, &data, loss_cfg, &cfg.sim, &cfg.schedule)?;

    let range_idx = crate::loss::TermId::Range as usize;
    let initial_range = log.rows.first().map(|r| r.means[range_idx]).unwrap_or(f64::NAN);
    let final_range = log.rows.last().map(|r| r.means[range_idx]).unwrap_or(f64::NAN);

    // Evaluate the inference-time model.
    let eval_cfg_loss = ModelEval::inference_cfg(loss_cfg);
    let ctx = state.loss_ctx(&oracle.ego, eval_cfg_loss);
    let model = ModelEval { ctx, samples_per_ray: cfg.eval.samples_per_ray };
    let flow = state.flow_grid(true);
    let report = evaluate(&model, &flow, &oracle, t, &cfg.eval);

    // Artifacts.
    trace_csv(&out_dir.join("loss_trace.csv"), &log)?;
    metrics_csv(&out_dir.join("metrics.csv"), cfg, &report)?;
    if let Some(cam) = cfg.scene.cameras.first() {
        let (depths, img) = render_views(&model, &oracle, cam, t);
        io::write_pgm(
            &out_dir.join("depth.pgm"),
            cam.width,
            cam.height,
            &io::depth_to_gray(&depths),
        )?;
        io::write_ppm(&out_dir.join("color.ppm"), &img)?;
    }
    let bev_flow: Vec<(f64, f64)> = {
        let [nx, ny, nz] = spec.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let mut fx = 0.0;
                let mut fy = 0.0;
                for kk in 0..nz {
                    let v = flow.values[spec.index(i, j, kk)];
                    fx += v.x;
                    fy += v.y;
                }
                out.push((fx / nz as f64, fy / nz as f64));
            }
        }
        out
    };
    io::write_ppm(
        &out_dir.join("flow_bev.ppm"),
        &io::flow_to_rgb(&bev_flow, spec.dims[0], spec.dims[1], 1.0),
    )?;
    save_checkpoint(&out_dir.join("checkpoint"), &state, &adam)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json())?;

    Ok(RunSummary {
        report,
        initial_range_loss: initial_range,
        final_range_loss: final_range,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Restore a trained state from a checkpoint directory. Grid payloads are
/// f32 on disk, so values come back at single precision.
pub fn load_checkpoint(dir: &Path, cfg: &ExperimentConfig) -> Result<TrainState, ExperimentError> {
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)
            .map_err(|e| ExperimentError::Config(format!("state.json: {e}")))?;
    let oracle = cfg.scene.build()?;
    let mut state = TrainState::new(oracle.spec, cfg.center_frame, &oracle.ego, cfg.init);
    let n = oracle.spec.cell_count();
    let copy_grid = |params: &mut [f64], offset: usize, path: PathBuf| -> Result<(), ExperimentError> {
        let g = crate::grid::load_grid(&path).map_err(|e| ExperimentError::Config(e.to_string()))?;
        params[offset..offset + n].copy_from_slice(&g.values);
        Ok(())
    };
    let frames = state.frames.clone();
    for (f, frame) in frames.iter().enumerate() {
        copy_grid(
            &mut state.params,
            state.layout.static_sdf_offset(f),
            dir.join(format!("static_sdf_f{frame}.grid")),
        )?;
        copy_grid(
            &mut state.params,
            state.layout.dynamic_sdf_offset(f),
            dir.join(format!("dynamic_sdf_f{frame}.grid")),
        )?;
        for (ch, tag) in ["r", "g", "b"].iter().enumerate() {
            copy_grid(
                &mut state.params,
                state.layout.color_offset(f, ch),
                dir.join(format!("color_{tag}_f{frame}.grid")),
            )?;
        }
    }
    for (forward, name) in [(false, "flow_back"), (true, "flow_fwd")] {
        let vg = crate::grid::load_vector_grid(&dir.join(format!("{name}.grid")))
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        for ch in 0..3 {
            let off = state.layout.flow_offset(forward, ch);
            for c in 0..n {
                state.params[off + c] = vg.values[c][ch];
            }
        }
    }
    if let Some(log_a) = manifest.get("log_sharpness").and_then(|v| v.as_f64()) {
        let slot = state.layout.log_sharpness_slot();
        state.params[slot] = log_a;
    }
    Ok(state)
}

/// Evaluate a checkpoint without training and write metrics.csv.
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<MetricsReport, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let oracle = cfg.scene.build()?;
    let state = load_checkpoint(checkpoint, cfg)?;
    let loss_cfg = ModelEval::inference_cfg(cfg.loss_config());
    let ctx = state.loss_ctx(&oracle.ego, loss_cfg);
    let model = ModelEval { ctx, samples_per_ray: cfg.eval.samples_per_ray };
    let flow = state.flow_grid(true);
    let report = evaluate(&model, &flow, &oracle, cfg.center_frame, &cfg.eval);
    metrics_csv(&out_dir.join("metrics.csv"), cfg, &report)?;
    Ok(report)
}

/// Replace oracle ray labels with the mask-projection pipeline's output.
fn relabel_batches(batches: &mut [RayBatch], oracle: &SceneOracle, cams: &[PinholeSpec]) {
    for batch in batches.iter_mut() {
        if batch.kind != crate::scene::SensorKind::Lidar {
            continue;
        }
        let masks = MaskSet {
            entries: cams
                .iter()
                .enumerate()
                .map(|(ci, cam)| FrameMasks {
                    frame: batch.frame,
                    camera: ci,
                    masks: oracle.render_instance_masks(cam, batch.frame, 1.0),
                })
                .collect(),
        };
        let labels = classify_rays(
            batch,
            &masks,
            cams,
            &oracle.ego.pose(batch.frame as f64),
            &oracle.spec,
        );
        for (ray, label) in batch.rays.iter_mut().zip(labels) {
            ray.label = label;
        }
    }
}

/// Result of the finite-difference verification suite.
pub struct GradCheckSuite {
    /// Max relative error over SDF, color, and sharpness parameters.
    pub grids_max_rel_err: f64,
    /// Max relative error over flow parameters (warp path).
    pub flow_max_rel_err: f64,
    pub grid_slots: usize,
    pub flow_slots: usize,
}

impl GradCheckSuite {
    pub fn passed(&self) -> bool {
        self.grids_max_rel_err < 1e-4 && self.flow_max_rel_err < 1e-3
    }
}

/// Compare adjoint gradients of the full objective (every term enabled)
/// against central finite differences on a small randomized 8x8x8 state.
///
/// Flow parameters are perturbed with a smaller step and verified against a
/// looser tolerance: their gradients pass through trilinear interpolation of
/// warped sample positions, which is only piecewise smooth. Flow magnitudes
/// are kept small so warped samples stay off cell faces.
pub fn run_gradcheck(seed: u64) -> Result<GradCheckSuite, ExperimentError> {
    use crate::loss::PatchTask;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let spec = GridSpec::new(
        Vector3::new(-0.8, -0.8, -0.8),
        Vector3::new(1.6, 1.6, 1.6),
        0.2,
    )
    .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let ego = EgoTrajectory {
        position0: [0.0; 3],
        velocity: [0.02, 0.0, 0.0],
        yaw0: 0.0,
        yaw_rate: 0.0,
    };
    let primitives = vec![
        ScenePrimitive {
            shape: PrimitiveShape::GroundPlane { height: -0.5 },
            center: [0.0; 3],
            velocity: [0.0; 3],
            albedo: [0.3, 0.35, 0.3],
            dynamic: false,
        },
        ScenePrimitive {
            shape: PrimitiveShape::Sphere { radius: 0.3 },
            center: [0.25, 0.05, -0.05],
            velocity: [0.04, 0.0, 0.0],
            albedo: [0.8, 0.2, 0.2],
            dynamic: true,
        },
    ];
    let oracle = SceneOracle::new(primitives, 0.1, spec, ego)?;
    let cam = PinholeSpec::with_fov(10, 8, 1.2, [-0.1, 0.0, 0.1]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = TrainState::new(spec, 0, &ego, InitParams::default());
    let layout = state.layout;
    let n = spec.cell_count();
    for f in 0..state.frames.len() {
        for c in 0..n {
            state.params[layout.static_sdf_offset(f) + c] = 0.05 + rng.gen::<f64>() * 0.5;
            state.params[layout.dynamic_sdf_offset(f) + c] = -0.2 + rng.gen::<f64>() * 0.9;
            for ch in 0..3 {
                state.params[layout.color_offset(f, ch) + c] = 0.2 + rng.gen::<f64>() * 0.6;
            }
        }
    }
    for forward in [false, true] {
        for ch in 0..3 {
            let off = layout.flow_offset(forward, ch);
            for c in 0..n {
                // Small magnitudes keep warped positions off cell faces.
                state.params[off + c] = (rng.gen::<f64>() - 0.5) * 0.05;
            }
        }
    }

    // Hand-built hitting rays with endpoints inside the volume.
    let mk_ray = |origin: Vector3<f64>, target: Vector3<f64>, dynamic: bool| {
        let dir = (target - origin).normalize();
        crate::scene::Ray {
            origin: [origin.x, origin.y, origin.z],
            dir: [dir.x, dir.y, dir.z],
            gt_range: (target - origin).norm(),
            gt_color: [0.5; 3],
            label: if dynamic { crate::scene::RayLabel::Dynamic } else { crate::scene::RayLabel::Static },
            pixel: None,
            gt_hit_dynamic: dynamic,
        }
    };
    let mut static_rays = Vec::new();
    let mut dynamic_rays = Vec::new();
    for i in 0..6 {
        let frame = [-1i64, 0, 1][i % 3];
        let o = Vector3::new(-0.73, -0.31 + 0.11 * i as f64, 0.23 - 0.05 * i as f64);
        let t = Vector3::new(0.51, 0.17 - 0.09 * i as f64, -0.21 + 0.04 * i as f64);
        static_rays.push((frame, mk_ray(o, t, false)));
        let od = Vector3::new(-0.69, 0.27 - 0.09 * i as f64, -0.33 + 0.07 * i as f64);
        let td = Vector3::new(0.43, -0.23 + 0.08 * i as f64, 0.11 - 0.03 * i as f64);
        dynamic_rays.push((0, mk_ray(od, td, true)));
    }

    let target = oracle.render_image(&cam, 0);
    let src_prev = oracle.render_image(&cam, -1);
    let src_next = oracle.render_image(&cam, 1);
    let patches = vec![PatchTask {
        cam: &cam,
        frame: 0,
        x0: 2,
        y0: 1,
        width: 4,
        height: 4,
        target: &target,
        sources: vec![(-1, &src_prev), (1, &src_next)],
        samples_per_ray: 16,
    }];

    let reg_points: Vec<Vector3<f64>> = (0..24)
        .map(|_| {
            Vector3::new(
                rng.gen_range(spec.origin.x + 0.2..spec.max_corner().x - 0.2),
                rng.gen_range(spec.origin.y + 0.2..spec.max_corner().y - 0.2),
                rng.gen_range(spec.origin.z + 0.2..spec.max_corner().z - 0.2),
            )
        })
        .collect();

    let cfg = LossConfig::default();
    let sim_params = SimFlowParams { window: 5, decay: 0.75, cell_size: spec.resolution };
    let sim = crate::simflow::make_sim_labels(&state.fields(), &sim_params, state.sharpness());

    // 100 verified parameters: 70 across SDF/color/sharpness, 30 flow.
    let mut grid_slots: Vec<usize> = (0..69)
        .map(|_| rng.gen_range(0..layout.flow_offset(false, 0)))
        .collect();
    grid_slots.push(layout.log_sharpness_slot());
    let flow_slots: Vec<usize> = (0..30)
        .map(|_| rng.gen_range(layout.flow_offset(false, 0)..layout.log_sharpness_slot()))
        .collect();

    let grids = crate::optim::gradcheck(
        &mut state,
        &ego,
        cfg,
        &static_rays,
        &dynamic_rays,
        &patches,
        &reg_points,
        Some(&sim),
        16,
        &grid_slots,
        1e-4,
    )?;
    let flow = crate::optim::gradcheck(
        &mut state,
        &ego,
        cfg,
        &static_rays,
        &dynamic_rays,
        &patches,
        &reg_points,
        Some(&sim),
        16,
        &flow_slots,
        1e-5,
    )?;
    Ok(GradCheckSuite {
        grids_max_rel_err: grids.max_rel_err,
        flow_max_rel_err: flow.max_rel_err,
        grid_slots: grid_slots.len(),
        flow_slots: flow_slots.len(),
    })
}

/// Align several runs' metrics.csv files into one table. Refuses to compare
/// runs from different scenes.
pub fn compare(paths: &[PathBuf]) -> Result<(String, Vec<Vec<String>>, Vec<String>), ExperimentError> {
    if paths.len() < 2 {
        return Err(ExperimentError::Compare("need at least two metrics files".into()));
    }
    let mut header: Option<Vec<String>> = None;
    let mut scene: Option<String> = None;
    let mut rows = Vec::new();
    for p in paths {
        let (h, r) = io::read_csv(p)
            .map_err(|e| ExperimentError::Compare(format!("{}: {e}", p.display())))?;
        if r.is_empty() {
            return Err(ExperimentError::Compare(format!("{}: no data rows", p.display())));
        }
        match &header {
            None => header = Some(h),
            Some(expect) => {
                if *expect != h {
                    return Err(ExperimentError::Compare(format!(
                        "{}: column mismatch",
                        p.display()
                    )));
                }
            }
        }
        let row = r[0].clone();
        let this_scene = row.get(1).cloned().unwrap_or_default();
        match &scene {
            None => scene = Some(this_scene),
            Some(s) => {
                if *s != this_scene {
                    return Err(ExperimentError::Compare(format!(
                        "{}: scene {this_scene} does not match {s}",
                        p.display()
                    )));
                }
            }
        }
        rows.push(row);
    }
    let header = header.unwrap();
    let mut table = String::new();
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| {
            rows.iter()
                .map(|r| r.get(i).map(|c| c.len()).unwrap_or(0))
                .chain([h.len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let fmt_row = |cells: &[String]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:>w$}", c, w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    table.push_str(&fmt_row(&header));
    table.push('\n');
    for r in &rows {
        table.push_str(&fmt_row(r));
        table.push('\n');
    }
    Ok((table, rows, header))
}
