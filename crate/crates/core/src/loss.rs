//! The full training objective over ray batches and regularization samples.
//!
//! Every term is a mean over its own item count; the total is the weighted
//! sum of those means. Work is split into fixed chunks (rays, patches,
//! regularization points, similarity cells), each evaluated on its own tape
//! with the per-term weight/count folded into the backward seed. Chunks are
//! merged in index order, so losses and gradients are bit-identical for any
//! thread count.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::adjoint::{pairwise_sum, pairwise_sum_f64, Real, Tape, Var};
use crate::grid::{sample_at, FieldScalar, GridView};
use crate::render::{render, sample_ray};
use crate::scene::{EgoTrajectory, ImageRgb, PinholeSpec, Ray};
use crate::simflow::{sim_flow_loss_sum, SimLabels};
use crate::temporal::{aggregate_dynamic, aggregate_static, blend_aggregated, FrameFields};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("non-finite loss in term {term}")]
    NonFinite { term: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    /// Separate static and dynamic fields (the full model).
    Disentangled,
    /// Everything lives in one SDF; dynamic-field terms are disabled.
    SingleSdf,
}

/// Weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub lambda_dep: f64,
    pub lambda_rgb: f64,
    pub lambda_range: f64,
    pub lambda_density: f64,
    pub lambda_eikonal_static: f64,
    pub lambda_eikonal_dynamic: f64,
    pub lambda_hessian_static: f64,
    pub lambda_hessian_dynamic: f64,
    pub lambda_hessian_flow: f64,
    pub lambda_sparsity_dynamic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sim: 5.0,
            lambda_dep: 1.0,
            lambda_rgb: 0.1,
            lambda_range: 10.0,
            lambda_density: 0.01,
            lambda_eikonal_static: 0.1,
            lambda_eikonal_dynamic: 0.1,
            lambda_hessian_static: 0.1,
            lambda_hessian_dynamic: 0.1,
            lambda_hessian_flow: 0.02,
            lambda_sparsity_dynamic: 0.01,
        }
    }
}

pub const TERM_COUNT: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum TermId {
    Range = 0,
    Density = 1,
    Rgb = 2,
    Reprojection = 3,
    Similarity = 4,
    EikonalStatic = 5,
    EikonalDynamic = 6,
    HessianStatic = 7,
    HessianDynamic = 8,
    HessianFlow = 9,
    SparsityDynamic = 10,
}

pub const ALL_TERMS: [TermId; TERM_COUNT] = [
    TermId::Range,
    TermId::Density,
    TermId::Rgb,
    TermId::Reprojection,
    TermId::Similarity,
    TermId::EikonalStatic,
    TermId::EikonalDynamic,
    TermId::HessianStatic,
    TermId::HessianDynamic,
    TermId::HessianFlow,
    TermId::SparsityDynamic,
];

pub const TERM_NAMES: [&str; TERM_COUNT] = [
    "l_range",
    "l_density",
    "l_rgb",
    "l_reprojection",
    "l_similarity",
    "l_eikonal_static",
    "l_eikonal_dynamic",
    "l_hessian_static",
    "l_hessian_dynamic",
    "l_hessian_flow",
    "l_sparsity_dynamic",
];

impl LossWeights {
    pub fn weight(&self, term: TermId) -> f64 {
        match term {
            TermId::Range => self.lambda_range,
            TermId::Density => self.lambda_density,
            TermId::Rgb => self.lambda_rgb,
            TermId::Reprojection => self.lambda_dep,
            TermId::Similarity => self.lambda_sim,
            TermId::EikonalStatic => self.lambda_eikonal_static,
            TermId::EikonalDynamic => self.lambda_eikonal_dynamic,
            TermId::HessianStatic => self.lambda_hessian_static,
            TermId::HessianDynamic => self.lambda_hessian_dynamic,
            TermId::HessianFlow => self.lambda_hessian_flow,
            TermId::SparsityDynamic => self.lambda_sparsity_dynamic,
        }
    }
}

/// Per-term unweighted means plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub means: [f64; TERM_COUNT],
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean(&self, term: TermId) -> f64 {
        self.means[term as usize]
    }
}

/// Loss assembly configuration.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub agg: crate::temporal::AggParams,
    pub switches: crate::temporal::AggSwitches,
    pub mode: ModelMode,
    /// Divide rendered depth by the weight sum inside range/reprojection
    /// losses. Off by default: the literal rendering formula.
    pub normalize_depth: bool,
    /// Regularize neighbor-frame grids too, not just the center frame.
    pub reg_all_frames: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            agg: crate::temporal::AggParams::default(),
            switches: crate::temporal::AggSwitches::default(),
            mode: ModelMode::Disentangled,
            normalize_depth: false,
            reg_all_frames: true,
        }
    }
}

/// Everything a loss evaluation needs to see of the model.
pub struct LossCtx<'a> {
    pub ff: FrameFields<'a>,
    /// log(sharpness) value, and its parameter slot when trainable.
    pub log_sharpness: [f64; 1],
    pub sharpness_slot: Option<u32>,
    pub ego: &'a EgoTrajectory,
    pub center_frame: i64,
    pub cfg: LossConfig,
}

impl<'a> LossCtx<'a> {
    fn sharpness<S: FieldScalar>(&self, cx: S::Cx) -> S {
        let view = GridView { values: &self.log_sharpness, base_slot: self.sharpness_slot };
        let log_a: S = if self.sharpness_slot.is_some() {
            S::fetch(cx, view, 0)
        } else {
            S::lift(cx, self.log_sharpness[0])
        };
        log_a.exp()
    }

    pub fn sharpness_value(&self) -> f64 {
        self.log_sharpness[0].exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSel {
    AggStatic,
    AggDynamic,
    Blended,
}

/// One camera patch of supervision: target frame pixels plus adjacent
/// source images for reprojection.
pub struct PatchTask<'a> {
    pub cam: &'a PinholeSpec,
    pub frame: i64,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub target: &'a ImageRgb,
    pub sources: Vec<(i64, &'a ImageRgb)>,
    pub samples_per_ray: usize,
}

pub struct TotalLossInputs<'a> {
    pub static_rays: &'a [(i64, Ray)],
    pub dynamic_rays: &'a [(i64, Ray)],
    pub patches: &'a [PatchTask<'a>],
    pub reg_points: &'a [Vector3<f64>],
    pub sim: Option<&'a SimLabels>,
    pub samples_per_ray: usize,
}

/// Render one world-space ray against a selected field. Returns the depth
/// estimate used by the losses, the weight sum, and per-sample colors when
/// requested.
#[allow(clippy::type_complexity)]
fn render_world_ray<S: FieldScalar>(
    cx: S::Cx,
    ctx: &LossCtx<'_>,
    origin_w: &Vector3<f64>,
    dir_w: &Vector3<f64>,
    samples: usize,
    field: FieldSel,
    with_color: bool,
    sharpness: S,
) -> Option<(S, S, Option<[S; 3]>)> {
    let pose_t = &ctx.ff.poses[ctx.ff.center];
    let inv = pose_t.inverse();
    let origin = (inv * nalgebra::Point3::from(*origin_w)).coords;
    let dir = inv.rotation * dir_w;
    let ray_samples = sample_ray(&origin, &dir, &ctx.ff.spec, samples)?;
    let field = match ctx.cfg.mode {
        ModelMode::SingleSdf => FieldSel::AggStatic,
        ModelMode::Disentangled => field,
    };
    let phis: Vec<S> = ray_samples
        .points
        .iter()
        .map(|p| match field {
            FieldSel::AggStatic => {
                aggregate_static(cx, &ctx.ff, ctx.cfg.agg.ratio, &ctx.cfg.switches, p)
            }
            FieldSel::AggDynamic => aggregate_dynamic(
                cx,
                &ctx.ff,
                ctx.cfg.agg.ratio,
                &ctx.cfg.switches,
                sharpness,
                p,
            ),
            FieldSel::Blended => blend_aggregated(
                cx,
                &ctx.ff,
                &ctx.cfg.agg,
                &ctx.cfg.switches,
                sharpness,
                p,
            ),
        })
        .collect();
    let colors: Option<Vec<[S; 3]>> = with_color.then(|| {
        let grids = ctx.ff.center_grids();
        ray_samples
            .points
            .iter()
            .map(|p| {
                [
                    sample_at(cx, grids.color[0], &ctx.ff.spec, p),
                    sample_at(cx, grids.color[1], &ctx.ff.spec, p),
                    sample_at(cx, grids.color[2], &ctx.ff.spec, p),
                ]
            })
            .collect()
    });
    let out = render(&ray_samples.depths, &phis, colors.as_deref(), sharpness);
    let depth = if ctx.cfg.normalize_depth {
        out.depth / (out.weight_sum + 1e-8)
    } else {
        out.depth
    };
    Some((depth, out.weight_sum, out.color))
}

/// Squared range residuals for a slice of rays rendered on one field, plus
/// the density penalty at dynamic ray endpoints.
fn lidar_chunk<S: FieldScalar>(
    cx: S::Cx,
    ctx: &LossCtx<'_>,
    rays: &[(i64, Ray)],
    samples: usize,
    is_static: bool,
    sharpness: S,
) -> (Vec<S>, Vec<S>) {
    let mut range_terms = Vec::with_capacity(rays.len());
    let mut density_terms = Vec::new();
    let field = if is_static { FieldSel::AggStatic } else { FieldSel::AggDynamic };
    for (_frame, ray) in rays {
        debug_assert!(ray.hits());
        if let Some((depth, _w, _)) = render_world_ray(
            cx,
            ctx,
            &ray.origin_v(),
            &ray.dir_v(),
            samples,
            field,
            false,
            sharpness,
        ) {
            range_terms.push((depth - ray.gt_range).sq());
        }
        if !is_static && ctx.cfg.mode == ModelMode::Disentangled {
            if let Some(end_w) = ray.endpoint() {
                let pose_t = &ctx.ff.poses[ctx.ff.center];
                let end = (pose_t.inverse() * nalgebra::Point3::from(end_w)).coords;
                let phi_d: S = sample_at(cx, ctx.ff.center_grids().dynamic_sdf, &ctx.ff.spec, &end);
                density_terms.push(phi_d.relu());
            }
        }
    }
    (range_terms, density_terms)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn reflect(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = idx;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * len - 2 - i;
    }
    i.clamp(0, len - 1) as usize
}

/// Per-pixel DSSIM between a rendered patch and a constant target patch,
/// 3x3 windows with reflect padding, averaged over channels.
fn dssim_map<S: Real>(
    rendered: &[[S; 3]],
    target: &[[f64; 3]],
    width: usize,
    height: usize,
) -> Vec<S> {
    assert!(width >= 2 && height >= 2);
    let at = |x: isize, y: isize| reflect(y, height) * width + reflect(x, width);
    let mut out: Vec<Option<S>> = vec![None; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc: Option<S> = None;
            for ch in 0..3 {
                let mut sum_x: Option<S> = None;
                let mut sum_xx: Option<S> = None;
                let mut sum_xy: Option<S> = None;
                let mut sum_y = 0.0;
                let mut sum_yy = 0.0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let p = at(x + dx, y + dy);
                        let xv = rendered[p][ch];
                        let yv = target[p][ch];
                        sum_x = Some(sum_x.map_or(xv, |s| s + xv));
                        sum_xx = Some(sum_xx.map_or(xv * xv, |s| s + xv * xv));
                        sum_xy = Some(sum_xy.map_or(xv * yv, |s| s + xv * yv));
                        sum_y += yv;
                        sum_yy += yv * yv;
                    }
                }
                let inv9 = 1.0 / 9.0;
                let mu_x = sum_x.unwrap() * inv9;
                let mu_y = sum_y * inv9;
                let var_x = sum_xx.unwrap() * inv9 - mu_x * mu_x;
                let var_y = sum_yy * inv9 - mu_y * mu_y;
                let cov = sum_xy.unwrap() * inv9 - mu_x * mu_y;
                let num = (mu_x * (2.0 * mu_y) + SSIM_C1) * (cov * 2.0 + SSIM_C2);
                let den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2);
                let ssim = num / den;
                let dssim = ((-ssim + 1.0) * 0.5).clamp_const(0.0, 1.0);
                acc = Some(match acc {
                    None => dssim,
                    Some(a) => a + dssim,
                });
            }
            out[(y as usize) * width + x as usize] = Some(acc.unwrap() * (1.0 / 3.0));
        }
    }
    out.into_iter().map(|o| o.unwrap()).collect()
}

fn bilinear_var<S: Real>(img: &ImageRgb, u: S, v: S) -> [S; 3] {
    let su = (u - 0.5).clamp_const(0.0, (img.width - 1) as f64);
    let sv = (v - 0.5).clamp_const(0.0, (img.height - 1) as f64);
    let u0 = (su.val().floor() as usize).min(img.width.saturating_sub(2));
    let v0 = (sv.val().floor() as usize).min(img.height.saturating_sub(2));
    let tu = su - u0 as f64;
    let tv = sv - v0 as f64;
    let u1 = (u0 + 1).min(img.width - 1);
    let v1 = (v0 + 1).min(img.height - 1);
    let mut out = [tu; 3];
    for ch in 0..3 {
        let p00 = img.pixel(u0, v0)[ch];
        let p10 = img.pixel(u1, v0)[ch];
        let p01 = img.pixel(u0, v1)[ch];
        let p11 = img.pixel(u1, v1)[ch];
        // Bilinear with variable weights, constant corners.
        let top = tu * (p10 - p00) + p00;
        let bottom = tu * (p11 - p01) + p01;
        out[ch] = tv * (bottom - top) + top;
    }
    out
}

/// RGB and reprojection terms for one camera patch.
fn patch_chunk<S: FieldScalar>(
    cx: S::Cx,
    ctx: &LossCtx<'_>,
    patch: &PatchTask<'_>,
    sharpness: S,
) -> (Vec<S>, Vec<S>) {
    let n = patch.width * patch.height;
    let cam_pose = ctx.ego.pose(patch.frame as f64) * patch.cam.pose_in_ego();
    let origin_w = (cam_pose * nalgebra::Point3::origin()).coords;

    let mut rendered: Vec<[S; 3]> = Vec::with_capacity(n);
    let mut depths: Vec<S> = Vec::with_capacity(n);
    let mut targets: Vec<[f64; 3]> = Vec::with_capacity(n);
    let mut dirs_w: Vec<Vector3<f64>> = Vec::with_capacity(n);
    let zero = S::lift(cx, 0.0);
    for py in 0..patch.height {
        for px in 0..patch.width {
            let (u, v) = (patch.x0 + px, patch.y0 + py);
            let dir_w = cam_pose.rotation * patch.cam.pixel_ray(u, v);
            dirs_w.push(dir_w);
            targets.push(patch.target.pixel(u, v));
            match render_world_ray(
                cx,
                ctx,
                &origin_w,
                &dir_w,
                patch.samples_per_ray,
                FieldSel::Blended,
                true,
                sharpness,
            ) {
                Some((depth, _w, Some(color))) => {
                    rendered.push(color);
                    depths.push(depth);
                }
                _ => {
                    rendered.push([zero; 3]);
                    depths.push(zero);
                }
            }
        }
    }

    // L_rgb: 0.85 * DSSIM + 0.15 * L1 per pixel.
    let dssim = dssim_map(&rendered, &targets, patch.width, patch.height);
    let mut rgb_terms = Vec::with_capacity(n);
    for p in 0..n {
        let l1 = ((rendered[p][0] - targets[p][0]).abs()
            + (rendered[p][1] - targets[p][1]).abs()
            + (rendered[p][2] - targets[p][2]).abs())
            * (1.0 / 3.0);
        rgb_terms.push(dssim[p] * 0.85 + l1 * 0.15);
    }

    // L_dep: min-over-sources reprojection error with auto-masking.
    let mut dep_terms = Vec::with_capacity(n);
    for p in 0..n {
        let (px, py) = (p % patch.width, p / patch.width);
        let (u, v) = (patch.x0 + px, patch.y0 + py);
        let target_px = patch.target.pixel(u, v);
        let mut best: Option<S> = None;
        let mut best_identity = f64::INFINITY;
        for (src_frame, src_img) in &patch.sources {
            let src_pose = ctx.ego.pose(*src_frame as f64) * patch.cam.pose_in_ego();
            let world_to_src = src_pose.inverse();
            // Warped point: origin + depth * dir, into the source camera.
            let d = depths[p];
            let pt = [
                d * dirs_w[p].x + origin_w.x,
                d * dirs_w[p].y + origin_w.y,
                d * dirs_w[p].z + origin_w.z,
            ];
            let r = world_to_src.rotation.to_rotation_matrix();
            let m = r.matrix();
            let tvec = world_to_src.translation.vector;
            let pc = [
                pt[0] * m[(0, 0)] + pt[1] * m[(0, 1)] + pt[2] * m[(0, 2)] + tvec[0],
                pt[0] * m[(1, 0)] + pt[1] * m[(1, 1)] + pt[2] * m[(1, 2)] + tvec[1],
                pt[0] * m[(2, 0)] + pt[1] * m[(2, 1)] + pt[2] * m[(2, 2)] + tvec[2],
            ];
            if pc[2].val() <= 1e-6 {
                continue;
            }
            let iz = pc[2].recip();
            let su = pc[0] * iz * patch.cam.fx + patch.cam.cx;
            let sv = pc[1] * iz * patch.cam.fy + patch.cam.cy;
            if !patch.cam.in_bounds((su.val(), sv.val())) {
                continue;
            }
            let warped = bilinear_var(*src_img, su, sv);
            let pe = ((warped[0] - target_px[0]).abs()
                + (warped[1] - target_px[1]).abs()
                + (warped[2] - target_px[2]).abs())
                * (1.0 / 3.0);
            best = Some(match best {
                None => pe,
                Some(b) => b.min(pe),
            });
            // Identity (unwarped) error of this source at the same pixel.
            let id_px = src_img.pixel(u, v);
            let id_pe = ((id_px[0] - target_px[0]).abs()
                + (id_px[1] - target_px[1]).abs()
                + (id_px[2] - target_px[2]).abs())
                / 3.0;
            best_identity = best_identity.min(id_pe);
        }
        match best {
            // Auto-mask: a static pixel is explained by the unwarped source.
            Some(b) if best_identity >= b.val() => dep_terms.push(b),
            _ => dep_terms.push(zero),
        }
    }
    (rgb_terms, dep_terms)
}

/// Regularization terms evaluated at uniform sample points.
struct RegTerms<S> {
    eik_static: Vec<S>,
    eik_dynamic: Vec<S>,
    hess_static: Vec<S>,
    hess_dynamic: Vec<S>,
    hess_flow: Vec<S>,
    sparsity: Vec<S>,
}

fn reg_chunk<S: FieldScalar>(
    cx: S::Cx,
    ctx: &LossCtx<'_>,
    points: &[Vector3<f64>],
) -> RegTerms<S> {
    let spec = &ctx.ff.spec;
    let h = spec.resolution;
    let dynamic_on = ctx.cfg.mode == ModelMode::Disentangled;
    let frames: Vec<usize> = if ctx.cfg.reg_all_frames {
        (0..ctx.ff.frames.len()).collect()
    } else {
        vec![ctx.ff.center]
    };
    let frame_scale = 1.0 / frames.len() as f64;

    let eikonal = |view: GridView<'_>, x: &Vector3<f64>| -> S {
        let mut sq_sum: Option<S> = None;
        for axis in 0..3 {
            let mut plus = *x;
            let mut minus = *x;
            plus[axis] += h;
            minus[axis] -= h;
            let g = (sample_at::<S>(cx, view, spec, &plus) - sample_at::<S>(cx, view, spec, &minus))
                / (2.0 * h);
            let g2 = g.sq();
            sq_sum = Some(match sq_sum {
                None => g2,
                Some(s) => s + g2,
            });
        }
        let norm = (sq_sum.unwrap() + 1e-12).sqrt();
        (norm - 1.0).sq()
    };
    let hessian = |view: GridView<'_>, cell: [usize; 3]| -> S {
        let mut acc: Option<S> = None;
        for axis in 0..3 {
            let mut lo = cell;
            let mut hi = cell;
            lo[axis] -= 1;
            hi[axis] += 1;
            let c = S::fetch(cx, view, spec.index(cell[0], cell[1], cell[2]));
            let a = S::fetch(cx, view, spec.index(lo[0], lo[1], lo[2]));
            let b = S::fetch(cx, view, spec.index(hi[0], hi[1], hi[2]));
            let second = a + b - c * 2.0;
            let s2 = second.sq();
            acc = Some(match acc {
                None => s2,
                Some(s) => s + s2,
            });
        }
        acc.unwrap()
    };

    let mut out = RegTerms {
        eik_static: Vec::with_capacity(points.len()),
        eik_dynamic: Vec::with_capacity(points.len()),
        hess_static: Vec::with_capacity(points.len()),
        hess_dynamic: Vec::with_capacity(points.len()),
        hess_flow: Vec::with_capacity(points.len()),
        sparsity: Vec::with_capacity(points.len()),
    };
    for x in points {
        // Interior node so second differences never leave the grid.
        let mut cell = spec.nearest_cell(x);
        for axis in 0..3 {
            cell[axis] = cell[axis].clamp(1, spec.dims[axis] - 2);
        }
        let mut es: Option<S> = None;
        let mut ed: Option<S> = None;
        let mut hs: Option<S> = None;
        let mut hd: Option<S> = None;
        for &f in &frames {
            let grids = &ctx.ff.frames[f];
            let add = |acc: Option<S>, v: S| Some(match acc {
                None => v,
                Some(a) => a + v,
            });
            es = add(es, eikonal(grids.static_sdf, x));
            hs = add(hs, hessian(grids.static_sdf, cell));
            if dynamic_on {
                ed = add(ed, eikonal(grids.dynamic_sdf, x));
                hd = add(hd, hessian(grids.dynamic_sdf, cell));
            }
        }
        out.eik_static.push(es.unwrap() * frame_scale);
        out.hess_static.push(hs.unwrap() * frame_scale);
        if dynamic_on {
            out.eik_dynamic.push(ed.unwrap() * frame_scale);
            out.hess_dynamic.push(hd.unwrap() * frame_scale);
            // Flow smoothness over all six channels (center frame flows).
            let mut hf: Option<S> = None;
            for views in [&ctx.ff.flow_back, &ctx.ff.flow_fwd] {
                for ch in 0..3 {
                    let v = hessian(views[ch], cell);
                    hf = Some(match hf {
                        None => v,
                        Some(a) => a + v,
                    });
                }
            }
            out.hess_flow.push(hf.unwrap() * (1.0 / 6.0));
            // Sparsity prior: penalize occupied dynamic predictions.
            let phi_d: S = sample_at(cx, ctx.ff.center_grids().dynamic_sdf, spec, x);
            out.sparsity.push((-phi_d).relu());
        }
    }
    out
}

enum ChunkSpec {
    StaticRays(std::ops::Range<usize>),
    DynamicRays(std::ops::Range<usize>),
    Patch(usize),
    Reg(std::ops::Range<usize>),
    Sim(std::ops::Range<usize>),
}

struct ChunkResult {
    sums: [f64; TERM_COUNT],
    grads: Vec<(u32, f64)>,
}

/// Counts used to turn per-term sums into means.
#[derive(Clone, Copy)]
struct TermCounts {
    counts: [usize; TERM_COUNT],
}

impl TermCounts {
    fn of(inputs: &TotalLossInputs<'_>, ctx: &LossCtx<'_>) -> Self {
        let n_range = inputs.static_rays.len() + inputs.dynamic_rays.len();
        let n_den = inputs.dynamic_rays.len();
        let n_pix: usize = inputs.patches.iter().map(|p| p.width * p.height).sum();
        let n_reg = inputs.reg_points.len();
        let n_sim = if inputs.sim.is_some() { ctx.ff.spec.cell_count() } else { 0 };
        let mut counts = [0usize; TERM_COUNT];
        counts[TermId::Range as usize] = n_range;
        counts[TermId::Density as usize] = n_den;
        counts[TermId::Rgb as usize] = n_pix;
        counts[TermId::Reprojection as usize] = n_pix;
        counts[TermId::Similarity as usize] = n_sim;
        for t in [
            TermId::EikonalStatic,
            TermId::EikonalDynamic,
            TermId::HessianStatic,
            TermId::HessianDynamic,
            TermId::HessianFlow,
            TermId::SparsityDynamic,
        ] {
            counts[t as usize] = n_reg;
        }
        TermCounts { counts }
    }
}

const RAY_CHUNK: usize = 16;
const REG_CHUNK: usize = 64;
const SIM_CHUNK: usize = 8192;

fn ranges(total: usize, step: usize) -> Vec<std::ops::Range<usize>> {
    (0..total.div_ceil(step))
        .map(|c| c * step..((c + 1) * step).min(total))
        .collect()
}

fn eval_chunk(
    ctx: &LossCtx<'_>,
    inputs: &TotalLossInputs<'_>,
    counts: &TermCounts,
    chunk: &ChunkSpec,
) -> ChunkResult {
    let tape = Tape::with_capacity(1 << 14);
    let sharp: Var<'_> = ctx.sharpness(&tape);
    let mut sums = [0.0f64; TERM_COUNT];
    let mut parts: Vec<(TermId, Option<Var<'_>>)> = Vec::new();
    match chunk {
        ChunkSpec::StaticRays(r) => {
            let (range_terms, _) =
                lidar_chunk(&tape, ctx, &inputs.static_rays[r.clone()], inputs.samples_per_ray, true, sharp);
            parts.push((TermId::Range, pairwise_sum(&range_terms)));
        }
        ChunkSpec::DynamicRays(r) => {
            let (range_terms, den_terms) =
                lidar_chunk(&tape, ctx, &inputs.dynamic_rays[r.clone()], inputs.samples_per_ray, false, sharp);
            parts.push((TermId::Range, pairwise_sum(&range_terms)));
            parts.push((TermId::Density, pairwise_sum(&den_terms)));
        }
        ChunkSpec::Patch(i) => {
            let (rgb_terms, dep_terms) = patch_chunk(&tape, ctx, &inputs.patches[*i], sharp);
            parts.push((TermId::Rgb, pairwise_sum(&rgb_terms)));
            parts.push((TermId::Reprojection, pairwise_sum(&dep_terms)));
        }
        ChunkSpec::Reg(r) => {
            let terms = reg_chunk(&tape, ctx, &inputs.reg_points[r.clone()]);
            parts.push((TermId::EikonalStatic, pairwise_sum(&terms.eik_static)));
            parts.push((TermId::EikonalDynamic, pairwise_sum(&terms.eik_dynamic)));
            parts.push((TermId::HessianStatic, pairwise_sum(&terms.hess_static)));
            parts.push((TermId::HessianDynamic, pairwise_sum(&terms.hess_dynamic)));
            parts.push((TermId::HessianFlow, pairwise_sum(&terms.hess_flow)));
            parts.push((TermId::SparsityDynamic, pairwise_sum(&terms.sparsity)));
        }
        ChunkSpec::Sim(r) => {
            let sim = inputs.sim.unwrap();
            let sum =
                sim_flow_loss_sum(&tape, &ctx.ff.flow_back, &ctx.ff.flow_fwd, sim, r.clone());
            parts.push((TermId::Similarity, sum));
        }
    }
    // Weighted chunk root: sum of (lambda / n) * term_sum.
    let mut root: Option<Var<'_>> = None;
    for (term, sum) in parts {
        let Some(sum) = sum else { continue };
        sums[term as usize] = sum.val();
        let n = counts.counts[term as usize];
        let w = ctx.cfg.weights.weight(term);
        if n == 0 || w == 0.0 {
            continue;
        }
        let contrib = sum * (w / n as f64);
        root = Some(match root {
            None => contrib,
            Some(r) => r + contrib,
        });
    }
    let grads = match root {
        Some(r) => tape.backward_sparse(r, 1.0),
        None => Vec::new(),
    };
    ChunkResult { sums, grads }
}

/// Evaluate the full objective and its gradient with respect to every
/// parameter slot. Deterministic for a fixed input order regardless of the
/// rayon thread count.
pub fn total_loss(
    ctx: &LossCtx<'_>,
    inputs: &TotalLossInputs<'_>,
    n_params: usize,
) -> Result<(LossBreakdown, Vec<f64>), LossError> {
    let counts = TermCounts::of(inputs, ctx);
    let mut chunks: Vec<ChunkSpec> = Vec::new();
    for r in ranges(inputs.static_rays.len(), RAY_CHUNK) {
        chunks.push(ChunkSpec::StaticRays(r));
    }
    for r in ranges(inputs.dynamic_rays.len(), RAY_CHUNK) {
        chunks.push(ChunkSpec::DynamicRays(r));
    }
    for i in 0..inputs.patches.len() {
        chunks.push(ChunkSpec::Patch(i));
    }
    for r in ranges(inputs.reg_points.len(), REG_CHUNK) {
        chunks.push(ChunkSpec::Reg(r));
    }
    if inputs.sim.is_some() && ctx.cfg.weights.lambda_sim != 0.0 {
        for r in ranges(ctx.ff.spec.cell_count(), SIM_CHUNK) {
            chunks.push(ChunkSpec::Sim(r));
        }
    }

    let results: Vec<ChunkResult> = chunks
        .par_iter()
        .map(|c| eval_chunk(ctx, inputs, &counts, c))
        .collect();

    let mut grads = vec![0.0f64; n_params];
    let mut term_sums = vec![Vec::new(); TERM_COUNT];
    for r in &results {
        for t in 0..TERM_COUNT {
            if r.sums[t] != 0.0 {
                term_sums[t].push(r.sums[t]);
            }
        }
        for &(slot, g) in &r.grads {
            grads[slot as usize] += g;
        }
    }
    let mut means = [0.0f64; TERM_COUNT];
    let mut total = 0.0;
    for term in ALL_TERMS {
        let t = term as usize;
        let n = counts.counts[t];
        if n == 0 {
            continue;
        }
        means[t] = pairwise_sum_f64(&term_sums[t]) / n as f64;
        if !means[t].is_finite() {
            return Err(LossError::NonFinite { term: TERM_NAMES[t] });
        }
        total += ctx.cfg.weights.weight(term) * means[t];
    }
    if !total.is_finite() {
        return Err(LossError::NonFinite { term: "total" });
    }
    Ok((LossBreakdown { means, total }, grads))
}

/// Plain-valued LiDAR loss means (the op-level contract): the pooled squared
/// range residual mean and the density penalty mean.
pub fn lidar_loss(
    ctx: &LossCtx<'_>,
    static_rays: &[(i64, Ray)],
    dynamic_rays: &[(i64, Ray)],
    samples: usize,
) -> (f64, f64) {
    if static_rays.is_empty() && dynamic_rays.is_empty() {
        log::warn!("lidar_loss called with an empty batch");
        return (0.0, 0.0);
    }
    let sharp = ctx.sharpness_value();
    let (rs, _) = lidar_chunk::<f64>((), ctx, static_rays, samples, true, sharp);
    let (rd, den) = lidar_chunk::<f64>((), ctx, dynamic_rays, samples, false, sharp);
    let all: Vec<f64> = rs.iter().chain(rd.iter()).copied().collect();
    let n = static_rays.len() + dynamic_rays.len();
    let range_mean = pairwise_sum_f64(&all) / n as f64;
    let den_mean = if dynamic_rays.is_empty() {
        0.0
    } else {
        pairwise_sum_f64(&den) / dynamic_rays.len() as f64
    };
    (range_mean, den_mean)
}

/// Plain-valued photometric loss means: (rgb, reprojection).
pub fn photo_loss(ctx: &LossCtx<'_>, patches: &[PatchTask<'_>]) -> (f64, f64) {
    let sharp = ctx.sharpness_value();
    let mut rgb = Vec::new();
    let mut dep = Vec::new();
    for p in patches {
        let (r, d) = patch_chunk::<f64>((), ctx, p, sharp);
        rgb.extend(r);
        dep.extend(d);
    }
    if rgb.is_empty() {
        return (0.0, 0.0);
    }
    (
        pairwise_sum_f64(&rgb) / rgb.len() as f64,
        pairwise_sum_f64(&dep) / dep.len() as f64,
    )
}

/// Plain-valued regularization means in term order: eikonal static/dynamic,
/// hessian static/dynamic/flow, dynamic sparsity.
pub fn reg_loss(ctx: &LossCtx<'_>, points: &[Vector3<f64>]) -> [f64; 6] {
    let terms = reg_chunk::<f64>((), ctx, points);
    let n = points.len().max(1) as f64;
    let mean = |xs: &[f64]| pairwise_sum_f64(xs) / n;
    [
        mean(&terms.eik_static),
        mean(&terms.eik_dynamic),
        mean(&terms.hess_static),
        mean(&terms.hess_dynamic),
        mean(&terms.hess_flow),
        mean(&terms.sparsity),
    ]
}
