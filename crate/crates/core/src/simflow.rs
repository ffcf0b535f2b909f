//! Similarity-flow self-supervision.
//!
//! Dynamic BEV feature vectors are the per-column dynamic occupancies (one
//! entry per z level), built from a gradient-stopped snapshot of the dynamic
//! field. Matching each cell against its NxN neighborhood in the adjacent
//! frame by cosine similarity yields integer displacements, which scale by
//! the cell size into metric pseudo-labels, broadcast along z. A
//! forward/backward consistency weight decays the loss where the two label
//! directions fail to cancel.

use nalgebra::Vector3;

use crate::adjoint::pairwise_sum;
use crate::field::occupancy;
use crate::grid::{sample_at, FieldScalar, GridSpec, GridView, VectorGrid3};
use crate::temporal::{align_point, FrameFields};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimFlowParams {
    /// Odd search window edge length in cells.
    pub window: usize,
    /// Consistency decay rate.
    pub decay: f64,
    /// BEV cell size (m); normally the grid resolution.
    pub cell_size: f64,
}

impl SimFlowParams {
    pub fn new(window: usize, decay: f64, cell_size: f64) -> Self {
        assert!(window >= 3 && window % 2 == 1, "window must be odd and >= 3");
        assert!(decay > 0.0);
        SimFlowParams { window, decay, cell_size }
    }
}

impl Default for SimFlowParams {
    fn default() -> Self {
        SimFlowParams { window: 35, decay: 0.75, cell_size: 0.2 }
    }
}

/// Per-cell feature vectors over a BEV lattice; `data[(j*nx+i)*c ..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn feature(&self, i: usize, j: usize) -> &[f64] {
        let base = (j * self.nx + i) * self.channels;
        &self.data[base..base + self.channels]
    }
}

/// Occupancy-column features of a dynamic SDF grid. Gradient-stopped by
/// construction (plain values in, plain values out).
pub fn build_features(values: &[f64], spec: &GridSpec, sharpness: f64) -> FeatureMap {
    let [nx, ny, nz] = spec.dims;
    let mut data = vec![0.0; nx * ny * nz];
    for j in 0..ny {
        for i in 0..nx {
            let base = (j * nx + i) * nz;
            for k in 0..nz {
                data[base + k] = occupancy(values[spec.index(i, j, k)], sharpness);
            }
        }
    }
    FeatureMap { nx, ny, channels: nz, data }
}

/// Occupancy-column features of a neighbor frame, resampled at the center
/// frame's cell centers after ego alignment.
pub fn build_features_aligned(
    ff: &FrameFields<'_>,
    frame: usize,
    sharpness: f64,
) -> FeatureMap {
    let spec = &ff.spec;
    let [nx, ny, nz] = spec.dims;
    let mut data = vec![0.0; nx * ny * nz];
    let view = ff.frames[frame].dynamic_sdf;
    for j in 0..ny {
        for i in 0..nx {
            let base = (j * nx + i) * nz;
            for k in 0..nz {
                let x = spec.cell_center(i, j, k);
                let aligned = align_point(&x, &ff.poses[ff.center], &ff.poses[frame]);
                let v: f64 = sample_at((), view, spec, &aligned);
                data[base + k] = occupancy(v, sharpness);
            }
        }
    }
    FeatureMap { nx, ny, channels: nz, data }
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-cell displacement (cells) of the most cosine-similar neighbor in the
/// previous/next map within the search window.
///
/// Zero-norm query features yield (0, 0); zero-norm candidates are skipped.
/// Ties break toward the smallest |di| + |dj|, then window scan order.
pub fn similarity_argmax(
    curr: &FeatureMap,
    prev: &FeatureMap,
    params: &SimFlowParams,
) -> Vec<[i32; 2]> {
    assert_eq!((curr.nx, curr.ny, curr.channels), (prev.nx, prev.ny, prev.channels));
    let w = (params.window / 2) as i32;
    let mut out = vec![[0i32, 0i32]; curr.nx * curr.ny];
    for j in 0..curr.ny {
        for i in 0..curr.nx {
            let f = curr.feature(i, j);
            let nf = norm(f);
            if nf == 0.0 {
                continue;
            }
            let mut best: Option<(f64, i32, [i32; 2])> = None; // (cos, |di|+|dj|, disp)
            for dj in -w..=w {
                for di in -w..=w {
                    let (ci, cj) = (i as i32 + di, j as i32 + dj);
                    if ci < 0 || cj < 0 || ci >= prev.nx as i32 || cj >= prev.ny as i32 {
                        continue;
                    }
                    let g = prev.feature(ci as usize, cj as usize);
                    let ng = norm(g);
                    if ng == 0.0 {
                        continue;
                    }
                    let cos = dot(f, g) / (nf * ng);
                    let l1 = di.abs() + dj.abs();
                    let better = match best {
                        None => true,
                        Some((bc, bl1, _)) => cos > bc || (cos == bc && l1 < bl1),
                    };
                    if better {
                        best = Some((cos, l1, [di, dj]));
                    }
                }
            }
            if let Some((_, _, disp)) = best {
                out[j * curr.nx + i] = disp;
            }
        }
    }
    out
}

/// Metric pseudo-labels: displacement scaled by the cell size, z component
/// zero, broadcast along the z axis.
pub fn pseudo_labels(disp: &[[i32; 2]], spec: &GridSpec, cell_size: f64) -> VectorGrid3 {
    let [nx, ny, nz] = spec.dims;
    assert_eq!(disp.len(), nx * ny);
    let mut grid = VectorGrid3::zeros(*spec);
    for j in 0..ny {
        for i in 0..nx {
            let d = disp[j * nx + i];
            let v = Vector3::new(d[0] as f64 * cell_size, d[1] as f64 * cell_size, 0.0);
            for k in 0..nz {
                grid.values[spec.index(i, j, k)] = v;
            }
        }
    }
    grid
}

/// Forward/backward consistency weight, 1 when the labels cancel exactly.
pub fn consistency_weight(f_back: &Vector3<f64>, f_fwd: &Vector3<f64>, decay: f64) -> f64 {
    (-decay * (f_back + f_fwd).norm()).exp()
}

/// Pseudo-labels and per-cell weights frozen for some training iterations.
#[derive(Debug, Clone)]
pub struct SimLabels {
    pub back: VectorGrid3,
    pub fwd: VectorGrid3,
    /// Consistency weight per 3D cell.
    pub gamma: Vec<f64>,
    /// Gradient-stopped dynamic occupancy gate per 3D cell.
    pub gate: Vec<f64>,
}

/// Build labels, consistency weights, and the occupancy gate from the
/// current (plain-valued) fields.
pub fn make_sim_labels(ff: &FrameFields<'_>, params: &SimFlowParams, sharpness: f64) -> SimLabels {
    let spec = &ff.spec;
    let curr = build_features(ff.center_grids().dynamic_sdf.values, spec, sharpness);
    let (disp_back, disp_fwd) = if ff.has_neighbors() {
        let prev = build_features_aligned(ff, ff.center - 1, sharpness);
        let next = build_features_aligned(ff, ff.center + 1, sharpness);
        (
            similarity_argmax(&curr, &prev, params),
            similarity_argmax(&curr, &next, params),
        )
    } else {
        (vec![[0; 2]; spec.dims[0] * spec.dims[1]], vec![[0; 2]; spec.dims[0] * spec.dims[1]])
    };
    let back = pseudo_labels(&disp_back, spec, params.cell_size);
    let fwd = pseudo_labels(&disp_fwd, spec, params.cell_size);
    let gamma: Vec<f64> = (0..spec.cell_count())
        .map(|c| consistency_weight(&back.values[c], &fwd.values[c], params.decay))
        .collect();
    let gate: Vec<f64> = ff
        .center_grids()
        .dynamic_sdf
        .values
        .iter()
        .map(|&v| occupancy(v, sharpness))
        .collect();
    SimLabels { back, fwd, gamma, gate }
}

/// Gated, consistency-weighted L1 between predicted flows and pseudo-labels,
/// summed over `cells`. Gradients reach only the predicted flow grids; the
/// gate, weights, and labels are plain values.
pub fn sim_flow_loss_sum<S: FieldScalar>(
    cx: S::Cx,
    flow_back: &[GridView<'_>; 3],
    flow_fwd: &[GridView<'_>; 3],
    labels: &SimLabels,
    cells: std::ops::Range<usize>,
) -> Option<S> {
    let mut terms: Vec<S> = Vec::with_capacity(cells.len());
    for c in cells {
        let scale = labels.gate[c] * labels.gamma[c];
        let mut acc: Option<S> = None;
        for ch in 0..3 {
            let pb: S = S::fetch(cx, flow_back[ch], c);
            let pf: S = S::fetch(cx, flow_fwd[ch], c);
            let tb = (pb - labels.back.values[c][ch]).abs();
            let tf = (pf - labels.fwd.values[c][ch]).abs();
            let both = tb + tf;
            acc = Some(match acc {
                None => both,
                Some(a) => a + both,
            });
        }
        terms.push(acc.unwrap() * scale);
    }
    pairwise_sum(&terms)
}

/// Mean similarity-flow loss over all cells (the op-level contract).
pub fn sim_flow_loss<S: FieldScalar>(
    cx: S::Cx,
    flow_back: &[GridView<'_>; 3],
    flow_fwd: &[GridView<'_>; 3],
    labels: &SimLabels,
    spec: &GridSpec,
) -> S {
    let n = spec.cell_count();
    let sum = sim_flow_loss_sum::<S>(cx, flow_back, flow_fwd, labels, 0..n)
        .unwrap_or_else(|| S::lift(cx, 0.0));
    sum / n as f64
}
