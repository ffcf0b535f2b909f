//! Dense voxel grids with trilinear sampling.
//!
//! Values live at cell centers. Storage order is x-fastest: index
//! `i + dims[0] * (j + dims[1] * k)`. Sampling outside the volume clamps to
//! the boundary cells, so the continuous field is defined everywhere and
//! constant beyond the representation boundary.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::adjoint::{Real, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("resolution must be positive, got {0}")]
    BadResolution(f64),
    #[error("axis {axis} has {cells} cells; at least 2 are required")]
    TooFewCells { axis: usize, cells: usize },
    #[error("value count {got} does not match grid cell count {want}")]
    BadValueCount { got: usize, want: usize },
    #[error("non-finite value at cell {0}")]
    NonFinite(usize),
    #[error("grid file: {0}")]
    Io(#[from] std::io::Error),
    #[error("grid file header: {0}")]
    Header(String),
}

/// Axis-aligned voxel lattice: placement, size, and resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Minimum corner of the volume (m).
    pub origin: Vector3<f64>,
    /// Edge lengths of the volume (m).
    pub extent: Vector3<f64>,
    /// Cell edge length (m).
    pub resolution: f64,
    /// Cells per axis.
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: Vector3<f64>, extent: Vector3<f64>, resolution: f64) -> Result<Self, GridError> {
        if !(resolution > 0.0) {
            return Err(GridError::BadResolution(resolution));
        }
        let mut dims = [0usize; 3];
        for axis in 0..3 {
            let cells = (extent[axis] / resolution).round() as isize;
            if cells < 2 {
                return Err(GridError::TooFewCells { axis, cells: cells.max(0) as usize });
            }
            dims[axis] = cells as usize;
        }
        Ok(GridSpec { origin, extent, resolution, dims })
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// World position of the center of cell (i, j, k).
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (i as f64 + 0.5) * self.resolution,
                (j as f64 + 0.5) * self.resolution,
                (k as f64 + 0.5) * self.resolution,
            )
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin + self.extent
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| x[a] >= self.origin[a] && x[a] <= hi[a])
    }

    /// Cell whose center is nearest to `x`, clamped into the grid.
    pub fn nearest_cell(&self, x: &Vector3<f64>) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let u = (x[a] - self.origin[a]) / self.resolution - 0.5;
            out[a] = u.round().clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        out
    }
}

/// Dense scalar field over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid3 {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarGrid3 {
    pub fn constant(spec: GridSpec, value: f64) -> Self {
        ScalarGrid3 { spec, values: vec![value; spec.cell_count()] }
    }

    pub fn from_values(spec: GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != spec.cell_count() {
            return Err(GridError::BadValueCount { got: values.len(), want: spec.cell_count() });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(bad));
        }
        Ok(ScalarGrid3 { spec, values })
    }

    /// Fill from a function of the cell-center position.
    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(Vector3<f64>) -> f64) -> Self {
        let mut values = vec![0.0; spec.cell_count()];
        for k in 0..spec.dims[2] {
            for j in 0..spec.dims[1] {
                for i in 0..spec.dims[0] {
                    values[spec.index(i, j, k)] = f(spec.cell_center(i, j, k));
                }
            }
        }
        ScalarGrid3 { spec, values }
    }

    pub fn view(&self) -> GridView<'_> {
        GridView { values: &self.values, base_slot: None }
    }

    pub fn sample(&self, x: &Vector3<f64>) -> f64 {
        sample_at((), self.view(), &self.spec, x)
    }
}

/// Dense 3-vector field over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorGrid3 {
    pub spec: GridSpec,
    pub values: Vec<Vector3<f64>>,
}

impl VectorGrid3 {
    pub fn constant(spec: GridSpec, value: Vector3<f64>) -> Self {
        VectorGrid3 { spec, values: vec![value; spec.cell_count()] }
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self::constant(spec, Vector3::zeros())
    }

    pub fn from_values(spec: GridSpec, values: Vec<Vector3<f64>>) -> Result<Self, GridError> {
        if values.len() != spec.cell_count() {
            return Err(GridError::BadValueCount { got: values.len(), want: spec.cell_count() });
        }
        if let Some(bad) = values.iter().position(|v| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite())) {
            return Err(GridError::NonFinite(bad));
        }
        Ok(VectorGrid3 { spec, values })
    }

    pub fn sample(&self, x: &Vector3<f64>) -> Vector3<f64> {
        // Per-channel trilinear interpolation with the scalar rule.
        let mut out = Vector3::zeros();
        for ch in 0..3 {
            let channel: Vec<f64> = self.values.iter().map(|v| v[ch]).collect();
            let view = GridView { values: &channel, base_slot: None };
            out[ch] = sample_at((), view, &self.spec, x);
        }
        out
    }
}

/// Borrowed slice of cell values, optionally bound to parameter slots.
///
/// `base_slot = Some(b)` means cell `idx` is parameter `b + idx`; fetching it
/// in taped mode creates a bound leaf. `None` makes taped fetches constants
/// (gradient-stopped fields, frozen oracle grids).
#[derive(Clone, Copy)]
pub struct GridView<'a> {
    pub values: &'a [f64],
    pub base_slot: Option<u32>,
}

/// Scalar that can fetch grid cells, plain or taped.
pub trait FieldScalar: Real {
    type Cx: Copy;
    fn fetch(cx: Self::Cx, view: GridView<'_>, idx: usize) -> Self;
    fn lift(cx: Self::Cx, value: f64) -> Self;
}

impl FieldScalar for f64 {
    type Cx = ();
    #[inline]
    fn fetch(_cx: (), view: GridView<'_>, idx: usize) -> f64 {
        view.values[idx]
    }
    #[inline]
    fn lift(_cx: (), value: f64) -> f64 {
        value
    }
}

impl<'t> FieldScalar for Var<'t> {
    type Cx = &'t Tape;
    fn fetch(cx: &'t Tape, view: GridView<'_>, idx: usize) -> Var<'t> {
        match view.base_slot {
            Some(base) => cx.leaf(view.values[idx], base + idx as u32),
            None => cx.constant(view.values[idx]),
        }
    }
    fn lift(cx: &'t Tape, value: f64) -> Var<'t> {
        cx.constant(value)
    }
}

/// Continuous grid coordinate along one axis: cell-center units, clamped.
#[inline]
fn axis_coord(spec: &GridSpec, axis: usize, x: f64) -> (usize, f64) {
    let u = ((x - spec.origin[axis]) / spec.resolution - 0.5)
        .clamp(0.0, (spec.dims[axis] - 1) as f64);
    let i0 = (u.floor() as usize).min(spec.dims[axis] - 2);
    (i0, u - i0 as f64)
}

/// Trilinear sample at a position that carries no gradient.
pub fn sample_at<S: FieldScalar>(cx: S::Cx, view: GridView<'_>, spec: &GridSpec, x: &Vector3<f64>) -> S {
    let (i0, tx) = axis_coord(spec, 0, x.x);
    let (j0, ty) = axis_coord(spec, 1, x.y);
    let (k0, tz) = axis_coord(spec, 2, x.z);
    let c = |i, j, k| S::fetch(cx, view, spec.index(i, j, k));
    let lerp = |a: S, b: S, t: f64| S::lerp_weighted(a, b, t);
    let x00 = lerp(c(i0, j0, k0), c(i0 + 1, j0, k0), tx);
    let x10 = lerp(c(i0, j0 + 1, k0), c(i0 + 1, j0 + 1, k0), tx);
    let x01 = lerp(c(i0, j0, k0 + 1), c(i0 + 1, j0, k0 + 1), tx);
    let x11 = lerp(c(i0, j0 + 1, k0 + 1), c(i0 + 1, j0 + 1, k0 + 1), tx);
    let y0 = lerp(x00, x10, ty);
    let y1 = lerp(x01, x11, ty);
    lerp(y0, y1, tz)
}

/// Trilinear sample at a position that itself carries gradients
/// (flow-warped lookups). Piecewise trilinear in the position; the clamp
/// zeroes positional gradients outside the volume.
pub fn sample_at_var<S: FieldScalar>(cx: S::Cx, view: GridView<'_>, spec: &GridSpec, pos: [S; 3]) -> S {
    let mut base = [0usize; 3];
    let mut frac = [pos[0]; 3];
    for a in 0..3 {
        let u = (pos[a] - spec.origin[a]) * (1.0 / spec.resolution) - 0.5;
        let u = u.clamp_const(0.0, (spec.dims[a] - 1) as f64);
        let i0 = (u.val().floor() as usize).min(spec.dims[a] - 2);
        base[a] = i0;
        frac[a] = u - i0 as f64;
    }
    let [i0, j0, k0] = base;
    let [tx, ty, tz] = frac;
    let c = |i, j, k| S::fetch(cx, view, spec.index(i, j, k));
    let lerp = |a: S, b: S, t: S| a + (b - a) * t;
    let x00 = lerp(c(i0, j0, k0), c(i0 + 1, j0, k0), tx);
    let x10 = lerp(c(i0, j0 + 1, k0), c(i0 + 1, j0 + 1, k0), tx);
    let x01 = lerp(c(i0, j0, k0 + 1), c(i0 + 1, j0, k0 + 1), tx);
    let x11 = lerp(c(i0, j0 + 1, k0 + 1), c(i0 + 1, j0 + 1, k0 + 1), tx);
    let y0 = lerp(x00, x10, ty);
    let y1 = lerp(x01, x11, ty);
    lerp(y0, y1, tz)
}

/// Convenience alias matching the operation name used throughout.
pub fn sample_trilinear(grid: &ScalarGrid3, x: &Vector3<f64>) -> f64 {
    grid.sample(x)
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    origin: [f64; 3],
    extent: [f64; 3],
    resolution: f64,
    dims: [usize; 3],
    dtype: String,
    channels: usize,
    count: usize,
}

/// Write a `.grid` snapshot: one JSON header line, then a raw little-endian
/// payload. Scalar grids store f32 per cell; `save_grid_f64` keeps full
/// precision for optimizer state.
pub fn save_grid(path: &Path, grid: &ScalarGrid3) -> Result<(), GridError> {
    save_channels(path, &grid.spec, &[&grid.values], "f32")
}

pub fn save_grid_f64(path: &Path, grid: &ScalarGrid3) -> Result<(), GridError> {
    save_channels(path, &grid.spec, &[&grid.values], "f64")
}

pub fn save_vector_grid(path: &Path, grid: &VectorGrid3) -> Result<(), GridError> {
    let chans: Vec<Vec<f64>> = (0..3)
        .map(|ch| grid.values.iter().map(|v| v[ch]).collect())
        .collect();
    let refs: Vec<&Vec<f64>> = chans.iter().collect();
    save_channels(path, &grid.spec, &refs, "f32")
}

fn save_channels(
    path: &Path,
    spec: &GridSpec,
    channels: &[&Vec<f64>],
    dtype: &str,
) -> Result<(), GridError> {
    let header = GridHeader {
        origin: [spec.origin.x, spec.origin.y, spec.origin.z],
        extent: [spec.extent.x, spec.extent.y, spec.extent.z],
        resolution: spec.resolution,
        dims: spec.dims,
        dtype: dtype.to_string(),
        channels: channels.len(),
        count: spec.cell_count(),
    };
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)
        .map_err(|e| GridError::Header(e.to_string()))?;
    file.write_all(b"\n")?;
    for chan in channels {
        let mut buf = Vec::with_capacity(chan.len() * 8);
        for &v in chan.iter() {
            match dtype {
                "f32" => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
        file.write_all(&buf)?;
    }
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<ScalarGrid3, GridError> {
    let (spec, mut chans) = load_channels(path, 1)?;
    ScalarGrid3::from_values(spec, chans.pop().unwrap())
}

pub fn load_vector_grid(path: &Path) -> Result<VectorGrid3, GridError> {
    let (spec, chans) = load_channels(path, 3)?;
    let values = (0..spec.cell_count())
        .map(|i| Vector3::new(chans[0][i], chans[1][i], chans[2][i]))
        .collect();
    VectorGrid3::from_values(spec, values)
}

fn load_channels(path: &Path, want_channels: usize) -> Result<(GridSpec, Vec<Vec<f64>>), GridError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| GridError::Header("missing header line".into()))?;
    let header: GridHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| GridError::Header(e.to_string()))?;
    if header.channels != want_channels {
        return Err(GridError::Header(format!(
            "expected {want_channels} channels, file has {}",
            header.channels
        )));
    }
    let spec = GridSpec::new(
        Vector3::from(header.origin),
        Vector3::from(header.extent),
        header.resolution,
    )?;
    if spec.dims != header.dims || spec.cell_count() != header.count {
        return Err(GridError::Header("dims/count inconsistent with spec".into()));
    }
    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(GridError::Header(format!("unknown dtype {other}"))),
    };
    let payload = &bytes[newline + 1..];
    let want_bytes = elem * header.count * header.channels;
    if payload.len() != want_bytes {
        return Err(GridError::Header(format!(
            "payload is {} bytes, expected {want_bytes}",
            payload.len()
        )));
    }
    let mut chans = Vec::with_capacity(header.channels);
    for ch in 0..header.channels {
        let start = ch * elem * header.count;
        let vals: Vec<f64> = (0..header.count)
            .map(|i| {
                let off = start + i * elem;
                if elem == 4 {
                    f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(payload[off..off + 8].try_into().unwrap())
                }
            })
            .collect();
        chans.push(vals);
    }
    Ok((spec, chans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec_2x2x2() -> GridSpec {
        GridSpec::new(Vector3::zeros(), Vector3::new(2.0, 2.0, 2.0), 1.0).unwrap()
    }

    #[test]
    fn spec_rejects_degenerate_inputs() {
        assert!(GridSpec::new(Vector3::zeros(), Vector3::new(2.0, 2.0, 2.0), 0.0).is_err());
        assert!(GridSpec::new(Vector3::zeros(), Vector3::new(2.0, 1.0, 2.0), 1.0).is_err());
    }

    #[test]
    fn constant_field_samples_constant() {
        let g = ScalarGrid3::constant(spec_2x2x2(), 2.0);
        for x in [
            Vector3::new(0.3, 1.1, 0.9),
            Vector3::new(-5.0, 0.0, 10.0), // outside: clamped
            Vector3::new(1.0, 1.0, 1.0),
        ] {
            assert_eq!(g.sample(&x), 2.0);
        }
    }

    #[test]
    fn cell_center_returns_stored_value() {
        let spec = GridSpec::new(Vector3::new(-1.0, 0.0, 2.0), Vector3::new(3.0, 1.5, 1.0), 0.5).unwrap();
        let g = ScalarGrid3::from_fn(spec, |p| p.x * 7.0 + p.y - p.z);
        let c = spec.cell_center(3, 1, 0);
        assert_relative_eq!(g.sample(&c), c.x * 7.0 + c.y - c.z, max_relative = 1e-12);
    }

    #[test]
    fn midpoint_of_opposing_faces_is_half() {
        // 2x2x2 grid, 0 on the low-x face, 1 on the high-x face.
        let spec = spec_2x2x2();
        let mut g = ScalarGrid3::constant(spec, 0.0);
        for j in 0..2 {
            for k in 0..2 {
                g.values[spec.index(1, j, k)] = 1.0;
            }
        }
        let mid = spec.origin + spec.extent * 0.5;
        assert_relative_eq!(g.sample(&mid), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn taped_sample_matches_plain_and_finite_differences() {
        let spec = GridSpec::new(Vector3::zeros(), Vector3::new(3.0, 3.0, 3.0), 1.0).unwrap();
        let mut g = ScalarGrid3::constant(spec, 0.0);
        let mut acc = 0.37f64;
        for v in g.values.iter_mut() {
            acc = (acc * 997.0 + 0.123).fract();
            *v = acc * 4.0 - 2.0;
        }
        let xs = [
            Vector3::new(0.7, 1.3, 2.2),
            Vector3::new(2.9, 0.1, 1.5),
            Vector3::new(-1.0, 4.0, 1.0), // clamped region
        ];
        for x in xs {
            let plain = g.sample(&x);
            let tape = Tape::new();
            let view = GridView { values: &g.values, base_slot: Some(0) };
            let out: Var = sample_at(&tape, view, &spec, &x);
            assert_eq!(out.val(), plain);
            let mut dense = vec![0.0; g.values.len()];
            for (slot, grad) in tape.backward_sparse(out, 1.0) {
                dense[slot as usize] += grad;
            }
            // Central finite differences over grid values.
            let h = 1e-4;
            for slot in 0..g.values.len() {
                let mut gp = g.clone();
                gp.values[slot] += h;
                let mut gm = g.clone();
                gm.values[slot] -= h;
                let fd = (gp.sample(&x) - gm.sample(&x)) / (2.0 * h);
                let denom = fd.abs().max(dense[slot].abs()).max(1e-9);
                assert!((dense[slot] - fd).abs() / denom < 1e-4, "slot {slot}: {} vs {fd}", dense[slot]);
            }
        }
    }

    #[test]
    fn variable_position_sample_differentiates_position() {
        let spec = GridSpec::new(Vector3::zeros(), Vector3::new(3.0, 3.0, 3.0), 1.0).unwrap();
        let g = ScalarGrid3::from_fn(spec, |p| p.x * 2.0 - p.y + 0.5 * p.z);
        let x = [1.3, 1.6, 1.2];
        let tape = Tape::new();
        let pos: Vec<Var> = x.iter().enumerate().map(|(i, &v)| tape.leaf(v, i as u32)).collect();
        let out = sample_at_var(&tape, g.view(), &spec, [pos[0], pos[1], pos[2]]);
        let mut grad = vec![0.0; 3];
        for (slot, gv) in tape.backward_sparse(out, 1.0) {
            grad[slot as usize] += gv;
        }
        // The stored field is globally affine, so interpolation reproduces it
        // and the positional gradient is the affine coefficient vector.
        assert_relative_eq!(grad[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(grad[1], -1.0, epsilon = 1e-12);
        assert_relative_eq!(grad[2], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn grid_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::new(Vector3::new(-1.0, -1.0, 0.0), Vector3::new(2.0, 2.0, 1.0), 0.5).unwrap();
        let g = ScalarGrid3::from_fn(spec, |p| (p.x + p.y * 2.0 + p.z).sin());
        let path = dir.path().join("field.grid");
        save_grid(&path, &g).unwrap();
        let back = load_grid(&path).unwrap();
        assert_eq!(back.spec, g.spec);
        for (a, b) in back.values.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-6); // f32 payload
        }
        let vg = VectorGrid3::constant(spec, Vector3::new(0.25, -0.5, 1.0));
        let vpath = dir.path().join("flow.grid");
        save_vector_grid(&vpath, &vg).unwrap();
        let vback = load_vector_grid(&vpath).unwrap();
        assert_eq!(vback.values[3], Vector3::new(0.25, -0.5, 1.0));
    }

    proptest! {
        /// Trilinear sampling is exact for globally trilinear functions on
        /// the grid interior.
        #[test]
        fn exact_on_trilinear_functions(
            c in proptest::array::uniform8(-2.0f64..2.0),
            px in 0.51f64..2.49, py in 0.51f64..2.49, pz in 0.51f64..2.49,
        ) {
            let f = |p: Vector3<f64>| {
                c[0] + c[1]*p.x + c[2]*p.y + c[3]*p.z
                    + c[4]*p.x*p.y + c[5]*p.x*p.z + c[6]*p.y*p.z + c[7]*p.x*p.y*p.z
            };
            let spec = GridSpec::new(Vector3::zeros(), Vector3::new(3.0, 3.0, 3.0), 1.0).unwrap();
            let g = ScalarGrid3::from_fn(spec, f);
            let x = Vector3::new(px, py, pz);
            let err = (g.sample(&x) - f(x)).abs();
            prop_assert!(err < 1e-9, "err {err}");
        }
    }
}
