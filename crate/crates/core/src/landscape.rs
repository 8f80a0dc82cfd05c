//! The whole-search-space similarity tensor, windowed sub-tensors and labels.
//!
//! Grid indices are zero-based throughout this crate: node `(i, j, k)` sits at
//! translation `(x.min + i Δx, y.min + j Δy, z.min + k Δz)`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sensed_to_reference, transform_points, CameraModel, PointSet2D, PoseParams};
use crate::similarity::{objective, KernelConfig, ObjectiveConfig};

pub type GridIndex = [usize; 3];

/// Window parameter `b`: sub-tensors are `(b + 1)³`.
pub const DEFAULT_WINDOW: usize = 8;
/// Label normalization: the span of admissible initializations, `S - (b + 1)`.
pub const LABEL_SCALE: f64 = 22.0;

const AXES: [char; 3] = ['x', 'y', 'z'];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
}

impl AxisRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Regular translation grid: `nodes_per_axis` nodes per axis, inclusive ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x: AxisRange,
    pub y: AxisRange,
    pub z: AxisRange,
    pub nodes_per_axis: usize,
}

/// Default search box: a quarter metre horizontally and 4/3 m vertically per
/// step, so the whole box stays inside the similarity peak of the true pose
/// at the default kernel width and the window sees its slope.
impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x: AxisRange::new(-3.75, 3.75),
            y: AxisRange::new(-20.0, 20.0),
            z: AxisRange::new(-3.75, 3.75),
            nodes_per_axis: 31,
        }
    }
}

impl GridSpec {
    /// Coarse box: 10 m horizontal and 5 m vertical steps.
    pub fn coarse() -> Self {
        Self {
            x: AxisRange::new(-150.0, 150.0),
            y: AxisRange::new(-75.0, 75.0),
            z: AxisRange::new(-150.0, 150.0),
            nodes_per_axis: 31,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_axis < 2 {
            return Err(Error::config("grid.nodes_per_axis", "must be >= 2"));
        }
        for (name, axis) in AXES.iter().zip(self.axes()) {
            if !(axis.min.is_finite() && axis.max.is_finite() && axis.max > axis.min) {
                return Err(Error::config(
                    format!("grid.{name}"),
                    "needs finite bounds with max > min",
                ));
            }
        }
        Ok(())
    }

    pub fn axes(&self) -> [AxisRange; 3] {
        [self.x, self.y, self.z]
    }

    /// Node spacing Δ per axis.
    pub fn spacing(&self) -> [f64; 3] {
        let n = (self.nodes_per_axis - 1) as f64;
        self.axes().map(|a| a.extent() / n)
    }

    pub fn node_value(&self, axis: usize, index: usize) -> f64 {
        let a = self.axes()[axis];
        let last = self.nodes_per_axis - 1;
        if index == last {
            a.max
        } else {
            a.min + index as f64 * self.spacing()[axis]
        }
    }

    /// Translation `(θx, θy, θz)` of a node.
    pub fn node_params(&self, node: GridIndex) -> [f64; 3] {
        [
            self.node_value(0, node[0]),
            self.node_value(1, node[1]),
            self.node_value(2, node[2]),
        ]
    }

    pub fn center_node(&self) -> GridIndex {
        let c = (self.nodes_per_axis - 1) / 2;
        [c, c, c]
    }

    pub fn len(&self) -> usize {
        self.nodes_per_axis.pow(3)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes_per_axis == 0
    }

    pub fn flat_index(&self, node: GridIndex) -> usize {
        let s = self.nodes_per_axis;
        (node[0] * s + node[1]) * s + node[2]
    }

    pub fn unflatten(&self, flat: usize) -> GridIndex {
        let s = self.nodes_per_axis;
        [flat / (s * s), (flat / s) % s, flat % s]
    }

    /// Half the extent per axis, the normalizer of the squared-norm regularizer.
    pub fn half_extents(&self) -> [f64; 3] {
        self.axes().map(|a| 0.5 * a.extent())
    }

    /// Centers whose `(b + 1)³` window fits inside the grid, in lexicographic order.
    pub fn admissible_centers(&self, b: usize) -> Vec<GridIndex> {
        let h = b / 2;
        let s = self.nodes_per_axis;
        if s < b + 1 {
            return Vec::new();
        }
        let range = h..s - h;
        let mut out = Vec::with_capacity(range.len().pow(3));
        for i in range.clone() {
            for j in range.clone() {
                for k in range.clone() {
                    out.push([i, j, k]);
                }
            }
        }
        out
    }

    pub fn check_admissible(&self, center: GridIndex, b: usize) -> Result<()> {
        let h = b / 2;
        for (axis, &c) in center.iter().enumerate() {
            if c < h || c + h >= self.nodes_per_axis {
                return Err(Error::Boundary {
                    axis: AXES[axis],
                    center,
                });
            }
        }
        Ok(())
    }
}

/// Where a tensor came from. Informational; not serialized into tensor files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_id: String,
    pub angles: [f64; 3],
    pub kernel: Option<KernelConfig>,
    pub objective: Option<ObjectiveConfig>,
}

/// Scores at every node of the translation grid, `i` outermost, `k` innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    grid: GridSpec,
    values: Vec<f64>,
    pub provenance: Provenance,
}

impl SimilarityTensor {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "tensor holds {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        if let Some(flat) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Node {
                node: grid.unflatten(flat),
                source: Box::new(Error::Shape("non-finite tensor value".into())),
            });
        }
        Ok(Self {
            grid,
            values,
            provenance: Provenance::default(),
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, node: GridIndex) -> f64 {
        self.values[self.grid.flat_index(node)]
    }

    pub fn size(&self) -> usize {
        self.grid.nodes_per_axis
    }

    /// Writes the little-endian `IRNT` tensor file; values are stored as f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        w.write_all(&(self.grid.nodes_per_axis as u32).to_le_bytes())?;
        for a in self.grid.axes() {
            w.write_all(&a.min.to_le_bytes())?;
            w.write_all(&a.max.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "tensor magic")?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad tensor magic {magic:?}")));
        }
        let version = read_u32(&mut r, "tensor version")?;
        if version != TENSOR_VERSION {
            return Err(Error::Format(format!("unsupported tensor version {version}")));
        }
        let s = read_u32(&mut r, "tensor size")? as usize;
        let mut bounds = [0f64; 6];
        for b in &mut bounds {
            *b = read_f64(&mut r, "tensor bounds")?;
        }
        let grid = GridSpec {
            x: AxisRange::new(bounds[0], bounds[1]),
            y: AxisRange::new(bounds[2], bounds[3]),
            z: AxisRange::new(bounds[4], bounds[5]),
            nodes_per_axis: s,
        };
        grid.validate().map_err(|e| Error::Format(e.to_string()))?;
        let n = s
            .checked_pow(3)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw, "tensor values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after tensor values".into()));
        }
        Self::new(grid, values).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) const TENSOR_MAGIC: &[u8; 4] = b"IRNT";
pub(crate) const TENSOR_VERSION: u32 = 1;

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

/// A `(b + 1)³` window cut out of a [`SimilarityTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubTensor {
    pub values: Vec<f64>,
    pub center_index: GridIndex,
    pub window: usize,
}

impl SubTensor {
    pub fn edge(&self) -> usize {
        self.window + 1
    }
}

/// Exponent magnitude beyond which a kernel term is below 1e-304 and dropped.
const NEGLIGIBLE_EXPONENT: f64 = 700.0;

/// Evaluates the objective at every grid node with the angles held fixed.
///
/// Horizontal camera travel at fixed altitude and attitude shifts every
/// registered point by the same reference-pixel offset, so each altitude
/// slice reduces to a separable Gaussian sum over point pairs: one exp per
/// pair and node column instead of one per pair and node. Slices are
/// independent and evaluated in parallel.
#[allow(clippy::too_many_arguments)]
pub fn build_similarity_tensor(
    u: &PointSet2D,
    v: &PointSet2D,
    fixed_angles: [f64; 3],
    grid: &GridSpec,
    cam: &CameraModel,
    kcfg: &KernelConfig,
    ocfg: &ObjectiveConfig,
) -> Result<SimilarityTensor> {
    grid.validate()?;
    cam.validate()?;
    kcfg.validate()?;
    ocfg.validate()?;
    let s = grid.nodes_per_axis;
    let slices: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|j| altitude_slice(u, v, fixed_angles, grid, cam, kcfg, j))
        .collect::<Result<_>>()?;

    let norm = 1.0 / (u.len() * v.len()) as f64;
    let mut values = vec![0.0; grid.len()];
    for (j, slice) in slices.iter().enumerate() {
        for i in 0..s {
            for k in 0..s {
                let node = [i, j, k];
                let kc = slice[i * s + k] * norm;
                values[grid.flat_index(node)] = kc - ocfg.penalty(grid.node_params(node));
            }
        }
    }
    let mut tensor = SimilarityTensor::new(*grid, values)?;
    tensor.provenance = Provenance {
        scene_id: String::new(),
        angles: fixed_angles,
        kernel: Some(*kcfg),
        objective: Some(*ocfg),
    };
    Ok(tensor)
}

/// Unnormalized kernel sums for the altitude slice `j`, laid out `[i][k]`.
fn altitude_slice(
    u: &PointSet2D,
    v: &PointSet2D,
    angles: [f64; 3],
    grid: &GridSpec,
    cam: &CameraModel,
    kcfg: &KernelConfig,
    j: usize,
) -> Result<Vec<f64>> {
    let s = grid.nodes_per_axis;
    let base_pose = PoseParams::from_translation([0.0, grid.node_value(1, j), 0.0], angles);
    let at_node = |e: Error| Error::Node {
        node: [0, j, 0],
        source: Box::new(e),
    };
    let h = sensed_to_reference(&base_pose, cam).map_err(at_node)?;
    let registered = transform_points(u, &h).map_err(at_node)?;

    // North travel moves registered points up the image (-y), east travel
    // moves them right (+x).
    let gsd = cam.reference_gsd;
    let shift_y: Vec<f64> = (0..s).map(|i| -grid.node_value(0, i) / gsd).collect();
    let shift_x: Vec<f64> = (0..s).map(|k| grid.node_value(2, k) / gsd).collect();
    let (sy_lo, sy_hi) = bounds(&shift_y);
    let (sx_lo, sx_hi) = bounds(&shift_x);

    let c = kcfg.inv_four_sigma_sq();
    let mut acc = vec![0.0; s * s];
    let mut ex = vec![0.0; s];
    let mut ey = vec![0.0; s];
    for a in registered.points() {
        for b in v.points() {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            if nearest_sq(dx, sx_lo, sx_hi) * c > NEGLIGIBLE_EXPONENT
                || nearest_sq(dy, sy_lo, sy_hi) * c > NEGLIGIBLE_EXPONENT
            {
                continue;
            }
            for (e, sx) in ex.iter_mut().zip(&shift_x) {
                let d = dx + sx;
                *e = (-d * d * c).exp();
            }
            for (e, sy) in ey.iter_mut().zip(&shift_y) {
                let d = dy + sy;
                *e = (-d * d * c).exp();
            }
            for (row, &wy) in acc.chunks_exact_mut(s).zip(&ey) {
                for (cell, &wx) in row.iter_mut().zip(&ex) {
                    *cell += wy * wx;
                }
            }
        }
    }
    Ok(acc)
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Smallest `(d + s)²` over shifts `s` in `[lo, hi]`.
fn nearest_sq(d: f64, lo: f64, hi: f64) -> f64 {
    let m = if d + lo > 0.0 {
        d + lo
    } else if d + hi < 0.0 {
        d + hi
    } else {
        0.0
    };
    m * m
}

/// The objective at one grid node, evaluated directly. Reference path for
/// [`build_similarity_tensor`].
#[allow(clippy::too_many_arguments)]
pub fn evaluate_node(
    u: &PointSet2D,
    v: &PointSet2D,
    fixed_angles: [f64; 3],
    grid: &GridSpec,
    node: GridIndex,
    cam: &CameraModel,
    kcfg: &KernelConfig,
    ocfg: &ObjectiveConfig,
) -> Result<f64> {
    let pose = PoseParams::from_translation(grid.node_params(node), fixed_angles);
    objective(u, v, &pose, cam, kcfg, ocfg).map_err(|e| Error::Node {
        node,
        source: Box::new(e),
    })
}

/// Lexicographically smallest node attaining the global maximum.
pub fn argmax_tensor(t: &SimilarityTensor) -> GridIndex {
    let mut best = 0;
    for (flat, &v) in t.values.iter().enumerate() {
        if v > t.values[best] {
            best = flat;
        }
    }
    t.grid.unflatten(best)
}

pub fn extract_subtensor(t: &SimilarityTensor, center: GridIndex, b: usize) -> Result<SubTensor> {
    if b % 2 != 0 {
        return Err(Error::config("window", "b must be even"));
    }
    t.grid.check_admissible(center, b)?;
    let h = b / 2;
    let edge = b + 1;
    let mut values = Vec::with_capacity(edge.pow(3));
    for i in center[0] - h..=center[0] + h {
        for j in center[1] - h..=center[1] + h {
            let start = t.grid.flat_index([i, j, center[2] - h]);
            values.extend_from_slice(&t.values[start..start + edge]);
        }
    }
    Ok(SubTensor {
        values,
        center_index: center,
        window: b,
    })
}

/// Normalized grid-step offset from `center` to `optimum`. Not clipped.
pub fn make_label(center: GridIndex, optimum: GridIndex, scale: f64) -> [f64; 3] {
    std::array::from_fn(|a| (optimum[a] as i64 - center[a] as i64) as f64 / scale)
}

/// Metric offset `(Δθx, Δθy, Δθz)` of a normalized prediction.
pub fn denormalize_offset(prediction: [f64; 3], scale: f64, grid: &GridSpec) -> [f64; 3] {
    let d = grid.spacing();
    std::array::from_fn(|a| prediction[a] * scale * d[a])
}

/// Grid-step offset recovered from a normalized label.
pub fn label_steps(label: [f64; 3], scale: f64) -> [i64; 3] {
    label.map(|l| (l * scale).round() as i64)
}
