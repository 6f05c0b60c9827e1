//! Plane equations, axis-aligned slicing, slice padding and the Fourier
//! plane-position embedding.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::flowgen::VoxelField;
use crate::tensor::Tensor;

/// Normals within this distance of unit length are kept unscaled.
const UNIT_SNAP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The two remaining axes in increasing order (the slice's face axes).
    pub fn face(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::Parse(alloc::format!("unknown axis `{other}`"))),
        }
    }
}

/// Normalized plane `a x + b y + c z + d = 0` with `a² + b² + c² = 1`, the
/// first nonzero normal component positive and `|d| <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneSpec {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl PlaneSpec {
    pub fn coefficients(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    /// Plane `axis = position` in unit-cube coordinates.
    pub fn axis_aligned(axis: Axis, position: f64) -> Result<Self> {
        let mut n = [0.0; 3];
        n[axis.index()] = 1.0;
        normalize_plane(n[0], n[1], n[2], -position)
    }
}

/// Divides the coefficients by the normal's magnitude and fixes the sign so
/// that the first nonzero normal component is positive.
pub fn normalize_plane(a: f64, b: f64, c: f64, d: f64) -> Result<PlaneSpec> {
    if ![a, b, c, d].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPlane("non-finite coefficient".into()));
    }
    let norm = libm::sqrt(a * a + b * b + c * c);
    if norm == 0.0 {
        return Err(Error::InvalidPlane("zero normal vector".into()));
    }
    let first = [a, b, c].into_iter().find(|v| *v != 0.0).unwrap_or(1.0);
    let s = if first < 0.0 { -1.0 } else { 1.0 };
    let norm = if (norm - 1.0).abs() <= UNIT_SNAP { 1.0 } else { norm };
    // adding 0.0 turns -0.0 into +0.0
    let scale = |v: f64| s * (v / norm) + 0.0;
    let spec = PlaneSpec {
        a: scale(a),
        b: scale(b),
        c: scale(c),
        d: scale(d),
    };
    if spec.d.abs() > 1.0 {
        return Err(Error::PlaneOutsideCube(spec.d.abs()));
    }
    Ok(spec)
}

/// A 2D cut through a voxel field: samples are `[d1, d2, c]` over the two
/// face axes in increasing axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSlice {
    pub spec: PlaneSpec,
    pub samples: Tensor<f32>,
    pub axis_index: Option<(Axis, usize)>,
}

/// Unit-cube coordinate of voxel `index` on an axis with `extent` voxels.
pub fn normalized_position(index: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        index as f64 / (extent - 1) as f64
    }
}

fn check_index(index: usize, extent: usize) -> Result<()> {
    if index >= extent {
        return Err(Error::IndexOutOfRange { index, extent });
    }
    Ok(())
}

pub fn extract_axis_slice(field: &VoxelField, axis: Axis, index: usize) -> Result<PlaneSlice> {
    let ext = field.extents();
    let ch = field.channels();
    check_index(index, ext[axis.index()])?;
    let (f1, f2) = axis.face();
    let (d1, d2) = (ext[f1], ext[f2]);
    let mut data = Vec::with_capacity(d1 * d2 * ch);
    let mut pos = [0usize; 3];
    pos[axis.index()] = index;
    for i in 0..d1 {
        pos[f1] = i;
        for j in 0..d2 {
            pos[f2] = j;
            let base = field.offset(pos[0], pos[1], pos[2]);
            data.extend_from_slice(&field.data()[base..base + ch]);
        }
    }
    Ok(PlaneSlice {
        spec: PlaneSpec::axis_aligned(axis, normalized_position(index, ext[axis.index()]))?,
        samples: Tensor::new(vec![d1, d2, ch], data)?,
        axis_index: Some((axis, index)),
    })
}

fn check_face(slice: &PlaneSlice, extents: [usize; 3], channels: usize) -> Result<(Axis, usize)> {
    let (axis, index) = slice
        .axis_index
        .ok_or_else(|| Error::InvalidPlane("only axis-aligned slices can be placed".into()))?;
    check_index(index, extents[axis.index()])?;
    let (f1, f2) = axis.face();
    let want = [extents[f1], extents[f2], channels];
    if slice.samples.shape() != want {
        return Err(Error::shape("slice face", slice.samples.shape(), &want));
    }
    Ok((axis, index))
}

/// Writes an axis-aligned slice back into `field` at its voxel plane.
pub fn scatter_slice(field: &mut VoxelField, slice: &PlaneSlice) -> Result<()> {
    let ext = field.extents();
    let ch = field.channels();
    let (axis, index) = check_face(slice, ext, ch)?;
    let (f1, f2) = axis.face();
    let mut pos = [0usize; 3];
    pos[axis.index()] = index;
    let src = slice.samples.data();
    for i in 0..ext[f1] {
        pos[f1] = i;
        for j in 0..ext[f2] {
            pos[f2] = j;
            let base = field.offset(pos[0], pos[1], pos[2]);
            let s = (i * ext[f2] + j) * ch;
            field.data_mut()[base..base + ch].copy_from_slice(&src[s..s + ch]);
        }
    }
    Ok(())
}

/// Places slices into a zero `[dx, dy, dz, c (+1)]` volume. With `mask`,
/// the extra trailing channel is 1 on every voxel covered by some slice.
/// Later slices overwrite earlier ones where they intersect.
pub fn pad_slices_to_volume(
    slices: &[PlaneSlice],
    extents: [usize; 3],
    channels: usize,
    mask: bool,
) -> Result<Tensor<f32>> {
    let out_ch = channels + usize::from(mask);
    let [dx, dy, dz] = extents;
    let mut vol = Tensor::zeros(&[dx, dy, dz, out_ch]);
    for slice in slices {
        let (axis, index) = check_face(slice, extents, channels)?;
        let (f1, f2) = axis.face();
        let mut pos = [0usize; 3];
        pos[axis.index()] = index;
        let src = slice.samples.data();
        let data = vol.data_mut();
        for i in 0..extents[f1] {
            pos[f1] = i;
            for j in 0..extents[f2] {
                pos[f2] = j;
                let base = ((pos[0] * dy + pos[1]) * dz + pos[2]) * out_ch;
                let s = (i * extents[f2] + j) * channels;
                data[base..base + channels].copy_from_slice(&src[s..s + channels]);
                if mask {
                    data[base + channels] = 1.0;
                }
            }
        }
    }
    Ok(vol)
}

/// Fourier features of one plane coefficient: element `2i` is
/// `sin(v / 10000^(2i/d - 1))`, element `2i+1` the matching cosine.
pub fn fourier_pe(v: f64, d_pe: usize) -> Result<Vec<f64>> {
    if d_pe < 2 || d_pe % 2 != 0 {
        return Err(Error::config(alloc::format!(
            "plane embedding width must be even and >= 2, got {d_pe}"
        )));
    }
    let mut out = Vec::with_capacity(d_pe);
    for i in 0..d_pe / 2 {
        let exponent = (2 * i) as f64 / d_pe as f64 - 1.0;
        let arg = v / libm::pow(10_000.0, exponent);
        out.push(libm::sin(arg));
        out.push(libm::cos(arg));
    }
    Ok(out)
}

/// `[PE(a), PE(b), PE(c), PE(d)]` for one plane.
pub fn plane_embedding(spec: &PlaneSpec, d_pe: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(4 * d_pe);
    for v in spec.coefficients() {
        out.extend(fourier_pe(v, d_pe)?);
    }
    Ok(out)
}

/// Concatenated plane embeddings, zero-padded to `max_planes` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePositionEmbedding {
    pub values: Vec<f64>,
    pub planes: usize,
}

impl PlanePositionEmbedding {
    pub fn block_width(d_pe: usize) -> usize {
        4 * d_pe
    }
}

pub fn build_plane_embedding(
    planes: &[PlaneSpec],
    d_pe: usize,
    max_planes: usize,
) -> Result<PlanePositionEmbedding> {
    if planes.len() > max_planes {
        return Err(Error::TooManyPlanes {
            given: planes.len(),
            max: max_planes,
        });
    }
    let mut values = Vec::with_capacity(max_planes * 4 * d_pe);
    for p in planes {
        values.extend(plane_embedding(p, d_pe)?);
    }
    values.resize(max_planes * 4 * d_pe, 0.0);
    Ok(PlanePositionEmbedding {
        values,
        planes: planes.len(),
    })
}
