//! Analytic solenoidal flow generators, voxel fields and datasets.
//!
//! All generators sample the periodic unit cube at `x_i = i / d`.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest accepted grid extent.
pub const MIN_EXTENT: usize = 4;
/// Velocity components u, v, w.
pub const VELOCITY_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldMeta {
    pub generator: String,
    pub params: Vec<(String, f64)>,
    pub time_index: u64,
    pub source: Option<String>,
}

impl FieldMeta {
    pub fn param(&self, key: &str) -> Option<f64> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

/// `d_x × d_y × d_z × c` float32 field, x slowest and channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    extents: [usize; 3],
    channels: usize,
    data: Vec<f32>,
    pub meta: FieldMeta,
}

impl VoxelField {
    pub fn new(extents: [usize; 3], channels: usize, data: Vec<f32>, meta: FieldMeta) -> Result<Self> {
        if extents.iter().any(|&e| e < MIN_EXTENT) || channels == 0 {
            return Err(Error::InvalidShape {
                shape: vec![extents[0], extents[1], extents[2], channels],
                reason: alloc::format!("extents must be >= {MIN_EXTENT} and channels > 0"),
            });
        }
        let want = extents.iter().product::<usize>() * channels;
        if data.len() != want {
            return Err(Error::InvalidShape {
                shape: vec![extents[0], extents[1], extents[2], channels],
                reason: alloc::format!("expected {want} values, got {}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidShape {
                shape: vec![extents[0], extents[1], extents[2], channels],
                reason: alloc::format!("non-finite value at flat index {i}"),
            });
        }
        Ok(Self {
            extents,
            channels,
            data,
            meta,
        })
    }

    pub fn zeros(extents: [usize; 3], channels: usize) -> Result<Self> {
        let n = extents.iter().product::<usize>() * channels;
        Self::new(extents, channels, vec![0.0; n], FieldMeta::default())
    }

    pub fn from_fn(
        extents: [usize; 3],
        channels: usize,
        meta: FieldMeta,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let [dx, dy, dz] = extents;
        let mut data = Vec::with_capacity(dx * dy * dz * channels);
        for x in 0..dx {
            for y in 0..dy {
                for z in 0..dz {
                    for c in 0..channels {
                        data.push(f(x, y, z, c) as f32);
                    }
                }
            }
        }
        Self::new(extents, channels, data, meta)
    }

    pub fn from_tensor<F: Scalar>(t: &Tensor<F>, meta: FieldMeta) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("voxel field", s, &[0, 0, 0, 0]));
        }
        Self::new(
            [s[0], s[1], s[2]],
            s[3],
            t.data().iter().map(|v| v.f64() as f32).collect(),
            meta,
        )
    }

    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let [dx, dy, dz] = self.extents;
        Tensor::from_fn(&[dx, dy, dz, self.channels], |i| F::of(self.data[i] as f64))
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat offset of channel 0 at voxel `(x, y, z)`.
    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        ((x * self.extents[1] + y) * self.extents[2] + z) * self.channels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.offset(x, y, z) + c]
    }
}

fn coords(extents: [usize; 3], x: usize, y: usize, z: usize) -> [f64; 3] {
    [
        x as f64 / extents[0] as f64,
        y as f64 / extents[1] as f64,
        z as f64 / extents[2] as f64,
    ]
}

fn meta(generator: &str, params: &[(&str, f64)]) -> FieldMeta {
    FieldMeta {
        generator: generator.to_string(),
        params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        time_index: 0,
        source: None,
    }
}

/// Decaying 3D Taylor–Green vortex with wavenumber `2π` and unit amplitude:
/// `u = sin kx cos ky cos kz`, `v = -cos kx sin ky cos kz`, `w = 0`, scaled
/// by the viscous decay `exp(-3 ν k² t)` of this mode.
///
/// Central differences see `∂x sin kx` as `k sinc(k h_x) cos kx`, so the
/// discrete divergence is `k (sinc(k h_x) − sinc(k h_y)) cos kx cos ky cos kz`:
/// zero when `h_x = h_y`, and at most the recorded `divergence_bound`.
pub fn taylor_green(extents: [usize; 3], t: f64, nu: f64) -> Result<VoxelField> {
    let k = 2.0 * PI;
    let decay = libm::exp(-3.0 * nu * k * k * t);
    let sinc = |n: usize| {
        let a = k / n.max(1) as f64;
        libm::sin(a) / a
    };
    let bound = decay * k * (sinc(extents[0]) - sinc(extents[1])).abs();
    VoxelField::from_fn(
        extents,
        VELOCITY_CHANNELS,
        meta("taylor-green", &[("t", t), ("nu", nu), ("divergence_bound", bound)]),
        |x, y, z, c| {
            let [px, py, pz] = coords(extents, x, y, z);
            let (sx, cx) = (libm::sin(k * px), libm::cos(k * px));
            let (sy, cy) = (libm::sin(k * py), libm::cos(k * py));
            let cz = libm::cos(k * pz);
            decay
                * match c {
                    0 => sx * cy * cz,
                    1 => -cx * sy * cz,
                    _ => 0.0,
                }
        },
    )
}

/// Taylor–Green snapshots at times `i * dt`, with `time_index = i`.
pub fn taylor_green_series(extents: [usize; 3], count: usize, dt: f64, nu: f64) -> Result<Vec<VoxelField>> {
    (0..count)
        .map(|i| {
            let mut f = taylor_green(extents, i as f64 * dt, nu)?;
            f.meta.time_index = i as u64;
            Ok(f)
        })
        .collect()
}

/// Arnold–Beltrami–Childress flow with wavenumber `2π`; `curl u = 2π u`.
/// No component depends on its own coordinate, so the discrete divergence
/// vanishes up to rounding.
pub fn abc_flow(extents: [usize; 3], a: f64, b: f64, c: f64) -> Result<VoxelField> {
    let k = 2.0 * PI;
    VoxelField::from_fn(
        extents,
        VELOCITY_CHANNELS,
        meta("abc", &[("A", a), ("B", b), ("C", c), ("divergence_bound", 0.0)]),
        |x, y, z, ch| {
            let [px, py, pz] = coords(extents, x, y, z);
            match ch {
                0 => a * libm::sin(k * pz) + c * libm::cos(k * py),
                1 => b * libm::sin(k * px) + a * libm::cos(k * pz),
                _ => c * libm::sin(k * py) + b * libm::cos(k * px),
            }
        },
    )
}

/// Largest integer wavenumber component of [`random_solenoidal`] fields.
pub const RANDOM_KMAX: i32 = 3;

/// Curl of a random band-limited vector potential
/// `A = Σ_k a_k sin(2π k·x + φ_k)` over integer wavevectors with
/// `1 <= |k|² <= RANDOM_KMAX²`, `a_k ~ N(0, |k|^(-2·decay))`. The field is
/// rescaled to unit RMS. `meta.param("divergence_bound")` holds a rigorous
/// bound on the second-order central-difference divergence of the sampled
/// field.
pub fn random_solenoidal(extents: [usize; 3], seed: u64, spectrum_decay: f64) -> Result<VoxelField> {
    if !(spectrum_decay > 0.0) {
        return Err(Error::config("spectrum_decay must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let two_pi = 2.0 * PI;
    // (k, 2π (k × a), phase)
    let mut modes: Vec<([f64; 3], [f64; 3], f64)> = Vec::new();
    let km = RANDOM_KMAX;
    for kx in -km..=km {
        for ky in -km..=km {
            for kz in -km..=km {
                let k2 = kx * kx + ky * ky + kz * kz;
                if k2 == 0 || k2 > km * km {
                    continue;
                }
                let k = [kx as f64, ky as f64, kz as f64];
                let amp = libm::pow(libm::sqrt(k2 as f64), -spectrum_decay);
                let mut a = [0.0; 3];
                for v in &mut a {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    *v = amp * n;
                }
                let phase = rng.random_range(0.0..two_pi);
                let cross = [
                    k[1] * a[2] - k[2] * a[1],
                    k[2] * a[0] - k[0] * a[2],
                    k[0] * a[1] - k[1] * a[0],
                ];
                modes.push((k, cross.map(|v| two_pi * v), phase));
            }
        }
    }
    let [dx, dy, dz] = extents;
    let n = dx * dy * dz;
    let mut raw = vec![0.0f64; n * 3];
    for x in 0..dx {
        for y in 0..dy {
            for z in 0..dz {
                let p = coords(extents, x, y, z);
                let o = ((x * dy + y) * dz + z) * 3;
                for (k, amp, phase) in &modes {
                    let theta = two_pi * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + phase;
                    let cs = libm::cos(theta);
                    for c in 0..3 {
                        raw[o + c] += amp[c] * cs;
                    }
                }
            }
        }
    }
    let rms = libm::sqrt(raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64);
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    // |sin(2π k h)/h - 2π k| <= (2π |k|)³ h² / 6 per axis; the exact terms cancel
    let h = [1.0 / dx as f64, 1.0 / dy as f64, 1.0 / dz as f64];
    let bound: f64 = modes
        .iter()
        .map(|(k, amp, _)| {
            (0..3)
                .map(|j| {
                    let kk = two_pi * k[j].abs();
                    amp[j].abs() * kk * kk * kk * h[j] * h[j] / 6.0
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        * scale;
    let data = raw.iter().map(|v| (v * scale) as f32).collect();
    VoxelField::new(
        extents,
        3,
        data,
        meta(
            "random-solenoidal",
            &[
                ("seed", seed as f64),
                ("spectrum_decay", spectrum_decay),
                ("divergence_bound", bound),
            ],
        ),
    )
}

/// Periodic second-order central-difference divergence of a 3-channel
/// field on the unit cube, in voxel order.
pub fn discrete_divergence(field: &VoxelField) -> Result<Vec<f64>> {
    if field.channels() != 3 {
        return Err(Error::config("divergence needs a 3-component field"));
    }
    let [dx, dy, dz] = field.extents();
    let h = [1.0 / dx as f64, 1.0 / dy as f64, 1.0 / dz as f64];
    let mut out = Vec::with_capacity(dx * dy * dz);
    for x in 0..dx {
        for y in 0..dy {
            for z in 0..dz {
                let du = field.at((x + 1) % dx, y, z, 0) as f64 - field.at((x + dx - 1) % dx, y, z, 0) as f64;
                let dv = field.at(x, (y + 1) % dy, z, 1) as f64 - field.at(x, (y + dy - 1) % dy, z, 1) as f64;
                let dw = field.at(x, y, (z + 1) % dz, 2) as f64 - field.at(x, y, (z + dz - 1) % dz, 2) as f64;
                out.push(du / (2.0 * h[0]) + dv / (2.0 * h[1]) + dw / (2.0 * h[2]));
            }
        }
    }
    Ok(out)
}

pub fn max_divergence(field: &VoxelField) -> Result<f64> {
    Ok(discrete_divergence(field)?
        .into_iter()
        .fold(0.0, |m, v| m.max(v.abs())))
}

/// Accepted discrete divergence for `field`: the generator's recorded
/// truncation bound plus an f32 allowance, or `10 h²` (finest spacing) for
/// fields without one.
pub fn divergence_tolerance(field: &VoxelField) -> f64 {
    let f32_floor = 1e-4;
    match field.meta.param("divergence_bound") {
        Some(b) => b + f32_floor,
        None => {
            let h = 1.0 / *field.extents().iter().max().unwrap_or(&1) as f64;
            10.0 * h * h
        }
    }
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Fields sharing extents and channel count, plus normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDataset {
    pub fields: Vec<VoxelField>,
    pub stats: NormStats,
}

/// Standard deviations below this are treated as 1 (constant channel).
pub const STD_FLOOR: f64 = 1e-12;

impl FlowDataset {
    pub fn new(fields: Vec<VoxelField>) -> Result<Self> {
        let first = fields
            .first()
            .ok_or_else(|| Error::config("dataset needs at least one field"))?;
        let (ext, ch) = (first.extents(), first.channels());
        for f in &fields {
            if f.extents() != ext || f.channels() != ch {
                return Err(Error::shape(
                    "dataset",
                    &[ext[0], ext[1], ext[2], ch],
                    &[f.extents()[0], f.extents()[1], f.extents()[2], f.channels()],
                ));
            }
        }
        Ok(Self {
            stats: NormStats::identity(ch),
            fields,
        })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn extents(&self) -> [usize; 3] {
        self.fields[0].extents()
    }

    pub fn channels(&self) -> usize {
        self.fields[0].channels()
    }

    /// Computes per-channel mean and standard deviation over `train` only.
    pub fn fit_normalization(&mut self, train: &[usize]) -> Result<()> {
        let ch = self.channels();
        let mut sum = vec![0.0f64; ch];
        let mut sq = vec![0.0f64; ch];
        let mut count = 0usize;
        for &i in train {
            let f = self.fields.get(i).ok_or(Error::IndexOutOfRange {
                index: i,
                extent: self.fields.len(),
            })?;
            for v in f.data().chunks_exact(ch) {
                for c in 0..ch {
                    sum[c] += v[c] as f64;
                }
            }
            count += f.num_voxels();
        }
        if count == 0 {
            return Err(Error::config("empty training split"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for &i in train {
            for v in self.fields[i].data().chunks_exact(ch) {
                for c in 0..ch {
                    let d = v[c] as f64 - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        self.stats = NormStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq
                .iter()
                .map(|s| {
                    let sd = libm::sqrt(s / count as f64);
                    if sd < STD_FLOOR {
                        1.0
                    } else {
                        sd as f32
                    }
                })
                .collect(),
        };
        Ok(())
    }

    pub fn normalize(&self, field: &VoxelField) -> VoxelField {
        self.apply(field, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, field: &VoxelField) -> VoxelField {
        self.apply(field, |v, m, s| v * s + m)
    }

    fn apply(&self, field: &VoxelField, f: impl Fn(f64, f64, f64) -> f64) -> VoxelField {
        let ch = field.channels();
        let mut out = field.clone();
        for v in out.data_mut().chunks_exact_mut(ch) {
            for c in 0..ch {
                v[c] = f(v[c] as f64, self.stats.mean[c] as f64, self.stats.std[c] as f64) as f32;
            }
        }
        out
    }
}

/// Train/test protocols over time-ordered snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitProtocol {
    /// Interpolation: time steps shuffled before splitting.
    Interpolation { seed: u64 },
    /// Extrapolation: the first fraction of time steps trains.
    Extrapolation,
}

/// Returns `(train, test)` dataset indices; `fields` are ordered by
/// `meta.time_index` first.
pub fn split_indices(
    fields: &[VoxelField],
    train_fraction: f64,
    protocol: SplitProtocol,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config("train fraction must lie in [0, 1]"));
    }
    let mut order: Vec<usize> = (0..fields.len()).collect();
    order.sort_by_key(|&i| (fields[i].meta.time_index, i));
    if let SplitProtocol::Interpolation { seed } = protocol {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let n_train = libm::floor(train_fraction * fields.len() as f64) as usize;
    let test = order.split_off(n_train);
    Ok((order, test))
}
