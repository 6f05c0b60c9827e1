use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-axis sin/cos block: element `2i` is `sin(pos·ω_i)` and `2i+1` is
/// `cos(pos·ω_i)` with `ω_i = 10000^(−2i/width)`.
fn axis_block(out: &mut [f64], pos: f64, width: usize) {
    for i in 0..width / 2 {
        let omega = libm::pow(10000.0, -((2 * i) as f64) / width as f64);
        out[2 * i] = libm::sin(pos * omega);
        out[2 * i + 1] = libm::cos(pos * omega);
    }
}

/// Width of each per-axis block when `dim` is shared by `axes` axes.
pub fn axis_width(dim: usize, axes: usize) -> usize {
    2 * (dim / (2 * axes))
}

/// Fixed sinusoidal table `[X·Y·Z, D]`: blocks for x, y, z side by side,
/// zero-padded when `D` is not a multiple of 6.
pub fn positional_embedding_3d<F: Scalar>(grid: [usize; 3], dim: usize) -> Tensor<F> {
    let w = axis_width(dim, 3);
    let l: usize = grid.iter().product();
    let mut data = vec![0.0f64; l * dim];
    let mut row = 0;
    for x in 0..grid[0] {
        for y in 0..grid[1] {
            for z in 0..grid[2] {
                let r = &mut data[row * dim..(row + 1) * dim];
                for (a, pos) in [x, y, z].into_iter().enumerate() {
                    axis_block(&mut r[a * w..(a + 1) * w], pos as f64, w);
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![l, dim], data.into_iter().map(F::of).collect()).expect("table shape")
}

/// 2D analogue of [`positional_embedding_3d`] for slice tokens.
pub fn positional_embedding_2d<F: Scalar>(grid: [usize; 2], dim: usize) -> Tensor<F> {
    let w = axis_width(dim, 2);
    let mut data = vec![0.0f64; grid[0] * grid[1] * dim];
    for i in 0..grid[0] {
        for j in 0..grid[1] {
            let row = i * grid[1] + j;
            let r = &mut data[row * dim..(row + 1) * dim];
            axis_block(&mut r[..w], i as f64, w);
            axis_block(&mut r[w..2 * w], j as f64, w);
        }
    }
    Tensor::new(vec![grid[0] * grid[1], dim], data.into_iter().map(F::of).collect()).expect("table shape")
}

/// Sinusoidal timestep features `[B, dim]`: the first half holds
/// `cos(t·f_i)`, the second `sin(t·f_i)`, `f_i = 10000^(−i/half)`.
pub fn timestep_embedding<F: Scalar>(ts: &[usize], dim: usize, timesteps: usize) -> Result<Tensor<F>> {
    if let Some(&t) = ts.iter().find(|&&t| t >= timesteps) {
        return Err(Error::TimestepOutOfRange { t, steps: timesteps });
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| libm::exp(-libm::log(10000.0) * i as f64 / half as f64));
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|&a| F::of(libm::cos(a))));
        data.extend(args.iter().map(|&a| F::of(libm::sin(a))));
    }
    Tensor::new(vec![ts.len(), dim], data)
}
