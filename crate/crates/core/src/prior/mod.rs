//! Multi-slice residual artifact-reduction prior: slice stacking, the
//! network, volume denoising and training.

mod checkpoint;
mod net;
mod train;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::projector::Volume;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use net::{
    net_backward, net_forward, net_forward_cached, Architecture, ConvShape, ForwardCache,
    PriorParams, Tensor,
};
pub use train::{
    adam_step, collect_patches, extract_patches, split_patches, train_prior, train_prior_with,
    validation_nrmse, AdamConfig, Dataset, EpochLog,
    OptimState, Patch, PlateauScheduler, TrainConfig, TrainResult,
};

/// `2h+1` adjacent slices as channels; channel `h` is the centre slice.
pub type SliceStack = Tensor;

/// Slices `z-h..=z+h`, with out-of-range indices clamped to the boundary.
pub fn stack_slices(vol: &Volume, z: usize, h: usize) -> Result<SliceStack> {
    let [nx, ny, nz] = vol.dims;
    if z >= nz {
        return Err(Error::Range(format!("slice {z} outside volume of depth {nz}")));
    }
    let mut data = Vec::with_capacity((2 * h + 1) * nx * ny);
    for k in 0..=2 * h {
        let zz = (z + k).saturating_sub(h).min(nz - 1);
        data.extend_from_slice(vol.slice(zz));
    }
    Tensor::from_data(2 * h + 1, ny, nx, data)
}

/// Maps `i` in `0..n + pad` to a source index by mirroring about the last
/// sample (no edge repeat).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn pad_reflect(t: &Tensor, h: usize, w: usize) -> Tensor {
    if t.h == h && t.w == w {
        return t.clone();
    }
    let mut out = Tensor::zeros(t.c, h, w);
    for c in 0..t.c {
        for y in 0..h {
            let sy = reflect(y, t.h);
            for x in 0..w {
                out.data[(c * h + y) * w + x] = t.data[(c * t.h + sy) * t.w + reflect(x, t.w)];
            }
        }
    }
    out
}

/// Denoised centre slice: `P_c(stack) - residual`, padded reflectively to the
/// network's size multiple and cropped back.
pub fn denoise_stack(params: &PriorParams, stack: &SliceStack) -> Result<Vec<f64>> {
    let m = params.arch.multiple();
    let (h, w) = (stack.h, stack.w);
    let padded = pad_reflect(stack, h.div_ceil(m) * m, w.div_ceil(m) * m);
    let residual = net_forward(params, &padded)?;
    let hw = h * w;
    let centre = &stack.data[params.arch.half_width * hw..(params.arch.half_width + 1) * hw];
    let mut out = Vec::with_capacity(hw);
    for y in 0..h {
        for x in 0..w {
            out.push(centre[y * w + x] - residual.data[y * padded.w + x]);
        }
    }
    Ok(out)
}

/// Applies the prior to every axial slice independently.
pub fn denoise_volume(params: &PriorParams, vol: &Volume, h: usize) -> Result<Volume> {
    if h != params.arch.half_width {
        return Err(Error::Param(format!(
            "half-width {h} does not match the network's {}",
            params.arch.half_width
        )));
    }
    let nz = vol.dims[2];
    let slices: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|z| denoise_stack(params, &stack_slices(vol, z, h)?))
        .collect::<Result<_>>()?;
    Volume::from_data(vol.dims, vol.voxel_size_mm, slices.concat())
}

/// Mean absolute error and its gradient `sign(pred - target) / N`.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}
