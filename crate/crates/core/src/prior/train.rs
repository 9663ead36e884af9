//! Patch extraction, Adam and the training loop with a plateau schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{net_backward, net_forward, net_forward_cached, Architecture, PriorParams, Tensor};
use super::stack_slices;
use crate::error::{Error, Result};
use crate::projector::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub patience: usize,
    pub factor: f64,
    /// Patch height and width in pixels.
    pub patch: [usize; 2],
    /// Patch stride along z, y and x.
    pub stride: [usize; 3],
    pub split: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 1e-3,
            adam: AdamConfig::default(),
            patience: 10,
            factor: 2.0,
            patch: [32, 32],
            stride: [1, 32, 32],
            split: 0.8,
            batch: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Param(format!("split {} not in (0, 1)", self.split)));
        }
        if self.batch == 0 || self.patch.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Param("batch, patch and stride must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.factor > 1.0) {
            return Err(Error::Param("need lr >= 0 and factor > 1".into()));
        }
        Ok(())
    }
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        OptimState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape("parameter, gradient and moment lengths differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Cuts the learning rate after `patience` epochs without improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records one epoch's metric. Returns `(improved, new_lr)`.
    pub fn observe(&mut self, metric: f64, lr: f64) -> (bool, f64) {
        if metric < self.best {
            self.best = metric;
            self.bad = 0;
            return (true, lr);
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            (false, lr / self.factor)
        } else {
            (false, lr)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// A `(2h+1)`-channel input patch and its clean centre-slice target.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub input: Tensor,
    pub target: Vec<f64>,
    /// `(z, y, x)` of the patch origin in its source volume.
    pub origin: [usize; 3],
}

impl Patch {
    fn centre(&self, h: usize) -> &[f64] {
        let hw = self.input.h * self.input.w;
        &self.input.data[h * hw..(h + 1) * hw]
    }

    /// `P_c x - y`.
    pub fn residual_target(&self, h: usize) -> Vec<f64> {
        self.centre(h).iter().zip(&self.target).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub half_width: usize,
    pub train: Vec<Patch>,
    pub val: Vec<Patch>,
}

fn check_pair(input: &Volume, target: &Volume) -> Result<()> {
    if !input.same_shape(target) {
        return Err(Error::Shape(format!(
            "input {:?} and target {:?} differ in shape",
            input.dims, target.dims
        )));
    }
    Ok(())
}

/// Every regularly strided patch of one aligned volume pair, in raster order.
pub fn collect_patches(
    input: &Volume,
    target: &Volume,
    h: usize,
    patch: [usize; 2],
    stride: [usize; 3],
) -> Result<Vec<Patch>> {
    check_pair(input, target)?;
    let [nx, ny, nz] = input.dims;
    let [ph, pw] = patch;
    if ph > ny || pw > nx || ph == 0 || pw == 0 {
        return Err(Error::Shape(format!(
            "patch {ph}x{pw} does not fit slices of {ny}x{nx}"
        )));
    }
    if stride.contains(&0) {
        return Err(Error::Param("patch stride must be positive".into()));
    }
    let mut out = Vec::new();
    for z in (0..nz).step_by(stride[0]) {
        let stack = stack_slices(input, z, h)?;
        let tgt = target.slice(z);
        for y0 in (0..=ny - ph).step_by(stride[1]) {
            for x0 in (0..=nx - pw).step_by(stride[2]) {
                let mut data = Vec::with_capacity(stack.c * ph * pw);
                for c in 0..stack.c {
                    for y in y0..y0 + ph {
                        let row = (c * ny + y) * nx;
                        data.extend_from_slice(&stack.data[row + x0..row + x0 + pw]);
                    }
                }
                let mut t = Vec::with_capacity(ph * pw);
                for y in y0..y0 + ph {
                    t.extend_from_slice(&tgt[y * nx + x0..y * nx + x0 + pw]);
                }
                out.push(Patch {
                    input: Tensor::from_data(stack.c, ph, pw, data)?,
                    target: t,
                    origin: [z, y0, x0],
                });
            }
        }
    }
    Ok(out)
}

/// Seeded shuffle, then the first `split` fraction trains and the rest
/// validates.
pub fn split_patches(mut patches: Vec<Patch>, h: usize, split: f64, seed: u64) -> Result<Dataset> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Param(format!("split {split} not in (0, 1)")));
    }
    if patches.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 patches to split, have {}",
            patches.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patches.shuffle(&mut rng);
    let n_train = ((patches.len() as f64 * split).round() as usize).clamp(1, patches.len() - 1);
    let val = patches.split_off(n_train);
    Ok(Dataset {
        half_width: h,
        train: patches,
        val,
    })
}

pub fn extract_patches(
    input: &Volume,
    target: &Volume,
    h: usize,
    patch: [usize; 2],
    stride: [usize; 3],
    split: f64,
    seed: u64,
) -> Result<Dataset> {
    split_patches(collect_patches(input, target, h, patch, stride)?, h, split, seed)
}

impl Dataset {
    /// Pools patches from several aligned `(input, target)` pairs before
    /// splitting.
    pub fn from_pairs(
        pairs: &[(&Volume, &Volume)],
        h: usize,
        cfg: &TrainConfig,
    ) -> Result<Dataset> {
        let mut all = Vec::new();
        for (input, target) in pairs {
            all.extend(collect_patches(input, target, h, cfg.patch, cfg.stride)?);
        }
        split_patches(all, h, cfg.split, cfg.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nrmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: PriorParams,
    /// Row 0 evaluates the initial parameters.
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainResult {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_nrmse,lr\n");
        for e in &self.log {
            s.push_str(&format!("{},{:e},{:e},{:e}\n", e.epoch, e.train_loss, e.val_nrmse, e.lr));
        }
        s
    }
}

fn mean_loss(params: &PriorParams, patches: &[Patch]) -> Result<f64> {
    let h = params.arch.half_width;
    let sums: Vec<f64> = patches
        .par_iter()
        .map(|p| {
            let r = net_forward(params, &p.input)?;
            Ok(r.data.iter().zip(p.residual_target(h)).map(|(a, b)| (a - b).abs()).sum())
        })
        .collect::<Result<_>>()?;
    let n: usize = patches.iter().map(|p| p.target.len()).sum();
    Ok(sums.iter().sum::<f64>() / n.max(1) as f64)
}

/// NRMSE of the denoised centre slices against the targets, pooled over all
/// patches.
pub fn validation_nrmse(params: &PriorParams, patches: &[Patch]) -> Result<f64> {
    let h = params.arch.half_width;
    let parts: Vec<(f64, f64)> = patches
        .par_iter()
        .map(|p| {
            let r = net_forward(params, &p.input)?;
            let mut num = 0.0;
            let mut den = 0.0;
            for ((c, r), t) in p.centre(h).iter().zip(&r.data).zip(&p.target) {
                num += (c - r - t).powi(2);
                den += t * t;
            }
            Ok((num, den))
        })
        .collect::<Result<_>>()?;
    let (num, den) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    if den == 0.0 {
        return Err(Error::MetricUndefined("validation targets are all zero".into()));
    }
    Ok((num / den).sqrt())
}

fn batch_gradient(params: &PriorParams, batch: &[&Patch]) -> Result<(f64, Vec<f64>)> {
    let h = params.arch.half_width;
    let n: usize = batch.iter().map(|p| p.target.len()).sum();
    let inv = 1.0 / n as f64;
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|p| {
            let (pred, cache) = net_forward_cached(params, &p.input)?;
            let mut loss = 0.0;
            let up: Vec<f64> = pred
                .data
                .iter()
                .zip(p.residual_target(h))
                .map(|(a, b)| {
                    let d = a - b;
                    loss += d.abs();
                    if d > 0.0 {
                        inv
                    } else if d < 0.0 {
                        -inv
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut g = vec![0.0; params.values.len()];
            let up = Tensor::from_data(1, pred.h, pred.w, up)?;
            net_backward(params, &cache, &up, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; params.values.len()];
    let mut loss = 0.0;
    for (l, g) in per {
        loss += l;
        total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss * inv, total))
}

pub fn train_prior(dataset: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<TrainResult> {
    train_prior_with(dataset, arch, cfg, |_| 1.0)
}

/// [`train_prior`] with a per-epoch multiplier on the scheduled learning
/// rate. The log records the scheduled rate.
pub fn train_prior_with(
    dataset: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    lr_scale: impl Fn(usize) -> f64,
) -> Result<TrainResult> {
    cfg.validate()?;
    arch.validate()?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    if dataset.half_width != arch.half_width {
        return Err(Error::Param(format!(
            "dataset half-width {} differs from the network's {}",
            dataset.half_width, arch.half_width
        )));
    }
    let mut params = PriorParams::init(arch, cfg.seed);
    let mut state = OptimState::new(params.values.len(), cfg.lr);
    let mut sched = PlateauScheduler::new(cfg.patience, cfg.factor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let val0 = validation_nrmse(&params, &dataset.val)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: mean_loss(&params, &dataset.train)?,
        val_nrmse: val0,
        lr: cfg.lr,
    }];
    sched.observe(val0, cfg.lr);
    let mut best = (0, params.clone());

    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lr = state.lr;
        let eff = lr * lr_scale(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&Patch> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (loss, grads) = batch_gradient(&params, &batch)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            adam_step(&mut params.values, &grads, &mut state, &cfg.adam, eff)?;
            loss_sum += loss;
            n_batches += 1;
        }
        let val = validation_nrmse(&params, &dataset.val)?;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("validation NRMSE at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_nrmse: val,
            lr,
        });
        let (improved, next_lr) = sched.observe(val, lr);
        if improved {
            best = (epoch, params.clone());
        }
        state.lr = next_lr;
    }
    Ok(TrainResult {
        params: best.1,
        log,
        best_epoch: best.0,
    })
}
