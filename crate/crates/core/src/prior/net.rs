//! Encoder-decoder residual network with exact reverse-mode gradients.
//!
//! Layout per level `l` (features `F_l = F0 * 2^l`):
//!
//! * encoder: conv3x3 + ReLU, conv3x3 + ReLU, 2x2 max-pool
//! * bottleneck: conv3x3 + ReLU, conv3x3 + ReLU at `F_L`
//! * decoder: nearest 2x upsample, conv3x3 to `F_l` (linear), concatenate
//!   `[skip, up]`, conv3x3 + ReLU, conv3x3 + ReLU
//! * head: conv1x1 to one channel
//!
//! All parameters live in one flat vector in declaration order (per layer:
//! weights `[cout][cin][k][k]`, then biases).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub levels: usize,
    pub base_features: usize,
    /// Slices on each side of the centre slice; the input has `2h+1` channels.
    pub half_width: usize,
    /// Inputs are multiplied by this before the first layer and the residual
    /// divided by it on the way out.
    #[serde(default = "one")]
    pub input_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Architecture {
    pub fn new(levels: usize, base_features: usize, half_width: usize) -> Self {
        Architecture {
            levels,
            base_features,
            half_width,
            input_scale: 1.0,
        }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.half_width + 1
    }

    /// Spatial sizes must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.levels
    }

    fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Layer shapes in declaration order.
    pub fn layers(&self) -> Vec<ConvShape> {
        let mut shapes = Vec::new();
        let mut push = |cin: usize, cout: usize, k: usize| shapes.push((cin, cout, k));
        let mut cin = self.in_channels();
        for l in 0..self.levels {
            let f = self.features(l);
            push(cin, f, 3);
            push(f, f, 3);
            cin = f;
        }
        let fb = self.features(self.levels);
        push(cin, fb, 3);
        push(fb, fb, 3);
        for l in (0..self.levels).rev() {
            let f = self.features(l);
            push(self.features(l + 1), f, 3);
            push(2 * f, f, 3);
            push(f, f, 3);
        }
        push(self.base_features, 1, 1);
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(cin, cout, k)| {
                let s = ConvShape {
                    cin,
                    cout,
                    k,
                    w_off: offset,
                    b_off: offset + cout * cin * k * k,
                };
                offset = s.b_off + cout;
                s
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers().last().map(|s| s.b_off + s.cout).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_features == 0 {
            return Err(Error::Param("network needs at least one level and one feature".into()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Param("input scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvShape {
    fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Network weights `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl PriorParams {
    pub fn zeros(arch: Architecture) -> Self {
        PriorParams {
            values: vec![0.0; arch.n_params()],
            arch,
        }
    }

    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]` for weights and biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in arch.layers() {
            let bound = (1.0 / s.fan_in() as f64).sqrt();
            for v in &mut p.values[s.w_off..s.b_off + s.cout] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    pub fn layers(&self) -> Vec<ConvShape> {
        self.arch.layers()
    }
}

/// Channel-major image batch of one sample: `[c][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "tensor {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// `c = a * b (+ c)` for row-major matrices, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is m x k (or k x m stored when transposed), b is k x n (or n x k)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above describe buffers of the asserted sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    if k == 1 {
        return x.data.clone();
    }
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![0.0; x.c * 9 * hw];
    for ci in 0..x.c {
        let src = &x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    if k == 1 {
        return Tensor {
            c,
            h,
            w,
            data: cols.to_vec(),
        };
    }
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&srow[1..]).for_each(|(d, s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                        _ => drow[1..].iter_mut().zip(&srow[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

fn conv_forward(params: &[f64], s: &ConvShape, x: &Tensor) -> (Tensor, Vec<f64>) {
    let cols = im2col(x, s.k);
    let hw = x.plane();
    let mut out = Tensor::zeros(s.cout, x.h, x.w);
    for (co, plane) in out.data.chunks_mut(hw).enumerate() {
        plane.fill(params[s.b_off + co]);
    }
    gemm(
        s.cout,
        s.fan_in(),
        hw,
        &params[s.w_off..s.b_off],
        false,
        &cols,
        false,
        &mut out.data,
        true,
    );
    (out, cols)
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn conv_backward(
    params: &[f64],
    grads: &mut [f64],
    s: &ConvShape,
    cols: &[f64],
    dout: &Tensor,
    need_input_grad: bool,
) -> Option<Tensor> {
    let hw = dout.plane();
    gemm(
        s.cout,
        hw,
        s.fan_in(),
        &dout.data,
        false,
        cols,
        true,
        &mut grads[s.w_off..s.b_off],
        true,
    );
    for (co, plane) in dout.data.chunks(hw).enumerate() {
        grads[s.b_off + co] += plane.iter().sum::<f64>();
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![0.0; s.fan_in() * hw];
    gemm(
        s.fan_in(),
        s.cout,
        hw,
        &params[s.w_off..s.b_off],
        true,
        &dout.data,
        false,
        &mut dcols,
        false,
    );
    Some(col2im(&dcols, s.cin, dout.h, dout.w, s.k))
}

fn relu(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient where the post-activation output was not positive.
fn relu_backward(dout: &mut Tensor, out: &Tensor) {
    dout.data
        .iter_mut()
        .zip(&out.data)
        .for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
}

/// 2x2 max-pool; ties go to the smallest flat index inside the window.
fn maxpool(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, h2, w2);
    let mut arg = vec![0u32; x.c * h2 * w2];
    for c in 0..x.c {
        let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = 2 * y * x.w + 2 * xx;
                for idx in [best + 1, best + x.w, best + x.w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (c * h2 + y) * w2 + xx;
                out.data[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

fn maxpool_backward(dout: &Tensor, arg: &[u32], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dout.c, h, w);
    let plane = dout.plane();
    for c in 0..dout.c {
        for i in 0..plane {
            dx.data[c * h * w + arg[c * plane + i] as usize] += dout.data[c * plane + i];
        }
    }
    dx
}

fn upsample(x: &Tensor) -> Tensor {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

fn upsample_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h / 2, dout.w / 2);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dx.data[(c * h + y / 2) * w + xx / 2] += dout.data[(c * dout.h + y) * dout.w + xx];
            }
        }
    }
    dx
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

fn split(t: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let n = ca * t.plane();
    (
        Tensor {
            c: ca,
            h: t.h,
            w: t.w,
            data: t.data[..n].to_vec(),
        },
        Tensor {
            c: t.c - ca,
            h: t.h,
            w: t.w,
            data: t.data[n..].to_vec(),
        },
    )
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    layer_cols: Vec<Vec<f64>>,
    layer_out: Vec<Tensor>,
    pool_arg: Vec<(Vec<u32>, usize, usize)>,
}

fn check_input(arch: &Architecture, x: &Tensor) -> Result<()> {
    if x.c != arch.in_channels() {
        return Err(Error::Shape(format!(
            "network expects {} channels, got {}",
            arch.in_channels(),
            x.c
        )));
    }
    let m = arch.multiple();
    if x.h == 0 || x.w == 0 || x.h % m != 0 || x.w % m != 0 {
        return Err(Error::Shape(format!(
            "input {}x{} must be a nonzero multiple of {m}",
            x.h, x.w
        )));
    }
    if x.data.len() != x.c * x.h * x.w {
        return Err(Error::Shape("tensor data length mismatch".into()));
    }
    Ok(())
}

fn forward_impl(params: &PriorParams, x: &Tensor, keep: bool) -> (Tensor, Option<ForwardCache>) {
    let layers = params.layers();
    let p = &params.values;
    let levels = params.arch.levels;
    let mut cache = ForwardCache {
        layer_cols: Vec::new(),
        layer_out: Vec::new(),
        pool_arg: Vec::new(),
    };
    let mut li = 0;
    let mut run = |input: &Tensor, act: bool, cache: &mut ForwardCache| -> Tensor {
        let (mut out, cols) = conv_forward(p, &layers[li], input);
        li += 1;
        if act {
            relu(&mut out);
        }
        if keep {
            cache.layer_cols.push(cols);
            cache.layer_out.push(out.clone());
        }
        out
    };

    let mut cur = x.clone();
    let s = params.arch.input_scale;
    if s != 1.0 {
        cur.data.iter_mut().for_each(|v| *v *= s);
    }
    let mut skips = Vec::with_capacity(levels);
    for _ in 0..levels {
        let a = run(&cur, true, &mut cache);
        let b = run(&a, true, &mut cache);
        let (pooled, arg) = maxpool(&b);
        if keep {
            cache.pool_arg.push((arg, b.h, b.w));
        }
        skips.push(b);
        cur = pooled;
    }
    let a = run(&cur, true, &mut cache);
    cur = run(&a, true, &mut cache);
    for _ in (0..levels).rev() {
        let up = upsample(&cur);
        let u = run(&up, false, &mut cache);
        let skip = skips.pop().expect("one skip per level");
        let cat = concat(&skip, &u);
        let d = run(&cat, true, &mut cache);
        cur = run(&d, true, &mut cache);
    }
    let mut out = run(&cur, false, &mut cache);
    if s != 1.0 {
        out.data.iter_mut().for_each(|v| *v /= s);
    }
    (out, keep.then_some(cache))
}

/// Predicted residual for one slice stack (one output channel).
pub fn net_forward(params: &PriorParams, x: &Tensor) -> Result<Tensor> {
    check_input(&params.arch, x)?;
    Ok(forward_impl(params, x, false).0)
}

/// Forward pass that keeps what [`net_backward`] needs.
pub fn net_forward_cached(params: &PriorParams, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
    check_input(&params.arch, x)?;
    let (out, cache) = forward_impl(params, x, true);
    Ok((out, cache.expect("cache requested")))
}

/// Parameter gradients of `<upstream, net_forward(params, x)>`, accumulated
/// into `grads`.
pub fn net_backward(
    params: &PriorParams,
    cache: &ForwardCache,
    upstream: &Tensor,
    grads: &mut [f64],
) -> Result<()> {
    let layers = params.layers();
    if grads.len() != params.values.len() {
        return Err(Error::Shape("gradient buffer has the wrong length".into()));
    }
    let last = cache.layer_out.last().expect("non-empty network");
    if upstream.c != 1 || upstream.h != last.h || upstream.w != last.w {
        return Err(Error::Shape("upstream gradient does not match the output".into()));
    }
    let p = &params.values;
    let levels = params.arch.levels;
    let s = params.arch.input_scale;
    let mut li = layers.len();
    let mut back = |dout: &Tensor, act: bool, grads: &mut [f64], need_in: bool| -> Option<Tensor> {
        li -= 1;
        let mut d = dout.clone();
        if act {
            relu_backward(&mut d, &cache.layer_out[li]);
        }
        conv_backward(p, grads, &layers[li], &cache.layer_cols[li], &d, need_in)
    };

    let mut g = upstream.clone();
    if s != 1.0 {
        g.data.iter_mut().for_each(|v| *v /= s);
    }
    let mut g = back(&g, false, grads, true).expect("input grad");
    let mut skip_grads = Vec::with_capacity(levels);
    for l in 0..levels {
        let gd = back(&g, true, grads, true).expect("input grad");
        let gcat = back(&gd, true, grads, true).expect("input grad");
        let f = params.arch.base_features << l;
        let (gskip, gu) = split(&gcat, f);
        skip_grads.push(gskip);
        let gup = back(&gu, false, grads, true).expect("input grad");
        g = upsample_backward(&gup);
    }
    let ga = back(&g, true, grads, true).expect("input grad");
    g = back(&ga, true, grads, true).expect("input grad");
    for l in (0..levels).rev() {
        let (arg, h, w) = &cache.pool_arg[l];
        let mut gb = maxpool_backward(&g, arg, *h, *w);
        let gs = skip_grads.pop().expect("one skip per level");
        gb.data.iter_mut().zip(&gs.data).for_each(|(a, b)| *a += b);
        let ga = back(&gb, true, grads, true).expect("input grad");
        let need = l > 0;
        match back(&ga, true, grads, need) {
            Some(gi) => g = gi,
            None => break,
        }
    }
    Ok(())
}
