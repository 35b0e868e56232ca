//! The post-processing network `U`, its projected form `Φ_α = P_α U` and the
//! reconstructor `R_α = (Id + P_α U) B_α`.
//!
//! `U` is a small U-net on single-channel `N × N` images: per level two
//! same-padded convolutions with an activation, 2×2 average pooling on the
//! way down, nearest-neighbour upsampling and skip concatenation on the way
//! up, and a linear 1×1 convolution producing the output. With no levels the
//! network is just that 1×1 head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter, Fnv1a, NETWORK_MAGIC};
use crate::dataset::{Dataset, Role, Sample};
use crate::error::{check_len, Error, Result};
use crate::geometry::{CoefficientImage, Measurement};
use crate::noise::derive_seed;
use crate::regularization::{complement_project_in_place, tsvd_apply, TruncationPolicy};
use crate::svd::SvdFactors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Identity => {}
        }
    }

    /// Multiplies `g` by the derivative, expressed through the output `out`.
    fn backward(self, out: &[f64], g: &mut [f64]) {
        match self {
            Activation::Relu => g.iter_mut().zip(out).for_each(|(g, o)| {
                if *o <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => g.iter_mut().zip(out).for_each(|(g, o)| *g *= 1.0 - o * o),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input and output images are `side × side`.
    pub side: usize,
    /// Channel count per level, finest first. Empty means head only.
    pub channels: Vec<usize>,
    /// Odd kernel size of the level convolutions (stride 1, same padding).
    pub kernel: usize,
    pub activation: Activation,
}

/// One convolution in descriptor order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Side length of the feature maps this layer runs on.
    pub resolution: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

impl Architecture {
    /// Three levels with 16/32/64 channels, 3×3 kernels and ReLU.
    pub fn unet(side: usize) -> Self {
        Architecture {
            side,
            channels: vec![16, 32, 64],
            kernel: 3,
            activation: Activation::Relu,
        }
    }

    /// A single linear 1×1 convolution.
    pub fn head_only(side: usize) -> Self {
        Architecture {
            side,
            channels: Vec::new(),
            kernel: 1,
            activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(Error::InvalidParameter("network side must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidParameter("channel counts must be positive".into()));
        }
        let levels = self.channels.len();
        if levels > 1 && self.side % (1 << (levels - 1)) != 0 {
            return Err(Error::InvalidParameter(format!(
                "side {} is not divisible by 2^{} as {} levels require",
                self.side,
                levels - 1,
                levels
            )));
        }
        Ok(())
    }

    fn compile(&self) -> Program {
        let mut p = Program::default();
        p.shapes.push((1, self.side));
        let mut v = 0;
        let mut skips = Vec::new();
        let levels = self.channels.len();
        for (l, &c) in self.channels.iter().enumerate() {
            if l > 0 {
                let (ch, s) = p.shapes[v];
                v = p.push(Op::Pool { src: v }, (ch, s / 2));
            }
            v = p.conv(v, c, self.kernel, self.activation);
            v = p.conv(v, c, self.kernel, self.activation);
            if l + 1 < levels {
                skips.push(v);
            }
        }
        for l in (0..levels.saturating_sub(1)).rev() {
            let (ch, s) = p.shapes[v];
            let up = p.push(Op::Up { src: v }, (ch, 2 * s));
            let skip = skips[l];
            v = p.push(Op::Concat { a: up, b: skip }, (ch + p.shapes[skip].0, 2 * s));
            v = p.conv(v, self.channels[l], self.kernel, self.activation);
            v = p.conv(v, self.channels[l], self.kernel, self.activation);
        }
        p.conv(v, 1, 1, Activation::Identity);
        p
    }

    /// Convolutions in descriptor order, which is also the weight order.
    pub fn layers(&self) -> Vec<LayerShape> {
        self.compile().layers
    }

    pub fn param_count(&self) -> usize {
        self.compile().param_count
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv { src: usize, layer: usize },
    Pool { src: usize },
    Up { src: usize },
    Concat { a: usize, b: usize },
}

/// Value `0` is the input; op `i` produces value `i + 1`.
#[derive(Debug, Default)]
struct Program {
    ops: Vec<Op>,
    shapes: Vec<(usize, usize)>,
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    param_count: usize,
}

/// `c = beta·c + op(a)·op(b)` on row-major buffers; `op(a)` is `m × k`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address only the first m·k, k·n and m·n
    // elements, whose presence is asserted.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], channels: usize, side: usize, kernel: usize) -> Vec<f64> {
    let hw = side * side;
    let pad = (kernel / 2) as isize;
    let mut cols = vec![0.0; channels * kernel * kernel * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &mut cols[((c * kernel + ky) * kernel + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..side {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * side..][..side];
                    let dst = &mut row[y * side..][..side];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (side as isize - dx).min(side as isize) as usize;
                    for x in x0..x1 {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, side: usize, kernel: usize, out: &mut [f64]) {
    let hw = side * side;
    let pad = (kernel / 2) as isize;
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &cols[((c * kernel + ky) * kernel + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..side {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * side..][..side];
                    let src = &row[y * side..][..side];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (side as isize - dx).min(side as isize) as usize;
                    for x in x0..x1 {
                        dst[(x as isize + dx) as usize] += src[x];
                    }
                }
            }
        }
    }
}

struct Tape {
    values: Vec<Vec<f64>>,
    /// im2col buffers of the convolutions with `kernel > 1`.
    cols: Vec<Option<Vec<f64>>>,
}

impl Program {
    fn push(&mut self, op: Op, shape: (usize, usize)) -> usize {
        self.ops.push(op);
        self.shapes.push(shape);
        self.shapes.len() - 1
    }

    fn conv(&mut self, src: usize, out: usize, kernel: usize, activation: Activation) -> usize {
        let (c, s) = self.shapes[src];
        let shape = LayerShape {
            in_channels: c,
            out_channels: out,
            kernel,
            resolution: s,
            activation,
        };
        self.offsets.push(self.param_count);
        self.param_count += shape.param_len();
        self.layers.push(shape);
        self.push(
            Op::Conv {
                src,
                layer: self.layers.len() - 1,
            },
            (out, s),
        )
    }

    fn forward(&self, weights: &[f64], input: &[f64], keep: bool) -> Tape {
        let mut tape = Tape {
            values: vec![input.to_vec()],
            cols: Vec::with_capacity(self.ops.len()),
        };
        for (i, op) in self.ops.iter().enumerate() {
            let (out_c, out_s) = self.shapes[i + 1];
            let mut cols = None;
            let value = match *op {
                Op::Conv { src, layer } => {
                    let l = &self.layers[layer];
                    let hw = out_s * out_s;
                    let w = &weights[self.offsets[layer]..][..l.param_len()];
                    let (wt, b) = w.split_at(l.weight_len());
                    let mut out = vec![0.0; l.out_channels * hw];
                    for (o, bias) in b.iter().enumerate() {
                        out[o * hw..(o + 1) * hw].fill(*bias);
                    }
                    let inner = l.in_channels * l.kernel * l.kernel;
                    if l.kernel == 1 {
                        gemm(l.out_channels, inner, hw, wt, false, &tape.values[src], false, 1.0, &mut out);
                    } else {
                        let c = im2col(&tape.values[src], l.in_channels, out_s, l.kernel);
                        gemm(l.out_channels, inner, hw, wt, false, &c, false, 1.0, &mut out);
                        cols = keep.then_some(c);
                    }
                    l.activation.apply(&mut out);
                    out
                }
                Op::Pool { src } => {
                    let inp = &tape.values[src];
                    let s2 = 2 * out_s;
                    let mut out = vec![0.0; out_c * out_s * out_s];
                    for c in 0..out_c {
                        for y in 0..out_s {
                            for x in 0..out_s {
                                let base = c * s2 * s2 + 2 * y * s2 + 2 * x;
                                out[(c * out_s + y) * out_s + x] = 0.25
                                    * (inp[base] + inp[base + 1] + inp[base + s2] + inp[base + s2 + 1]);
                            }
                        }
                    }
                    out
                }
                Op::Up { src } => {
                    let inp = &tape.values[src];
                    let half = out_s / 2;
                    let mut out = vec![0.0; out_c * out_s * out_s];
                    for c in 0..out_c {
                        for y in 0..out_s {
                            for x in 0..out_s {
                                out[(c * out_s + y) * out_s + x] = inp[(c * half + y / 2) * half + x / 2];
                            }
                        }
                    }
                    out
                }
                Op::Concat { a, b } => {
                    let mut out = tape.values[a].clone();
                    out.extend_from_slice(&tape.values[b]);
                    out
                }
            };
            tape.values.push(value);
            tape.cols.push(cols);
        }
        if !keep {
            // drop intermediates early; only the output is needed
            let last = tape.values.pop().unwrap_or_default();
            tape.values = vec![last];
        }
        tape
    }

    /// Accumulates `∂L/∂w` into `grad` given `∂L/∂output`.
    fn backward(&self, weights: &[f64], tape: &Tape, g_out: Vec<f64>, grad: &mut [f64]) {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.shapes.len()];
        grads[self.shapes.len() - 1] = Some(g_out);
        let add = |slot: &mut Option<Vec<f64>>, g: Vec<f64>| match slot {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        };
        for (i, op) in self.ops.iter().enumerate().rev() {
            let Some(mut g) = grads[i + 1].take() else {
                continue;
            };
            match *op {
                Op::Conv { src, layer } => {
                    let l = &self.layers[layer];
                    let hw = l.resolution * l.resolution;
                    let inner = l.in_channels * l.kernel * l.kernel;
                    l.activation.backward(&tape.values[i + 1], &mut g);
                    let off = self.offsets[layer];
                    let (gw, gb) = grad[off..off + l.param_len()].split_at_mut(l.weight_len());
                    for (o, gb) in gb.iter_mut().enumerate() {
                        *gb += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                    let cols: &[f64] = match &tape.cols[i] {
                        Some(c) => c,
                        None => &tape.values[src],
                    };
                    gemm(l.out_channels, hw, inner, &g, false, cols, true, 1.0, gw);
                    if src == 0 {
                        continue;
                    }
                    let wt = &weights[off..off + l.weight_len()];
                    let mut dcols = vec![0.0; inner * hw];
                    gemm(inner, l.out_channels, hw, wt, true, &g, false, 0.0, &mut dcols);
                    let d = if l.kernel == 1 {
                        dcols
                    } else {
                        let mut d = vec![0.0; l.in_channels * hw];
                        col2im(&dcols, l.in_channels, l.resolution, l.kernel, &mut d);
                        d
                    };
                    add(&mut grads[src], d);
                }
                Op::Pool { src } => {
                    let (c_n, s) = self.shapes[i + 1];
                    let s2 = 2 * s;
                    let mut d = vec![0.0; c_n * s2 * s2];
                    for c in 0..c_n {
                        for y in 0..s {
                            for x in 0..s {
                                let v = 0.25 * g[(c * s + y) * s + x];
                                let base = c * s2 * s2 + 2 * y * s2 + 2 * x;
                                d[base] = v;
                                d[base + 1] = v;
                                d[base + s2] = v;
                                d[base + s2 + 1] = v;
                            }
                        }
                    }
                    if src != 0 {
                        add(&mut grads[src], d);
                    }
                }
                Op::Up { src } => {
                    let (c_n, s) = self.shapes[i + 1];
                    let half = s / 2;
                    let mut d = vec![0.0; c_n * half * half];
                    for c in 0..c_n {
                        for y in 0..s {
                            for x in 0..s {
                                d[(c * half + y / 2) * half + x / 2] += g[(c * s + y) * s + x];
                            }
                        }
                    }
                    add(&mut grads[src], d);
                }
                Op::Concat { a, b } => {
                    let split = tape.values[a].len();
                    let gb = g.split_off(split);
                    add(&mut grads[a], g);
                    add(&mut grads[b], gb);
                }
            }
        }
    }
}

/// Architecture, flat weights in descriptor order (per layer: the
/// `out × in × k × k` kernel, then the biases), and the truncation the
/// network was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// Checksum of the factors the network was trained against; 0 if unbound.
    pub factors_checksum: u64,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: Architecture,
    layers: Vec<LayerShape>,
    param_count: usize,
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let n = arch.param_count();
        Ok(NetworkParams {
            arch,
            weights: vec![0.0; n],
            alpha: 0.0,
            factors_checksum: 0,
        })
    }

    /// He-style uniform initialization, `w ~ U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`; biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let prog = p.arch.compile();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, &off) in prog.layers.iter().zip(&prog.offsets) {
            let bound = (6.0 / (l.in_channels * l.kernel * l.kernel) as f64).sqrt();
            for w in &mut p.weights[off..off + l.weight_len()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    /// Head-only network computing the identity.
    pub fn identity(side: usize) -> Self {
        NetworkParams {
            arch: Architecture::head_only(side),
            weights: vec![1.0, 0.0],
            alpha: 0.0,
            factors_checksum: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Records the truncation this network belongs to.
    pub fn bind(&mut self, f: &SvdFactors, policy: &TruncationPolicy) {
        self.alpha = policy.alpha;
        self.factors_checksum = f.checksum();
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.update(serde_json::to_string(&self.arch).unwrap_or_default().as_bytes());
        h.update_f64s(&self.weights);
        h.update_f64s(&[self.alpha]);
        h.update(&self.factors_checksum.to_le_bytes());
        h.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let prog = self.arch.compile();
        let desc = Descriptor {
            arch: self.arch.clone(),
            layers: prog.layers,
            param_count: prog.param_count,
        };
        let mut w = ContainerWriter::create(path, NETWORK_MAGIC)?;
        w.text(&serde_json::to_string(&desc)?)?;
        w.f64s(&self.weights)?;
        w.f64(self.alpha)?;
        w.u64(self.factors_checksum)?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ContainerReader::open(path, NETWORK_MAGIC)?;
        let desc: Descriptor = serde_json::from_str(&r.text()?)?;
        desc.arch.validate()?;
        let prog = desc.arch.compile();
        if prog.param_count != desc.param_count || prog.layers != desc.layers {
            return Err(Error::container(path, "layer descriptors disagree with architecture"));
        }
        let weights = r.f64s(desc.param_count)?;
        let alpha = r.f64()?;
        let factors_checksum = r.u64()?;
        r.expect_end()?;
        let p = NetworkParams {
            arch: desc.arch,
            weights,
            alpha,
            factors_checksum,
        };
        if !p.is_finite() {
            return Err(Error::container(path, "non-finite weights"));
        }
        Ok(p)
    }

    fn check(&self, z_len: usize) -> Result<Program> {
        let prog = self.arch.compile();
        check_len("network weights", prog.param_count, self.weights.len())?;
        check_len("network input", self.arch.side * self.arch.side, z_len)?;
        Ok(prog)
    }
}

/// `U z`, without projection.
pub fn network_forward(params: &NetworkParams, z: &CoefficientImage) -> Result<CoefficientImage> {
    let prog = params.check(z.values.len())?;
    let mut tape = prog.forward(&params.weights, &z.values, false);
    Ok(CoefficientImage {
        side: z.side,
        values: tape.values.pop().unwrap_or_default(),
    })
}

/// `Φ_α z = P_α U z`.
pub fn projected_forward(
    params: &NetworkParams,
    f: &SvdFactors,
    policy: &TruncationPolicy,
    z: &CoefficientImage,
) -> Result<CoefficientImage> {
    let mut out = network_forward(params, z)?;
    complement_project_in_place(f, policy.kept, &mut out.values)?;
    Ok(out)
}

/// `R_α y = B_α y + Φ_α(B_α y)`.
pub fn reconstruct(
    params: &NetworkParams,
    f: &SvdFactors,
    policy: &TruncationPolicy,
    y: &Measurement,
) -> Result<CoefficientImage> {
    let mut z = tsvd_apply(f, policy, y)?;
    let phi = projected_forward(params, f, policy, &z)?;
    z.values.iter_mut().zip(&phi.values).for_each(|(a, b)| *a += b);
    Ok(z)
}

/// A training pair in the form the loss needs: `z = B_α y` and the residual
/// target `x - z` the projected network should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub z: Vec<f64>,
    pub target: Vec<f64>,
}

impl TrainingPair {
    pub fn new(f: &SvdFactors, policy: &TruncationPolicy, sample: &Sample) -> Result<Self> {
        let z = tsvd_apply(f, policy, &sample.y)?.values;
        check_len("training target", z.len(), sample.x.values.len())?;
        let target = sample.x.values.iter().zip(&z).map(|(x, z)| x - z).collect();
        Ok(TrainingPair { z, target })
    }
}

pub fn training_pairs(f: &SvdFactors, policy: &TruncationPolicy, samples: &[Sample]) -> Result<Vec<TrainingPair>> {
    samples.iter().map(|s| TrainingPair::new(f, policy, s)).collect()
}

/// `‖target - P U z‖²` and its gradient added into `grad`.
fn pair_loss(
    prog: &Program,
    weights: &[f64],
    f: &SvdFactors,
    kept: usize,
    pair: &TrainingPair,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let tape = prog.forward(weights, &pair.z, grad.is_some());
    let mut r = tape.values.last().cloned().unwrap_or_default();
    complement_project_in_place(f, kept, &mut r)?;
    r.iter_mut().zip(&pair.target).for_each(|(p, t)| *p = t - *p);
    let loss = r.iter().map(|v| v * v).sum::<f64>();
    if let Some(grad) = grad {
        // P is self-adjoint, so ∂/∂(U z) of ‖t - P U z‖² is -2 P r
        complement_project_in_place(f, kept, &mut r)?;
        r.iter_mut().for_each(|v| *v *= -2.0);
        prog.backward(weights, &tape, r, grad);
    }
    Ok(loss)
}

/// Mean loss over `pairs` and its gradient. Per-sample results are reduced
/// in index order, so the outcome does not depend on the thread count.
pub fn pairs_loss_and_gradient(
    params: &NetworkParams,
    f: &SvdFactors,
    policy: &TruncationPolicy,
    pairs: &[TrainingPair],
    parallel: bool,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let prog = params.check(pairs[0].z.len())?;
    let n = prog.param_count;
    let one = |(i, p): (usize, &TrainingPair)| -> Result<(f64, Vec<f64>)> {
        check_len("training pair", pairs[0].z.len(), p.z.len())?;
        let mut g = vec![0.0; n];
        let l = pair_loss(&prog, &params.weights, f, policy.kept, p, Some(&mut g))?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        Ok((l, g))
    };
    let parts: Vec<(f64, Vec<f64>)> = if parallel {
        pairs.par_iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        pairs.iter().enumerate().map(one).collect::<Result<_>>()?
    };
    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (l, g) in &parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Mean over the batch of `‖x_n - R_α y_n‖²` and its weight gradient.
pub fn loss_and_gradient(
    params: &NetworkParams,
    batch: &[Sample],
    f: &SvdFactors,
    policy: &TruncationPolicy,
) -> Result<(f64, Vec<f64>)> {
    let pairs = training_pairs(f, policy, batch)?;
    pairs_loss_and_gradient(params, f, policy, &pairs, true)
}

fn pairs_loss(params: &NetworkParams, f: &SvdFactors, policy: &TruncationPolicy, pairs: &[TrainingPair]) -> Result<f64> {
    let prog = params.check(pairs[0].z.len())?;
    let mut total = 0.0;
    for p in pairs {
        total += pair_loss(&prog, &params.weights, f, policy.kept, p, None)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Step size for the per-pixel mean squared error. The loss `E` sums
    /// over the `N²` pixels, so updates use `learning_rate / N²` times `∇E`.
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub activation: Activation,
    /// Accept training sets with noisy data.
    pub noisy_training: bool,
    /// Evaluate batch samples on the rayon pool. Results are identical
    /// either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            learning_rate: 0.01,
            momentum: 0.99,
            batch_size: 8,
            seed: 0,
            channels: vec![16, 32, 64],
            kernel: 3,
            activation: Activation::Relu,
            noisy_training: false,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter("learning rate must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, side: usize) -> Architecture {
        Architecture {
            side,
            channels: self.channels.clone(),
            kernel: self.kernel,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    /// Mean per-sample loss of each epoch, measured on the batches as they
    /// were visited.
    pub loss_trace: Vec<f64>,
}

/// Trains a freshly initialized network on a noise-free training set.
pub fn train(
    dataset: &Dataset,
    f: &SvdFactors,
    policy: &TruncationPolicy,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.role != Role::Train {
        return Err(Error::RoleViolation(format!(
            "training requires a train dataset, got {}",
            dataset.role
        )));
    }
    if dataset.noise_fraction != 0.0 && !config.noisy_training {
        return Err(Error::InvalidParameter(
            "training data must be noise-free unless noisy training is enabled".into(),
        ));
    }
    let init = NetworkParams::init(
        config.architecture(dataset.grid.side),
        derive_seed(config.seed, "init", 0),
    )?;
    let pairs = training_pairs(f, policy, &dataset.samples)?;
    train_pairs(init, f, policy, &pairs, config)
}

/// SGD with classical momentum from `params`:
/// `v ← μ v - (lr / N²) ∇E`, `w ← w + v`, over freshly shuffled batches
/// each epoch.
pub fn train_pairs(
    mut params: NetworkParams,
    f: &SvdFactors,
    policy: &TruncationPolicy,
    pairs: &[TrainingPair],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let step = config.learning_rate / pairs[0].z.len() as f64;
    let mut velocity = vec![0.0; params.weights.len()];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "shuffle", epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainingPair> = idx.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, grad) = match pairs_loss_and_gradient(&params, f, policy, &batch, config.parallel) {
                Ok(v) => v,
                Err(Error::NonFiniteLoss { .. }) => return Err(Error::Divergence { epoch, batch: b }),
                Err(e) => return Err(e),
            };
            epoch_loss += loss * idx.len() as f64;
            for ((w, v), g) in params.weights.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v - step * g;
                *w += *v;
            }
            if !params.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
        }
        trace.push(epoch_loss / pairs.len() as f64);
    }
    params.bind(f, policy);
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    /// Largest `|g_bp - g_fd| / max(|g_bp|, |g_fd|, floor)` seen, where
    /// `floor = 1e-6 · max_j |g_bp,j|` guards exactly-flat coordinates.
    pub max_deviation: f64,
    pub worst_coordinate: usize,
    pub coordinates: Vec<usize>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the backpropagated gradient of the mean loss over `pairs`
/// against central differences with step `step` on `count` random
/// coordinates.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    params: &NetworkParams,
    f: &SvdFactors,
    policy: &TruncationPolicy,
    pairs: &[TrainingPair],
    count: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradientReport> {
    let (_, grad) = pairs_loss_and_gradient(params, f, policy, pairs, false)?;
    let n = grad.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coordinates: Vec<usize> = (0..n).collect();
    coordinates.shuffle(&mut rng);
    coordinates.truncate(count.min(n));
    let floor = 1e-6 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut probe = params.clone();
    let mut worst = (0.0f64, coordinates.first().copied().unwrap_or(0));
    for &j in &coordinates {
        let w = params.weights[j];
        probe.weights[j] = w + step;
        let up = pairs_loss(&probe, f, policy, pairs)?;
        probe.weights[j] = w - step;
        let down = pairs_loss(&probe, f, policy, pairs)?;
        probe.weights[j] = w;
        let fd = (up - down) / (2.0 * step);
        let denom = grad[j].abs().max(fd.abs()).max(floor);
        let dev = if denom > 0.0 { (grad[j] - fd).abs() / denom } else { 0.0 };
        if dev > worst.0 || dev.is_nan() {
            worst = (dev, j);
        }
    }
    Ok(GradientReport {
        max_deviation: worst.0,
        worst_coordinate: worst.1,
        coordinates,
        tolerance,
        passed: worst.0 <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(side: usize, seed: u64) -> CoefficientImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CoefficientImage {
            side,
            values: (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct nested-loop convolution for checking im2col + gemm.
    fn naive_conv(inp: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
        let cout = b.len();
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; cout * side * side];
        for o in 0..cout {
            for y in 0..side {
                for x in 0..side {
                    let mut acc = b[o];
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side {
                                    acc += w[((o * cin + c) * k + ky) * k + kx]
                                        * inp[(c * side + sy as usize) * side + sx as usize];
                                }
                            }
                        }
                    }
                    out[(o * side + y) * side + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn convolution_matches_direct_loops() {
        let arch = Architecture {
            side: 5,
            channels: vec![3],
            kernel: 3,
            activation: Activation::Identity,
        };
        let p = NetworkParams::init(arch, 4).unwrap();
        let prog = p.arch.compile();
        let z = random_image(5, 1);
        let tape = prog.forward(&p.weights, &z.values, true);
        let l = prog.layers[0];
        let w = &p.weights[..l.param_len()];
        let (wt, b) = w.split_at(l.weight_len());
        let want = naive_conv(&z.values, 1, 5, wt, b, 3);
        for (a, e) in tape.values[1].iter().zip(&want) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weights_give_zero_and_identity_head_copies() {
        let z = random_image(8, 2);
        let p = NetworkParams::zeros(Architecture::unet(8)).unwrap();
        assert!(network_forward(&p, &z).unwrap().values.iter().all(|v| *v == 0.0));
        let id = NetworkParams::identity(8);
        assert_eq!(network_forward(&id, &z).unwrap(), z);
    }

    #[test]
    fn descriptor_and_param_count() {
        let a = Architecture::unet(32);
        let layers = a.layers();
        assert_eq!(layers.len(), 11);
        assert_eq!(layers[0].in_channels, 1);
        assert_eq!(layers[6].in_channels, 64 + 32);
        assert_eq!(layers[8].in_channels, 32 + 16);
        assert_eq!(layers[10].out_channels, 1);
        let expected: usize = layers.iter().map(|l| l.param_len()).sum();
        assert_eq!(a.param_count(), expected);
        assert!(Architecture::unet(30).validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let p = NetworkParams::init(Architecture::unet(8), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        p.save(&path).unwrap();
        assert_eq!(NetworkParams::load(&path).unwrap(), p);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[6] = 2;
        std::fs::write(&path, bytes).unwrap();
        assert!(NetworkParams::load(&path).is_err());
    }

    fn factors(side: usize, rows: usize) -> SvdFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = side * side;
        let a = nalgebra::DMatrix::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
        crate::svd::factorize_dense(&a, 1e-12, crate::svd::SvdBackend::Deterministic).unwrap()
    }

    fn pairs(side: usize, count: usize) -> Vec<TrainingPair> {
        (0..count as u64)
            .map(|s| TrainingPair {
                z: random_image(side, 10 + s).values,
                target: random_image(side, 20 + s).values,
            })
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let f = factors(8, 40);
        let policy = TruncationPolicy::from_kept(&f, 12).unwrap();
        let ps = pairs(8, 2);
        for act in [Activation::Relu, Activation::Tanh] {
            let arch = Architecture {
                side: 8,
                channels: vec![4, 6],
                kernel: 3,
                activation: act,
            };
            let mut p = NetworkParams::init(arch, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            p.weights.iter_mut().for_each(|w| *w += 0.05 * rng.random_range(-1.0..1.0));
            let r = gradient_check(&p, &f, &policy, &ps, 50, 1e-5, 1e-4, 3).unwrap();
            assert!(r.passed, "{act:?}: {r:?}");
        }
        let lin = Architecture {
            side: 8,
            channels: vec![3, 2],
            kernel: 3,
            activation: Activation::Identity,
        };
        let p = NetworkParams::init(lin, 8).unwrap();
        let r = gradient_check(&p, &f, &policy, &ps, 50, 1e-5, 1e-8, 4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn single_weight_head_gradient_is_closed_form() {
        // U z = w z + b with P the complement projector:
        // E(w) = ‖t - w P z - b P 1‖², dE/dw = -2 ⟨P z, t - w P z - b P 1⟩.
        let f = factors(4, 10);
        let policy = TruncationPolicy::from_kept(&f, 3).unwrap();
        let pair = &pairs(4, 1)[0];
        let mut p = NetworkParams::identity(4);
        p.weights = vec![0.7, 0.2];
        let (_, g) = pairs_loss_and_gradient(&p, &f, &policy, std::slice::from_ref(pair), false).unwrap();
        let mut pz = pair.z.clone();
        complement_project_in_place(&f, 3, &mut pz).unwrap();
        let mut p1 = vec![1.0; 16];
        complement_project_in_place(&f, 3, &mut p1).unwrap();
        let r: Vec<f64> = (0..16).map(|i| pair.target[i] - 0.7 * pz[i] - 0.2 * p1[i]).collect();
        let gw = -2.0 * pz.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let gb = -2.0 * p1.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        assert!((g[0] - gw).abs() <= 1e-12 * gw.abs().max(1.0));
        assert!((g[1] - gb).abs() <= 1e-12 * gb.abs().max(1.0));
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let f = factors(8, 40);
        let policy = TruncationPolicy::from_kept(&f, 12).unwrap();
        let ps = pairs(8, 5);
        let arch = Architecture {
            side: 8,
            channels: vec![2, 2],
            kernel: 3,
            activation: Activation::Relu,
        };
        let p = NetworkParams::init(arch, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train_pairs(p.clone(), &f, &policy, &ps, &cfg).unwrap();
        assert_eq!(out.params.weights, p.weights);
        for l in &out.loss_trace {
            assert!((l - out.loss_trace[0]).abs() <= 1e-12 * out.loss_trace[0]);
        }
    }
}
