//! Reverse-mode autodiff over single-sample tensors.
//!
//! A [`Tape`] records one sample's computation. Parameters are read in place from
//! bound [`ParamVector`]s; [`Tape::backward`] returns per-slot gradients that the
//! caller adds into whichever vectors it is training. Every network in this crate
//! treats samples independently, so batches are sequences of tapes and the order in
//! which per-sample gradients are summed is fixed by the caller.

use super::params::ParamVector;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Geometry of a 2-D convolution and where its weights live in a parameter vector.
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub w_off: usize,
    pub b_off: Option<usize>,
}

impl ConvGeom {
    pub fn n_weights(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.pad, w + 2 * self.pad);
        if hp < self.k || wp < self.k {
            return None;
        }
        Some(((hp - self.k) / self.stride + 1, (wp - self.k) / self.stride + 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGeom {
    pub in_len: usize,
    pub out_len: usize,
    pub w_off: usize,
    pub b_off: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param { slot: usize, off: usize },
    Conv { x: usize, slot: usize, g: ConvGeom },
    Linear { x: usize, slot: usize, g: LinearGeom },
    InstanceNorm { x: usize, inv_std: Vec<f64> },
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Upsample2(usize),
    AvgPool(usize, usize),
    Mean(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Vec<&'p ParamVector>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    pub fn bind(&mut self, params: &'p ParamVector) -> Slot {
        self.params.push(params);
        Slot(self.params.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Exposes `len` parameters starting at `off` as a vector node.
    pub fn param(&mut self, slot: Slot, off: usize, len: usize) -> Result<Var> {
        let p = self.params[slot.0];
        if off + len > p.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter range {off}..{} exceeds `{}` ({} values)",
                off + len,
                p.name,
                p.len()
            )));
        }
        let t = Tensor::vector(p.values[off..off + len].to_vec());
        Ok(self.push(t, Op::Param { slot: slot.0, off }))
    }

    pub fn conv(&mut self, x: Var, slot: Slot, g: ConvGeom) -> Result<Var> {
        let xin = &self.nodes[x.0].value;
        if xin.c != g.in_c {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                g.in_c, xin.c
            )));
        }
        if g.mode == PadMode::Reflect && (g.pad >= xin.h || g.pad >= xin.w) {
            return Err(Error::Shape(format!(
                "reflection pad {} too large for {}x{} input",
                g.pad, xin.h, xin.w
            )));
        }
        let (ho, wo) = g.out_hw(xin.h, xin.w).ok_or_else(|| {
            Error::Shape(format!("kernel {} larger than padded {}x{} input", g.k, xin.h, xin.w))
        })?;
        let p = self.params[slot.0];
        let need = g.w_off + g.n_weights();
        if need > p.len() || g.b_off.is_some_and(|b| b + g.out_c > p.len()) {
            return Err(Error::InvalidArgument(format!("conv weights exceed `{}`", p.name)));
        }
        let padded = pad(xin, g.pad, g.mode);
        let out = conv_forward(&padded, &p.values, &g, ho, wo);
        Ok(self.push(out, Op::Conv { x: x.0, slot: slot.0, g }))
    }

    pub fn linear(&mut self, x: Var, slot: Slot, g: LinearGeom) -> Result<Var> {
        let xin = &self.nodes[x.0].value;
        if xin.len() != g.in_len {
            return Err(Error::Shape(format!(
                "linear expects {} inputs, got {}",
                g.in_len,
                xin.len()
            )));
        }
        let p = self.params[slot.0];
        if g.w_off + g.in_len * g.out_len > p.len() || g.b_off + g.out_len > p.len() {
            return Err(Error::InvalidArgument(format!("linear weights exceed `{}`", p.name)));
        }
        let w = &p.values[g.w_off..g.w_off + g.in_len * g.out_len];
        let b = &p.values[g.b_off..g.b_off + g.out_len];
        let out: Vec<f64> = (0..g.out_len)
            .map(|o| {
                let row = &w[o * g.in_len..(o + 1) * g.in_len];
                b[o] + row.iter().zip(&xin.data).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::Linear { x: x.0, slot: slot.0, g }))
    }

    /// Per-channel normalization over the spatial extent, no affine terms.
    pub fn instance_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xin = &self.nodes[x.0].value;
        let plane = xin.h * xin.w;
        let mut out = xin.clone();
        let mut inv_std = Vec::with_capacity(xin.c);
        for c in 0..xin.c {
            let chunk = &mut out.data[c * plane..(c + 1) * plane];
            let mean = chunk.iter().sum::<f64>() / plane as f64;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::InstanceNorm { x: x.0, inv_std })
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x.0, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.data.iter_mut().zip(&tb.data).for_each(|(x, y)| *x += y);
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        out.data.iter_mut().zip(&tb.data).for_each(|(x, y)| *x *= y);
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xin = &self.nodes[x.0].value;
        let (h, w) = (xin.h * 2, xin.w * 2);
        let mut out = Tensor::zeros(xin.c, h, w);
        for c in 0..xin.c {
            for y in 0..h {
                for xx in 0..w {
                    out.data[(c * h + y) * w + xx] = xin.data[(c * xin.h + y / 2) * xin.w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x.0))
    }

    /// Area averaging over non-overlapping `f×f` blocks.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let xin = &self.nodes[x.0].value;
        if f == 0 || xin.h % f != 0 || xin.w % f != 0 {
            return Err(Error::Shape(format!(
                "cannot area-downsample {}x{} by {f}",
                xin.h, xin.w
            )));
        }
        if f == 1 {
            let out = xin.clone();
            return Ok(self.push(out, Op::AvgPool(x.0, 1)));
        }
        let (h, w) = (xin.h / f, xin.w / f);
        let mut out = Tensor::zeros(xin.c, h, w);
        let norm = 1.0 / (f * f) as f64;
        for c in 0..xin.c {
            for y in 0..xin.h {
                for xx in 0..xin.w {
                    out.data[(c * h + y / f) * w + xx / f] += xin.data[(c * xin.h + y) * xin.w + xx] * norm;
                }
            }
        }
        Ok(self.push(out, Op::AvgPool(x.0, f)))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xin = &self.nodes[x.0].value;
        let m = xin.data.iter().sum::<f64>() / xin.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x.0))
    }

    /// Propagates the seeded output gradients back through the record.
    ///
    /// A tape can be differentiated once; a second call fails with
    /// [`Error::RecordConsumed`].
    pub fn backward(&mut self, seeds: &[(Var, &[f64])]) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            let n = self.nodes[v.0].value.len();
            if g.len() != n {
                return Err(Error::length("seed gradient", g.len(), n));
            }
            accumulate(&mut grads[v.0], g);
        }
        let mut slot_grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut leaf_grads = Vec::new();

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => leaf_grads.push((Var(idx), g)),
                Op::Param { slot, off } => {
                    let dst = &mut slot_grads[*slot][*off..*off + g.len()];
                    dst.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Conv { x, slot, g: geom } => {
                    let xin = &self.nodes[*x].value;
                    let padded = pad(xin, geom.pad, geom.mode);
                    let dpadded = conv_backward(
                        &padded,
                        &self.params[*slot].values,
                        &mut slot_grads[*slot],
                        geom,
                        &node.value,
                        &g,
                    );
                    let dx = unpad(&dpadded, xin, geom.pad, geom.mode);
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Linear { x, slot, g: geom } => {
                    let xin = &self.nodes[*x].value;
                    let w = &self.params[*slot].values;
                    let mut dx = vec![0.0; geom.in_len];
                    let sg = &mut slot_grads[*slot];
                    for o in 0..geom.out_len {
                        let go = g[o];
                        sg[geom.b_off + o] += go;
                        let wrow = geom.w_off + o * geom.in_len;
                        for i in 0..geom.in_len {
                            sg[wrow + i] += go * xin.data[i];
                            dx[i] += go * w[wrow + i];
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = &node.value;
                    let plane = y.h * y.w;
                    let n = plane as f64;
                    let mut dx = vec![0.0; y.len()];
                    for c in 0..y.c {
                        let ys = &y.data[c * plane..(c + 1) * plane];
                        let gs = &g[c * plane..(c + 1) * plane];
                        let sum_g: f64 = gs.iter().sum();
                        let sum_gy: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                        for i in 0..plane {
                            dx[c * plane + i] = inv_std[c] * (gs[i] - sum_g / n - ys[i] * sum_gy / n);
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Relu(x) => {
                    let xin = &self.nodes[*x].value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&xin.data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*x], &dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let xin = &self.nodes[*x].value;
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&xin.data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { slope * g })
                        .collect();
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&node.value.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da: Vec<f64> = g.iter().zip(&vb.data).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = g.iter().zip(&va.data).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Upsample2(x) => {
                    let xin = &self.nodes[*x].value;
                    let (h, w) = (node.value.h, node.value.w);
                    let mut dx = vec![0.0; xin.len()];
                    for c in 0..xin.c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[(c * xin.h + y / 2) * xin.w + xx / 2] += g[(c * h + y) * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::AvgPool(x, f) => {
                    let xin = &self.nodes[*x].value;
                    let (h, w) = (node.value.h, node.value.w);
                    let norm = 1.0 / (f * f) as f64;
                    let mut dx = vec![0.0; xin.len()];
                    for c in 0..xin.c {
                        for y in 0..xin.h {
                            for xx in 0..xin.w {
                                dx[(c * xin.h + y) * xin.w + xx] = g[(c * h + y / f) * w + xx / f] * norm;
                            }
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].value.len();
                    let dx = vec![g[0] / n as f64; n];
                    accumulate(&mut grads[*x], &dx);
                }
            }
        }
        Ok(Gradients {
            slots: slot_grads,
            leaves: leaf_grads,
        })
    }
}

fn accumulate(dst: &mut Option<Vec<f64>>, g: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *dst = Some(g.to_vec()),
    }
}

/// Parameter and input gradients produced by one [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Vec<f64>>,
    leaves: Vec<(Var, Vec<f64>)>,
}

impl Gradients {
    pub fn slot(&self, slot: Slot) -> &[f64] {
        &self.slots[slot.0]
    }

    /// Adds this record's gradient for `slot` into `params.grads`.
    pub fn accumulate_into(&self, slot: Slot, params: &mut ParamVector) -> Result<()> {
        params.add_grads(&self.slots[slot.0])
    }

    /// Gradient reaching an input leaf, if any flowed there.
    pub fn input(&self, v: Var) -> Option<&[f64]> {
        self.leaves
            .iter()
            .find(|(var, _)| *var == v)
            .map(|(_, g)| g.as_slice())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn pad(x: &Tensor, p: usize, mode: PadMode) -> Tensor {
    if p == 0 {
        return x.clone();
    }
    let (hp, wp) = (x.h + 2 * p, x.w + 2 * p);
    let mut out = Tensor::zeros(x.c, hp, wp);
    for c in 0..x.c {
        for y in 0..hp {
            for xx in 0..wp {
                let sy = y as isize - p as isize;
                let sx = xx as isize - p as isize;
                let v = match mode {
                    PadMode::Zero => {
                        if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                            continue;
                        }
                        x.data[(c * x.h + sy as usize) * x.w + sx as usize]
                    }
                    PadMode::Reflect => {
                        x.data[(c * x.h + reflect(sy, x.h)) * x.w + reflect(sx, x.w)]
                    }
                };
                out.data[(c * hp + y) * wp + xx] = v;
            }
        }
    }
    out
}

/// Folds a gradient w.r.t. the padded input back onto the original input.
fn unpad(dp: &[f64], x: &Tensor, p: usize, mode: PadMode) -> Vec<f64> {
    if p == 0 {
        return dp.to_vec();
    }
    let (hp, wp) = (x.h + 2 * p, x.w + 2 * p);
    let mut dx = vec![0.0; x.len()];
    for c in 0..x.c {
        for y in 0..hp {
            for xx in 0..wp {
                let sy = y as isize - p as isize;
                let sx = xx as isize - p as isize;
                let (ty, tx) = match mode {
                    PadMode::Zero => {
                        if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                            continue;
                        }
                        (sy as usize, sx as usize)
                    }
                    PadMode::Reflect => (reflect(sy, x.h), reflect(sx, x.w)),
                };
                dx[(c * x.h + ty) * x.w + tx] += dp[(c * hp + y) * wp + xx];
            }
        }
    }
    dx
}

/// Unrolls every receptive field of the padded input into a column:
/// `cols[(i·k + ky)·k + kx][y·wo + x] = p[i][y·s + ky][x·s + kx]`.
fn im2col(p: &Tensor, g: &ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let (k, s) = (g.k, g.stride);
    let hw = ho * wo;
    let mut cols = vec![0.0; g.in_c * k * k * hw];
    for i in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((i * k + ky) * k + kx) * hw..][..hw];
                for y in 0..ho {
                    let src = &p.data[(i * p.h + y * s + ky) * p.w + kx..];
                    let dst = &mut row[y * wo..(y + 1) * wo];
                    if s == 1 {
                        dst.copy_from_slice(&src[..wo]);
                    } else {
                        for (x, d) in dst.iter_mut().enumerate() {
                            *d = src[x * s];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, hp: usize, wp: usize, ho: usize, wo: usize) -> Vec<f64> {
    let (k, s) = (g.k, g.stride);
    let hw = ho * wo;
    let mut dp = vec![0.0; g.in_c * hp * wp];
    for i in 0..g.in_c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[((i * k + ky) * k + kx) * hw..][..hw];
                for y in 0..ho {
                    let base = (i * hp + y * s + ky) * wp + kx;
                    for x in 0..wo {
                        dp[base + x * s] += row[y * wo + x];
                    }
                }
            }
        }
    }
    dp
}

/// `c = alpha·a·b + beta·c` on row-major slices, `a: m×k`, `b: k×n`, with
/// optional transposition expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents asserted above.
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

fn conv_forward(p: &Tensor, params: &[f64], g: &ConvGeom, ho: usize, wo: usize) -> Tensor {
    let r = g.in_c * g.k * g.k;
    let hw = ho * wo;
    let cols = im2col(p, g, ho, wo);
    let mut out = Tensor::zeros(g.out_c, ho, wo);
    if let Some(b) = g.b_off {
        for o in 0..g.out_c {
            out.data[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = params[b + o]);
        }
    }
    let w = &params[g.w_off..g.w_off + g.out_c * r];
    let beta = if g.b_off.is_some() { 1.0 } else { 0.0 };
    gemm(g.out_c, r, hw, w, false, &cols, false, beta, &mut out.data);
    out
}

fn conv_backward(
    p: &Tensor,
    params: &[f64],
    pgrad: &mut [f64],
    g: &ConvGeom,
    out: &Tensor,
    dout: &[f64],
) -> Vec<f64> {
    let r = g.in_c * g.k * g.k;
    let (ho, wo) = (out.h, out.w);
    let hw = ho * wo;
    if let Some(b) = g.b_off {
        for o in 0..g.out_c {
            pgrad[b + o] += dout[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
    let cols = im2col(p, g, ho, wo);
    // dW += dout · colsᵀ
    gemm(g.out_c, hw, r, dout, false, &cols, true, 1.0, &mut pgrad[g.w_off..g.w_off + g.out_c * r]);
    // dcols = Wᵀ · dout
    let mut dcols = vec![0.0; r * hw];
    gemm(r, g.out_c, hw, &params[g.w_off..g.w_off + g.out_c * r], true, dout, false, 0.0, &mut dcols);
    col2im(&dcols, g, p.h, p.w, ho, wo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let theta = ParamVector::from_values("theta", vec![3.0]);
        let mut tape = Tape::new();
        let slot = tape.bind(&theta);
        let t = tape.param(slot, 0, 1).unwrap();
        let sq = tape.mul(t, t).unwrap();
        assert_eq!(tape.value(sq).item(), 9.0);
        let g = tape.backward(&[(sq, &[1.0])]).unwrap();
        assert_eq!(g.slot(slot), &[6.0]);
    }

    #[test]
    fn consumed_record_errors() {
        let theta = ParamVector::from_values("theta", vec![1.0]);
        let mut tape = Tape::new();
        let slot = tape.bind(&theta);
        let t = tape.param(slot, 0, 1).unwrap();
        tape.backward(&[(t, &[1.0])]).unwrap();
        assert!(matches!(tape.backward(&[(t, &[1.0])]), Err(Error::RecordConsumed)));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of weight 2 doubles the input
        let params = ParamVector::from_values("c", vec![2.0]);
        let geom = ConvGeom {
            in_c: 1,
            out_c: 1,
            k: 1,
            stride: 1,
            pad: 0,
            mode: PadMode::Zero,
            w_off: 0,
            b_off: None,
        };
        let mut tape = Tape::new();
        let slot = tape.bind(&params);
        let x = tape.input(Tensor::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.conv(x, slot, geom).unwrap();
        assert_eq!(tape.value(y).data, vec![2.0, 4.0, 6.0, 8.0]);
        let g = tape.backward(&[(y, &[1.0; 4])]).unwrap();
        assert_eq!(g.slot(slot), &[10.0]);
        assert_eq!(g.input(x).unwrap(), &[2.0; 4]);
    }
}
