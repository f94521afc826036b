//! Tape operations: forward kernels, the per-node backward rules, and the
//! matmul/conv inner loops everything else reduces to.
//!
//! Kernels accumulate (`+=`) into their output so the same code serves both
//! forward evaluation (into a zeroed buffer) and gradient accumulation.
//! Parallel paths split work by disjoint output rows/batches, so results are
//! bitwise independent of the thread schedule.

use std::sync::Arc;

use rayon::prelude::*;

use super::{sc, LinOp, Node, NodeId, Result, Scalar, Tape, TensorError};

/// Spatial padding for convolution and resizing.
///
/// `ZonalPeriodic` wraps the longitude (last) axis and zero-pads the latitude
/// axis — fields live on a sphere where east–west is periodic and the poles
/// are hard edges. `Zeros` zero-pads both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    ZonalPeriodic,
    Zeros,
}

/// Work threshold (multiply-accumulate count) above which kernels use the
/// rayon pool. Small ops stay single-threaded to avoid scheduling overhead.
const PAR_MACS: usize = 1 << 17;

// ── Matmul kernels ──────────────────────────────────────────────────────────

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &apk) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + apk * bj;
            }
        }
    };
    if m * n * k >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ   (dot-product form)
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, crow: &mut [S]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (x, y) in arow.iter().zip(brow) {
                acc = acc + *x * *y;
            }
            *cj = *cj + acc;
        }
    };
    if m * n * k >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
}

/// c[m×n] += a[l×m]ᵀ · b[l×n]   (outer-product accumulation over l)
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], l: usize, m: usize, n: usize, c: &mut [S]) {
    debug_assert_eq!(a.len(), l * m);
    debug_assert_eq!(b.len(), l * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |p: usize, crow: &mut [S]| {
        for i in 0..l {
            let aip = a[i * m + p];
            let brow = &b[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    };
    if m * n * l >= PAR_MACS && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(p, crow)| row(p, crow));
    } else {
        for (p, crow) in c.chunks_mut(n).enumerate() {
            row(p, crow);
        }
    }
}

// ── Convolution via im2col ──────────────────────────────────────────────────

/// Unfold x[cin, h, w] into col[cin·kh·kw, h·w] under the pad mode.
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: PadMode,
    col: &mut [S],
) {
    let hw = h * w;
    let (rh, rw) = (kh as isize / 2, kw as isize / 2);
    for ci in 0..cin {
        let xc = &x[ci * hw..(ci + 1) * hw];
        for dy in -rh..=rh {
            for dx in -rw..=rw {
                let krow = ci * kh * kw
                    + (dy + rh) as usize * kw
                    + (dx + rw) as usize;
                let out = &mut col[krow * hw..(krow + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        // Latitude out of range: zero in both pad modes.
                        continue;
                    }
                    let src_row = &xc[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut out[y * w..(y + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        let v = match pad {
                            PadMode::ZonalPeriodic => {
                                src_row[(sx.rem_euclid(w as isize)) as usize]
                            }
                            PadMode::Zeros => {
                                if sx < 0 || sx >= w as isize {
                                    S::zero()
                                } else {
                                    src_row[sx as usize]
                                }
                            }
                        };
                        dst_row[xx] = v;
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter col-gradients back onto the input.
fn col2im_accum<S: Scalar>(
    gcol: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: PadMode,
    gx: &mut [S],
) {
    let hw = h * w;
    let (rh, rw) = (kh as isize / 2, kw as isize / 2);
    for ci in 0..cin {
        let gxc = &mut gx[ci * hw..(ci + 1) * hw];
        for dy in -rh..=rh {
            for dx in -rw..=rw {
                let krow = ci * kh * kw
                    + (dy + rh) as usize * kw
                    + (dx + rw) as usize;
                let grow = &gcol[krow * hw..(krow + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dx;
                        let si = match pad {
                            PadMode::ZonalPeriodic => {
                                Some((sx.rem_euclid(w as isize)) as usize)
                            }
                            PadMode::Zeros => {
                                if sx < 0 || sx >= w as isize {
                                    None
                                } else {
                                    Some(sx as usize)
                                }
                            }
                        };
                        if let Some(si) = si {
                            let t = sy as usize * w + si;
                            gxc[t] = gxc[t] + grow[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

// ── Bilinear resize plan ────────────────────────────────────────────────────

/// Precomputed sparse interpolation: 4 taps (source index, weight) per output
/// pixel. Built in f64, stored in the tape's scalar type.
pub(crate) struct ResizePlan<S> {
    pub in_hw: usize,
    pub out_hw: usize,
    pub taps: Vec<([u32; 4], [S; 4])>,
}

impl<S: Scalar> ResizePlan<S> {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize, zonal_wrap: bool) -> Self {
        let mut taps = Vec::with_capacity(oh * ow);
        for oy in 0..oh {
            // Center-aligned sampling; latitude clamps at the poles.
            let sy = (oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            let y0f = sy.floor();
            let fy = sy - y0f;
            let y0 = (y0f as isize).clamp(0, h as isize - 1) as usize;
            let y1 = (y0f as isize + 1).clamp(0, h as isize - 1) as usize;
            for ox in 0..ow {
                let sx = (ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                let x0f = sx.floor();
                let fx = sx - x0f;
                let (x0, x1) = if zonal_wrap {
                    (
                        (x0f as isize).rem_euclid(w as isize) as usize,
                        (x0f as isize + 1).rem_euclid(w as isize) as usize,
                    )
                } else {
                    (
                        (x0f as isize).clamp(0, w as isize - 1) as usize,
                        (x0f as isize + 1).clamp(0, w as isize - 1) as usize,
                    )
                };
                let idx = [
                    (y0 * w + x0) as u32,
                    (y0 * w + x1) as u32,
                    (y1 * w + x0) as u32,
                    (y1 * w + x1) as u32,
                ];
                let wt = [
                    sc::<S>((1.0 - fy) * (1.0 - fx)),
                    sc::<S>((1.0 - fy) * fx),
                    sc::<S>(fy * (1.0 - fx)),
                    sc::<S>(fy * fx),
                ];
                taps.push((idx, wt));
            }
        }
        Self { in_hw: h * w, out_hw: oh * ow, taps }
    }
}

// ── Rule enum ───────────────────────────────────────────────────────────────

/// Per-channel statistics observed by a train-mode batch norm, needed by the
/// trainer to update running statistics.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub(crate) enum Rule<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    AddConst(NodeId),
    Recip(NodeId),
    Log(NodeId),
    Gelu(NodeId),
    LeakyRelu(NodeId, S),
    Swish(NodeId),
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Bmm { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    AddBias { x: NodeId, bias: NodeId },
    AddTiled { x: NodeId, t: NodeId },
    Reshape(NodeId),
    Gather { x: NodeId, idx: Arc<Vec<u32>> },
    Concat0 { a: NodeId, b: NodeId, split: usize },
    Softmax { x: NodeId, inner: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, inner: usize, mean: Vec<S>, rstd: Vec<S> },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        inner: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
        train: bool,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        pad: PadMode,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        kh: usize,
        kw: usize,
    },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    NearestUp2 { x: NodeId, h: usize, w: usize, c: usize },
    BilinearResize { x: NodeId, plan: Arc<ResizePlan<S>> },
    SumAll(NodeId),
    MeanAll(NodeId),
    WeightedSum { x: NodeId, w: Arc<Vec<S>> },
    AddScalar { x: NodeId, s: NodeId },
    MulScalar { x: NodeId, s: NodeId },
    AffinePerLevel { x: NodeId, scale: Arc<Vec<S>>, inner: usize },
    SegmentSum { x: NodeId, seg: Arc<Vec<u32>> },
    LinearMap { x: NodeId, op: Arc<dyn LinOp<S>>, batch: usize },
}

// ── Forward ops ─────────────────────────────────────────────────────────────

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Exact-enough GELU (tanh form): 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
#[inline]
fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = sc::<S>(0.7978845608028654); // √(2/π)
    let k = sc::<S>(0.044715);
    let u = c * (x + k * x * x * x);
    sc::<S>(0.5) * x * (S::one() + u.tanh())
}

#[inline]
fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = sc::<S>(0.7978845608028654);
    let k = sc::<S>(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + sc::<S>(3.0) * k * x * x);
    sc::<S>(0.5) * (S::one() + t) + sc::<S>(0.5) * x * (S::one() - t * t) * du
}

impl<S: Scalar> Tape<S> {
    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[a, b]), Rule::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x - *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[a, b]), Rule::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[a, b]), Rule::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| *v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, self.grad_of(&[x]), Rule::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: S) -> NodeId {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| *v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, self.grad_of(&[x]), Rule::AddConst(x))
    }

    /// Elementwise reciprocal. Errors on zero entries.
    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].data.iter().any(|v| *v == S::zero()) {
            return Err(TensorError::InvalidArgument("recip of zero".into()));
        }
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| S::one() / *v).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[x]), Rule::Recip(x)))
    }

    /// Natural log. Errors on non-positive entries.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x.0].data.iter().any(|v| *v <= S::zero()) {
            return Err(TensorError::InvalidArgument("log of non-positive value".into()));
        }
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[x]), Rule::Log(x)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| gelu_fwd(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, self.grad_of(&[x]), Rule::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: S) -> NodeId {
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .map(|v| if *v > S::zero() { *v } else { *v * slope })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, self.grad_of(&[x]), Rule::LeakyRelu(x, slope))
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| *v * sigmoid(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, self.grad_of(&[x]), Rule::Swish(x))
    }

    /// 2-D matrix product [m,k]·[k,n] → [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!("matmul {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![S::zero(); m * n];
        mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut data);
        Ok(self.push(data, vec![m, n], self.grad_of(&[a, b]), Rule::Matmul { a, b, m, k, n }))
    }

    /// Batched matrix product [B,m,k]·[B,k,n] → [B,m,n]; with `transpose_b`
    /// the second factor is [B,n,k].
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch(format!("bmm {sa:?} · {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let k_b = if transpose_b { sb[2] } else { sb[1] };
        if k_b != k {
            return Err(TensorError::ShapeMismatch(format!(
                "bmm inner dims {sa:?} · {sb:?} (transpose_b={transpose_b})"
            )));
        }
        let mut data = vec![S::zero(); batch * m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            let run = |bi: usize, out: &mut [S]| {
                let asl = &av[bi * m * k..(bi + 1) * m * k];
                let bsl = &bv[bi * k * n..(bi + 1) * k * n];
                if transpose_b {
                    mm_nt(asl, bsl, m, k, n, out);
                } else {
                    mm_nn(asl, bsl, m, k, n, out);
                }
            };
            if batch * m * n * k >= PAR_MACS && batch > 1 {
                data.par_chunks_mut(m * n).enumerate().for_each(|(bi, out)| run(bi, out));
            } else {
                for (bi, out) in data.chunks_mut(m * n).enumerate() {
                    run(bi, out);
                }
            }
        }
        Ok(self.push(
            data,
            vec![batch, m, n],
            self.grad_of(&[a, b]),
            Rule::Bmm { a, b, batch, m, k, n, transpose_b },
        ))
    }

    /// Broadcast-add a vector over the last axis.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = *self.nodes[x.0].shape.last().unwrap();
        if self.nodes[bias.0].shape != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias {:?} vs last axis {d}",
                self.nodes[bias.0].shape
            )));
        }
        let bv = self.nodes[bias.0].data.clone();
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| *v + bv[i % d])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[x, bias]), Rule::AddBias { x, bias }))
    }

    /// Add `t` cyclically: x.len must be a multiple of t.len. Backward sums
    /// gradient tiles into `t`.
    pub fn add_tiled(&mut self, x: NodeId, t: NodeId) -> Result<NodeId> {
        let tl = self.nodes[t.0].data.len();
        if tl == 0 || self.nodes[x.0].data.len() % tl != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "add_tiled: x len {} not a multiple of tile len {tl}",
                self.nodes[x.0].data.len()
            )));
        }
        let tv = self.nodes[t.0].data.clone();
        let data: Vec<S> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| *v + tv[i % tl])
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[x, t]), Rule::AddTiled { x, t }))
    }

    /// Reinterpret the buffer with a new shape of equal length (free).
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} → {shape:?}",
                self.nodes[x.0].shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(data, shape, self.grad_of(&[x]), Rule::Reshape(x)))
    }

    /// out[i] = x[idx[i]]. Backward scatter-adds, so indices may repeat.
    pub fn gather(&mut self, x: NodeId, idx: Arc<Vec<u32>>, shape: Vec<usize>) -> Result<NodeId> {
        if idx.len() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch(format!(
                "gather: {} indices vs shape {shape:?}",
                idx.len()
            )));
        }
        let n = self.nodes[x.0].data.len();
        if idx.iter().any(|&i| i as usize >= n) {
            return Err(TensorError::InvalidArgument("gather index out of range".into()));
        }
        let xv = &self.nodes[x.0].data;
        let data: Vec<S> = idx.iter().map(|&i| xv[i as usize]).collect();
        Ok(self.push(data, shape, self.grad_of(&[x]), Rule::Gather { x, idx }))
    }

    /// Axis permutation, implemented as a gather.
    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::InvalidArgument(format!(
                "permute {perm:?} invalid for rank {r}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        // Row-major strides of the input.
        let mut strides = vec![1usize; r];
        for d in (0..r.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        let n = self.nodes[x.0].data.len();
        let mut idx = Vec::with_capacity(n);
        let mut coord = vec![0usize; r];
        for _ in 0..n {
            let mut src = 0;
            for d in 0..r {
                src += coord[d] * strides[perm[d]];
            }
            idx.push(src as u32);
            // Increment out-shape odometer.
            for d in (0..r).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(x, Arc::new(idx), out_shape)
    }

    /// Concatenate along axis 0; trailing dimensions must match.
    pub fn concat0(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(TensorError::ShapeMismatch(format!("concat0 {sa:?} + {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let split = self.nodes[a.0].data.len();
        let mut data = Vec::with_capacity(split + self.nodes[b.0].data.len());
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        Ok(self.push(data, shape, self.grad_of(&[a, b]), Rule::Concat0 { a, b, split }))
    }

    /// Softmax over the last axis (max-shifted for stability).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let inner = *self.nodes[x.0].shape.last().unwrap();
        if inner == 0 {
            return Err(TensorError::InvalidArgument("softmax over empty axis".into()));
        }
        let mut data = self.nodes[x.0].data.clone();
        for row in data.chunks_mut(inner) {
            let mx = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[x]), Rule::Softmax { x, inner }))
    }

    /// Layer normalization over the last axis with learned scale/shift.
    /// Epsilon 1e-5 inside the root, matching common deep-learning practice.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let inner = *self.nodes[x.0].shape.last().unwrap();
        if self.nodes[gamma.0].shape != [inner] || self.nodes[beta.0].shape != [inner] {
            return Err(TensorError::ShapeMismatch(format!(
                "layer_norm scale/shift vs inner {inner}"
            )));
        }
        let eps = sc::<S>(1e-5);
        let rows = self.nodes[x.0].data.len() / inner;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = vec![S::zero(); self.nodes[x.0].data.len()];
        {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            let inv_n = S::one() / sc::<S>(inner as f64);
            for r in 0..rows {
                let xr = &xv[r * inner..(r + 1) * inner];
                let mu = xr.iter().fold(S::zero(), |a, &v| a + v) * inv_n;
                let var = xr.iter().fold(S::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_n;
                let rs = S::one() / (var + eps).sqrt();
                mean.push(mu);
                rstd.push(rs);
                let dr = &mut data[r * inner..(r + 1) * inner];
                for j in 0..inner {
                    dr[j] = (xr[j] - mu) * rs * gv[j] + bv[j];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            data,
            shape,
            self.grad_of(&[x, gamma, beta]),
            Rule::LayerNorm { x, gamma, beta, inner, mean, rstd },
        ))
    }

    /// Train-mode batch normalization over all but the leading (channel)
    /// axis, for channels-first inputs [C, ...]. Returns the observed batch
    /// statistics so the caller can maintain running averages.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BnStats<S>)> {
        let c = self.nodes[x.0].shape[0];
        let inner = self.nodes[x.0].data.len() / c;
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(TensorError::ShapeMismatch(format!("batch_norm scale/shift vs C={c}")));
        }
        let eps = sc::<S>(1e-5);
        let inv_n = S::one() / sc::<S>(inner as f64);
        let mut mean = Vec::with_capacity(c);
        let mut var = Vec::with_capacity(c);
        let mut rstd = Vec::with_capacity(c);
        let mut data = vec![S::zero(); self.nodes[x.0].data.len()];
        {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            for ci in 0..c {
                let xr = &xv[ci * inner..(ci + 1) * inner];
                let mu = xr.iter().fold(S::zero(), |a, &v| a + v) * inv_n;
                // Zero variance (e.g. constant channel) is epsilon-guarded.
                let vr = xr.iter().fold(S::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_n;
                let rs = S::one() / (vr + eps).sqrt();
                mean.push(mu);
                var.push(vr);
                rstd.push(rs);
                let dr = &mut data[ci * inner..(ci + 1) * inner];
                for j in 0..inner {
                    dr[j] = (xr[j] - mu) * rs * gv[ci] + bv[ci];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let id = self.push(
            data,
            shape,
            self.grad_of(&[x, gamma, beta]),
            Rule::BatchNorm { x, gamma, beta, inner, mean: mean.clone(), rstd, train: true },
        );
        Ok((id, BnStats { mean, var }))
    }

    /// Eval-mode batch normalization using fixed running statistics; a pure
    /// per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[S],
        running_var: &[S],
    ) -> Result<NodeId> {
        let c = self.nodes[x.0].shape[0];
        let inner = self.nodes[x.0].data.len() / c;
        if self.nodes[gamma.0].shape != [c]
            || self.nodes[beta.0].shape != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(TensorError::ShapeMismatch(format!("batch_norm_eval stats vs C={c}")));
        }
        let eps = sc::<S>(1e-5);
        let rstd: Vec<S> = running_var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
        let mut data = vec![S::zero(); self.nodes[x.0].data.len()];
        {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            for ci in 0..c {
                let xr = &xv[ci * inner..(ci + 1) * inner];
                let dr = &mut data[ci * inner..(ci + 1) * inner];
                for j in 0..inner {
                    dr[j] = (xr[j] - running_mean[ci]) * rstd[ci] * gv[ci] + bv[ci];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            data,
            shape,
            self.grad_of(&[x, gamma, beta]),
            Rule::BatchNorm {
                x,
                gamma,
                beta,
                inner,
                mean: running_mean.to_vec(),
                rstd,
                train: false,
            },
        ))
    }

    /// 2-D convolution, stride 1, odd kernel, output extent preserved.
    /// x: [Cin, H, W], w: [Cout, Cin, kh, kw], bias: [Cout].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        pad: PadMode,
    ) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch(format!("conv2d x {sx:?} w {sw:?}")));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "conv2d kernel must be odd, got {kh}x{kw}"
            )));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [cout] {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv2d bias {:?} vs Cout {cout}",
                    self.nodes[b.0].shape
                )));
            }
        }
        let hw = h * wd;
        let ckk = cin * kh * kw;
        let mut col = vec![S::zero(); ckk * hw];
        im2col(&self.nodes[x.0].data, cin, h, wd, kh, kw, pad, &mut col);
        let mut data = vec![S::zero(); cout * hw];
        mm_nn(&self.nodes[w.0].data, &col, cout, ckk, hw, &mut data);
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].data;
            for (co, chunk) in data.chunks_mut(hw).enumerate() {
                let bc = bv[co];
                for v in chunk {
                    *v = *v + bc;
                }
            }
        }
        let grad = self.grad_of(&[x, w]) || bias.map(|b| self.grad_of(&[b])).unwrap_or(false);
        Ok(self.push(
            data,
            vec![cout, h, wd],
            grad,
            Rule::Conv2d { x, w, bias, pad, cin, h, wd, cout, kh, kw },
        ))
    }

    /// 2×2 max pooling over even spatial extents: [C, H, W] → [C, H/2, W/2].
    pub fn max_pool_2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "max_pool_2x2 needs [C, even H, even W], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        let xv = &self.nodes[x.0].data;
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ci * h * w + 2 * oy * w + 2 * ox;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = cand[0];
                    for &p in &cand[1..] {
                        if xv[p] > xv[best] {
                            best = p;
                        }
                    }
                    data.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        Ok(self.push(data, vec![c, oh, ow], self.grad_of(&[x]), Rule::MaxPool2 { x, argmax }))
    }

    /// 2× nearest-neighbor upsampling: [C, H, W] → [C, 2H, 2W].
    pub fn nearest_up_2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 3 {
            return Err(TensorError::InvalidArgument(format!("nearest_up_2x2 needs rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); c * 4 * h * w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[ci * h * w + y * w + xx];
                    let base = ci * 4 * h * w + 2 * y * 2 * w + 2 * xx;
                    data[base] = v;
                    data[base + 1] = v;
                    data[base + 2 * w] = v;
                    data[base + 2 * w + 1] = v;
                }
            }
        }
        Ok(self.push(
            data,
            vec![c, 2 * h, 2 * w],
            self.grad_of(&[x]),
            Rule::NearestUp2 { x, h, w, c },
        ))
    }

    /// Bilinear resize of [C, H, W] to [C, oh, ow]; longitudes optionally
    /// wrap. Backward applies the transposed interpolation weights.
    pub fn bilinear_resize(
        &mut self,
        x: NodeId,
        oh: usize,
        ow: usize,
        zonal_wrap: bool,
    ) -> Result<NodeId> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 3 || oh == 0 || ow == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "bilinear_resize needs rank 3 and nonzero target, got {s:?} → {oh}x{ow}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let plan = Arc::new(ResizePlan::<S>::new(h, w, oh, ow, zonal_wrap));
        let xv = &self.nodes[x.0].data;
        let mut data = vec![S::zero(); c * oh * ow];
        for ci in 0..c {
            let src = &xv[ci * h * w..(ci + 1) * h * w];
            let dst = &mut data[ci * oh * ow..(ci + 1) * oh * ow];
            for (o, (idx, wt)) in plan.taps.iter().enumerate() {
                let mut acc = S::zero();
                for t in 0..4 {
                    acc = acc + wt[t] * src[idx[t] as usize];
                }
                dst[o] = acc;
            }
        }
        Ok(self.push(
            data,
            vec![c, oh, ow],
            self.grad_of(&[x]),
            Rule::BilinearResize { x, plan },
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: S = self.nodes[x.0].data.iter().fold(S::zero(), |a, &v| a + v);
        Ok(self.push(vec![s], vec![1], self.grad_of(&[x]), Rule::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(TensorError::InvalidArgument("mean of empty tensor".into()));
        }
        let s: S = self.nodes[x.0].data.iter().fold(S::zero(), |a, &v| a + v);
        let m = s / sc::<S>(n as f64);
        Ok(self.push(vec![m], vec![1], self.grad_of(&[x]), Rule::MeanAll(x)))
    }

    /// Scalar dot with fixed weights: y = Σ x·w.
    pub fn weighted_sum(&mut self, x: NodeId, w: Arc<Vec<S>>) -> Result<NodeId> {
        if w.len() != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "weighted_sum weights {} vs x {}",
                w.len(),
                self.nodes[x.0].data.len()
            )));
        }
        let s = self.nodes[x.0]
            .data
            .iter()
            .zip(w.iter())
            .fold(S::zero(), |a, (&v, &wi)| a + v * wi);
        Ok(self.push(vec![s], vec![1], self.grad_of(&[x]), Rule::WeightedSum { x, w }))
    }

    /// Broadcast-add a one-element node.
    pub fn add_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(TensorError::ShapeMismatch("add_scalar needs a 1-element node".into()));
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| *v + sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[x, s]), Rule::AddScalar { x, s }))
    }

    /// Broadcast-multiply by a one-element node.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(TensorError::ShapeMismatch("mul_scalar needs a 1-element node".into()));
        }
        let sv = self.nodes[s.0].data[0];
        let data: Vec<S> = self.nodes[x.0].data.iter().map(|v| *v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, self.grad_of(&[x, s]), Rule::MulScalar { x, s }))
    }

    /// Per-leading-index affine map with constant coefficients:
    /// y[l, ...] = x[l, ...]·scale[l] + shift[l]. Used to denormalize
    /// per-level deltas; constants carry no gradient.
    pub fn affine_per_level(
        &mut self,
        x: NodeId,
        scale: Arc<Vec<S>>,
        shift: &[S],
    ) -> Result<NodeId> {
        let l = self.nodes[x.0].shape[0];
        if scale.len() != l || shift.len() != l {
            return Err(TensorError::ShapeMismatch(format!(
                "affine_per_level: {} levels vs scale {} shift {}",
                l,
                scale.len(),
                shift.len()
            )));
        }
        let inner = self.nodes[x.0].data.len() / l;
        let mut data = vec![S::zero(); self.nodes[x.0].data.len()];
        for li in 0..l {
            let src = &self.nodes[x.0].data[li * inner..(li + 1) * inner];
            let dst = &mut data[li * inner..(li + 1) * inner];
            for j in 0..inner {
                dst[j] = src[j] * scale[li] + shift[li];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(
            data,
            shape,
            self.grad_of(&[x]),
            Rule::AffinePerLevel { x, scale, inner },
        ))
    }

    /// out[s] = Σ_{i: seg[i]=s} x[i], for fixed segment ids.
    pub fn segment_sum(
        &mut self,
        x: NodeId,
        seg: Arc<Vec<u32>>,
        n_seg: usize,
    ) -> Result<NodeId> {
        if seg.len() != self.nodes[x.0].data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "segment_sum ids {} vs x {}",
                seg.len(),
                self.nodes[x.0].data.len()
            )));
        }
        if seg.iter().any(|&s| s as usize >= n_seg) {
            return Err(TensorError::InvalidArgument("segment id out of range".into()));
        }
        let mut data = vec![S::zero(); n_seg];
        for (v, &s) in self.nodes[x.0].data.iter().zip(seg.iter()) {
            data[s as usize] = data[s as usize] + *v;
        }
        Ok(self.push(data, vec![n_seg], self.grad_of(&[x]), Rule::SegmentSum { x, seg }))
    }

    /// Apply a fixed linear operator chunk-wise over the leading axis; its
    /// backward is the adjoint. `out_shape` must hold `batch · op.out_len()`
    /// elements.
    pub fn apply_linear(
        &mut self,
        x: NodeId,
        op: Arc<dyn LinOp<S>>,
        out_shape: Vec<usize>,
    ) -> Result<NodeId> {
        let n = self.nodes[x.0].data.len();
        if op.in_len() == 0 || n % op.in_len() != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "apply_linear: x len {n} not a multiple of operator input {}",
                op.in_len()
            )));
        }
        let batch = n / op.in_len();
        if out_shape.iter().product::<usize>() != batch * op.out_len() {
            return Err(TensorError::ShapeMismatch(format!(
                "apply_linear: out shape {out_shape:?} vs batch {batch} × {}",
                op.out_len()
            )));
        }
        let mut data = vec![S::zero(); batch * op.out_len()];
        for bi in 0..batch {
            let src = &self.nodes[x.0].data[bi * op.in_len()..(bi + 1) * op.in_len()];
            let dst = &mut data[bi * op.out_len()..(bi + 1) * op.out_len()];
            op.apply(src, dst);
        }
        Ok(self.push(data, out_shape, self.grad_of(&[x]), Rule::LinearMap { x, op, batch }))
    }
}

// ── Backward sweep ──────────────────────────────────────────────────────────

/// Get-or-create the gradient buffer for `id` if it participates in the
/// gradient graph.
fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    id: NodeId,
) -> Option<&'a mut Vec<S>> {
    if !nodes[id.0].needs_grad {
        return None;
    }
    let entry = &mut grads[id.0];
    if entry.is_none() {
        *entry = Some(vec![S::zero(); nodes[id.0].data.len()]);
    }
    entry.as_mut()
}

pub(crate) fn backward_step<S: Scalar>(
    nodes: &[Node<S>],
    i: usize,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    match &nodes[i].rule {
        Rule::Leaf => {}
        Rule::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
        }
        Rule::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, gi) in db.iter_mut().zip(g) {
                    *d = *d - *gi;
                }
            }
        }
        Rule::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv) {
                    *d = *d + *gi * *bi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av) {
                    *d = *d + *gi * *ai;
                }
            }
        }
        Rule::Scale(x, c) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + *gi * *c;
                }
            }
        }
        Rule::AddConst(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
        }
        Rule::Recip(x) => {
            let yv = &nodes[i].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(yv) {
                    *d = *d - *gi * *yi * *yi;
                }
            }
        }
        Rule::Log(x) => {
            let xv = &nodes[x.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d = *d + *gi / *xi;
                }
            }
        }
        Rule::Gelu(x) => {
            let xv = &nodes[x.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    *d = *d + *gi * gelu_bwd(*xi);
                }
            }
        }
        Rule::LeakyRelu(x, slope) => {
            let xv = &nodes[x.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    let f = if *xi > S::zero() { S::one() } else { *slope };
                    *d = *d + *gi * f;
                }
            }
        }
        Rule::Swish(x) => {
            let xv = &nodes[x.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                    let s = sigmoid(*xi);
                    *d = *d + *gi * s * (S::one() + *xi * (S::one() - s));
                }
            }
        }
        Rule::Matmul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
            if let Some(da) = slot(nodes, grads, *a) {
                mm_nt(g, bv, *m, *n, *k, da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                mm_tn(av, g, *m, *k, *n, db);
            }
        }
        Rule::Bmm { a, b, batch, m, k, n, transpose_b } => {
            let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
            let (mk, kn, mn) = (m * k, k * n, m * n);
            if let Some(da) = slot(nodes, grads, *a) {
                for bi in 0..*batch {
                    let gs = &g[bi * mn..(bi + 1) * mn];
                    let bs = &bv[bi * kn..(bi + 1) * kn];
                    let ds = &mut da[bi * mk..(bi + 1) * mk];
                    if *transpose_b {
                        // C = A·Bᵀ (B is [n,k]) ⇒ dA = g·B
                        mm_nn(gs, bs, *m, *n, *k, ds);
                    } else {
                        mm_nt(gs, bs, *m, *n, *k, ds);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for bi in 0..*batch {
                    let gs = &g[bi * mn..(bi + 1) * mn];
                    let as_ = &av[bi * mk..(bi + 1) * mk];
                    let ds = &mut db[bi * kn..(bi + 1) * kn];
                    if *transpose_b {
                        // dB[n,k] = gᵀ·A
                        mm_tn(gs, as_, *m, *n, *k, ds);
                    } else {
                        mm_tn(as_, gs, *m, *k, *n, ds);
                    }
                }
            }
        }
        Rule::AddBias { x, bias } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                let d = db.len();
                for (idx, gi) in g.iter().enumerate() {
                    db[idx % d] = db[idx % d] + *gi;
                }
            }
        }
        Rule::AddTiled { x, t } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
            if let Some(dt) = slot(nodes, grads, *t) {
                let tl = dt.len();
                for (idx, gi) in g.iter().enumerate() {
                    dt[idx % tl] = dt[idx % tl] + *gi;
                }
            }
        }
        Rule::Reshape(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
        }
        Rule::Gather { x, idx } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (gi, &src) in g.iter().zip(idx.iter()) {
                    dx[src as usize] = dx[src as usize] + *gi;
                }
            }
        }
        Rule::Concat0 { a, b, split } => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (d, gi) in da.iter_mut().zip(&g[..*split]) {
                    *d = *d + *gi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (d, gi) in db.iter_mut().zip(&g[*split..]) {
                    *d = *d + *gi;
                }
            }
        }
        Rule::Softmax { x, inner } => {
            let yv = &nodes[i].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..yv.len() / inner {
                    let ys = &yv[r * inner..(r + 1) * inner];
                    let gs = &g[r * inner..(r + 1) * inner];
                    let ds = &mut dx[r * inner..(r + 1) * inner];
                    let dot = ys.iter().zip(gs).fold(S::zero(), |a, (&y, &gg)| a + y * gg);
                    for j in 0..*inner {
                        ds[j] = ds[j] + ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        Rule::LayerNorm { x, gamma, beta, inner, mean, rstd } => {
            let xv = &nodes[x.0].data;
            let gv = &nodes[gamma.0].data;
            let rows = xv.len() / inner;
            let inv_n = S::one() / sc::<S>(*inner as f64);
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for r in 0..rows {
                    for j in 0..*inner {
                        let xh = (xv[r * inner + j] - mean[r]) * rstd[r];
                        dg[j] = dg[j] + g[r * inner + j] * xh;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for r in 0..rows {
                    for j in 0..*inner {
                        db[j] = db[j] + g[r * inner + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for r in 0..rows {
                    // dx = r·(γg − mean(γg) − x̂·mean(γg·x̂)) per row.
                    let mut s1 = S::zero();
                    let mut s2 = S::zero();
                    for j in 0..*inner {
                        let gg = gv[j] * g[r * inner + j];
                        let xh = (xv[r * inner + j] - mean[r]) * rstd[r];
                        s1 = s1 + gg;
                        s2 = s2 + gg * xh;
                    }
                    s1 = s1 * inv_n;
                    s2 = s2 * inv_n;
                    for j in 0..*inner {
                        let gg = gv[j] * g[r * inner + j];
                        let xh = (xv[r * inner + j] - mean[r]) * rstd[r];
                        dx[r * inner + j] = dx[r * inner + j] + rstd[r] * (gg - s1 - xh * s2);
                    }
                }
            }
        }
        Rule::BatchNorm { x, gamma, beta, inner, mean, rstd, train } => {
            let xv = &nodes[x.0].data;
            let gv = &nodes[gamma.0].data;
            let c = mean.len();
            let inv_n = S::one() / sc::<S>(*inner as f64);
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for ci in 0..c {
                    let mut acc = S::zero();
                    for j in 0..*inner {
                        let xh = (xv[ci * inner + j] - mean[ci]) * rstd[ci];
                        acc = acc + g[ci * inner + j] * xh;
                    }
                    dg[ci] = dg[ci] + acc;
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for ci in 0..c {
                    let mut acc = S::zero();
                    for j in 0..*inner {
                        acc = acc + g[ci * inner + j];
                    }
                    db[ci] = db[ci] + acc;
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                for ci in 0..c {
                    if *train {
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..*inner {
                            let xh = (xv[ci * inner + j] - mean[ci]) * rstd[ci];
                            s1 = s1 + g[ci * inner + j];
                            s2 = s2 + g[ci * inner + j] * xh;
                        }
                        s1 = s1 * inv_n;
                        s2 = s2 * inv_n;
                        for j in 0..*inner {
                            let xh = (xv[ci * inner + j] - mean[ci]) * rstd[ci];
                            dx[ci * inner + j] = dx[ci * inner + j]
                                + gv[ci] * rstd[ci] * (g[ci * inner + j] - s1 - xh * s2);
                        }
                    } else {
                        // Eval mode: fixed statistics, plain affine map.
                        for j in 0..*inner {
                            dx[ci * inner + j] =
                                dx[ci * inner + j] + g[ci * inner + j] * gv[ci] * rstd[ci];
                        }
                    }
                }
            }
        }
        Rule::Conv2d { x, w, bias, pad, cin, h, wd, cout, kh, kw } => {
            let hw = h * wd;
            let ckk = cin * kh * kw;
            let xv = &nodes[x.0].data;
            let wv = &nodes[w.0].data;
            // The unfolded input is recomputed rather than saved: cheaper in
            // memory across multi-step rollout tapes.
            let needs_col = nodes[w.0].needs_grad || nodes[x.0].needs_grad;
            let mut col = vec![S::zero(); if needs_col { ckk * hw } else { 0 }];
            if needs_col {
                im2col(xv, *cin, *h, *wd, *kh, *kw, *pad, &mut col);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                mm_nt(g, &col, *cout, hw, ckk, dw);
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut gcol = vec![S::zero(); ckk * hw];
                mm_tn(wv, g, *cout, ckk, hw, &mut gcol);
                col2im_accum(&gcol, *cin, *h, *wd, *kh, *kw, *pad, dx);
            }
            if let Some(b) = bias {
                if let Some(dbv) = slot(nodes, grads, *b) {
                    for co in 0..*cout {
                        let mut acc = S::zero();
                        for v in &g[co * hw..(co + 1) * hw] {
                            acc = acc + *v;
                        }
                        dbv[co] = dbv[co] + acc;
                    }
                }
            }
        }
        Rule::MaxPool2 { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (gi, &src) in g.iter().zip(argmax.iter()) {
                    dx[src as usize] = dx[src as usize] + *gi;
                }
            }
        }
        Rule::NearestUp2 { x, h, w, c } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ci in 0..*c {
                    for y in 0..*h {
                        for xx in 0..*w {
                            let base = ci * 4 * h * w + 2 * y * 2 * w + 2 * xx;
                            let acc = g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
                            let t = ci * h * w + y * w + xx;
                            dx[t] = dx[t] + acc;
                        }
                    }
                }
            }
        }
        Rule::BilinearResize { x, plan } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let c = dx.len() / plan.in_hw;
                for ci in 0..c {
                    let gs = &g[ci * plan.out_hw..(ci + 1) * plan.out_hw];
                    let ds = &mut dx[ci * plan.in_hw..(ci + 1) * plan.in_hw];
                    for (o, (idx, wt)) in plan.taps.iter().enumerate() {
                        for t in 0..4 {
                            let p = idx[t] as usize;
                            ds[p] = ds[p] + wt[t] * gs[o];
                        }
                    }
                }
            }
        }
        Rule::SumAll(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d = *d + g[0];
                }
            }
        }
        Rule::MeanAll(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let f = g[0] / sc::<S>(dx.len() as f64);
                for d in dx.iter_mut() {
                    *d = *d + f;
                }
            }
        }
        Rule::WeightedSum { x, w } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, &wi) in dx.iter_mut().zip(w.iter()) {
                    *d = *d + g[0] * wi;
                }
            }
        }
        Rule::AddScalar { x, s } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + *gi;
                }
            }
            if let Some(ds) = slot(nodes, grads, *s) {
                let acc = g.iter().fold(S::zero(), |a, &v| a + v);
                ds[0] = ds[0] + acc;
            }
        }
        Rule::MulScalar { x, s } => {
            let sv = nodes[s.0].data[0];
            let xv = &nodes[x.0].data;
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d = *d + *gi * sv;
                }
            }
            if let Some(ds) = slot(nodes, grads, *s) {
                let acc = g.iter().zip(xv).fold(S::zero(), |a, (&gi, &xi)| a + gi * xi);
                ds[0] = ds[0] + acc;
            }
        }
        Rule::AffinePerLevel { x, scale, inner } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (li, &sl) in scale.iter().enumerate() {
                    let gs = &g[li * inner..(li + 1) * inner];
                    let ds = &mut dx[li * inner..(li + 1) * inner];
                    for (d, gi) in ds.iter_mut().zip(gs) {
                        *d = *d + *gi * sl;
                    }
                }
            }
        }
        Rule::SegmentSum { x, seg } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, &s) in dx.iter_mut().zip(seg.iter()) {
                    *d = *d + g[s as usize];
                }
            }
        }
        Rule::LinearMap { x, op, batch } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for bi in 0..*batch {
                    let gs = &g[bi * op.out_len()..(bi + 1) * op.out_len()];
                    let ds = &mut dx[bi * op.in_len()..(bi + 1) * op.in_len()];
                    op.apply_adjoint(gs, ds);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_known_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
        let loss = tape.sum_all(c).unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dA Σ(AB) = 1·Bᵀ rows summed: each row of dA = column sums of Bᵀ = row sums of B.
        assert_eq!(g.get(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t64(&[2, 3], &[0.0; 6]));
        let b = tape.constant(&t64(&[2, 3], &[0.0; 6]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn bmm_matches_per_slice_matmul() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t64(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let b = tape.constant(&t64(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]));
        let c = tape.bmm(a, b, false).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 10.0, 12.0, 14.0, 16.0]);
        // Aᵀ-free transpose-B path: C = A·Bᵀ with B=[n,k].
        let bt = tape.constant(&t64(&[2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]));
        let ct = tape.bmm(a, bt, true).unwrap();
        assert_eq!(tape.value(ct), &[1.0, 2.0, 3.0, 4.0, 10.0, 12.0, 14.0, 16.0]);
    }

    #[test]
    fn conv2d_all_ones_periodic_vs_zero_rows() {
        // 3×3 ones kernel over a 4×8 ones field, zonal-periodic padding:
        // interior rows see all 9 taps, pole rows lose the meridional trio.
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, 4, 8], &[1.0; 32]));
        let w = tape.constant(&t64(&[1, 1, 3, 3], &[1.0; 9]));
        let y = tape.conv2d(x, w, None, PadMode::ZonalPeriodic).unwrap();
        let v = tape.value(y);
        for j in 0..8 {
            assert_eq!(v[j], 6.0); // first row
            assert_eq!(v[8 + j], 9.0); // interior
            assert_eq!(v[16 + j], 9.0); // interior
            assert_eq!(v[24 + j], 6.0); // last row
        }
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let x = tape.constant(&t64(&[2, 4, 4], &data));
        let mut k = vec![0.0; 2 * 2 * 9];
        k[4] = 1.0; // center tap of (out 0, in 0)
        k[9 + 9 + 9 + 4] = 1.0; // center tap of (out 1, in 1)
        let w = tape.constant(&t64(&[2, 2, 3, 3], &k));
        let y = tape.conv2d(x, w, None, PadMode::Zeros).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_rejects_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, 4, 4], &[0.0; 16]));
        let w = tape.constant(&t64(&[1, 1, 2, 2], &[0.0; 4]));
        assert!(tape.conv2d(x, w, None, PadMode::Zeros).is_err());
    }

    #[test]
    fn max_pool_example() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool_2x2(x).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn nearest_up_duplicates_pixels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, 1, 2], &[3.0, 7.0]));
        let y = tape.nearest_up_2x2(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4]);
        assert_eq!(tape.value(y), &[3.0, 3.0, 7.0, 7.0, 3.0, 3.0, 7.0, 7.0]);
    }

    #[test]
    fn bilinear_resize_identity_when_same_size() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, 2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let y = tape.bilinear_resize(x, 2, 4, true).unwrap();
        for (a, b) in tape.value(y).iter().zip(tape.value(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_resize_preserves_constants() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, 4, 8], &[2.5; 32]));
        let y = tape.bilinear_resize(x, 6, 10, true).unwrap();
        for v in tape.value(y) {
            assert!((v - 2.5).abs() < 1e-12, "constant not preserved: {v}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_uniform_on_equal_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[2, 4], &[0.3; 8]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, 4], &[5.0; 4]));
        let gamma = tape.constant(&t64(&[4], &[1.0; 4]));
        let beta = tape.constant(&t64(&[4], &[0.0; 4]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        for v in tape.value(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_each_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gamma = tape.constant(&t64(&[1], &[1.0]));
        let beta = tape.constant(&t64(&[1], &[0.0]));
        let (y, stats) = tape.batch_norm_train(x, gamma, beta).unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert!((stats.var[0] - 1.25).abs() < 1e-12);
        let v = tape.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[3], &[0.0, 1.0, -1.0]));
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.841192).abs() < 1e-5);
        assert!((v[2] + 0.158808).abs() < 1e-5);
    }

    #[test]
    fn gather_and_scatter_add_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3], &[10.0, 20.0, 30.0]));
        let idx = Arc::new(vec![2u32, 0, 2]);
        let y = tape.gather(x, idx, vec![3]).unwrap();
        assert_eq!(tape.value(y), &[30.0, 10.0, 30.0]);
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        // Index 2 was gathered twice → gradient 2.
        assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn permute_transposes_2d() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn segment_sum_pools_by_id() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.segment_sum(x, Arc::new(vec![0, 1, 0, 1]), 2).unwrap();
        assert_eq!(tape.value(y), &[4.0, 6.0]);
    }

    #[test]
    fn concat0_and_split_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.concat0(a, b).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        let two = tape.scale(y, 2.0);
        let loss = tape.sum_all(two).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[2.0, 2.0]);
        assert_eq!(g.get(b).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }
}
