//! 3-D convolution, forward and backward.
//!
//! Two interchangeable implementations: [`ConvAlgo::Direct`] is a plain loop
//! nest, [`ConvAlgo::Blocked`] lowers output-row tiles to a matrix product
//! through an im2col buffer. Forward results and kernel gradients of the two
//! paths are bitwise identical: both accumulate every output over the taps
//! `(ci, kd, kh, kw)` in ascending order, counting zero-padded taps, and both
//! accumulate kernel gradients over `(n, voxel)` in ascending order.

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

use super::gemm::{gemm, MatRef};
use super::tape::{Backward, BackwardCtx, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Blocked,
}

/// Target number of output voxels per im2col tile.
const TILE_VOXELS: usize = 512;

/// Output extent of one spatial axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Argument("stride must be positive".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(shape_err!("kernel {kernel} exceeds padded extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output shape of a convolution of `input` `[N, Cin, D, H, W]` with
/// `kernel` `[Cout, Cin, kD, kH, kW]`.
pub fn conv3d_output_shape(
    input: [usize; 5],
    kernel: [usize; 5],
    stride: usize,
    padding: usize,
) -> Result<[usize; 5]> {
    let g = Geom::new(input, kernel, stride, padding)?;
    Ok([g.n, g.cout, g.out[0], g.out[1], g.out[2]])
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    out: [usize; 3],
    stride: usize,
    pad: usize,
}

impl Geom {
    fn new(x: [usize; 5], w: [usize; 5], stride: usize, pad: usize) -> Result<Self> {
        if !(1..=2).contains(&stride) {
            return Err(Error::Argument(format!("stride must be 1 or 2, got {stride}")));
        }
        if w[1] != x[1] {
            return Err(shape_err!("kernel expects {} input channels, input has {}", w[1], x[1]));
        }
        let kernel = [w[2], w[3], w[4]];
        if kernel.iter().any(|&k| k % 2 == 0) {
            return Err(shape_err!("kernel extents must be odd, got {:?}", kernel));
        }
        let input = [x[2], x[3], x[4]];
        if input.iter().any(|&e| e % stride != 0) {
            return Err(shape_err!("spatial extents {:?} not divisible by stride {}", input, stride));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = conv_output_extent(input[a], kernel[a], stride, pad)?;
        }
        Ok(Geom { n: x[0], cin: x[1], cout: w[0], input, kernel, out, stride, pad })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.out.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn kdim(&self) -> usize {
        self.cin * self.taps()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    fn out_rows(&self) -> usize {
        self.out[0] * self.out[1]
    }

    /// Row ranges `(r0, r1)` of one sample, each covering whole output rows.
    fn tiles(&self) -> Vec<(usize, usize)> {
        let rows = self.out_rows();
        let per = (TILE_VOXELS / self.out[2].max(1)).max(1);
        (0..rows).step_by(per).map(|r0| (r0, (r0 + per).min(rows))).collect()
    }

    /// Input coordinate for output coordinate `o` and tap `t` on axis `a`.
    #[inline]
    fn src(&self, a: usize, o: usize, t: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.input[a]).then_some(i as usize)
    }

    /// Output positions `ow` along the last axis whose source for tap `t` is inside the input.
    fn valid_cols(&self, t: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let off = t as isize - p;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = self.input[2] as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.out[2] as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn kernel_dims(t: &Tensor<impl Element>) -> Result<[usize; 5]> {
    t.dims5().map_err(|_| shape_err!("kernel must be 5-d, got {:?}", t.shape()))
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("bias shape {:?}, expected [{cout}]", b.shape()));
        }
    }
    Ok(())
}

/// Forward convolution without recording.
pub fn conv3d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let g = Geom::new(x.dims5()?, kernel_dims(w)?, stride, padding)?;
    check_bias(bias, g.cout)?;
    let b = bias.map(|b| b.data());
    let data = match algo {
        ConvAlgo::Direct => forward_direct(&g, x.data(), w.data(), b),
        ConvAlgo::Blocked => forward_blocked(&g, x.data(), w.data(), b),
    };
    Tensor::new(vec![g.n, g.cout, g.out[0], g.out[1], g.out[2]], data)
}

/// Gradients `(d input, d kernel, d bias)` for upstream gradient `grad_out`.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    algo: ConvAlgo,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = Geom::new(x.dims5()?, kernel_dims(w)?, stride, padding)?;
    let expect = [g.n, g.cout, g.out[0], g.out[1], g.out[2]];
    if grad_out.shape() != expect {
        return Err(shape_err!("conv grad_out {:?}, expected {:?}", grad_out.shape(), expect));
    }
    let (gx, gw) = match algo {
        ConvAlgo::Direct => (
            need[0].then(|| backward_input_direct(&g, w.data(), grad_out.data())),
            need[1].then(|| backward_kernel_direct(&g, x.data(), grad_out.data())),
        ),
        ConvAlgo::Blocked => backward_blocked(&g, x.data(), w.data(), grad_out.data(), need[0], need[1]),
    };
    let gb = need[2].then(|| bias_grad(&g, grad_out.data()));
    Ok(ConvGrads {
        input: gx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        kernel: gw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
        bias: gb.map(|d| Tensor::new(vec![g.cout], d)).transpose()?,
    })
}

fn forward_direct<T: Element>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let [id_, ih_, iw_] = g.input;
    let [od_, oh_, ow_] = g.out;
    let [kd, kh, kw] = g.kernel;
    let mut out = vec![T::zero(); g.n * g.cout * g.out_voxels()];
    let mut o = 0;
    for n in 0..g.n {
        for co in 0..g.cout {
            for od in 0..od_ {
                for oh in 0..oh_ {
                    for ow in 0..ow_ {
                        let mut acc = T::zero();
                        for ci in 0..g.cin {
                            let xc = &x[(n * g.cin + ci) * id_ * ih_ * iw_..];
                            let wc = &w[(co * g.cin + ci) * kd * kh * kw..];
                            for a in 0..kd {
                                let sd = g.src(0, od, a);
                                for b in 0..kh {
                                    let sh = g.src(1, oh, b);
                                    for c in 0..kw {
                                        let sw = g.src(2, ow, c);
                                        let v = match (sd, sh, sw) {
                                            (Some(d), Some(h), Some(ww)) => xc[(d * ih_ + h) * iw_ + ww],
                                            _ => T::zero(),
                                        };
                                        acc = acc + v * wc[(a * kh + b) * kw + c];
                                    }
                                }
                            }
                        }
                        out[o] = match bias {
                            Some(bs) => acc + bs[co],
                            None => acc,
                        };
                        o += 1;
                    }
                }
            }
        }
    }
    out
}

fn backward_kernel_direct<T: Element>(g: &Geom, x: &[T], gout: &[T]) -> Vec<T> {
    let [id_, ih_, iw_] = g.input;
    let [od_, oh_, ow_] = g.out;
    let [kd, kh, kw] = g.kernel;
    let osp = g.out_voxels();
    let mut dw = vec![T::zero(); g.cout * g.kdim()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let mut acc = T::zero();
                        for n in 0..g.n {
                            let xc = &x[(n * g.cin + ci) * id_ * ih_ * iw_..];
                            let gc = &gout[(n * g.cout + co) * osp..];
                            let mut p = 0;
                            for od in 0..od_ {
                                let sd = g.src(0, od, a);
                                for oh in 0..oh_ {
                                    let sh = g.src(1, oh, b);
                                    for ow in 0..ow_ {
                                        let v = match (sd, sh, g.src(2, ow, c)) {
                                            (Some(d), Some(h), Some(ww)) => xc[(d * ih_ + h) * iw_ + ww],
                                            _ => T::zero(),
                                        };
                                        acc = acc + v * gc[p];
                                        p += 1;
                                    }
                                }
                            }
                        }
                        dw[((co * g.cin + ci) * kd + a) * kh * kw + b * kw + c] = acc;
                    }
                }
            }
        }
    }
    dw
}

fn backward_input_direct<T: Element>(g: &Geom, w: &[T], gout: &[T]) -> Vec<T> {
    let [id_, ih_, iw_] = g.input;
    let [od_, oh_, ow_] = g.out;
    let [kd, kh, kw] = g.kernel;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let osp = g.out_voxels();
    // Output coordinate feeding input coordinate `i` through tap `t`.
    let dst = |i: usize, t: usize, len: usize| -> Option<usize> {
        let num = i as isize + p - t as isize;
        (num >= 0 && num % s == 0 && ((num / s) as usize) < len).then(|| (num / s) as usize)
    };
    let mut dx = vec![T::zero(); g.n * g.cin * g.in_voxels()];
    let mut idx = 0;
    for n in 0..g.n {
        for ci in 0..g.cin {
            for i0 in 0..id_ {
                for i1 in 0..ih_ {
                    for i2 in 0..iw_ {
                        let mut acc = T::zero();
                        for co in 0..g.cout {
                            let gc = &gout[(n * g.cout + co) * osp..];
                            let wc = &w[(co * g.cin + ci) * kd * kh * kw..];
                            for a in 0..kd {
                                let Some(od) = dst(i0, a, od_) else { continue };
                                for b in 0..kh {
                                    let Some(oh) = dst(i1, b, oh_) else { continue };
                                    for c in 0..kw {
                                        let Some(ow) = dst(i2, c, ow_) else { continue };
                                        acc = acc + wc[(a * kh + b) * kw + c] * gc[(od * oh_ + oh) * ow_ + ow];
                                    }
                                }
                            }
                        }
                        dx[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    dx
}

fn bias_grad<T: Element>(g: &Geom, gout: &[T]) -> Vec<T> {
    let osp = g.out_voxels();
    let mut db = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            for &v in &gout[(n * g.cout + co) * osp..][..osp] {
                *acc = *acc + v;
            }
        }
    }
    db
}

/// Fill `col` (`[kdim][tile]`) with the input patches for output rows `r0..r1` of one sample.
fn im2col<T: Element>(g: &Geom, xs: &[T], r0: usize, r1: usize, col: &mut [T]) {
    let [id_, ih_, iw_] = g.input;
    let [_, oh_, ow_] = g.out;
    let [kd, kh, kw] = g.kernel;
    let tl = (r1 - r0) * ow_;
    let s = g.stride;
    let mut k = 0;
    for ci in 0..g.cin {
        let xc = &xs[ci * id_ * ih_ * iw_..][..id_ * ih_ * iw_];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let (lo, hi) = g.valid_cols(c);
                    let dst = &mut col[k * tl..][..tl];
                    for r in r0..r1 {
                        let row = &mut dst[(r - r0) * ow_..][..ow_];
                        match (g.src(0, r / oh_, a), g.src(1, r % oh_, b)) {
                            (Some(d), Some(h)) => {
                                let src = &xc[(d * ih_ + h) * iw_..][..iw_];
                                row[..lo].fill(T::zero());
                                row[hi..].fill(T::zero());
                                if lo == hi {
                                    continue;
                                }
                                let first = lo * s + c - g.pad;
                                if s == 1 {
                                    row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                                } else {
                                    for (o, v) in row[lo..hi].iter_mut().enumerate() {
                                        *v = src[first + o * s];
                                    }
                                }
                            }
                            _ => row.fill(T::zero()),
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

/// Scatter-add `col` (`[kdim][tile]`) back onto one sample's input gradient.
fn col2im<T: Element>(g: &Geom, col: &[T], r0: usize, r1: usize, dxs: &mut [T]) {
    let [id_, ih_, iw_] = g.input;
    let [_, oh_, ow_] = g.out;
    let [kd, kh, kw] = g.kernel;
    let tl = (r1 - r0) * ow_;
    let s = g.stride;
    let mut k = 0;
    for ci in 0..g.cin {
        let dxc = &mut dxs[ci * id_ * ih_ * iw_..][..id_ * ih_ * iw_];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let (lo, hi) = g.valid_cols(c);
                    let srcrow = &col[k * tl..][..tl];
                    for r in r0..r1 {
                        if lo == hi {
                            break;
                        }
                        if let (Some(d), Some(h)) = (g.src(0, r / oh_, a), g.src(1, r % oh_, b)) {
                            let dst = &mut dxc[(d * ih_ + h) * iw_..][..iw_];
                            let row = &srcrow[(r - r0) * ow_..][..ow_];
                            let first = lo * s + c - g.pad;
                            for (o, &v) in row[lo..hi].iter().enumerate() {
                                let t = &mut dst[first + o * s];
                                *t = *t + v;
                            }
                        }
                    }
                    k += 1;
                }
            }
        }
    }
}

fn forward_blocked<T: Element>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let isp = g.in_voxels();
    let osp = g.out_voxels();
    let kdim = g.kdim();
    let ow_ = g.out[2];
    let tiles: Vec<(usize, usize, usize)> =
        (0..g.n).flat_map(|n| g.tiles().into_iter().map(move |(r0, r1)| (n, r0, r1))).collect();
    let results: Vec<Vec<T>> = tiles
        .par_iter()
        .map(|&(n, r0, r1)| {
            let tl = (r1 - r0) * ow_;
            let xs = &x[n * g.cin * isp..][..g.cin * isp];
            let mut col = Vec::new();
            let b = if g.pointwise() {
                MatRef { data: &xs[r0 * ow_..], ld: isp }
            } else {
                col.resize(kdim * tl, T::zero());
                im2col(g, xs, r0, r1, &mut col);
                MatRef { data: &col, ld: tl }
            };
            let mut out = vec![T::zero(); g.cout * tl];
            gemm(g.cout, tl, kdim, MatRef { data: w, ld: kdim }, b, &mut out, tl, false);
            out
        })
        .collect();
    let mut out = vec![T::zero(); g.n * g.cout * osp];
    for (&(n, r0, r1), tile) in tiles.iter().zip(&results) {
        let tl = (r1 - r0) * ow_;
        for co in 0..g.cout {
            let dst = &mut out[(n * g.cout + co) * osp + r0 * ow_..][..tl];
            let src = &tile[co * tl..][..tl];
            match bias {
                Some(bs) => dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bs[co]),
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

fn transpose<T: Element>(rows: usize, cols: usize, src: &[T], ld: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * ld + c];
        }
    }
    out
}

fn backward_blocked<T: Element>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let isp = g.in_voxels();
    let osp = g.out_voxels();
    let kdim = g.kdim();
    let ow_ = g.out[2];
    let w_t = need_x.then(|| transpose(g.cout, kdim, w, kdim));
    let mut dx = need_x.then(|| vec![T::zero(); g.n * g.cin * isp]);
    // Kernel gradient accumulated transposed, `[kdim][cout]`.
    let mut dw_t = need_w.then(|| vec![T::zero(); kdim * g.cout]);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for n in 0..g.n {
        let xs = &x[n * g.cin * isp..][..g.cin * isp];
        let gs = &gout[n * g.cout * osp..][..g.cout * osp];
        for (r0, r1) in g.tiles() {
            let tl = (r1 - r0) * ow_;
            let g_tile = MatRef { data: &gs[r0 * ow_..], ld: osp };
            if let Some(dw_t) = dw_t.as_mut() {
                let cols = if g.pointwise() {
                    MatRef { data: &xs[r0 * ow_..], ld: isp }
                } else {
                    col.resize(kdim * tl, T::zero());
                    im2col(g, xs, r0, r1, &mut col);
                    MatRef { data: &col[..], ld: tl }
                };
                let g_t = transpose(g.cout, tl, g_tile.data, osp);
                gemm(kdim, g.cout, tl, cols, MatRef { data: &g_t, ld: g.cout }, dw_t, g.cout, true);
            }
            if let (Some(dx), Some(w_t)) = (dx.as_mut(), w_t.as_ref()) {
                let dxs = &mut dx[n * g.cin * isp..][..g.cin * isp];
                let a = MatRef { data: &w_t[..], ld: g.cout };
                if g.pointwise() {
                    gemm(kdim, tl, g.cout, a, g_tile, &mut dxs[r0 * ow_..], isp, false);
                } else {
                    dcol.resize(kdim * tl, T::zero());
                    gemm(kdim, tl, g.cout, a, g_tile, &mut dcol, tl, false);
                    col2im(g, &dcol, r0, r1, dxs);
                }
            }
        }
    }
    let dw = dw_t.map(|t| transpose(kdim, g.cout, &t, g.cout));
    (dx, dw)
}

struct Conv3dOp {
    stride: usize,
    padding: usize,
    algo: ConvAlgo,
    has_bias: bool,
}

impl<T: Element> Backward<T> for Conv3dOp {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let need_b = self.has_bias && ctx.needs[2];
        let grads = conv3d_backward(
            ctx.inputs[0],
            ctx.inputs[1],
            ctx.grad_out,
            self.stride,
            self.padding,
            self.algo,
            [ctx.needs[0], ctx.needs[1], need_b],
        )?;
        let mut out = vec![grads.input, grads.kernel];
        if self.has_bias {
            out.push(grads.bias);
        }
        Ok(out)
    }
}

impl<T: Element> Tape<T> {
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let algo = self.conv_algo();
        let out = conv3d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            algo,
        )?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push_op(out, &inputs, Conv3dOp { stride, padding, algo, has_bias: bias.is_some() })
    }

    /// Per-voxel linear map over channels; kernel `[Cout, Cin, 1, 1, 1]`.
    pub fn conv1x1x1(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let k = self.value(kernel).shape();
        if k.len() != 5 || k[2..] != [1, 1, 1] {
            return Err(shape_err!("conv1x1x1 expects a [Cout, Cin, 1, 1, 1] kernel, got {:?}", k));
        }
        self.conv3d(input, kernel, bias, 1, 0)
    }
}
