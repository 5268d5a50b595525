//! 3D convolutions on `[c, h, w, d]` feature maps.
//!
//! Dense convolutions lower to an im2col buffer followed by a gemm; the
//! backward pass rebuilds the buffer instead of storing it, trading a little
//! compute for tape memory. Depthwise convolutions use direct shifted
//! accumulation (27 fused passes for a 3x3x3 kernel).

use ndarray::{Array2, ArrayD, Axis, Ix1, IxDyn};

use super::ops::{as2, as_chan_mat, mm};
use super::{Elem, NodeId, Tape};

/// Kernel/stride/padding triple for a dense 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dSpec {
    /// 3x3x3, stride 1, same padding.
    pub const SAME3: Conv3dSpec = Conv3dSpec {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    /// 3x3x3, stride 2, halving padding.
    pub const DOWN3: Conv3dSpec = Conv3dSpec {
        kernel: 3,
        stride: 2,
        pad: 1,
    };
}

/// Output spatial dims for a convolution over `(h, w, d)`.
pub fn conv3d_shape(dims: (usize, usize, usize), spec: Conv3dSpec) -> (usize, usize, usize) {
    let f = |n: usize| (n + 2 * spec.pad - spec.kernel) / spec.stride + 1;
    (f(dims.0), f(dims.1), f(dims.2))
}

/// Lower `[ci, h, w, d]` into `[ci*k^3, oh*ow*od]` patch columns.
fn im2col<E: Elem>(x: &ArrayD<E>, spec: Conv3dSpec) -> Array2<E> {
    let (ci, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow, od) = conv3d_shape((h, w, d), spec);
    let k = spec.kernel;
    let (s, p) = (spec.stride as i64, spec.pad as i64);
    let n_out = oh * ow * od;
    let mut cols = Array2::<E>::zeros((ci * k * k * k, n_out));
    let xs = x.as_slice().expect("contiguous input");
    let cols_s = cols.as_slice_mut().unwrap();

    for c in 0..ci {
        let xc = &xs[c * h * w * d..(c + 1) * h * w * d];
        for ky in 0..k {
            for kx in 0..k {
                for kz in 0..k {
                    let r = ((c * k + ky) * k + kx) * k + kz;
                    let row = &mut cols_s[r * n_out..(r + 1) * n_out];
                    let (ky, kx, kz) = (ky as i64, kx as i64, kz as i64);
                    // valid output range along z for this kernel offset
                    let oz_lo = (p - kz + s - 1).div_euclid(s).max(0) as usize;
                    let oz_hi_i = (d as i64 - 1 + p - kz).div_euclid(s);
                    if oz_hi_i < oz_lo as i64 {
                        continue;
                    }
                    let oz_hi = (oz_hi_i as usize).min(od - 1);
                    for oy in 0..oh {
                        let iy = oy as i64 * s + ky - p;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as i64 * s + kx - p;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let in_base = ((iy as usize * w) + ix as usize) * d;
                            let out_base = ((oy * ow) + ox) * od;
                            if s == 1 {
                                let iz0 = (oz_lo as i64 + kz - p) as usize;
                                let len = oz_hi - oz_lo + 1;
                                row[out_base + oz_lo..out_base + oz_lo + len]
                                    .copy_from_slice(&xc[in_base + iz0..in_base + iz0 + len]);
                            } else {
                                for oz in oz_lo..=oz_hi {
                                    let iz = (oz as i64 * s + kz - p) as usize;
                                    row[out_base + oz] = xc[in_base + iz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch-column gradients back to the input.
fn col2im<E: Elem>(
    dcols: &Array2<E>,
    in_shape: (usize, usize, usize, usize),
    spec: Conv3dSpec,
) -> ArrayD<E> {
    let (ci, h, w, d) = in_shape;
    let (oh, ow, od) = conv3d_shape((h, w, d), spec);
    let k = spec.kernel;
    let (s, p) = (spec.stride as i64, spec.pad as i64);
    let n_out = oh * ow * od;
    let mut dx = ArrayD::<E>::zeros(IxDyn(&[ci, h, w, d]));
    let dxs = dx.as_slice_mut().unwrap();
    let dcols_s = dcols.as_slice().unwrap();

    for c in 0..ci {
        let xc = &mut dxs[c * h * w * d..(c + 1) * h * w * d];
        for ky in 0..k {
            for kx in 0..k {
                for kz in 0..k {
                    let r = ((c * k + ky) * k + kx) * k + kz;
                    let row = &dcols_s[r * n_out..(r + 1) * n_out];
                    let (ky, kx, kz) = (ky as i64, kx as i64, kz as i64);
                    let oz_lo = (p - kz + s - 1).div_euclid(s).max(0) as usize;
                    let oz_hi_i = (d as i64 - 1 + p - kz).div_euclid(s);
                    if oz_hi_i < oz_lo as i64 {
                        continue;
                    }
                    let oz_hi = (oz_hi_i as usize).min(od - 1);
                    for oy in 0..oh {
                        let iy = oy as i64 * s + ky - p;
                        if iy < 0 || iy >= h as i64 {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as i64 * s + kx - p;
                            if ix < 0 || ix >= w as i64 {
                                continue;
                            }
                            let in_base = ((iy as usize * w) + ix as usize) * d;
                            let out_base = ((oy * ow) + ox) * od;
                            for oz in oz_lo..=oz_hi {
                                let iz = (oz as i64 * s + kz - p) as usize;
                                xc[in_base + iz] = xc[in_base + iz] + row[out_base + oz];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<E: Elem> Tape<E> {
    /// Dense 3D convolution: `x [ci, h, w, d]`, `w [co, ci, k, k, k]`,
    /// `b [co]` -> `[co, oh, ow, od]`.
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv3dSpec) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, h, wd, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let co = wv.shape()[0];
        assert_eq!(wv.shape(), &[co, ci, spec.kernel, spec.kernel, spec.kernel]);
        let (oh, ow, od) = conv3d_shape((h, wd, d), spec);
        let n_out = oh * ow * od;
        let ksz = ci * spec.kernel.pow(3);

        let cols = im2col(xv, spec);
        let wm = wv.view().into_shape_with_order((co, ksz)).unwrap();
        let mut y = mm(wm, cols.view());
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let value = y.into_shape_with_order(IxDyn(&[co, oh, ow, od])).unwrap();

        let needs = self.any_needs_grad(&[x, w, b]);
        let in_shape = (ci, h, wd, d);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let g2 = g.view().into_shape_with_order((co, n_out)).unwrap();
                if t.needs_grad(b) {
                    gr.accum(b, g2.sum_axis(Axis(1)).into_dyn());
                }
                let need_w = t.needs_grad(w);
                let need_x = t.needs_grad(x);
                if need_w {
                    let cols = im2col(t.value(x), spec);
                    let dw = mm(g2.view(), cols.view().reversed_axes());
                    gr.accum(
                        w,
                        dw.into_shape_with_order(t.value(w).raw_dim()).unwrap(),
                    );
                }
                if need_x {
                    let wm = t
                        .value(w)
                        .view()
                        .into_shape_with_order((co, ksz))
                        .unwrap();
                    let dcols = mm(wm.reversed_axes(), g2.view());
                    gr.accum(x, col2im(&dcols, in_shape, spec));
                }
            })),
        )
    }

    /// Pointwise (1x1x1) convolution expressed as a channel-mixing gemm.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let shape: Vec<usize> = self.value(x).shape().to_vec();
        let co = self.value(w).shape()[0];
        assert_eq!(self.value(w).shape()[1], shape[0]);
        let xm = as_chan_mat(self.value(x));
        let n = xm.ncols();
        let mut y = mm(as2(self.value(w)), xm);
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        for (mut row, &bias) in y.rows_mut().into_iter().zip(bv.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = co;
        let value = y.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let needs = self.any_needs_grad(&[x, w, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let g2 = g.view().into_shape_with_order((co, n)).unwrap();
                if t.needs_grad(b) {
                    gr.accum(b, g2.sum_axis(Axis(1)).into_dyn());
                }
                if t.needs_grad(w) {
                    let xm = as_chan_mat(t.value(x));
                    gr.accum(w, mm(g2.view(), xm.reversed_axes()).into_dyn());
                }
                if t.needs_grad(x) {
                    let wm = as2(t.value(w));
                    let dx = mm(wm.reversed_axes(), g2.view());
                    gr.accum(x, dx.into_shape_with_order(t.value(x).raw_dim()).unwrap());
                }
            })),
        )
    }

    /// Depthwise 3x3x3 convolution (stride 1, same padding):
    /// `x [c, h, w, d]`, `w [c, 3, 3, 3]`, `b [c]`.
    pub fn dwconv3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (c, h, wd, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(wv.shape(), &[c, 3, 3, 3]);
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let mut value = ArrayD::<E>::zeros(IxDyn(&[c, h, wd, d]));
        {
            let out = value.as_slice_mut().unwrap();
            let xs = xv.as_slice().unwrap();
            let ws = wv.as_slice().unwrap();
            for ch in 0..c {
                let xc = &xs[ch * h * wd * d..(ch + 1) * h * wd * d];
                let oc = &mut out[ch * h * wd * d..(ch + 1) * h * wd * d];
                oc.fill(bv[ch]);
                dw_accum_forward(oc, xc, &ws[ch * 27..(ch + 1) * 27], h, wd, d);
            }
        }
        let needs = self.any_needs_grad(&[x, w, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let gs = g.as_slice().unwrap();
                if t.needs_grad(b) {
                    let gm = as_chan_mat(g);
                    gr.accum(b, gm.sum_axis(Axis(1)).into_dyn());
                }
                if t.needs_grad(w) {
                    let xs = t.value(x).as_slice().unwrap();
                    let mut dw = ArrayD::<E>::zeros(IxDyn(&[c, 3, 3, 3]));
                    {
                        let dws = dw.as_slice_mut().unwrap();
                        for ch in 0..c {
                            let xc = &xs[ch * h * wd * d..(ch + 1) * h * wd * d];
                            let gc = &gs[ch * h * wd * d..(ch + 1) * h * wd * d];
                            dw_weight_grad(&mut dws[ch * 27..(ch + 1) * 27], xc, gc, h, wd, d);
                        }
                    }
                    gr.accum(w, dw);
                }
                if t.needs_grad(x) {
                    let ws = t.value(w).as_slice().unwrap();
                    let mut dx = ArrayD::<E>::zeros(IxDyn(&[c, h, wd, d]));
                    {
                        let dxs = dx.as_slice_mut().unwrap();
                        for ch in 0..c {
                            let gc = &gs[ch * h * wd * d..(ch + 1) * h * wd * d];
                            let dc = &mut dxs[ch * h * wd * d..(ch + 1) * h * wd * d];
                            dw_input_grad(dc, gc, &ws[ch * 27..(ch + 1) * 27], h, wd, d);
                        }
                    }
                    gr.accum(x, dx);
                }
            })),
        )
    }
}

/// Iterate the 27 kernel offsets with the valid ranges for a shifted
/// accumulation: for each (dy, dx, dz) in {-1,0,1}^3 the output region
/// [ylo..yhi) x [xlo..xhi) x [zlo..zhi) reads input shifted by the offset.
fn offsets(h: usize, w: usize, d: usize) -> impl Iterator<Item = (usize, i64, i64, i64, usize, usize, usize, usize, usize, usize)>
{
    (0..27).map(move |i| {
        let dy = (i / 9) as i64 - 1;
        let dx = ((i / 3) % 3) as i64 - 1;
        let dz = (i % 3) as i64 - 1;
        let ylo = (-dy).max(0) as usize;
        let yhi = (h as i64 - dy.max(0)) as usize;
        let xlo = (-dx).max(0) as usize;
        let xhi = (w as i64 - dx.max(0)) as usize;
        let zlo = (-dz).max(0) as usize;
        let zhi = (d as i64 - dz.max(0)) as usize;
        (i, dy, dx, dz, ylo, yhi, xlo, xhi, zlo, zhi)
    })
}

fn dw_accum_forward<E: Elem>(out: &mut [E], x: &[E], w: &[E], h: usize, wd: usize, d: usize) {
    for (i, dy, dx, dz, ylo, yhi, xlo, xhi, zlo, zhi) in offsets(h, wd, d) {
        let wk = w[i];
        if wk == E::zero() {
            continue;
        }
        for y in ylo..yhi {
            let iy = (y as i64 + dy) as usize;
            for xx in xlo..xhi {
                let ix = (xx as i64 + dx) as usize;
                let ob = (y * wd + xx) * d;
                let ib = (iy * wd + ix) * d;
                let zn = zhi - zlo;
                let src = &x[(ib as i64 + zlo as i64 + dz) as usize..][..zn];
                let dst = &mut out[ob + zlo..ob + zlo + zn];
                for (o, &s) in dst.iter_mut().zip(src.iter()) {
                    *o = *o + wk * s;
                }
            }
        }
    }
}

fn dw_weight_grad<E: Elem>(dw: &mut [E], x: &[E], g: &[E], h: usize, wd: usize, d: usize) {
    for (i, dy, dx, dz, ylo, yhi, xlo, xhi, zlo, zhi) in offsets(h, wd, d) {
        let mut acc = E::zero();
        for y in ylo..yhi {
            let iy = (y as i64 + dy) as usize;
            for xx in xlo..xhi {
                let ix = (xx as i64 + dx) as usize;
                let ob = (y * wd + xx) * d;
                let ib = (iy * wd + ix) * d;
                let zn = zhi - zlo;
                let src = &x[(ib as i64 + zlo as i64 + dz) as usize..][..zn];
                let go = &g[ob + zlo..ob + zlo + zn];
                for (&gv, &sv) in go.iter().zip(src.iter()) {
                    acc = acc + gv * sv;
                }
            }
        }
        dw[i] = dw[i] + acc;
    }
}

fn dw_input_grad<E: Elem>(dx: &mut [E], g: &[E], w: &[E], h: usize, wd: usize, d: usize) {
    for (i, dy, dxo, dz, ylo, yhi, xlo, xhi, zlo, zhi) in offsets(h, wd, d) {
        let wk = w[i];
        if wk == E::zero() {
            continue;
        }
        for y in ylo..yhi {
            let iy = (y as i64 + dy) as usize;
            for xx in xlo..xhi {
                let ix = (xx as i64 + dxo) as usize;
                let ob = (y * wd + xx) * d;
                let ib = (iy * wd + ix) * d;
                let zn = zhi - zlo;
                let dst = &mut dx[(ib as i64 + zlo as i64 + dz) as usize..][..zn];
                let go = &g[ob + zlo..ob + zlo + zn];
                for (o, &gv) in dst.iter_mut().zip(go.iter()) {
                    *o = *o + wk * gv;
                }
            }
        }
    }
}
