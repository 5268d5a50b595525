//! Trilinear resizing of `[c, h, w, d]` feature maps (half-pixel centers).

use ndarray::{ArrayD, IxDyn};

use super::{Elem, NodeId, Tape};

/// Per-output-index interpolation taps along one axis: (lo, hi, frac).
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0 as i64).clamp(0, n_in as i64 - 1) as usize;
            let hi = (i0 as i64 + 1).clamp(0, n_in as i64 - 1) as usize;
            (lo, hi, frac)
        })
        .collect()
}

impl<E: Elem> Tape<E> {
    /// Resize the spatial grid of `[c, h, w, d]` to `out_dims` by trilinear
    /// interpolation. Resizing to the input size is the exact identity.
    pub fn resize_trilinear(&mut self, x: NodeId, out_dims: (usize, usize, usize)) -> NodeId {
        let sh = self.value(x).shape().to_vec();
        let (c, h, w, d) = (sh[0], sh[1], sh[2], sh[3]);
        let (oh, ow, od) = out_dims;
        let ty = axis_taps(h, oh);
        let tx = axis_taps(w, ow);
        let tz = axis_taps(d, od);

        let mut out = ArrayD::<E>::zeros(IxDyn(&[c, oh, ow, od]));
        {
            let xs = self.value(x).as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for ch in 0..c {
                let xc = &xs[ch * h * w * d..(ch + 1) * h * w * d];
                let oc = &mut os[ch * oh * ow * od..(ch + 1) * oh * ow * od];
                for (iy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ix, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let b00 = (y0 * w + x0) * d;
                        let b01 = (y0 * w + x1) * d;
                        let b10 = (y1 * w + x0) * d;
                        let b11 = (y1 * w + x1) * d;
                        let ob = (iy * ow + ix) * od;
                        let (fy, fx) = (E::f(fy), E::f(fx));
                        let one = E::one();
                        for (iz, &(z0, z1, fz)) in tz.iter().enumerate() {
                            let fz = E::f(fz);
                            let c00 = xc[b00 + z0] * (one - fz) + xc[b00 + z1] * fz;
                            let c01 = xc[b01 + z0] * (one - fz) + xc[b01 + z1] * fz;
                            let c10 = xc[b10 + z0] * (one - fz) + xc[b10 + z1] * fz;
                            let c11 = xc[b11 + z0] * (one - fz) + xc[b11 + z1] * fz;
                            let c0 = c00 * (one - fx) + c01 * fx;
                            let c1 = c10 * (one - fx) + c11 * fx;
                            oc[ob + iz] = c0 * (one - fy) + c1 * fy;
                        }
                    }
                }
            }
        }

        let needs = self.needs_grad(x);
        self.push(
            out,
            needs,
            Some(Box::new(move |_, g, gr| {
                let gs = g.as_slice().unwrap();
                let mut dx = ArrayD::<E>::zeros(IxDyn(&[c, h, w, d]));
                {
                    let ds = dx.as_slice_mut().unwrap();
                    for ch in 0..c {
                        let dc = &mut ds[ch * h * w * d..(ch + 1) * h * w * d];
                        let gc = &gs[ch * oh * ow * od..(ch + 1) * oh * ow * od];
                        for (iy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ix, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let b00 = (y0 * w + x0) * d;
                                let b01 = (y0 * w + x1) * d;
                                let b10 = (y1 * w + x0) * d;
                                let b11 = (y1 * w + x1) * d;
                                let ob = (iy * ow + ix) * od;
                                let (fy, fx) = (E::f(fy), E::f(fx));
                                let one = E::one();
                                for (iz, &(z0, z1, fz)) in tz.iter().enumerate() {
                                    let fz = E::f(fz);
                                    let gv = gc[ob + iz];
                                    let w00 = gv * (one - fy) * (one - fx);
                                    let w01 = gv * (one - fy) * fx;
                                    let w10 = gv * fy * (one - fx);
                                    let w11 = gv * fy * fx;
                                    dc[b00 + z0] = dc[b00 + z0] + w00 * (one - fz);
                                    dc[b00 + z1] = dc[b00 + z1] + w00 * fz;
                                    dc[b01 + z0] = dc[b01 + z0] + w01 * (one - fz);
                                    dc[b01 + z1] = dc[b01 + z1] + w01 * fz;
                                    dc[b10 + z0] = dc[b10 + z0] + w10 * (one - fz);
                                    dc[b10 + z1] = dc[b10 + z1] + w10 * fz;
                                    dc[b11 + z0] = dc[b11 + z0] + w11 * (one - fz);
                                    dc[b11 + z1] = dc[b11 + z1] + w11 * fz;
                                }
                            }
                        }
                    }
                }
                gr.accum(x, dx);
            })),
        )
    }
}
