//! Tape operations: forward evaluation plus gradient scatter rules.
//!
//! Array layout conventions used throughout the crate:
//! - feature maps are `[c, h, w, d]` (channel-major, C order),
//! - matrices are `[rows, cols]`,
//! - channel-token matrices are `[c, n]` with `n = h * w * d`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};

use super::{Elem, NodeId, Tape};

/// Dense matrix product helper dispatching to the blocked gemm kernel.
pub(crate) fn mm<E: Elem>(a: ArrayView2<'_, E>, b: ArrayView2<'_, E>) -> Array2<E> {
    assert_eq!(a.ncols(), b.nrows(), "gemm inner dimension");
    let mut c = Array2::<E>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(E::one(), &a, &b, E::zero(), &mut c);
    c
}

pub(crate) fn as2<E: Elem>(v: &ArrayD<E>) -> ArrayView2<'_, E> {
    v.view()
        .into_dimensionality::<Ix2>()
        .expect("expected 2-d node value")
}

/// View an arbitrary `[c, ...]` array as `[c, n]` (requires standard layout).
pub(crate) fn as_chan_mat<E: Elem>(v: &ArrayD<E>) -> ArrayView2<'_, E> {
    let c = v.shape()[0];
    let n: usize = v.shape()[1..].iter().product();
    v.view()
        .into_shape_with_order((c, n))
        .expect("channel-major view requires contiguous array")
}

fn sgn<E: Elem>(x: E) -> E {
    if x > E::zero() {
        E::one()
    } else if x < E::zero() {
        -E::one()
    } else {
        E::zero()
    }
}

impl<E: Elem> Tape<E> {
    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                if t.needs_grad(a) {
                    gr.accum(a, g.clone());
                }
                if t.needs_grad(b) {
                    gr.accum(b, g.clone());
                }
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) - self.value(b);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                if t.needs_grad(a) {
                    gr.accum(a, g.clone());
                }
                if t.needs_grad(b) {
                    gr.accum(b, g.mapv(|v| -v));
                }
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) * self.value(b);
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                if t.needs_grad(a) {
                    gr.accum(a, g * t.value(b));
                }
                if t.needs_grad(b) {
                    gr.accum(b, g * t.value(a));
                }
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let ke = E::f(k);
        let value = self.value(a).mapv(|v| v * ke);
        let needs = self.needs_grad(a);
        self.push(
            value,
            needs,
            Some(Box::new(move |_, g, gr| gr.accum(a, g.mapv(|v| v * ke)))),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|v| if v > E::zero() { v } else { E::zero() });
        let needs = self.needs_grad(a);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let mut dx = g.clone();
                dx.zip_mut_with(t.value(a), |d, &x| {
                    if x <= E::zero() {
                        *d = E::zero();
                    }
                });
                gr.accum(a, dx);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self
            .value(a)
            .mapv(|v| E::one() / (E::one() + (-v).exp()));
        let needs = self.needs_grad(a);
        let id_holder = self.len();
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let y = t.value(NodeId(id_holder));
                let mut dx = g.clone();
                dx.zip_mut_with(y, |d, &s| *d = *d * s * (E::one() - s));
                gr.accum(a, dx);
            })),
        )
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self
            .value(a)
            .mapv(|v| v / (E::one() + (-v).exp()));
        let needs = self.needs_grad(a);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let mut dx = g.clone();
                dx.zip_mut_with(t.value(a), |d, &x| {
                    let s = E::one() / (E::one() + (-x).exp());
                    *d = *d * (s + x * s * (E::one() - s));
                });
                gr.accum(a, dx);
            })),
        )
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = mm(as2(self.value(a)), as2(self.value(b))).into_dyn();
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let g2 = as2(g);
                if t.needs_grad(a) {
                    gr.accum(a, mm(g2, as2(t.value(b)).reversed_axes()).into_dyn());
                }
                if t.needs_grad(b) {
                    gr.accum(b, mm(as2(t.value(a)).reversed_axes(), g2).into_dyn());
                }
            })),
        )
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = mm(as2(self.value(a)), as2(self.value(b)).reversed_axes()).into_dyn();
        let needs = self.any_needs_grad(&[a, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let g2 = as2(g);
                if t.needs_grad(a) {
                    gr.accum(a, mm(g2, as2(t.value(b))).into_dyn());
                }
                if t.needs_grad(b) {
                    gr.accum(b, mm(g2.reversed_axes(), as2(t.value(a))).into_dyn());
                }
            })),
        )
    }

    /// Fully connected layer on a vector: `w [out, in] * x [in] + b [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix1>().unwrap();
        let wv = as2(self.value(w));
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(wv.ncols(), xv.len());
        assert_eq!(wv.nrows(), bv.len());
        let value = (wv.dot(&xv) + &bv).into_dyn();
        let needs = self.any_needs_grad(&[x, w, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                if t.needs_grad(x) {
                    let wv = as2(t.value(w));
                    gr.accum(x, wv.t().dot(&g1).into_dyn());
                }
                if t.needs_grad(w) {
                    let xv = t.value(x).view().into_dimensionality::<Ix1>().unwrap();
                    let mut dw = Array2::<E>::zeros((g1.len(), xv.len()));
                    for (i, gi) in g1.iter().enumerate() {
                        for (j, xj) in xv.iter().enumerate() {
                            dw[[i, j]] = *gi * *xj;
                        }
                    }
                    gr.accum(w, dw.into_dyn());
                }
                if t.needs_grad(b) {
                    gr.accum(b, g.clone());
                }
            })),
        )
    }

    // ---- softmax ---------------------------------------------------------

    /// Row-wise softmax over the last axis of a 2-d node.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = as2(self.value(a));
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: E = row.iter().copied().sum();
            row.mapv_inplace(|v| v / sum);
        }
        let needs = self.needs_grad(a);
        let self_id = self.len();
        self.push(
            y.into_dyn(),
            needs,
            Some(Box::new(move |t, g, gr| {
                let y = as2(t.value(NodeId(self_id)));
                let g2 = as2(g);
                let mut dx = Array2::<E>::zeros(y.raw_dim());
                for ((grow, yrow), mut drow) in
                    g2.rows().into_iter().zip(y.rows()).zip(dx.rows_mut())
                {
                    let dot: E = grow
                        .iter()
                        .zip(yrow.iter())
                        .map(|(&gi, &yi)| gi * yi)
                        .sum();
                    for ((d, &gi), &yi) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *d = (gi - dot) * yi;
                    }
                }
                gr.accum(a, dx.into_dyn());
            })),
        )
    }

    /// Softmax over a 1-d node.
    pub fn softmax_1d(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let r = self.reshape(a, &[1, n]);
        let s = self.softmax_rows(r);
        self.reshape(s, &[n])
    }

    // ---- normalization ---------------------------------------------------

    /// Layer normalization over channels, per spatial position.
    ///
    /// `x` is `[c, ...spatial]`; `gamma`/`beta` are `[c]`. Statistics are
    /// taken over the channel axis at each position (biased variance).
    pub fn layernorm_chan(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = E::f(1e-6);
        let shape: Vec<usize> = self.value(x).shape().to_vec();
        let c = shape[0];
        let xm = as_chan_mat(self.value(x)).to_owned(); // [c, n]
        let mean = xm.mean_axis(Axis(0)).unwrap(); // [n]
        let centered = &xm - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(0)).unwrap();
        let inv_s = var.mapv(|v| E::one() / (v + eps).sqrt()); // [n]
        let xhat = &centered * &inv_s;
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(gv.len(), c);
        let gcol = gv.insert_axis(Axis(1));
        let bcol = bv.insert_axis(Axis(1));
        let y = (&xhat * &gcol + &bcol)
            .into_shape_with_order(IxDyn(&shape))
            .unwrap();

        let needs = self.any_needs_grad(&[x, gamma, beta]);
        let xhat_saved = xhat;
        let inv_s_saved = inv_s;
        let shape_saved = shape;
        self.push(
            y,
            needs,
            Some(Box::new(move |t, g, gr| {
                let gm = as_chan_mat(g);
                if t.needs_grad(gamma) {
                    let dgamma = (&gm * &xhat_saved).sum_axis(Axis(1));
                    gr.accum(gamma, dgamma.into_dyn());
                }
                if t.needs_grad(beta) {
                    gr.accum(beta, gm.sum_axis(Axis(1)).into_dyn());
                }
                if t.needs_grad(x) {
                    let gv = t
                        .value(gamma)
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap()
                        .insert_axis(Axis(1));
                    let gxhat = &gm * &gv; // [c, n]
                    let m1 = gxhat.mean_axis(Axis(0)).unwrap(); // [n]
                    let m2 = (&gxhat * &xhat_saved).mean_axis(Axis(0)).unwrap();
                    let dx = ((&gxhat - &m1) - &(&xhat_saved * &m2)) * &inv_s_saved;
                    gr.accum(
                        x,
                        dx.into_shape_with_order(IxDyn(&shape_saved)).unwrap(),
                    );
                }
            })),
        )
    }

    /// Group normalization over `[c, h, w, d]` with per-channel scale/shift.
    pub fn groupnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let eps = E::f(1e-5);
        let shape: Vec<usize> = self.value(x).shape().to_vec();
        let c = shape[0];
        assert!(groups >= 1 && c % groups == 0, "groups must divide channels");
        let n: usize = shape[1..].iter().product();
        let block = (c / groups) * n;

        let flat = self
            .value(x)
            .view()
            .into_shape_with_order((groups, block))
            .unwrap()
            .to_owned();
        let mean = flat.mean_axis(Axis(1)).unwrap(); // [groups]
        let centered = &flat - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
        let inv_s = var.mapv(|v| E::one() / (v + eps).sqrt());
        let xhat = &centered * &inv_s.view().insert_axis(Axis(1)); // [groups, block]

        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(gv.len(), c);
        let xhat_cn = xhat.view().into_shape_with_order((c, n)).unwrap();
        let y = (&xhat_cn * &gv.insert_axis(Axis(1)) + &bv.insert_axis(Axis(1)))
            .into_shape_with_order(IxDyn(&shape))
            .unwrap();

        let needs = self.any_needs_grad(&[x, gamma, beta]);
        let xhat_saved = xhat; // [groups, block]
        let inv_s_saved = inv_s;
        let shape_saved = shape;
        self.push(
            y,
            needs,
            Some(Box::new(move |t, g, gr| {
                let gm = as_chan_mat(g); // [c, n]
                let xhat_cn = xhat_saved
                    .view()
                    .into_shape_with_order((c, n))
                    .unwrap();
                if t.needs_grad(gamma) {
                    let dgamma = (&gm * &xhat_cn).sum_axis(Axis(1));
                    gr.accum(gamma, dgamma.into_dyn());
                }
                if t.needs_grad(beta) {
                    gr.accum(beta, gm.sum_axis(Axis(1)).into_dyn());
                }
                if t.needs_grad(x) {
                    let gv = t
                        .value(gamma)
                        .view()
                        .into_dimensionality::<Ix1>()
                        .unwrap()
                        .insert_axis(Axis(1));
                    let gxhat = (&gm * &gv)
                        .into_shape_with_order((groups, block))
                        .unwrap();
                    let m1 = gxhat.mean_axis(Axis(1)).unwrap();
                    let m2 = (&gxhat * &xhat_saved).mean_axis(Axis(1)).unwrap();
                    let dx = ((&gxhat - &m1.view().insert_axis(Axis(1)))
                        - &(&xhat_saved * &m2.view().insert_axis(Axis(1))))
                        * &inv_s_saved.view().insert_axis(Axis(1));
                    gr.accum(
                        x,
                        dx.into_shape_with_order(IxDyn(&shape_saved)).unwrap(),
                    );
                }
            })),
        )
    }

    // ---- channel/spatial reshaping ----------------------------------------

    /// Global average pooling: `[c, h, w, d] -> [c]`.
    pub fn gap(&mut self, x: NodeId) -> NodeId {
        let xm = as_chan_mat(self.value(x));
        let n = xm.ncols();
        let value = xm.mean_axis(Axis(1)).unwrap().into_dyn();
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let shape = t.value(x).raw_dim();
                let inv = E::one() / E::f(n as f64);
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ArrayD::<E>::zeros(shape);
                for (mut chan, &gc) in dx.outer_iter_mut().zip(g1.iter()) {
                    chan.fill(gc * inv);
                }
                gr.accum(x, dx);
            })),
        )
    }

    /// Broadcast a `[c]` vector across a spatial grid: `-> [c, h, w, d]`.
    pub fn broadcast_spatial(&mut self, v: NodeId, dims: (usize, usize, usize)) -> NodeId {
        let vec = self.value(v).view().into_dimensionality::<Ix1>().unwrap();
        let c = vec.len();
        let (h, w, d) = dims;
        let mut out = ArrayD::<E>::zeros(IxDyn(&[c, h, w, d]));
        for (mut chan, &val) in out.outer_iter_mut().zip(vec.iter()) {
            chan.fill(val);
        }
        let needs = self.needs_grad(v);
        self.push(
            out,
            needs,
            Some(Box::new(move |_, g, gr| {
                let gm = as_chan_mat(g);
                gr.accum(v, gm.sum_axis(Axis(1)).into_dyn());
            })),
        )
    }

    /// Concatenate along the channel axis (axis 0).
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat shapes");
        let needs = self.any_needs_grad(parts);
        let parts: Vec<NodeId> = parts.to_vec();
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let mut start = 0;
                for &p in &parts {
                    let len = t.value(p).shape()[0];
                    if t.needs_grad(p) {
                        let slice = g.slice_axis(Axis(0), ndarray::Slice::from(start..start + len));
                        gr.accum(p, slice.to_owned());
                    }
                    start += len;
                }
            })),
        )
    }

    /// Slice `len` channels starting at `start` (axis 0).
    pub fn narrow_channels(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self
            .value(x)
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let mut dx = ArrayD::<E>::zeros(t.value(x).raw_dim());
                dx.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(g);
                gr.accum(x, dx);
            })),
        )
    }

    /// Reshape to a new shape with the same element count (C order).
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let value = self
            .value(x)
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape")
            .to_owned();
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let old = t.value(x).raw_dim();
                gr.accum(
                    x,
                    g.view().into_shape_with_order(old).unwrap().to_owned(),
                );
            })),
        )
    }

    // ---- weighted combinations --------------------------------------------

    /// Linear combination of equally shaped components with a weight vector:
    /// `sum_n w[n] * comp[n]`.
    pub fn lincomb(&mut self, comps: &[NodeId], w: NodeId) -> NodeId {
        let wv = self.value(w).view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(wv.len(), comps.len());
        let mut value = ArrayD::<E>::zeros(self.value(comps[0]).raw_dim());
        for (&cid, &wn) in comps.iter().zip(wv.iter()) {
            value.zip_mut_with(self.value(cid), |acc, &v| *acc = *acc + wn * v);
        }
        let needs = self.any_needs_grad(comps) || self.needs_grad(w);
        let comps: Vec<NodeId> = comps.to_vec();
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let wv = t.value(w).view().into_dimensionality::<Ix1>().unwrap();
                for (n, &cid) in comps.iter().enumerate() {
                    if t.needs_grad(cid) {
                        gr.accum(cid, g.mapv(|v| v * wv[n]));
                    }
                }
                if t.needs_grad(w) {
                    let mut dw = ndarray::Array1::<E>::zeros(comps.len());
                    for (n, &cid) in comps.iter().enumerate() {
                        dw[n] = g
                            .iter()
                            .zip(t.value(cid).iter())
                            .map(|(&gi, &ci)| gi * ci)
                            .sum();
                    }
                    gr.accum(w, dw.into_dyn());
                }
            })),
        )
    }

    /// Multiply a tensor by the `idx`-th element of a vector node.
    pub fn mul_scalar_elem(&mut self, x: NodeId, s: NodeId, idx: usize) -> NodeId {
        let sv = self.value(s).view().into_dimensionality::<Ix1>().unwrap();
        let k = sv[idx];
        let slen = sv.len();
        let value = self.value(x).mapv(|v| v * k);
        let needs = self.any_needs_grad(&[x, s]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                if t.needs_grad(x) {
                    let k = t.value(s).view().into_dimensionality::<Ix1>().unwrap()[idx];
                    gr.accum(x, g.mapv(|v| v * k));
                }
                if t.needs_grad(s) {
                    let dot: E = g
                        .iter()
                        .zip(t.value(x).iter())
                        .map(|(&gi, &xi)| gi * xi)
                        .sum();
                    let mut ds = ndarray::Array1::<E>::zeros(slen);
                    ds[idx] = dot;
                    gr.accum(s, ds.into_dyn());
                }
            })),
        )
    }

    /// Add a per-channel bias to a `[c, ...]` tensor.
    pub fn add_bias_chan(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let c = self.value(x).shape()[0];
        assert_eq!(bv.len(), c);
        let mut value = self.value(x).clone();
        for (mut chan, &bias) in value.outer_iter_mut().zip(bv.iter()) {
            chan.mapv_inplace(|v| v + bias);
        }
        let needs = self.any_needs_grad(&[x, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                if t.needs_grad(x) {
                    gr.accum(x, g.clone());
                }
                if t.needs_grad(b) {
                    let gm = as_chan_mat(g);
                    gr.accum(b, gm.sum_axis(Axis(1)).into_dyn());
                }
            })),
        )
    }

    /// Feature-wise affine conditioning: `x * (1 + s) + b` with per-channel
    /// `s`, `b` broadcast over spatial positions.
    pub fn affine_chan(&mut self, x: NodeId, s: NodeId, b: NodeId) -> NodeId {
        let sv = self.value(s).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let c = self.value(x).shape()[0];
        assert_eq!(sv.len(), c);
        assert_eq!(bv.len(), c);
        let mut value = self.value(x).clone();
        for ((mut chan, &sc), &bc) in value.outer_iter_mut().zip(sv.iter()).zip(bv.iter()) {
            chan.mapv_inplace(|v| v * (E::one() + sc) + bc);
        }
        let needs = self.any_needs_grad(&[x, s, b]);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let sv = t.value(s).view().into_dimensionality::<Ix1>().unwrap();
                if t.needs_grad(x) {
                    let mut dx = g.clone();
                    for (mut chan, &sc) in dx.outer_iter_mut().zip(sv.iter()) {
                        chan.mapv_inplace(|v| v * (E::one() + sc));
                    }
                    gr.accum(x, dx);
                }
                if t.needs_grad(s) {
                    let gm = as_chan_mat(g);
                    let xm = as_chan_mat(t.value(x));
                    let ds = (&gm * &xm).sum_axis(Axis(1));
                    gr.accum(s, ds.into_dyn());
                }
                if t.needs_grad(b) {
                    let gm = as_chan_mat(g);
                    gr.accum(b, gm.sum_axis(Axis(1)).into_dyn());
                }
            })),
        )
    }

    // ---- reductions / losses ----------------------------------------------

    /// Sum of all elements, as a `[1]` node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: E = self.value(x).iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[1]), s);
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let g0 = g[[0]];
                gr.accum(x, ArrayD::from_elem(t.value(x).raw_dim(), g0));
            })),
        )
    }

    /// Weighted sum against a constant tensor, as a `[1]` node. Used as a
    /// smooth scalarization for gradient checking.
    pub fn dot_const(&mut self, x: NodeId, weights: ArrayD<E>) -> NodeId {
        assert_eq!(self.value(x).shape(), weights.shape());
        let s: E = self
            .value(x)
            .iter()
            .zip(weights.iter())
            .map(|(&a, &b)| a * b)
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[1]), s);
        let needs = self.needs_grad(x);
        self.push(
            value,
            needs,
            Some(Box::new(move |_, g, gr| {
                let g0 = g[[0]];
                gr.accum(x, weights.mapv(|v| v * g0));
            })),
        )
    }

    /// Mean absolute difference against a constant target, as a `[1]` node.
    /// Ties take subgradient zero.
    pub fn l1_vs_const(&mut self, pred: NodeId, target: ArrayD<E>) -> NodeId {
        assert_eq!(self.value(pred).shape(), target.shape());
        let n = target.len();
        let inv_n = E::one() / E::f(n as f64);
        let s: E = self
            .value(pred)
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let value = ArrayD::from_elem(IxDyn(&[1]), s * inv_n);
        let needs = self.needs_grad(pred);
        self.push(
            value,
            needs,
            Some(Box::new(move |t, g, gr| {
                let g0 = g[[0]] * inv_n;
                let mut dp = ArrayD::<E>::zeros(target.raw_dim());
                for ((d, &p), &tv) in dp
                    .iter_mut()
                    .zip(t.value(pred).iter())
                    .zip(target.iter())
                {
                    *d = g0 * sgn(p - tv);
                }
                gr.accum(pred, dp);
            })),
        )
    }
}
