//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in evaluation order, so reverse insertion order is a valid
//! topological order for the backward sweep. Feature maps are `(N, C, H, W)`.

use std::cell::RefCell;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: true }
    }

    /// Graph for forward-only evaluation; nothing is retained for backward.
    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Arc<Tensor<T>>) -> Var {
        self.push_leaf(value, self.record)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), requires_grad, backward: None });
        Var(nodes.len() - 1)
    }

    fn push<F>(&self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Var(nodes.len() - 1)
    }

    /// Propagates `seed` (the gradient of some scalar objective with
    /// respect to `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if !self.record {
            return Err(Error::Param("backward on an inference graph".into()));
        }
        let out_shape = nodes
            .get(output.0)
            .ok_or_else(|| Error::Param("output var not on this graph".into()))?
            .value
            .shape();
        if seed.shape() != out_shape {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                seed.shape(),
                out_shape
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            let Some(f) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = f(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, need) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // keep leaf gradients, drop intermediates
            if node.parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&vb, |d, y| d * y).expect("same shape")),
                need[1].then(|| g.zip_map(&va, |d, x| d * x).expect("same shape")),
            ]
        }))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn silu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x * sigmoid(x));
        self.push(out, &[a], move |g, _| {
            let one = T::one();
            vec![Some(
                g.zip_map(&va, |d, x| {
                    let s = sigmoid(x);
                    d * s * (one + x * (one - s))
                })
                .expect("same shape"),
            )]
        })
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x.max(T::zero()));
        self.push(out, &[a], move |g, _| {
            vec![Some(
                g.zip_map(&va, |d, x| if x > T::zero() { d } else { T::zero() })
                    .expect("same shape"),
            )]
        })
    }

    // ---- channel broadcasts ---------------------------------------------

    /// `x + v` where `v` is `(C)` (shared over the batch) or `(N, C)`.
    pub fn add_channel(&self, x: Var, v: Var) -> Result<Var> {
        let (vx, vv) = (self.value(x), self.value(v));
        let (n, c, h, w) = vx.dims4()?;
        let per_sample = channel_vec_kind(vv.shape(), n, c)?;
        let hw = h * w;
        let mut out = (*vx).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let (s, ch) = (i / c, i % c);
            let add = vv.data()[if per_sample { s * c + ch } else { ch }];
            chunk.iter_mut().for_each(|o| *o += add);
        }
        let vshape = vv.shape().to_vec();
        Ok(self.push(out, &[x, v], move |g, need| {
            let dv = need[1].then(|| {
                let mut dv = Tensor::zeros(&vshape);
                for (i, chunk) in g.data().chunks(hw).enumerate() {
                    let (s, ch) = (i / c, i % c);
                    dv.data_mut()[if per_sample { s * c + ch } else { ch }] +=
                        chunk.iter().copied().sum::<T>();
                }
                dv
            });
            vec![Some(g.clone()), dv]
        }))
    }

    /// `x * (1 + scale) + shift` with per-sample channel vectors `(N, C)`.
    pub fn scale_shift(&self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (vx, vs, vb) = (self.value(x), self.value(scale), self.value(shift));
        let (n, c, h, w) = vx.dims4()?;
        if vs.shape() != [n, c] || vb.shape() != [n, c] {
            return Err(Error::Shape(format!(
                "scale/shift must be [{n}, {c}], got {:?} / {:?}",
                vs.shape(),
                vb.shape()
            )));
        }
        let hw = h * w;
        let one = T::one();
        let mut out = (*vx).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let (a, b) = (one + vs.data()[i], vb.data()[i]);
            chunk.iter_mut().for_each(|o| *o = *o * a + b);
        }
        Ok(self.push(out, &[x, scale, shift], move |g, need| {
            let mut dx = Tensor::zeros(g.shape());
            let mut ds = Tensor::zeros(&[n, c]);
            let mut db = Tensor::zeros(&[n, c]);
            for (i, (gc, xc)) in g.data().chunks(hw).zip(vx.data().chunks(hw)).enumerate() {
                let a = one + vs.data()[i];
                if need[0] {
                    for (d, &gv) in dx.data_mut()[i * hw..(i + 1) * hw].iter_mut().zip(gc) {
                        *d = gv * a;
                    }
                }
                ds.data_mut()[i] = gc.iter().zip(xc).map(|(&gv, &xv)| gv * xv).sum();
                db.data_mut()[i] = gc.iter().copied().sum();
            }
            vec![need[0].then_some(dx), need[1].then_some(ds), need[2].then_some(db)]
        }))
    }

    // ---- dense ------------------------------------------------------------

    /// `x · wᵀ + b` for `x: (N, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, fin) = dims2(&vx)?;
        let (fout, win) = dims2(&vw)?;
        if fin != win {
            return Err(Error::Shape(format!("linear: input {fin} vs weight {win}")));
        }
        let mut out = Tensor::zeros(&[n, fout]);
        T::gemm(n, fin, fout, vx.data(), false, vw.data(), true, out.data_mut(), T::zero());
        crate::tensor::count(n * fin * fout);
        let y = self.push(out, &[x, w], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = Tensor::zeros(&[n, fin]);
                T::gemm(n, fout, fin, g.data(), false, vw.data(), false, dx.data_mut(), T::zero());
                dx
            });
            let dw = need[1].then(|| {
                let mut dw = Tensor::zeros(&[fout, fin]);
                T::gemm(fout, n, fin, g.data(), true, vx.data(), false, dw.data_mut(), T::zero());
                dw
            });
            vec![dx, dw]
        });
        match b {
            None => Ok(y),
            Some(b) => self.add_row_bias(y, b),
        }
    }

    fn add_row_bias(&self, y: Var, b: Var) -> Result<Var> {
        let (vy, vb) = (self.value(y), self.value(b));
        let (n, f) = dims2(&vy)?;
        if vb.shape() != [f] {
            return Err(Error::Shape(format!("bias {:?} vs features {f}", vb.shape())));
        }
        let mut out = (*vy).clone();
        for row in out.data_mut().chunks_mut(f) {
            row.iter_mut().zip(vb.data()).for_each(|(o, &bv)| *o += bv);
        }
        Ok(self.push(out, &[y, b], move |g, _| {
            let mut db = Tensor::zeros(&[f]);
            for row in g.data().chunks(f) {
                db.data_mut().iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
            }
            let _ = n;
            vec![Some(g.clone()), Some(db)]
        }))
    }

    /// 2-D convolution, weight `(Cout, Cin, kh, kw)`, symmetric zero padding.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (n, cin, h, wd) = vx.dims4()?;
        let (cout, wcin, kh, kw) = vw.dims4()?;
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{wd}"
            )));
        }
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let k = geo.cols_rows();
        let hwo = geo.ho * geo.wo;
        let in_per = cin * h * wd;
        let mut out = Tensor::zeros(&[n, cout, geo.ho, geo.wo]);
        out.data_mut().par_chunks_mut(cout * hwo).enumerate().for_each(|(s, o)| {
            let xs = &vx.data()[s * in_per..(s + 1) * in_per];
            let col = geo.im2col(xs);
            T::gemm(cout, k, hwo, vw.data(), false, col.as_ref(), false, o, T::zero());
        });
        crate::tensor::count(n * cout * k * hwo);
        let y = self.push(out, &[x, w], move |g, need| {
            let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = g
                .data()
                .par_chunks(cout * hwo)
                .enumerate()
                .map(|(s, gs)| {
                    let dw = need[1].then(|| {
                        let xs = &vx.data()[s * in_per..(s + 1) * in_per];
                        let col = geo.im2col(xs);
                        let mut dw = vec![T::zero(); cout * k];
                        T::gemm(cout, hwo, k, gs, false, col.as_ref(), true, &mut dw, T::zero());
                        dw
                    });
                    let dx = need[0].then(|| {
                        let mut dcol = vec![T::zero(); k * hwo];
                        T::gemm(k, cout, hwo, vw.data(), true, gs, false, &mut dcol, T::zero());
                        geo.col2im(&dcol)
                    });
                    (dx, dw)
                })
                .collect();
            let mut dx = need[0].then(|| Tensor::zeros(&[n, cin, h, wd]));
            let mut dw = need[1].then(|| Tensor::zeros(&[cout, cin, kh, kw]));
            for (s, (sdx, sdw)) in per_sample.into_iter().enumerate() {
                if let (Some(dx), Some(sdx)) = (dx.as_mut(), sdx) {
                    dx.data_mut()[s * in_per..(s + 1) * in_per].copy_from_slice(&sdx);
                }
                if let (Some(dw), Some(sdw)) = (dw.as_mut(), sdw) {
                    dw.data_mut().iter_mut().zip(&sdw).for_each(|(a, &b)| *a += b);
                }
            }
            vec![dx, dw]
        });
        match b {
            None => Ok(y),
            Some(b) => self.add_channel(y, b),
        }
    }

    /// Per-output-channel kernel standardization `(W − mean) / sqrt(var + eps)`
    /// with statistics over `(Cin × kh × kw)`.
    pub fn weight_standardize(&self, w: Var, eps: f64) -> Result<Var> {
        let vw = self.value(w);
        let rows = *vw
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("weight_standardize on scalar".into()))?;
        let fan_in = vw.numel() / rows.max(1);
        let (out, inv) = normalize_rows(vw.data(), fan_in, T::from_f64_lossy(eps));
        let shape = vw.shape().to_vec();
        let what = Tensor::from_vec(&shape, out)?;
        let cached = what.clone();
        Ok(self.push(what, &[w], move |g, _| {
            let dw = normalize_rows_backward(g.data(), cached.data(), &inv, fan_in);
            vec![Some(Tensor::from_vec(&shape, dw).expect("shape preserved"))]
        }))
    }

    /// Group normalization followed by a per-channel affine map.
    pub fn group_norm(
        &self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Param(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let group_len = (c / groups) * h * w;
        let (xhat, inv) = normalize_rows(vx.data(), group_len, T::from_f64_lossy(eps));
        let xhat = Tensor::from_vec(&[n, c, h, w], xhat)?;
        self.affine_after_norm(x, xhat, gamma, beta, move |dxhat, xhat| {
            normalize_rows_backward(dxhat, xhat, &inv, group_len)
        })
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel `(mean, biased variance)` used.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4()?;
        let hw = h * w;
        // gather each channel into a contiguous row
        let mut rows = vec![T::zero(); vx.numel()];
        for s in 0..n {
            for ch in 0..c {
                let src = &vx.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                rows[ch * n * hw + s * hw..ch * n * hw + (s + 1) * hw].copy_from_slice(src);
            }
        }
        let row_len = n * hw;
        let mut mean = Vec::with_capacity(c);
        let mut var = Vec::with_capacity(c);
        for r in rows.chunks(row_len) {
            let (m, v) = mean_var(r);
            mean.push(m.to_f64_lossy());
            var.push(v.to_f64_lossy());
        }
        let (xhat_rows, inv) = normalize_rows(&rows, row_len, T::from_f64_lossy(eps));
        let xhat = Tensor::from_vec(&[n, c, h, w], channel_major_to_nchw(&xhat_rows, n, c, hw))?;
        let y = self.affine_after_norm(x, xhat, gamma, beta, move |dxhat, xhat| {
            let dr = nchw_to_channel_major(dxhat, n, c, hw);
            let xr = nchw_to_channel_major(xhat, n, c, hw);
            let dx = normalize_rows_backward(&dr, &xr, &inv, row_len);
            channel_major_to_nchw(&dx, n, c, hw)
        })?;
        Ok((y, mean, var))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4()?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("batch_norm_eval: running stats length".into()));
        }
        let hw = h * w;
        let mut xhat = (*vx).clone();
        let inv: Vec<T> = running_var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
        for (i, chunk) in xhat.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let m = T::from_f64_lossy(running_mean[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * inv[ch]);
        }
        let _ = n;
        self.affine_after_norm(x, xhat, gamma, beta, move |dxhat, _| {
            let mut dx = dxhat.to_vec();
            for (i, chunk) in dx.chunks_mut(hw).enumerate() {
                let s = inv[i % c];
                chunk.iter_mut().for_each(|v| *v *= s);
            }
            dx
        })
    }

    fn affine_after_norm<F>(
        &self,
        x: Var,
        xhat: Tensor<T>,
        gamma: Var,
        beta: Var,
        dnorm: F,
    ) -> Result<Var>
    where
        F: Fn(&[T], &[T]) -> Vec<T> + 'static,
    {
        let (vg, vb) = (self.value(gamma), self.value(beta));
        let (_, c, h, w) = xhat.dims4()?;
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::Shape(format!(
                "norm affine params must be [{c}], got {:?} / {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let hw = h * w;
        let mut out = xhat.clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let (gm, bt) = (vg.data()[ch], vb.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * gm + bt);
        }
        Ok(self.push(out, &[x, gamma, beta], move |g, need| {
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            let mut dxhat = vec![T::zero(); g.numel()];
            for (i, (gc, xc)) in g.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
                let ch = i % c;
                let gm = vg.data()[ch];
                let mut sg = T::zero();
                let mut sgx = T::zero();
                for (j, (&gv, &xv)) in gc.iter().zip(xc).enumerate() {
                    sg += gv;
                    sgx += gv * xv;
                    dxhat[i * hw + j] = gv * gm;
                }
                dgamma.data_mut()[ch] += sgx;
                dbeta.data_mut()[ch] += sg;
            }
            let dx = need[0].then(|| {
                Tensor::from_vec(g.shape(), dnorm(&dxhat, xhat.data())).expect("shape preserved")
            });
            vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
        }))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let old = vx.shape().to_vec();
        let out = (*vx).clone().reshape(shape)?;
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(g.clone().reshape(&old).expect("numel preserved"))]
        }))
    }

    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ca, h, w) = va.dims4()?;
        let (nb, cb, hb, wb) = vb.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (pa, pb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(va.numel() + vb.numel());
        for s in 0..n {
            out.extend_from_slice(&va.data()[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&vb.data()[s * pb..(s + 1) * pb]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], out)?;
        Ok(self.push(out, &[a, b], move |g, _| {
            let mut da = Vec::with_capacity(n * pa);
            let mut db = Vec::with_capacity(n * pb);
            for chunk in g.data().chunks(pa + pb) {
                da.extend_from_slice(&chunk[..pa]);
                db.extend_from_slice(&chunk[pa..]);
            }
            vec![
                Some(Tensor::from_vec(&[n, ca, h, w], da).expect("shape")),
                Some(Tensor::from_vec(&[n, cb, h, w], db).expect("shape")),
            ]
        }))
    }

    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4()?;
        if start + len > c {
            return Err(Error::Shape(format!("channel slice {start}+{len} of {c}")));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            out.extend_from_slice(&vx.data()[base..base + len * hw]);
        }
        let out = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.push(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for s in 0..n {
                let base = (s * c + start) * hw;
                dx.data_mut()[base..base + len * hw]
                    .copy_from_slice(&g.data()[s * len * hw..(s + 1) * len * hw]);
            }
            vec![Some(dx)]
        }))
    }

    pub fn upsample_nearest2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        for (plane, src) in out.data_mut().chunks_mut(h2 * w2).zip(vx.data().chunks(h * w)) {
            for y in 0..h2 {
                for xx in 0..w2 {
                    plane[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (plane, gp) in dx.data_mut().chunks_mut(h * w).zip(g.data().chunks(h2 * w2)) {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        plane[(y / 2) * w + xx / 2] += gp[y * w2 + xx];
                    }
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Max pooling with square window, zero-free padding (padded cells never win).
    pub fn max_pool(&self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4()?;
        if kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(Error::Shape("max_pool geometry".into()));
        }
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        for (p, src) in vx.data().chunks(h * w).enumerate() {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = p * h * w + at;
                }
            }
        }
        Ok(self.push(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (o, &src) in argmax.iter().enumerate() {
                dx.data_mut()[src] += g.data()[o];
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over spatial positions: `(N, C, H, W) → (N, C)`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (n, c, h, w) = vx.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_f64_lossy(hw as f64);
        let out: Vec<T> = vx.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (plane, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                plane.iter_mut().for_each(|v| *v = gv * inv);
            }
            vec![Some(dx)]
        }))
    }

    // ---- batched matrix algebra (attention) -------------------------------

    /// Batched `op(a) · op(b)` for rank-3 operands `(B, ·, ·)`.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ba, ra, ca) = dims3(&va)?;
        let (bb, rb, cb) = dims3(&vb)?;
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, nn) = if trans_b { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(Error::Shape(format!(
                "bmm: {:?}{} x {:?}{}",
                va.shape(),
                if trans_a { "ᵀ" } else { "" },
                vb.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = Tensor::zeros(&[ba, m, nn]);
        for ((o, sa), sb) in out
            .data_mut()
            .chunks_mut(m * nn)
            .zip(va.data().chunks(ra * ca))
            .zip(vb.data().chunks(rb * cb))
        {
            T::gemm(m, k, nn, sa, trans_a, sb, trans_b, o, T::zero());
        }
        crate::tensor::count(ba * m * k * nn);
        Ok(self.push(out, &[a, b], move |g, need| {
            let da = need[0].then(|| {
                let mut da = Tensor::zeros(&[ba, ra, ca]);
                for ((d, gs), sb) in da
                    .data_mut()
                    .chunks_mut(ra * ca)
                    .zip(g.data().chunks(m * nn))
                    .zip(vb.data().chunks(rb * cb))
                {
                    if trans_a {
                        // A stored k×m: dA = op(B) · Gᵀ
                        T::gemm(k, nn, m, sb, trans_b, gs, true, d, T::zero());
                    } else {
                        // dA = G · op(B)ᵀ
                        T::gemm(m, nn, k, gs, false, sb, !trans_b, d, T::zero());
                    }
                }
                da
            });
            let db = need[1].then(|| {
                let mut db = Tensor::zeros(&[bb, rb, cb]);
                for ((d, gs), sa) in db
                    .data_mut()
                    .chunks_mut(rb * cb)
                    .zip(g.data().chunks(m * nn))
                    .zip(va.data().chunks(ra * ca))
                {
                    if trans_b {
                        // B stored n×k: dB = Gᵀ · op(A)
                        T::gemm(nn, m, k, gs, true, sa, trans_a, d, T::zero());
                    } else {
                        // dB = op(A)ᵀ · G
                        T::gemm(k, m, nn, sa, !trans_a, gs, false, d, T::zero());
                    }
                }
                db
            });
            vec![da, db]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = *vx
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax on scalar".into()))?;
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let y = out.clone();
        Ok(self.push(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(g.shape());
            for ((d, gr), yr) in dx
                .data_mut()
                .chunks_mut(cols)
                .zip(g.data().chunks(cols))
                .zip(y.data().chunks(cols))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((dv, &gv), &yv) in d.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            vec![Some(dx)]
        }))
    }

    /// Swaps the two trailing axes of a rank-3 tensor.
    pub fn transpose_last2(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (b, r, c) = dims3(&vx)?;
        let out = Tensor::from_vec(&[b, c, r], transpose_batched(vx.data(), b, r, c))?;
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(
                Tensor::from_vec(&[b, r, c], transpose_batched(g.data(), b, c, r))
                    .expect("shape"),
            )]
        }))
    }

    /// Row sums of a rank-3 tensor: `(B, R, C) → (B, R, 1)`.
    pub fn sum_last(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (b, r, c) = dims3(&vx)?;
        let out: Vec<T> = vx.data().chunks(c).map(|row| row.iter().copied().sum()).collect();
        let out = Tensor::from_vec(&[b, r, 1], out)?;
        Ok(self.push(out, &[x], move |g, _| {
            let mut dx = Tensor::zeros(&[b, r, c]);
            for (row, &gv) in dx.data_mut().chunks_mut(c).zip(g.data()) {
                row.iter_mut().for_each(|v| *v = gv);
            }
            vec![Some(dx)]
        }))
    }

    /// `num / den` with `num: (B, R, C)` and `den: (B, 1, C)` broadcast over rows.
    pub fn div_rows(&self, num: Var, den: Var) -> Result<Var> {
        let (vn, vd) = (self.value(num), self.value(den));
        let (b, r, c) = dims3(&vn)?;
        if vd.shape() != [b, 1, c] {
            return Err(Error::Shape(format!(
                "div_rows: denominator {:?} vs [{b}, 1, {c}]",
                vd.shape()
            )));
        }
        let mut out = (*vn).clone();
        for (s, block) in out.data_mut().chunks_mut(r * c).enumerate() {
            let dd = &vd.data()[s * c..(s + 1) * c];
            for row in block.chunks_mut(c) {
                row.iter_mut().zip(dd).for_each(|(v, &d)| *v = *v / d);
            }
        }
        let y = out.clone();
        Ok(self.push(out, &[num, den], move |g, need| {
            let mut dn = Tensor::zeros(&[b, r, c]);
            let mut dd = Tensor::zeros(&[b, 1, c]);
            for s in 0..b {
                let den_s = &vd.data()[s * c..(s + 1) * c];
                for i in 0..r {
                    for j in 0..c {
                        let idx = (s * r + i) * c + j;
                        let gv = g.data()[idx];
                        dn.data_mut()[idx] = gv / den_s[j];
                        dd.data_mut()[s * c + j] -= gv * y.data()[idx] / den_s[j];
                    }
                }
            }
            vec![need[0].then_some(dn), need[1].then_some(dd)]
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

enum Cols<'a, T> {
    Borrowed(&'a [T]),
    Owned(Vec<T>),
}

impl<T> AsRef<[T]> for Cols<'_, T> {
    fn as_ref(&self) -> &[T] {
        match self {
            Cols::Borrowed(s) => s,
            Cols::Owned(v) => v,
        }
    }
}

impl ConvGeometry {
    fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<'a, T: Scalar>(&self, x: &'a [T]) -> Cols<'a, T> {
        if self.is_pointwise() {
            return Cols::Borrowed(x);
        }
        let hwo = self.ho * self.wo;
        let mut col = vec![T::zero(); self.cols_rows() * hwo];
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * hwo..(row + 1) * hwo];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        Cols::Owned(col)
    }

    fn col2im<T: Scalar>(&self, col: &[T]) -> Vec<T> {
        if self.is_pointwise() {
            return col.to_vec();
        }
        let hwo = self.ho * self.wo;
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * hwo..(row + 1) * hwo];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Mean and biased variance, accumulated in 64-bit precision.
fn mean_var_f64<T: Scalar>(xs: &[T]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let var = xs.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn mean_var<T: Scalar>(xs: &[T]) -> (T, T) {
    let (m, v) = mean_var_f64(xs);
    (T::from_f64_lossy(m), T::from_f64_lossy(v))
}

/// Standardizes consecutive rows of length `row_len`; returns the
/// normalized values and per-row inverse standard deviations.
fn normalize_rows<T: Scalar>(x: &[T], row_len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / row_len.max(1));
    let eps = eps.to_f64_lossy();
    for row in x.chunks(row_len) {
        let (m, v) = mean_var_f64(row);
        let is = 1.0 / (v + eps).sqrt();
        inv.push(T::from_f64_lossy(is));
        out.extend(row.iter().map(|&r| T::from_f64_lossy((r.to_f64_lossy() - m) * is)));
    }
    (out, inv)
}

fn normalize_rows_backward<T: Scalar>(dy: &[T], y: &[T], inv: &[T], row_len: usize) -> Vec<T> {
    let n = T::from_f64_lossy(row_len as f64);
    let mut dx = Vec::with_capacity(dy.len());
    for ((dr, yr), &is) in dy.chunks(row_len).zip(y.chunks(row_len)).zip(inv) {
        let mean_d = dr.iter().copied().sum::<T>() / n;
        let mean_dy = dr.iter().zip(yr).map(|(&d, &yv)| d * yv).sum::<T>() / n;
        dx.extend(dr.iter().zip(yr).map(|(&d, &yv)| is * (d - mean_d - yv * mean_dy)));
    }
    dx
}

fn nchw_to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[ch * n * hw + s * hw..ch * n * hw + (s + 1) * hw]
                .copy_from_slice(&x[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
        }
    }
    out
}

fn channel_major_to_nchw<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * hw..(s * c + ch + 1) * hw]
                .copy_from_slice(&x[ch * n * hw + s * hw..ch * n * hw + (s + 1) * hw]);
        }
    }
    out
}

fn transpose_batched<T: Scalar>(x: &[T], b: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..b {
        for i in 0..r {
            for j in 0..c {
                out[s * r * c + j * r + i] = x[s * r * c + i * c + j];
            }
        }
    }
    out
}

fn channel_vec_kind(shape: &[usize], n: usize, c: usize) -> Result<bool> {
    match shape {
        [cc] if *cc == c => Ok(false),
        [nn, cc] if *nn == n && *cc == c => Ok(true),
        _ => Err(Error::Shape(format!(
            "channel vector {shape:?} incompatible with N={n}, C={c}"
        ))),
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::Shape(format!("expected rank-2 tensor, got {s:?}"))),
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::Shape(format!("expected rank-3 tensor, got {s:?}"))),
    }
}
