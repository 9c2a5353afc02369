//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation together with a closure mapping
//! the output gradient to gradients of its inputs. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid
//! topological order. Operations whose inputs need no gradient skip the
//! closure entirely, which keeps inference graphs cheap.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{ensure, Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Consumes the graph and returns one node's value without copying
    /// when nothing else holds it.
    pub fn into_value(self, v: Var) -> Tensor<T> {
        let mut nodes = self.nodes.into_inner();
        let rc = std::mem::replace(&mut nodes[v.0].value, Rc::new(Tensor::zeros(&[0])));
        drop(nodes);
        Rc::try_unwrap(rc).unwrap_or_else(|rc| (*rc).clone())
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn any_requires_grad(&self, parents: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        parents.iter().any(|p| nodes[p.0].requires_grad)
    }

    /// Appends an op node. `backward` is only built when some parent needs a gradient.
    fn push<F>(&self, value: Tensor<T>, parents: &[Var], backward: impl FnOnce() -> F) -> Var
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.any_requires_grad(parents);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward())) } else { None };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        ensure!(
            nodes[loss.0].value.len() == 1,
            Shape,
            "backward needs a scalar, got shape {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let parent_grads = bw(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if node.backward.is_none() {
                grads[i] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x + y)?;
        Ok(self.push(out, &[a, b], || |g: &Tensor<T>| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x - y)?;
        Ok(self.push(out, &[a, b], || |g: &Tensor<T>| vec![Some(g.clone()), Some(g.scale(-T::one()))]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], || {
            move |g: &Tensor<T>| {
                vec![
                    Some(g.zip_map(&vb, |g, y| g * y).unwrap()),
                    Some(g.zip_map(&va, |g, x| g * x).unwrap()),
                ]
            }
        }))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, &[a], || move |g: &Tensor<T>| vec![Some(g.scale(s))])
    }

    /// `x * sigmoid(x)`
    pub fn silu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| x * sigmoid(x));
        self.push(out, &[a], || {
            move |g: &Tensor<T>| {
                let d = g
                    .zip_map(&va, |g, x| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .unwrap();
                vec![Some(d)]
            }
        })
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let old = va.shape().to_vec();
        let out = (*va).clone().reshape(shape)?;
        Ok(self.push(out, &[a], || move |g: &Tensor<T>| vec![Some(g.clone().reshape(&old).unwrap())]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let va = self.value(a);
        ensure!(perm.len() == va.rank(), Shape, "permute {perm:?} on rank {}", va.rank());
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            ensure!(p < perm.len() && !seen[p], Shape, "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out = permute_tensor(&va, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(out, &[a], || move |g: &Tensor<T>| vec![Some(permute_tensor(g, &inverse))]))
    }

    /// Concatenates `[N, Ca, ...]` and `[N, Cb, ...]` along axis 1.
    pub fn concat_channels(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(
            va.rank() >= 2 && va.rank() == vb.rank() && va.dim(0) == vb.dim(0) && va.shape()[2..] == vb.shape()[2..],
            Shape,
            "concat_channels: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let n = va.dim(0);
        let inner: usize = va.shape()[2..].iter().product();
        let (ca, cb) = (va.dim(1) * inner, vb.dim(1) * inner);
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let mut shape = va.shape().to_vec();
        shape[1] += vb.dim(1);
        let out = Tensor::from_vec(&shape, data)?;
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        Ok(self.push(out, &[a, b], || {
            move |g: &Tensor<T>| {
                let mut ga = Vec::with_capacity(n * ca);
                let mut gb = Vec::with_capacity(n * cb);
                for i in 0..n {
                    let row = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![Some(Tensor::from_vec(&sa, ga).unwrap()), Some(Tensor::from_vec(&sb, gb).unwrap())]
            }
        }))
    }

    /// Channels `start..start+len` of `[N, C, ...]`.
    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        ensure!(va.rank() >= 2 && start + len <= va.dim(1), Shape, "slice_channels {start}+{len} of {:?}", va.shape());
        let n = va.dim(0);
        let c = va.dim(1);
        let inner: usize = va.shape()[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for i in 0..n {
            let base = i * c * inner;
            data.extend_from_slice(&va.data()[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[1] = len;
        let full = va.shape().to_vec();
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, &[a], || {
            move |g: &Tensor<T>| {
                let mut d = Tensor::zeros(&full);
                for i in 0..n {
                    let base = i * c * inner;
                    d.data_mut()[base + start * inner..base + (start + len) * inner]
                        .copy_from_slice(&g.data()[i * len * inner..(i + 1) * len * inner]);
                }
                vec![Some(d)]
            }
        }))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        ensure!(va.rank() == 4, Shape, "upsample2x needs rank 4, got {:?}", va.shape());
        let (n, c, h, w) = (va.dim(0), va.dim(1), va.dim(2), va.dim(3));
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let src = va.data();
            let dst = out.data_mut();
            for p in 0..n * c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dst[(p * 2 * h + y) * 2 * w + x] = src[(p * h + y / 2) * w + x / 2];
                    }
                }
            }
        }
        Ok(self.push(out, &[a], || {
            move |g: &Tensor<T>| {
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let dst = d.data_mut();
                let src = g.data();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(p * h + y / 2) * w + x / 2] += src[(p * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                vec![Some(d)]
            }
        }))
    }

    // ---- linear algebra ---------------------------------------------

    /// Batched matrix product of rank-2 or rank-3 operands.
    ///
    /// `a` is `[B, M, K]` (`[B, K, M]` when `trans_a`), `b` is `[B, K, N]`
    /// (`[B, N, K]` when `trans_b`). A rank-2 operand is broadcast over the
    /// batch of the other one.
    pub fn matmul(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(
            (2..=3).contains(&va.rank()) && (2..=3).contains(&vb.rank()),
            Shape,
            "matmul ranks {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let split = |t: &Tensor<T>| -> (Option<usize>, usize, usize) {
            let s = t.shape();
            if s.len() == 3 {
                (Some(s[0]), s[1], s[2])
            } else {
                (None, s[0], s[1])
            }
        };
        let (ba, ra, ca) = split(&va);
        let (bb, rb, cb) = split(&vb);
        let batch = match (ba, bb) {
            (Some(x), Some(y)) => {
                ensure!(x == y, Shape, "matmul batch {x} vs {y}");
                Some(x)
            }
            (x, y) => x.or(y),
        };
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        ensure!(k == k2, Shape, "matmul inner dims {:?} x {:?}", va.shape(), vb.shape());
        let nb = batch.unwrap_or(1);
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            let sa = if ba.is_some() { &va.data()[i * m * k..(i + 1) * m * k] } else { va.data() };
            let sb = if bb.is_some() { &vb.data()[i * k * n..(i + 1) * k * n] } else { vb.data() };
            gemm(m, k, n, sa, trans_a, sb, trans_b, &mut out[i * m * n..(i + 1) * m * n], false);
        }
        let shape = match batch {
            Some(b) => vec![b, m, n],
            None => vec![m, n],
        };
        let out = Tensor::from_vec(&shape, out)?;
        let (a_batched, b_batched) = (ba.is_some(), bb.is_some());
        Ok(self.push(out, &[a, b], || {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let mut da = Tensor::zeros(va.shape());
                let mut db = Tensor::zeros(vb.shape());
                for i in 0..nb {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let sa = if a_batched { &va.data()[i * m * k..(i + 1) * m * k] } else { va.data() };
                    let sb = if b_batched { &vb.data()[i * k * n..(i + 1) * k * n] } else { vb.data() };
                    let da_slice = if a_batched {
                        &mut da.data_mut()[i * m * k..(i + 1) * m * k]
                    } else {
                        da.data_mut()
                    };
                    // C = A'B'  =>  dA' = dC B'^T ; dA = dA'^T when transposed.
                    if trans_a {
                        gemm(k, n, m, sb, trans_b, gi, true, da_slice, true);
                    } else {
                        gemm(m, n, k, gi, false, sb, !trans_b, da_slice, true);
                    }
                    let db_slice = if b_batched {
                        &mut db.data_mut()[i * k * n..(i + 1) * k * n]
                    } else {
                        db.data_mut()
                    };
                    if trans_b {
                        gemm(n, m, k, gi, true, sa, trans_a, db_slice, true);
                    } else {
                        gemm(k, m, n, sa, !trans_a, gi, false, db_slice, true);
                    }
                }
                vec![Some(da), Some(db)]
            }
        }))
    }

    /// `x @ weight^T + bias` for `x: [L, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight, false, true)?;
        match bias {
            Some(b) => self.affine(y, None, Some(b)),
            None => Ok(y),
        }
    }

    /// 2-D convolution of `[N, Cin, H, W]` with `[Cout, Cin, k, k]` weights.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        ensure!(vx.rank() == 4 && vw.rank() == 4, Shape, "conv2d ranks {:?} / {:?}", vx.shape(), vw.shape());
        let (n, cin, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (cout, wcin, kh, kw) = (vw.dim(0), vw.dim(1), vw.dim(2), vw.dim(3));
        ensure!(wcin == cin && kh == kw, Shape, "conv2d input {:?} vs weight {:?}", vx.shape(), vw.shape());
        ensure!(stride >= 1 && h + 2 * pad >= kh && w + 2 * pad >= kw, Shape, "conv2d geometry");
        let geo = ConvGeometry {
            n,
            cin,
            h,
            w,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        let cols = geo.im2col(vx.data());
        let ckk = cin * kh * kw;
        let cols_n = n * geo.ho * geo.wo;
        let mut mat = vec![T::zero(); cout * cols_n];
        gemm(cout, ckk, cols_n, vw.data(), false, &cols, false, &mut mat, false);
        if let Some(b) = bias {
            let vb = self.value(b);
            ensure!(vb.shape() == [cout], Shape, "conv2d bias {:?} for {cout} outputs", vb.shape());
            for (co, row) in mat.chunks_mut(cols_n).enumerate() {
                let bv = vb.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let hw = geo.ho * geo.wo;
        let mut out = vec![T::zero(); cout * cols_n];
        for co in 0..cout {
            for i in 0..n {
                out[(i * cout + co) * hw..(i * cout + co + 1) * hw]
                    .copy_from_slice(&mat[co * cols_n + i * hw..co * cols_n + (i + 1) * hw]);
            }
        }
        let out = Tensor::from_vec(&[n, cout, geo.ho, geo.wo], out)?;
        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let x_needs = self.requires_grad(x);
        Ok(self.push(out, &parents, || {
            move |g: &Tensor<T>| {
                let mut dmat = vec![T::zero(); cout * cols_n];
                for co in 0..cout {
                    for i in 0..n {
                        dmat[co * cols_n + i * hw..co * cols_n + (i + 1) * hw]
                            .copy_from_slice(&g.data()[(i * cout + co) * hw..(i * cout + co + 1) * hw]);
                    }
                }
                let mut dw = vec![T::zero(); cout * ckk];
                gemm(cout, cols_n, ckk, &dmat, false, &cols, true, &mut dw, false);
                let dx = if x_needs {
                    let mut dcols = vec![T::zero(); ckk * cols_n];
                    gemm(ckk, cout, cols_n, vw.data(), true, &dmat, false, &mut dcols, false);
                    Some(Tensor::from_vec(&[n, cin, h, w], geo.col2im(&dcols)).unwrap())
                } else {
                    None
                };
                let mut grads = vec![dx, Some(Tensor::from_vec(vw.shape(), dw).unwrap())];
                if has_bias {
                    let db: Vec<T> = dmat.chunks(cols_n).map(|r| r.iter().copied().sum()).collect();
                    grads.push(Some(Tensor::from_vec(&[cout], db).unwrap()));
                }
                grads
            }
        }))
    }

    // ---- broadcasting affine ----------------------------------------

    /// Per-channel `scale * x + shift` on `x: [N, C, ...]`.
    ///
    /// `scale` and `shift` are either `[C]` (shared over N) or `[N, C]`.
    pub fn affine(&self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let vx = self.value(x);
        ensure!(vx.rank() >= 2, Shape, "affine needs rank >= 2, got {:?}", vx.shape());
        let (n, c) = (vx.dim(0), vx.dim(1));
        let s: usize = vx.shape()[2..].iter().product();
        let check = |v: Var| -> Result<(Rc<Tensor<T>>, bool)> {
            let t = self.value(v);
            if t.shape() == [c] {
                Ok((t, false))
            } else if t.shape() == [n, c] {
                Ok((t, true))
            } else {
                Err(Error::Shape(format!("affine parameter {:?} for input {:?}", t.shape(), vx.shape())))
            }
        };
        let sc = scale.map(check).transpose()?;
        let sh = shift.map(check).transpose()?;
        let idx = move |per_outer: bool, i: usize, ch: usize| if per_outer { i * c + ch } else { ch };
        let mut out = (*vx).clone();
        {
            let d = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let a = sc.as_ref().map_or(T::one(), |(t, p)| t.data()[idx(*p, i, ch)]);
                    let b = sh.as_ref().map_or(T::zero(), |(t, p)| t.data()[idx(*p, i, ch)]);
                    for v in &mut d[(i * c + ch) * s..(i * c + ch + 1) * s] {
                        *v = a * *v + b;
                    }
                }
            }
        }
        let mut parents = vec![x];
        parents.extend(scale);
        parents.extend(shift);
        Ok(self.push(out, &parents, || {
            move |g: &Tensor<T>| {
                let gd = g.data();
                let mut dx = g.clone();
                let mut dscale = sc.as_ref().map(|(t, _)| Tensor::zeros(t.shape()));
                let mut dshift = sh.as_ref().map(|(t, _)| Tensor::zeros(t.shape()));
                for i in 0..n {
                    for ch in 0..c {
                        let range = (i * c + ch) * s..(i * c + ch + 1) * s;
                        if let (Some((t, p)), Some(ds)) = (&sc, &mut dscale) {
                            let k = idx(*p, i, ch);
                            let a = t.data()[k];
                            let mut acc = T::zero();
                            for j in range.clone() {
                                acc += gd[j] * vx.data()[j];
                                dx.data_mut()[j] = gd[j] * a;
                            }
                            ds.data_mut()[k] += acc;
                        }
                        if let (Some((_, p)), Some(db)) = (&sh, &mut dshift) {
                            let acc: T = gd[range].iter().copied().sum();
                            db.data_mut()[idx(*p, i, ch)] += acc;
                        }
                    }
                }
                let mut grads = vec![Some(dx)];
                if let Some(ds) = dscale {
                    grads.push(Some(ds));
                }
                if let Some(db) = dshift {
                    grads.push(Some(db));
                }
                grads
            }
        }))
    }

    // ---- normalisation and softmax -----------------------------------

    /// Zero-mean, unit-variance normalisation of consecutive runs of
    /// `row_len` elements (layer norm and group norm without the affine).
    pub fn normalize(&self, x: Var, row_len: usize, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        ensure!(row_len > 0 && vx.len().is_multiple_of(row_len), Shape, "normalize row {row_len} of {:?}", vx.shape());
        let eps = T::from_f64_lossy(eps);
        let rows = vx.len() / row_len;
        let nf = T::from_usize(row_len).unwrap();
        let mut out = Tensor::zeros(vx.shape());
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let src = &vx.data()[r * row_len..(r + 1) * row_len];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &v) in out.data_mut()[r * row_len..(r + 1) * row_len].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let normed = out.clone();
        Ok(self.push(out, &[x], || {
            move |g: &Tensor<T>| {
                let mut d = Tensor::zeros(g.shape());
                for r in 0..rows {
                    let gr = &g.data()[r * row_len..(r + 1) * row_len];
                    let yr = &normed.data()[r * row_len..(r + 1) * row_len];
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for ((o, &gv), &yv) in d.data_mut()[r * row_len..(r + 1) * row_len].iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(d)]
            }
        }))
    }

    /// Softmax over the last axis. With `causal`, the input is read as
    /// `[..., Lq, Lk]` and key `k` is masked out for query `q` when `k > q`.
    pub fn softmax(&self, x: Var, causal: bool) -> Result<Var> {
        let vx = self.value(x);
        ensure!(vx.rank() >= 1, Shape, "softmax on rank 0");
        let lk = *vx.shape().last().unwrap();
        let lq = if vx.rank() >= 2 { vx.dim(vx.rank() - 2) } else { 1 };
        ensure!(!causal || lq <= lk, Shape, "causal softmax needs Lq <= Lk, got {:?}", vx.shape());
        let rows = vx.len() / lk;
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..rows {
            let limit = if causal { (r % lq) + 1 } else { lk };
            let src = &vx.data()[r * lk..r * lk + limit];
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out.data_mut()[r * lk..(r + 1) * lk];
            let mut z = T::zero();
            for (o, &v) in dst[..limit].iter_mut().zip(src) {
                *o = (v - mx).exp();
                z += *o;
            }
            dst[..limit].iter_mut().for_each(|o| *o = *o / z);
        }
        let probs = out.clone();
        Ok(self.push(out, &[x], || {
            move |g: &Tensor<T>| {
                let mut d = Tensor::zeros(g.shape());
                for r in 0..rows {
                    let gr = &g.data()[r * lk..(r + 1) * lk];
                    let pr = &probs.data()[r * lk..(r + 1) * lk];
                    let dot: T = gr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &pv) in d.data_mut()[r * lk..(r + 1) * lk].iter_mut().zip(gr).zip(pr) {
                        *o = pv * (gv - dot);
                    }
                }
                vec![Some(d)]
            }
        }))
    }

    // ---- losses and reductions --------------------------------------

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        let (vp, vt) = (self.value(pred), self.value(target));
        vp.expect_same_shape(&vt, "mse")?;
        let n = T::from_usize(vp.len().max(1)).unwrap();
        let diff = vp.zip_map(&vt, |a, b| a - b)?;
        let loss = diff.sq_norm() / n;
        Ok(self.push(Tensor::scalar(loss), &[pred, target], || {
            move |g: &Tensor<T>| {
                let s = g.data()[0] * T::from_f64_lossy(2.0) / n;
                let dp = diff.scale(s);
                let dt = dp.scale(-T::one());
                vec![Some(dp), Some(dt)]
            }
        }))
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn weighted_sum(&self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        vx.expect_same_shape(weights, "weighted_sum")?;
        let s: T = vx.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let w = weights.clone();
        Ok(self.push(Tensor::scalar(s), &[x], || move |g: &Tensor<T>| vec![Some(w.scale(g.data()[0]))]))
    }

    /// Mean over elements of `KL(N(mu, exp(logvar)) || N(0, 1))`.
    pub fn kl_standard_normal(&self, mu: Var, logvar: Var) -> Result<Var> {
        let (vm, vl) = (self.value(mu), self.value(logvar));
        vm.expect_same_shape(&vl, "kl")?;
        let n = T::from_usize(vm.len().max(1)).unwrap();
        let half = T::from_f64_lossy(0.5);
        let kl: T = vm
            .data()
            .iter()
            .zip(vl.data())
            .map(|(&m, &l)| half * (m * m + l.exp() - T::one() - l))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(kl), &[mu, logvar], || {
            move |g: &Tensor<T>| {
                let s = g.data()[0] / n;
                vec![Some(vm.scale(s)), Some(vl.map(|l| s * half * (l.exp() - T::one())))]
            }
        }))
    }

    /// `mu + exp(logvar / 2) * noise`.
    pub fn reparameterize(&self, mu: Var, logvar: Var, noise: &Tensor<T>) -> Result<Var> {
        let (vm, vl) = (self.value(mu), self.value(logvar));
        vm.expect_same_shape(&vl, "reparameterize")?;
        vm.expect_same_shape(noise, "reparameterize noise")?;
        let half = T::from_f64_lossy(0.5);
        let std = vl.map(|l| (half * l).exp());
        let out = vm.zip_map(&std.zip_map(noise, |s, e| s * e)?, |m, v| m + v)?;
        let noise = noise.clone();
        Ok(self.push(out, &[mu, logvar], || {
            move |g: &Tensor<T>| {
                let dl = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(std.data())
                        .zip(noise.data())
                        .map(|((&gv, &s), &e)| gv * half * s * e)
                        .collect(),
                )
                .unwrap();
                vec![Some(g.clone()), Some(dl)]
            }
        }))
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Generic axis permutation of a dense tensor.
pub(crate) fn permute_tensor<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    if t.is_empty() {
        return Tensor::from_vec(&out_shape, out).unwrap();
    }
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let src = t.data();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    loop {
        for j in 0..inner {
            out.push(src[offset + j * inner_stride]);
        }
        // advance the odometer over all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return Tensor::from_vec(&out_shape, out).unwrap();
            }
            axis -= 1;
            counter[axis] += 1;
            offset += src_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= src_strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    /// `[Cin*k*k, N*Ho*Wo]` patch matrix.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let cols_n = self.n * self.ho * self.wo;
        let mut cols = vec![T::zero(); self.cin * self.k * self.k * cols_n];
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for i in 0..self.n {
                        let plane = &x[(i * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let base = (i * self.ho + oy) * self.wo;
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[base + ox] = plane[iy as usize * self.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let cols_n = self.n * self.ho * self.wo;
        let mut x = vec![T::zero(); self.n * self.cin * self.h * self.w];
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for i in 0..self.n {
                        let plane = &mut x[(i * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let base = (i * self.ho + oy) * self.wo;
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    plane[iy as usize * self.w + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
