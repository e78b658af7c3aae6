//! Reverse-mode tape and the primitive operation suite.
//!
//! A [`Tape`] owns the forward values of a single computation graph. Each
//! primitive pushes one node; when gradients are being recorded the node also
//! carries a backward closure mapping the upstream gradient to gradients for
//! its parents. Inference tapes skip closure construction entirely.
//!
//! Conventions:
//! - sequence tensors are `(batch, positions, channels)`, row-major;
//! - boolean masks mark *valid* positions and have length `batch * positions`;
//! - masked attention keys receive `-inf` logits and contribute zero weight;
//! - dropout is inverted (kept activations scaled by `1/(1-rate)`).

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::scalar::{sc, Scalar};
use super::tensor::{Parameter, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    bindings: RefCell<Vec<(String, usize)>>,
    record: bool,
    training: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records gradients; `training` enables dropout.
    pub fn new(training: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            record: true,
            training,
        }
    }

    /// Forward-only tape: no backward closures, dropout disabled.
    pub fn inference() -> Self {
        Self::with_mode(false, false)
    }

    /// Explicit control over gradient recording and dropout activity.
    pub fn with_mode(record: bool, training: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
            record,
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn push(&self, value: Tensor<T>, parents: Vec<usize>, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, back });
        Var(nodes.len() - 1)
    }

    /// Constant input; receives no gradient of its own.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, vec![], None)
    }

    /// Bind a parameter as a leaf and remember the binding so its gradient can
    /// be collected after backward.
    pub fn param(&self, p: &Parameter<T>) -> Var {
        let v = self.leaf(p.value.clone());
        self.bindings.borrow_mut().push((p.name.clone(), v.0));
        v
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ------------------------------------------------------------------
    // primitives
    // ------------------------------------------------------------------

    /// `(m,k) @ (k,n)` or batched `(B,m,k) @ (k,n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let bs = bv.shape().to_vec();
        if bs.len() != 2 {
            return Err(shape_err("matmul", &format!("rhs must be rank 2, got {bs:?}")));
        }
        let (k, n) = (bs[0], bs[1]);
        let ash = av.shape().to_vec();
        let (batch, m) = match ash.len() {
            2 => (None, ash[0]),
            3 => (Some(ash[0]), ash[1]),
            _ => return Err(shape_err("matmul", &format!("lhs rank {} unsupported", ash.len()))),
        };
        if *ash.last().unwrap() != k {
            return Err(shape_err("matmul", &format!("{ash:?} @ {bs:?}")));
        }
        let nb = batch.unwrap_or(1);
        let mut out = vec![T::zero(); nb * m * n];
        for bi in 0..nb {
            mm_nn(&av.data()[bi * m * k..][..m * k], bv.data(), m, k, n, &mut out[bi * m * n..][..m * n]);
        }
        let out_shape: Vec<usize> = match batch {
            Some(bsz) => vec![bsz, m, n],
            None => vec![m, n],
        };
        let value = Tensor::new(&out_shape, out)?;
        let back = if self.record {
            let av = av.clone();
            let bv = bv.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut da = vec![T::zero(); av.numel()];
                let mut db = vec![T::zero(); bv.numel()];
                for bi in 0..nb {
                    let gs = &g.data()[bi * m * n..][..m * n];
                    let asl = &av.data()[bi * m * k..][..m * k];
                    // da = g @ b^T ; db += a^T @ g
                    mm_nt(gs, bv.data(), m, n, k, &mut da[bi * m * k..][..m * k]);
                    mm_tn_acc(asl, gs, m, k, n, &mut db);
                }
                vec![
                    Tensor::new(av.shape(), da).unwrap(),
                    Tensor::new(bv.shape(), db).unwrap(),
                ]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![a.0, b.0], back))
    }

    /// Elementwise add of two same-shape tensors.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(shape_err("add", &format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let back = if self.record {
            Some(Box::new(move |g: &Tensor<T>| vec![g.clone(), g.clone()]) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![a.0, b.0], back))
    }

    /// Broadcast a rank-1 bias over the last axis.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let h = *xv.shape().last().unwrap();
        if bv.shape() != [h] {
            return Err(shape_err("add_bias", &format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(h) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += *b;
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        let back = if self.record {
            Some(Box::new(move |g: &Tensor<T>| {
                let mut db = vec![T::zero(); h];
                for row in g.data().chunks(h) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                vec![g.clone(), Tensor::new(&[h], db).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0, bias.0], back))
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.scale(c);
        let back = if self.record {
            Some(Box::new(move |g: &Tensor<T>| vec![g.scale(c)]) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        let back = if self.record {
            let xv = xv.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![Tensor::new(xv.shape(), data).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        if n == 0 {
            return Err(Error::EmptyInput("softmax over empty axis"));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), data)?;
        let back = if self.record {
            let sv = value.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut out = vec![T::zero(); sv.numel()];
                for (i, (srow, grow)) in sv.data().chunks(n).zip(g.data().chunks(n)).enumerate() {
                    let dot: T = srow.iter().zip(grow).map(|(&s, &gv)| s * gv).sum();
                    for j in 0..n {
                        out[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                vec![Tensor::new(sv.shape(), out).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    /// Layer normalization over the last axis with learnable affine, eps 1e-5.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let h = *xv.shape().last().unwrap();
        if gv.shape() != [h] || bv.shape() != [h] {
            return Err(shape_err("layer_norm", &format!("affine {:?}/{:?} for {:?}", gv.shape(), bv.shape(), xv.shape())));
        }
        let eps = sc::<T>(1e-5);
        let inv_h = T::one() / sc::<T>(h as f64);
        let mut data = vec![T::zero(); xv.numel()];
        let mut inv_sigma = Vec::with_capacity(xv.numel() / h);
        let mut normed = vec![T::zero(); xv.numel()];
        for (i, row) in xv.data().chunks(h).enumerate() {
            let mean: T = row.iter().copied().sum::<T>() * inv_h;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_h;
            let is = T::one() / (var + eps).sqrt();
            inv_sigma.push(is);
            for j in 0..h {
                let xn = (row[j] - mean) * is;
                normed[i * h + j] = xn;
                data[i * h + j] = gv.data()[j] * xn + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), data)?;
        let back = if self.record {
            let gv = gv.clone();
            let shape = xv.shape().to_vec();
            Some(Box::new(move |g: &Tensor<T>| {
                let rows = g.numel() / h;
                let mut dx = vec![T::zero(); g.numel()];
                let mut dgamma = vec![T::zero(); h];
                let mut dbeta = vec![T::zero(); h];
                for i in 0..rows {
                    let grow = &g.data()[i * h..][..h];
                    let xn = &normed[i * h..][..h];
                    let is = inv_sigma[i];
                    let mut dxn = vec![T::zero(); h];
                    for j in 0..h {
                        dgamma[j] += grow[j] * xn[j];
                        dbeta[j] += grow[j];
                        dxn[j] = grow[j] * gv.data()[j];
                    }
                    let mean_dxn: T = dxn.iter().copied().sum::<T>() * inv_h;
                    let mean_dxn_xn: T = dxn.iter().zip(xn).map(|(&a, &b)| a * b).sum::<T>() * inv_h;
                    for j in 0..h {
                        dx[i * h + j] = is * (dxn[j] - mean_dxn - xn[j] * mean_dxn_xn);
                    }
                }
                vec![
                    Tensor::new(&shape, dx).unwrap(),
                    Tensor::new(&[h], dgamma).unwrap(),
                    Tensor::new(&[h], dbeta).unwrap(),
                ]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0, gamma.0, beta.0], back))
    }

    /// Same-padded stride-1 1-D convolution along the position axis.
    ///
    /// `x (B,L,Cin)`, `w (K,Cin,Cout)` with odd `K`, `bias (Cout)`.
    pub fn conv1d(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        if xs.len() != 3 || ws.len() != 3 {
            return Err(shape_err("conv1d", &format!("x {xs:?}, w {ws:?}")));
        }
        let (b, l, cin) = (xs[0], xs[1], xs[2]);
        let (k, wcin, cout) = (ws[0], ws[1], ws[2]);
        if wcin != cin || k % 2 == 0 || bv.shape() != [cout] {
            return Err(shape_err("conv1d", &format!("x {xs:?}, w {ws:?}, b {:?}", bv.shape())));
        }
        let pad = (k / 2) as isize;
        let mut out = vec![T::zero(); b * l * cout];
        for bi in 0..b {
            for li in 0..l {
                let orow = &mut out[(bi * l + li) * cout..][..cout];
                orow.copy_from_slice(bv.data());
                for ki in 0..k {
                    let s = li as isize + ki as isize - pad;
                    if s < 0 || s >= l as isize {
                        continue;
                    }
                    let xrow = &xv.data()[(bi * l + s as usize) * cin..][..cin];
                    let wk = &wv.data()[ki * cin * cout..][..cin * cout];
                    for (ci, &xval) in xrow.iter().enumerate() {
                        if xval == T::zero() {
                            continue;
                        }
                        let wrow = &wk[ci * cout..][..cout];
                        for (o, &wval) in orow.iter_mut().zip(wrow) {
                            *o += xval * wval;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[b, l, cout], out)?;
        let back = if self.record {
            let xv = xv.clone();
            let wv = wv.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dw = vec![T::zero(); wv.numel()];
                let mut db = vec![T::zero(); cout];
                for bi in 0..b {
                    for li in 0..l {
                        let grow = &g.data()[(bi * l + li) * cout..][..cout];
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                        for ki in 0..k {
                            let s = li as isize + ki as isize - pad;
                            if s < 0 || s >= l as isize {
                                continue;
                            }
                            let s = s as usize;
                            let xrow = &xv.data()[(bi * l + s) * cin..][..cin];
                            let wk = &wv.data()[ki * cin * cout..][..cin * cout];
                            let dwk = &mut dw[ki * cin * cout..][..cin * cout];
                            let dxrow_base = (bi * l + s) * cin;
                            for ci in 0..cin {
                                let wrow = &wk[ci * cout..][..cout];
                                let dwrow = &mut dwk[ci * cout..][..cout];
                                let xval = xrow[ci];
                                let mut acc = T::zero();
                                for co in 0..cout {
                                    acc += grow[co] * wrow[co];
                                    dwrow[co] += xval * grow[co];
                                }
                                dx[dxrow_base + ci] += acc;
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(xv.shape(), dx).unwrap(),
                    Tensor::new(wv.shape(), dw).unwrap(),
                    Tensor::new(&[cout], db).unwrap(),
                ]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0, w.0, bias.0], back))
    }

    /// Row lookup: ids index into a `(V,H)` table, producing `(B,L,H)`.
    pub fn embedding(&self, table: Var, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let tv = self.value(table);
        let ts = tv.shape().to_vec();
        if ts.len() != 2 || ids.len() != batch * len {
            return Err(shape_err("embedding", &format!("table {ts:?}, {} ids for {batch}x{len}", ids.len())));
        }
        let (v, h) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::UnknownPhoneme(format!("embedding id {bad} out of range {v}")));
        }
        let mut out = vec![T::zero(); batch * len * h];
        for (i, &id) in ids.iter().enumerate() {
            out[i * h..][..h].copy_from_slice(&tv.data()[id * h..][..h]);
        }
        let value = Tensor::new(&[batch, len, h], out)?;
        let back = if self.record {
            let ids = ids.to_vec();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut dt = vec![T::zero(); v * h];
                for (i, &id) in ids.iter().enumerate() {
                    let grow = &g.data()[i * h..][..h];
                    for (d, &gv) in dt[id * h..][..h].iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
                vec![Tensor::new(&[v, h], dt).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![table.0], back))
    }

    /// Inverted dropout. Identity when the tape is not in training mode or the
    /// rate is zero.
    pub fn dropout(&self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let xv = self.value(x);
        if !self.training || rate == 0.0 {
            let value = xv.clone();
            let back = if self.record {
                Some(Box::new(move |g: &Tensor<T>| vec![g.clone()]) as BackFn<T>)
            } else {
                None
            };
            return Ok(self.push(value, vec![x.0], back));
        }
        let keep = T::one() / sc::<T>(1.0 - rate);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let back = if self.record {
            let shape = xv.shape().to_vec();
            Some(Box::new(move |g: &Tensor<T>| {
                let data = g.data().iter().zip(&mask).map(|(&gv, &m)| gv * m).collect();
                vec![Tensor::new(&shape, data).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    /// Fused multi-head scaled-dot attention.
    ///
    /// `q,k,v (B,L,H)` already projected; `key_valid` marks usable key
    /// positions per `(batch, position)`. Masked keys get `-inf` logits.
    pub fn scaled_dot_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        key_valid: &[bool],
        n_heads: usize,
    ) -> Result<Var> {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let qs = qv.shape().to_vec();
        if qs.len() != 3 || kv.shape() != qs.as_slice() || vv.shape() != qs.as_slice() {
            return Err(shape_err("attention", &format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape())));
        }
        let (b, l, h) = (qs[0], qs[1], qs[2]);
        if n_heads == 0 || h % n_heads != 0 {
            return Err(shape_err("attention", &format!("{h} dims not divisible by {n_heads} heads")));
        }
        if key_valid.len() != b * l {
            return Err(shape_err("attention", "key mask length"));
        }
        let d = h / n_heads;
        let inv_sqrt_d = T::one() / sc::<T>(d as f64).sqrt();
        let mut out = vec![T::zero(); b * l * h];
        // Saved row-softmax matrices, one (L*L) block per (batch, head).
        let mut saved: Vec<Vec<T>> = Vec::with_capacity(b * n_heads);
        let mut qh = vec![T::zero(); l * d];
        let mut kh = vec![T::zero(); l * d];
        let mut vh = vec![T::zero(); l * d];
        for bi in 0..b {
            let kmask = &key_valid[bi * l..][..l];
            for hi in 0..n_heads {
                gather_head(qv.data(), &mut qh, bi, hi, l, h, d);
                gather_head(kv.data(), &mut kh, bi, hi, l, h, d);
                gather_head(vv.data(), &mut vh, bi, hi, l, h, d);
                let mut scores = vec![T::zero(); l * l];
                mm_nt(&qh, &kh, l, d, l, &mut scores);
                for row in scores.chunks_mut(l) {
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if kmask[j] { *s * inv_sqrt_d } else { T::neg_infinity() };
                    }
                    softmax_in_place(row);
                }
                let mut oh = vec![T::zero(); l * d];
                mm_nn(&scores, &vh, l, l, d, &mut oh);
                scatter_head(&oh, &mut out, bi, hi, l, h, d);
                saved.push(scores);
            }
        }
        let value = Tensor::new(&[b, l, h], out)?;
        let back = if self.record {
            let qv = qv.clone();
            let kv = kv.clone();
            let vv = vv.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut dq = vec![T::zero(); qv.numel()];
                let mut dk = vec![T::zero(); kv.numel()];
                let mut dv = vec![T::zero(); vv.numel()];
                let mut qh = vec![T::zero(); l * d];
                let mut kh = vec![T::zero(); l * d];
                let mut vh = vec![T::zero(); l * d];
                let mut goh = vec![T::zero(); l * d];
                for bi in 0..b {
                    for hi in 0..n_heads {
                        let s = &saved[bi * n_heads + hi];
                        gather_head(qv.data(), &mut qh, bi, hi, l, h, d);
                        gather_head(kv.data(), &mut kh, bi, hi, l, h, d);
                        gather_head(vv.data(), &mut vh, bi, hi, l, h, d);
                        gather_head(g.data(), &mut goh, bi, hi, l, h, d);
                        // dV_h = S^T @ dO_h
                        let mut dvh = vec![T::zero(); l * d];
                        mm_tn_acc(s, &goh, l, l, d, &mut dvh);
                        // dS = dO_h @ V_h^T
                        let mut ds = vec![T::zero(); l * l];
                        mm_nt(&goh, &vh, l, d, l, &mut ds);
                        // dZ = S * (dS - rowdot(dS, S)), then scale by 1/sqrt(d)
                        let mut dz = vec![T::zero(); l * l];
                        for i in 0..l {
                            let srow = &s[i * l..][..l];
                            let dsrow = &ds[i * l..][..l];
                            let dot: T = srow.iter().zip(dsrow).map(|(&a, &b)| a * b).sum();
                            for j in 0..l {
                                dz[i * l + j] = srow[j] * (dsrow[j] - dot) * inv_sqrt_d;
                            }
                        }
                        // dQ_h = dZ @ K_h ; dK_h = dZ^T @ Q_h
                        let mut dqh = vec![T::zero(); l * d];
                        mm_nn(&dz, &kh, l, l, d, &mut dqh);
                        let mut dkh = vec![T::zero(); l * d];
                        mm_tn_acc(&dz, &qh, l, l, d, &mut dkh);
                        scatter_head_acc(&dqh, &mut dq, bi, hi, l, h, d);
                        scatter_head_acc(&dkh, &mut dk, bi, hi, l, h, d);
                        scatter_head_acc(&dvh, &mut dv, bi, hi, l, h, d);
                    }
                }
                vec![
                    Tensor::new(qv.shape(), dq).unwrap(),
                    Tensor::new(kv.shape(), dk).unwrap(),
                    Tensor::new(vv.shape(), dv).unwrap(),
                ]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![q.0, k.0, v.0], back))
    }

    /// Zero out the channel vectors of invalid positions.
    pub fn mask_positions(&self, x: Var, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape().to_vec();
        if xs.len() != 3 || valid.len() != xs[0] * xs[1] {
            return Err(shape_err("mask_positions", &format!("x {xs:?}, mask {}", valid.len())));
        }
        let h = xs[2];
        let mut data = xv.data().to_vec();
        for (i, &keep) in valid.iter().enumerate() {
            if !keep {
                data[i * h..][..h].fill(T::zero());
            }
        }
        let value = Tensor::new(&xs, data)?;
        let back = if self.record {
            let valid = valid.to_vec();
            let shape = xs.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut dg = g.data().to_vec();
                for (i, &keep) in valid.iter().enumerate() {
                    if !keep {
                        dg[i * h..][..h].fill(T::zero());
                    }
                }
                vec![Tensor::new(&shape, dg).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    /// Repeat each position by its duration: `(B,L,H)` to `(B,T,H)` where
    /// `T = max_b sum(durations[b])`; shorter items are zero-padded.
    pub fn length_regulate(&self, x: Var, durations: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape().to_vec();
        if xs.len() != 3 || durations.len() != xs[0] {
            return Err(shape_err("length_regulate", &format!("x {xs:?}, {} duration rows", durations.len())));
        }
        let (b, l, h) = (xs[0], xs[1], xs[2]);
        let mut totals = Vec::with_capacity(b);
        for (bi, durs) in durations.iter().enumerate() {
            if durs.len() != l {
                return Err(shape_err("length_regulate", &format!("row {bi} has {} durations for {l} positions", durs.len())));
            }
            let t: usize = durs.iter().sum();
            if t == 0 {
                return Err(Error::EmptyInput("length_regulate: all durations zero"));
            }
            totals.push(t);
        }
        let t_max = *totals.iter().max().unwrap();
        let mut out = vec![T::zero(); b * t_max * h];
        for bi in 0..b {
            let mut f = 0usize;
            for (li, &dur) in durations[bi].iter().enumerate() {
                let src = &xv.data()[(bi * l + li) * h..][..h];
                for _ in 0..dur {
                    out[(bi * t_max + f) * h..][..h].copy_from_slice(src);
                    f += 1;
                }
            }
        }
        let value = Tensor::new(&[b, t_max, h], out)?;
        let back = if self.record {
            let durations = durations.to_vec();
            let shape = xs.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut dx = vec![T::zero(); b * l * h];
                for bi in 0..b {
                    let mut f = 0usize;
                    for (li, &dur) in durations[bi].iter().enumerate() {
                        let drow = &mut dx[(bi * l + li) * h..][..h];
                        for _ in 0..dur {
                            let grow = &g.data()[(bi * t_max + f) * h..][..h];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += gv;
                            }
                            f += 1;
                        }
                    }
                }
                vec![Tensor::new(&shape, dx).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    /// Mean over valid positions: `(B,L,H)` with mask to `(B,H)`.
    pub fn masked_mean_pool(&self, x: Var, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let xs = xv.shape().to_vec();
        if xs.len() != 3 || valid.len() != xs[0] * xs[1] {
            return Err(shape_err("masked_mean_pool", &format!("x {xs:?}, mask {}", valid.len())));
        }
        let (b, l, h) = (xs[0], xs[1], xs[2]);
        let mut counts = vec![0usize; b];
        for bi in 0..b {
            counts[bi] = valid[bi * l..][..l].iter().filter(|&&v| v).count();
            if counts[bi] == 0 {
                return Err(Error::EmptyInput("masked_mean_pool: empty mask"));
            }
        }
        let mut out = vec![T::zero(); b * h];
        for bi in 0..b {
            let inv = T::one() / sc::<T>(counts[bi] as f64);
            for li in 0..l {
                if valid[bi * l + li] {
                    let row = &xv.data()[(bi * l + li) * h..][..h];
                    for (o, &v) in out[bi * h..][..h].iter_mut().zip(row) {
                        *o += v * inv;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, h], out)?;
        let back = if self.record {
            let valid = valid.to_vec();
            let shape = xs.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let mut dx = vec![T::zero(); b * l * h];
                for bi in 0..b {
                    let inv = T::one() / sc::<T>(counts[bi] as f64);
                    for li in 0..l {
                        if valid[bi * l + li] {
                            let grow = &g.data()[bi * h..][..h];
                            let drow = &mut dx[(bi * l + li) * h..][..h];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = gv * inv;
                            }
                        }
                    }
                }
                vec![Tensor::new(&shape, dx).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    /// Mean squared error over valid positions.
    ///
    /// `pred` and `target` are `(B,M,C)`; the mask covers `(B,M)` and every
    /// channel of a valid position counts toward the mean. Invalid positions
    /// contribute exactly zero.
    pub fn masked_mse(&self, pred: Var, target: &Tensor<T>, valid: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        let ps = pv.shape().to_vec();
        if ps.len() != 3 || target.shape() != ps.as_slice() || valid.len() != ps[0] * ps[1] {
            return Err(shape_err("masked_mse", &format!("pred {ps:?}, target {:?}, mask {}", target.shape(), valid.len())));
        }
        let c = ps[2];
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(Error::EmptyInput("masked_mse: empty mask"));
        }
        let inv_n = T::one() / sc::<T>((n_valid * c) as f64);
        let mut diff = vec![T::zero(); pv.numel()];
        let mut loss = T::zero();
        for (i, &keep) in valid.iter().enumerate() {
            if keep {
                for j in 0..c {
                    let d = pv.data()[i * c + j] - target.data()[i * c + j];
                    diff[i * c + j] = d;
                    loss += d * d * inv_n;
                }
            }
        }
        let value = Tensor::scalar(loss);
        let back = if self.record {
            let shape = ps.clone();
            Some(Box::new(move |g: &Tensor<T>| {
                let gs = g.item();
                let two = sc::<T>(2.0);
                let data = diff.iter().map(|&d| gs * two * d * inv_n).collect();
                vec![Tensor::new(&shape, data).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![pred.0], back))
    }

    /// Mean cross-entropy of `(B,C)` logits against class labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let ls = lv.shape().to_vec();
        if ls.len() != 2 || labels.len() != ls[0] {
            return Err(shape_err("cross_entropy", &format!("logits {ls:?}, {} labels", labels.len())));
        }
        let (b, cl) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= cl) {
            return Err(Error::Invalid(format!("class label {bad} out of range {cl}")));
        }
        let mut probs = lv.data().to_vec();
        for row in probs.chunks_mut(cl) {
            softmax_in_place(row);
        }
        let inv_b = T::one() / sc::<T>(b as f64);
        let mut loss = T::zero();
        for (bi, &y) in labels.iter().enumerate() {
            let p = probs[bi * cl + y].max(sc::<T>(1e-30));
            loss -= p.ln() * inv_b;
        }
        let value = Tensor::scalar(loss);
        let back = if self.record {
            let labels = labels.to_vec();
            Some(Box::new(move |g: &Tensor<T>| {
                let gs = g.item();
                let mut dl = probs.clone();
                for (bi, &y) in labels.iter().enumerate() {
                    dl[bi * cl + y] -= T::one();
                }
                for v in dl.iter_mut() {
                    *v *= gs * inv_b;
                }
                vec![Tensor::new(&[b, cl], dl).unwrap()]
            }) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![logits.0], back))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let value = xv.reshaped(shape)?;
        let back = if self.record {
            Some(Box::new(move |g: &Tensor<T>| vec![g.clone().reshaped(&old).unwrap()]) as BackFn<T>)
        } else {
            None
        };
        Ok(self.push(value, vec![x.0], back))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::Invalid("backward on an inference tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(shape_err("backward", "loss must be scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Accumulated gradients for every bound parameter, keyed by name.
    pub fn param_gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, node) in self.bindings.borrow().iter() {
            let Some(g) = grads.grads[*node].as_ref() else { continue };
            match out.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

fn shape_err(op: &'static str, msg: &str) -> Error {
    Error::ShapeMismatch { op, msg: msg.to_string() }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        // Every logit is -inf: define the distribution as all-zero weights.
        row.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// out = a (m,k) @ b (k,n)
fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out = a (m,k) @ b^T where b is (n,k)
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..][..k];
        for j in 0..n {
            let brow = &b[j * k..][..k];
            let mut acc = T::zero();
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            out[i * n + j] = acc;
        }
    }
}

/// out += a^T @ b where a is (k,m), b is (k,n)
fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for t in 0..k {
        let arow = &a[t * m..][..m];
        let brow = &b[t * n..][..n];
        for i in 0..m {
            let av = arow[i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..][..n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn gather_head<T: Scalar>(src: &[T], dst: &mut [T], bi: usize, hi: usize, l: usize, h: usize, d: usize) {
    for li in 0..l {
        let base = (bi * l + li) * h + hi * d;
        dst[li * d..][..d].copy_from_slice(&src[base..][..d]);
    }
}

fn scatter_head<T: Scalar>(src: &[T], dst: &mut [T], bi: usize, hi: usize, l: usize, h: usize, d: usize) {
    for li in 0..l {
        let base = (bi * l + li) * h + hi * d;
        dst[base..][..d].copy_from_slice(&src[li * d..][..d]);
    }
}

fn scatter_head_acc<T: Scalar>(src: &[T], dst: &mut [T], bi: usize, hi: usize, l: usize, h: usize, d: usize) {
    for li in 0..l {
        let base = (bi * l + li) * h + hi * d;
        for j in 0..d {
            dst[base + j] += src[li * d + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::<f64>::inference();
        let eye = tape.leaf(t2(3, 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = tape.leaf(t2(3, 4, &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let tape = Tape::<f64>::inference();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]));
        let b = tape.leaf(t2(2, 2, &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..60).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = tape.leaf(Tensor::new(&[6, 10], data).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks(10) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero_pre_affine() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::new(&[1, 1, 4], vec![3.5; 4]).unwrap());
        let gamma = tape.leaf(Tensor::from_vec(vec![1.0; 4]));
        let beta = tape.leaf(Tensor::from_vec(vec![0.0; 4]));
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn conv1d_preserves_length() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::new(&[2, 7, 3], vec![0.5; 42]).unwrap());
        let w = tape.leaf(Tensor::new(&[3, 3, 5], vec![0.1; 45]).unwrap());
        let b = tape.leaf(Tensor::from_vec(vec![0.0; 5]));
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), vec![2, 7, 5]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..20).map(|v| v as f64).collect();
        // rate 0 in training mode
        let tape = Tape::<f64>::new(true);
        let x = tape.leaf(Tensor::new(&[1, 4, 5], data.clone()).unwrap());
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
        // any rate in inference mode
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::new(&[1, 4, 5], data.clone()).unwrap());
        let y = tape.dropout(x, 0.9, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn length_regulate_repeats_positions() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.length_regulate(x, &[vec![2, 3, 1]]).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 1., 2., 2., 2., 3.]);
        let x = tape.leaf(Tensor::new(&[1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(tape.length_regulate(x, &[vec![0, 0, 0]]).is_err());
    }

    #[test]
    fn length_regulate_identity_for_unit_durations() {
        let tape = Tape::<f64>::inference();
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = tape.leaf(Tensor::new(&[1, 4, 3], data.clone()).unwrap());
        let y = tape.length_regulate(x, &[vec![1; 4]]).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn masked_attention_ignores_masked_keys() {
        // With the second key masked, changing v at that position must not
        // change the output at all.
        let tape = Tape::<f64>::inference();
        let q = tape.leaf(Tensor::new(&[1, 2, 4], vec![0.3; 8]).unwrap());
        let k = tape.leaf(Tensor::new(&[1, 2, 4], vec![0.1; 8]).unwrap());
        let mask = [true, false];
        let v1 = tape.leaf(Tensor::new(&[1, 2, 4], vec![1.0; 8]).unwrap());
        let o1 = tape.scaled_dot_attention(q, k, v1, &mask, 2).unwrap();
        let mut alt = vec![1.0; 8];
        alt[4..].fill(99.0);
        let v2 = tape.leaf(Tensor::new(&[1, 2, 4], alt).unwrap());
        let o2 = tape.scaled_dot_attention(q, k, v2, &mask, 2).unwrap();
        assert_eq!(tape.value(o1), tape.value(o2));
    }

    #[test]
    fn mse_identity_is_zero_and_padding_ignored() {
        let tape = Tape::<f64>::new(false);
        let target = Tensor::new(&[1, 3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let p = tape.leaf(target.clone());
        let loss = tape.masked_mse(p, &target, &[true, true, false]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        // garbage in the masked-out slot must not matter
        let mut noisy = target.clone();
        noisy.data_mut()[4] = 1e9;
        let p2 = tape.leaf(noisy);
        let loss2 = tape.masked_mse(p2, &target, &[true, true, false]).unwrap();
        assert_eq!(tape.value(loss2).item(), 0.0);
    }

    #[test]
    fn backward_through_matmul_matches_hand_gradient() {
        // loss = sum((a@b - t)^2)/N with a 1x1x... keep simple 2x2.
        let tape = Tape::<f64>::new(false);
        let a_t = t2(2, 2, &[1., 2., 3., 4.]);
        let b_t = t2(2, 2, &[0.5, -1., 2., 0.25]);
        let a = tape.leaf(a_t.clone());
        let b = tape.leaf(b_t.clone());
        let y = tape.matmul(a, b).unwrap();
        let y3 = tape.reshape(y, &[1, 2, 2]).unwrap();
        let target = Tensor::new(&[1, 2, 2], vec![0.0; 4]).unwrap();
        let loss = tape.masked_mse(y3, &target, &[true, true]).unwrap();
        let grads = tape.backward(loss).unwrap();
        // dL/dy = 2y/4; da = dy @ b^T
        let yv = tape.value(y);
        let dy: Vec<f64> = yv.data().iter().map(|v| v * 2.0 / 4.0).collect();
        let da = grads.of(a).unwrap();
        let expect = [
            dy[0] * b_t.data()[0] + dy[1] * b_t.data()[1],
            dy[0] * b_t.data()[2] + dy[1] * b_t.data()[3],
            dy[2] * b_t.data()[0] + dy[3] * b_t.data()[1],
            dy[2] * b_t.data()[2] + dy[3] * b_t.data()[3],
        ];
        for (g, e) in da.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }
}
