//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every op as it runs; each node stores its forward value
//! and a closure that maps the output gradient to contributions for the node's
//! inputs. [`Tape::backward`] consumes the tape, sweeps the nodes in reverse
//! record order (a valid topological order, since ops only reference earlier
//! nodes), and deposits accumulated gradients into every watched [`Param`].
//!
//! Forward values are computed by the pure ops in [`crate::tensor`], so a taped
//! expression and its untaped counterpart are bit-identical.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shared trainable tensor with an accumulated gradient.
///
/// Cloning shares the underlying storage, so a clone seen by several nets or
/// threads refers to the same weights.
#[derive(Clone)]
pub struct Param(Arc<RwLock<ParamInner>>);

struct ParamInner {
    value: Tensor,
    grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param(Arc::new(RwLock::new(ParamInner { value, grad })))
    }

    pub fn value(&self) -> Tensor {
        self.0.read().unwrap().value.clone()
    }

    pub fn grad(&self) -> Tensor {
        self.0.read().unwrap().grad.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.read().unwrap().value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.read().unwrap().value.numel()
    }

    pub fn zero_grad(&self) {
        let mut inner = self.0.write().unwrap();
        inner.grad = Tensor::zeros(inner.value.shape());
    }

    pub fn set_value(&self, value: Tensor) -> Result<()> {
        let mut inner = self.0.write().unwrap();
        if inner.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "set_value shape {:?} does not match param shape {:?}",
                value.shape(),
                inner.value.shape()
            )));
        }
        inner.value = value;
        Ok(())
    }

    pub fn add_grad(&self, delta: &Tensor) -> Result<()> {
        self.0.write().unwrap().grad.add_assign(delta)
    }

    /// Apply an in-place update given (value, grad), e.g. an optimizer step.
    pub fn update(&self, f: impl FnOnce(&mut Tensor, &Tensor)) {
        let inner = &mut *self.0.write().unwrap();
        f(&mut inner.value, &inner.grad);
    }

    /// Identity of the shared storage, stable across clones; usable as a
    /// map key for per-parameter optimizer state.
    pub fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as *const () as usize
    }
}

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackFn = Box<dyn Fn(&[Tensor], &Tensor) -> Result<Vec<(usize, Tensor)>>>;

/// Linear record of a differentiable computation.
pub struct Tape {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    watched: Vec<(usize, Param)>,
    watch_keys: HashMap<usize, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            watched: Vec::new(),
            watch_keys: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, back: Option<BackFn>) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.backs.push(back);
        Var { id }
    }

    /// Forward value of a recorded node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.id]
    }

    /// Record a parameter leaf. Watching the same param twice returns the
    /// same node, so gradient contributions from all uses accumulate.
    pub fn watch(&mut self, p: &Param) -> Var {
        if let Some(&id) = self.watch_keys.get(&p.key()) {
            return Var { id };
        }
        let v = self.push(p.value(), None);
        self.watch_keys.insert(p.key(), v.id);
        self.watched.push((v.id, p.clone()));
        v
    }

    /// Record a non-trainable leaf; no gradient flows out of it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Record an externally computed op. `back` receives the output gradient
    /// and returns one contribution per input var; capture whatever forward
    /// values the formula needs by clone.
    pub fn custom(
        &mut self,
        value: Tensor,
        back: impl Fn(&Tensor) -> Result<Vec<(Var, Tensor)>> + 'static,
    ) -> Var {
        self.push(
            value,
            Some(Box::new(move |_, g| {
                Ok(back(g)?.into_iter().map(|(v, t)| (v.id, t)).collect())
            })),
        )
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.values[a.id].matmul(&self.values[b.id])?;
        let (ai, bi) = (a.id, b.id);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                let da = g.matmul(&vals[bi].transpose2d()?)?;
                let db = vals[ai].transpose2d()?.matmul(g)?;
                Ok(vec![(ai, da), (bi, db)])
            })),
        ))
    }

    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        let value = self.values[w.id].matvec(&self.values[v.id])?;
        let (wi, vi) = (w.id, v.id);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                let (m, k) = (vals[wi].shape()[0], vals[wi].shape()[1]);
                let mut dw = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        dw[i * k + j] = g.data()[i] * vals[vi].data()[j];
                    }
                }
                let dv = vals[wi].transpose2d()?.matvec(g)?;
                Ok(vec![(wi, Tensor::new(vec![m, k], dw)?), (vi, dv)])
            })),
        ))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let value = self.values[a.id].transpose2d()?;
        let ai = a.id;
        Ok(self.push(
            value,
            Some(Box::new(move |_, g| Ok(vec![(ai, g.transpose2d()?)]))),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[a.id].reshape(shape)?;
        let ai = a.id;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                Ok(vec![(ai, g.reshape(vals[ai].shape())?)])
            })),
        ))
    }

    // ── Pooling and pointwise ───────────────────────────────────────

    pub fn global_avg_pool3d(&mut self, x: Var) -> Result<Var> {
        let value = self.values[x.id].global_avg_pool3d()?;
        let xi = x.id;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                let shape = vals[xi].shape().to_vec();
                let spatial: usize = shape[1..].iter().product();
                let mut dx = vec![0.0; shape.iter().product()];
                for c in 0..shape[0] {
                    let v = g.data()[c] / spatial as f64;
                    for slot in &mut dx[c * spatial..(c + 1) * spatial] {
                        *slot = v;
                    }
                }
                Ok(vec![(xi, Tensor::new(shape, dx)?)])
            })),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.values[x.id].relu();
        let xi = x.id;
        self.push(
            value,
            Some(Box::new(move |vals, g| {
                let dx = vals[xi].map(|v| if v > 0.0 { 1.0 } else { 0.0 }).mul(g)?;
                Ok(vec![(xi, dx)])
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.values[x.id].sigmoid();
        let xi = x.id;
        let out_id = self.values.len();
        self.push(
            value,
            Some(Box::new(move |vals, g| {
                let y = &vals[out_id];
                let dx = y.map(|s| s * (1.0 - s)).mul(g)?;
                Ok(vec![(xi, dx)])
            })),
        )
    }

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.values[x.id].softmax_axis(axis)?;
        let xi = x.id;
        let out_id = self.values.len();
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                // per lane: dx_j = s_j * (g_j - sum_k g_k s_k)
                let s = &vals[out_id];
                let shape = s.shape().to_vec();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let (sd, gd) = (s.data(), g.data());
                let mut dx = vec![0.0; s.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += gd[base + j * inner] * sd[base + j * inner];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            dx[k] = sd[k] * (gd[k] - dot);
                        }
                    }
                }
                Ok(vec![(xi, Tensor::new(shape, dx)?)])
            })),
        ))
    }

    // ── Split / concat ──────────────────────────────────────────────

    pub fn split(&mut self, x: Var, axis: usize, groups: usize) -> Result<Vec<Var>> {
        let parts = self.values[x.id].split(axis, groups)?;
        let xi = x.id;
        let mut out = Vec::with_capacity(groups);
        for (g, part) in parts.into_iter().enumerate() {
            out.push(self.push(
                part,
                Some(Box::new(move |vals, grad| {
                    Ok(vec![(xi, embed_split_part(vals[xi].shape(), axis, groups, g, grad)?)])
                })),
            ));
        }
        Ok(out)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|v| self.values[v.id].clone()).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                let mut out = Vec::with_capacity(ids.len());
                let mut offset = 0;
                for &id in &ids {
                    let extent = vals[id].shape()[axis];
                    out.push((id, extract_axis_range(g, axis, offset, extent)?));
                    offset += extent;
                }
                Ok(out)
            })),
        ))
    }

    // ── Channel ops ─────────────────────────────────────────────────

    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let value = self.values[x.id].channel_scale(&self.values[s.id])?;
        let (xi, si) = (x.id, s.id);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                let xv = &vals[xi];
                let sv = &vals[si];
                let c = xv.shape()[0];
                let spatial: usize = xv.shape()[1..].iter().product();
                let mut dx = g.data().to_vec();
                let mut ds = vec![0.0; c];
                for ch in 0..c {
                    let scale = sv.data()[ch];
                    let range = ch * spatial..(ch + 1) * spatial;
                    let mut acc = 0.0;
                    for (slot, &xval) in dx[range].iter_mut().zip(&xv.data()[ch * spatial..]) {
                        acc += *slot * xval;
                        *slot *= scale;
                    }
                    ds[ch] = acc;
                }
                Ok(vec![
                    (xi, Tensor::new(xv.shape().to_vec(), dx)?),
                    (si, Tensor::new(vec![c], ds)?),
                ])
            })),
        ))
    }

    pub fn channel_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = self.values[x.id].channel_add(&self.values[b.id])?;
        let (xi, bi) = (x.id, b.id);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                let c = vals[xi].shape()[0];
                let spatial: usize = vals[xi].shape()[1..].iter().product();
                let mut db = vec![0.0; c];
                for (ch, slot) in db.iter_mut().enumerate() {
                    *slot = g.data()[ch * spatial..(ch + 1) * spatial].iter().sum();
                }
                Ok(vec![(xi, g.clone()), (bi, Tensor::new(vec![c], db)?)])
            })),
        ))
    }

    pub fn conv1x1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.values[x.id].conv1x1x1(&self.values[w.id])?;
        let (xi, wi) = (x.id, w.id);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                let xv = &vals[xi];
                let wv = &vals[wi];
                let c = xv.shape()[0];
                let spatial: usize = xv.shape()[1..].iter().product();
                let g_flat = g.reshape(&[wv.shape()[0], spatial])?;
                let x_flat = xv.reshape(&[c, spatial])?;
                let dw = g_flat.matmul(&x_flat.transpose2d()?)?;
                let dx = wv
                    .transpose2d()?
                    .matmul(&g_flat)?
                    .reshape(xv.shape())?;
                Ok(vec![(xi, dx), (wi, dw)])
            })),
        ))
    }

    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let value = self.values[x.id].max_pool3d()?;
        let xi = x.id;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                // route each output grad to the first-scanned max of its block
                let xv = &vals[xi];
                let shape = xv.shape().to_vec();
                let (c, h, w) = (shape[0], shape[2], shape[3]);
                let (od, oh, ow) = (shape[1] / 2, h / 2, w / 2);
                let mut dx = vec![0.0; xv.numel()];
                let mut gi = 0;
                for ch in 0..c {
                    for z in 0..od {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0;
                                for dz in 0..2 {
                                    for dy in 0..2 {
                                        for dxo in 0..2 {
                                            let idx = xv.idx4(
                                                ch,
                                                2 * z + dz,
                                                2 * y + dy,
                                                2 * xx + dxo,
                                            );
                                            if xv.data()[idx] > best {
                                                best = xv.data()[idx];
                                                best_idx = idx;
                                            }
                                        }
                                    }
                                }
                                dx[best_idx] += g.data()[gi];
                                gi += 1;
                            }
                        }
                    }
                }
                Ok(vec![(xi, Tensor::new(shape, dx)?)])
            })),
        ))
    }

    // ── Elementwise arithmetic ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.values[a.id].add(&self.values[b.id])?;
        let (ai, bi) = (a.id, b.id);
        Ok(self.push(
            value,
            Some(Box::new(move |_, g| {
                Ok(vec![(ai, g.clone()), (bi, g.clone())])
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.values[a.id].sub(&self.values[b.id])?;
        let (ai, bi) = (a.id, b.id);
        Ok(self.push(
            value,
            Some(Box::new(move |_, g| {
                Ok(vec![(ai, g.clone()), (bi, g.scale(-1.0))])
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.values[a.id].mul(&self.values[b.id])?;
        let (ai, bi) = (a.id, b.id);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                Ok(vec![(ai, g.mul(&vals[bi])?), (bi, g.mul(&vals[ai])?)])
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.values[a.id].scale(factor);
        let ai = a.id;
        self.push(
            value,
            Some(Box::new(move |_, g| Ok(vec![(ai, g.scale(factor))]))),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.id].map(|v| v + c);
        let ai = a.id;
        self.push(value, Some(Box::new(move |_, g| Ok(vec![(ai, g.clone())]))))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.values[a.id].data().iter().any(|&v| v <= 0.0) {
            return Err(Error::numeric("ln of a non-positive value"));
        }
        let value = self.values[a.id].map(f64::ln);
        let ai = a.id;
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g| {
                Ok(vec![(ai, vals[ai].map(|v| 1.0 / v).mul(g)?)])
            })),
        ))
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.values[a.id].map(f64::abs);
        let ai = a.id;
        self.push(
            value,
            Some(Box::new(move |vals, g| {
                let sign = vals[ai].map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                Ok(vec![(ai, sign.mul(g)?)])
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.values[a.id].sum_all());
        let ai = a.id;
        self.push(
            value,
            Some(Box::new(move |vals, g| {
                let gv = g.data()[0];
                Ok(vec![(ai, Tensor::filled(vals[ai].shape(), gv))])
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.id].numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; consumes the tape and adds the
    /// resulting gradients into every watched [`Param`].
    pub fn backward(self, loss: Var) -> Result<()> {
        let Tape {
            values,
            backs,
            watched,
            ..
        } = self;
        if values[loss.id].numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                values[loss.id].shape()
            )));
        }
        let n = values.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(values[loss.id].shape(), 1.0));
        for i in (0..n).rev() {
            let Some(back) = &backs[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            for (src, delta) in back(&values, &g)? {
                if delta.shape() != values[src].shape() {
                    return Err(Error::shape(format!(
                        "gradient shape {:?} does not match node shape {:?}",
                        delta.shape(),
                        values[src].shape()
                    )));
                }
                match &mut grads[src] {
                    Some(t) => t.add_assign(&delta)?,
                    slot => *slot = Some(delta),
                }
            }
        }
        for (id, param) in watched {
            if let Some(g) = grads[id].take() {
                param.add_grad(&g)?;
            }
        }
        Ok(())
    }
}

/// Scatter a split part's gradient back into a zero tensor of the input shape.
fn embed_split_part(
    xshape: &[usize],
    axis: usize,
    groups: usize,
    group: usize,
    part: &Tensor,
) -> Result<Tensor> {
    let part_extent = xshape[axis] / groups;
    let inner: usize = xshape[axis + 1..].iter().product();
    let outer: usize = xshape[..axis].iter().product();
    let chunk = part_extent * inner;
    let mut out = vec![0.0; xshape.iter().product()];
    for o in 0..outer {
        let src = o * chunk;
        let dst = (o * groups + group) * chunk;
        out[dst..dst + chunk].copy_from_slice(&part.data()[src..src + chunk]);
    }
    Tensor::new(xshape.to_vec(), out)
}

/// Copy out the `[offset, offset+extent)` range along `axis`.
fn extract_axis_range(g: &Tensor, axis: usize, offset: usize, extent: usize) -> Result<Tensor> {
    let gshape = g.shape();
    let inner: usize = gshape[axis + 1..].iter().product();
    let outer: usize = gshape[..axis].iter().product();
    let total = gshape[axis];
    let mut shape = gshape.to_vec();
    shape[axis] = extent;
    let mut out = Vec::with_capacity(outer * extent * inner);
    for o in 0..outer {
        let start = (o * total + offset) * inner;
        out.extend_from_slice(&g.data()[start..start + extent * inner]);
    }
    Tensor::new(shape, out)
}
