//! Reverse-mode automatic differentiation on a single-owner tape.
//!
//! Every operation appends one node holding its output value and a backward
//! closure. Nodes are created in topological order, so replaying the
//! closures in reverse id order propagates gradients to every leaf. A tape
//! lives for one forward pass and is dropped after `backward`.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type GradBuf = Vec<Option<Vec<Real>>>;
type BackwardFn = Box<dyn Fn(&[Node], &[Real], &mut GradBuf)>;

struct Node {
    value: Tensor,
    requires: bool,
    backward: Option<BackwardFn>,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct GradStore {
    grads: GradBuf,
}

impl GradStore {
    pub fn get(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc_into(grads: &mut GradBuf, id: usize, len: usize) -> &mut [Real] {
    grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

/// Collapsed leading extents plus the trailing two of a matrix operand.
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((
        shape[..shape.len() - 2].iter().product(),
        shape[shape.len() - 2],
        shape[shape.len() - 1],
    ))
}

/// Resolve batch extents for a binary matrix op: leading extents must match
/// exactly, or one operand is rank-2 and broadcast across the other's batch.
fn broadcast_batch(
    op: &'static str,
    sa: &[usize],
    sb: &[usize],
    m: usize,
    n: usize,
) -> Result<(usize, Vec<usize>)> {
    let (la, lb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let lead: Vec<usize> = if la == lb {
        la.to_vec()
    } else if la.is_empty() {
        lb.to_vec()
    } else if lb.is_empty() {
        la.to_vec()
    } else {
        return Err(Error::shape(op, sa, sb));
    };
    let batch = lead.iter().product::<usize>().max(1);
    let mut out_shape = lead;
    out_shape.push(m);
    out_shape.push(n);
    Ok((batch, out_shape))
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, requires: bool, backward: Option<BackwardFn>) -> Var {
        debug_assert!(value.is_finite(), "tape op produced a non-finite value");
        value.grad = None;
        value.requires_grad = requires;
        self.nodes.push(Node { value, requires, backward });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor; it joins backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires = t.requires_grad;
        self.push(t.clone(), requires, None)
    }

    /// Record a tensor that never needs gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += bv;
        }
        let (ar, br) = (self.requires(a), self.requires(b));
        let requires = ar || br;
        let n = out.numel();
        let (ai, bi) = (a.0, b.0);
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                if ar {
                    for (d, &g) in acc_into(grads, ai, n).iter_mut().zip(gout) {
                        *d += g;
                    }
                }
                if br {
                    for (d, &g) in acc_into(grads, bi, n).iter_mut().zip(gout) {
                        *d += g;
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("sub", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= bv;
        }
        let (ar, br) = (self.requires(a), self.requires(b));
        let requires = ar || br;
        let n = out.numel();
        let (ai, bi) = (a.0, b.0);
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                if ar {
                    for (d, &g) in acc_into(grads, ai, n).iter_mut().zip(gout) {
                        *d += g;
                    }
                }
                if br {
                    for (d, &g) in acc_into(grads, bi, n).iter_mut().zip(gout) {
                        *d -= g;
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= bv;
        }
        let (ar, br) = (self.requires(a), self.requires(b));
        let requires = ar || br;
        let n = out.numel();
        let (ai, bi) = (a.0, b.0);
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                if ar {
                    let bd = nodes[bi].value.data();
                    for ((d, &g), &bv) in acc_into(grads, ai, n).iter_mut().zip(gout).zip(bd) {
                        *d += g * bv;
                    }
                }
                if br {
                    let ad = nodes[ai].value.data();
                    for ((d, &g), &av) in acc_into(grads, bi, n).iter_mut().zip(gout).zip(ad) {
                        *d += g * av;
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        let requires = self.requires(a);
        let n = out.numel();
        let ai = a.0;
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                for (d, &g) in acc_into(grads, ai, n).iter_mut().zip(gout) {
                    *d += g * c;
                }
            }) as BackwardFn
        });
        self.push(out, requires, bw)
    }

    /// x[..., d] + bias[d], broadcast over all leading extents.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.value(x).shape().last().unwrap();
        if self.value(bias).shape() != [d] {
            return Err(Error::shape("add_bias", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut out = self.value(x).clone();
        {
            let bdata = self.nodes[bias.0].value.data();
            for chunk in out.data_mut().chunks_mut(d) {
                for (o, &bv) in chunk.iter_mut().zip(bdata) {
                    *o += bv;
                }
            }
        }
        let (xr, br) = (self.requires(x), self.requires(bias));
        let requires = xr || br;
        let n = out.numel();
        let (xi, bi) = (x.0, bias.0);
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                if xr {
                    for (dst, &g) in acc_into(grads, xi, n).iter_mut().zip(gout) {
                        *dst += g;
                    }
                }
                if br {
                    let db = acc_into(grads, bi, d);
                    for chunk in gout.chunks(d) {
                        for (dst, &g) in db.iter_mut().zip(chunk) {
                            *dst += g;
                        }
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    // ---- matrix products ----

    /// Batched matrix product a[.., m, k] * b[.., k, n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (_, m, ka) = mat_dims(&sa).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let (_, kb, n) = mat_dims(&sb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        if ka != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = ka;
        let (batch, out_shape) = broadcast_batch("matmul", &sa, &sb, m, n)?;
        let a_step = if sa.len() == 2 { 0 } else { m * k };
        let b_step = if sb.len() == 2 { 0 } else { k * n };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                kernels::matmul_nn_acc(
                    &ad[i * a_step..i * a_step + m * k],
                    &bd[i * b_step..i * b_step + k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let out = Tensor::new(out_shape, out)?;
        let (ar, br) = (self.requires(a), self.requires(b));
        let requires = ar || br;
        let (ai, bi) = (a.0, b.0);
        let (a_len, b_len) = (self.value(a).numel(), self.value(b).numel());
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                if ar {
                    let bd = nodes[bi].value.data();
                    let da = acc_into(grads, ai, a_len);
                    for i in 0..batch {
                        // dA = dC * B^T
                        kernels::matmul_nt_acc(
                            &gout[i * m * n..(i + 1) * m * n],
                            &bd[i * b_step..i * b_step + k * n],
                            m,
                            n,
                            k,
                            &mut da[i * a_step..i * a_step + m * k],
                        );
                    }
                }
                if br {
                    let ad = nodes[ai].value.data();
                    let db = acc_into(grads, bi, b_len);
                    for i in 0..batch {
                        // dB = A^T * dC
                        kernels::matmul_tn_acc(
                            &ad[i * a_step..i * a_step + m * k],
                            &gout[i * m * n..(i + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db[i * b_step..i * b_step + k * n],
                        );
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    /// Batched a[.., m, k] * b[.., n, k]^T, the score product.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let (_, m, ka) = mat_dims(&sa).ok_or_else(|| Error::shape("matmul_nt", &sa, &sb))?;
        let (_, n, kb) = mat_dims(&sb).ok_or_else(|| Error::shape("matmul_nt", &sa, &sb))?;
        if ka != kb {
            return Err(Error::shape("matmul_nt", &sa, &sb));
        }
        let k = ka;
        let (batch, out_shape) = broadcast_batch("matmul_nt", &sa, &sb, m, n)?;
        let a_step = if sa.len() == 2 { 0 } else { m * k };
        let b_step = if sb.len() == 2 { 0 } else { n * k };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                kernels::matmul_nt_acc(
                    &ad[i * a_step..i * a_step + m * k],
                    &bd[i * b_step..i * b_step + n * k],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let out = Tensor::new(out_shape, out)?;
        let (ar, br) = (self.requires(a), self.requires(b));
        let requires = ar || br;
        let (ai, bi) = (a.0, b.0);
        let (a_len, b_len) = (self.value(a).numel(), self.value(b).numel());
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                if ar {
                    let bd = nodes[bi].value.data();
                    let da = acc_into(grads, ai, a_len);
                    for i in 0..batch {
                        // dA = dC * B
                        kernels::matmul_nn_acc(
                            &gout[i * m * n..(i + 1) * m * n],
                            &bd[i * b_step..i * b_step + n * k],
                            m,
                            n,
                            k,
                            &mut da[i * a_step..i * a_step + m * k],
                        );
                    }
                }
                if br {
                    let ad = nodes[ai].value.data();
                    let db = acc_into(grads, bi, b_len);
                    for i in 0..batch {
                        // dB = dC^T * A
                        kernels::matmul_tn_acc(
                            &gout[i * m * n..(i + 1) * m * n],
                            &ad[i * a_step..i * a_step + m * k],
                            n,
                            m,
                            k,
                            &mut db[i * b_step..i * b_step + n * k],
                        );
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    // ---- shape ops ----

    /// [n, h*d] -> [h, n, d]
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (n, dim) = (s[0], s[1]);
        let d = dim / heads;
        let mut out = vec![0.0; n * dim];
        {
            let xd = self.value(x).data();
            for h in 0..heads {
                for i in 0..n {
                    out[h * n * d + i * d..h * n * d + (i + 1) * d]
                        .copy_from_slice(&xd[i * dim + h * d..i * dim + (h + 1) * d]);
                }
            }
        }
        let out = Tensor::new(vec![heads, n, d], out)?;
        let requires = self.requires(x);
        let xi = x.0;
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let dx = acc_into(grads, xi, n * dim);
                for h in 0..heads {
                    for i in 0..n {
                        for c in 0..d {
                            dx[i * dim + h * d + c] += gout[h * n * d + i * d + c];
                        }
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    /// [h, n, d] -> [n, h*d]
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::shape("merge_heads", &s, &[]));
        }
        let (heads, n, d) = (s[0], s[1], s[2]);
        let dim = heads * d;
        let mut out = vec![0.0; n * dim];
        {
            let xd = self.value(x).data();
            for h in 0..heads {
                for i in 0..n {
                    out[i * dim + h * d..i * dim + (h + 1) * d]
                        .copy_from_slice(&xd[h * n * d + i * d..h * n * d + (i + 1) * d]);
                }
            }
        }
        let out = Tensor::new(vec![n, dim], out)?;
        let requires = self.requires(x);
        let xi = x.0;
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let dx = acc_into(grads, xi, heads * n * d);
                for h in 0..heads {
                    for i in 0..n {
                        for c in 0..d {
                            dx[h * n * d + i * d + c] += gout[i * dim + h * d + c];
                        }
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    /// Stack two row blocks: [ra, c] over [rb, c] -> [ra+rb, c].
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("concat_rows", &sa, &sb));
        }
        let (ra, rb, c) = (sa[0], sb[0], sa[1]);
        let mut data = Vec::with_capacity((ra + rb) * c);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::new(vec![ra + rb, c], data)?;
        let (ar, br) = (self.requires(a), self.requires(b));
        let requires = ar || br;
        let (ai, bi) = (a.0, b.0);
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                if ar {
                    for (d, &g) in acc_into(grads, ai, ra * c).iter_mut().zip(&gout[..ra * c]) {
                        *d += g;
                    }
                }
                if br {
                    for (d, &g) in acc_into(grads, bi, rb * c).iter_mut().zip(&gout[ra * c..]) {
                        *d += g;
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    /// Rows [start, start+len) of a rank-1 or rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (rows, cols) = match s.len() {
            1 => (s[0], 1),
            2 => (s[0], s[1]),
            _ => return Err(Error::shape("slice_rows", &s, &[])),
        };
        if len == 0 || start + len > rows {
            return Err(Error::invalid(format!(
                "slice_rows: rows [{start}, {}) out of range for {rows} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out_shape = if s.len() == 1 { vec![len] } else { vec![len, cols] };
        let out = Tensor::new(out_shape, data)?;
        let requires = self.requires(x);
        let xi = x.0;
        let total = rows * cols;
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let dx = acc_into(grads, xi, total);
                for (d, &g) in dx[start * cols..(start + len) * cols].iter_mut().zip(gout) {
                    *d += g;
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = kernels::gelu_val(*o);
        }
        let requires = self.requires(x);
        let (xi, n) = (x.0, out.numel());
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let xd = nodes[xi].value.data();
                for ((d, &g), &xv) in acc_into(grads, xi, n).iter_mut().zip(gout).zip(xd) {
                    *d += g * kernels::gelu_grad(xv);
                }
            }) as BackwardFn
        });
        self.push(out, requires, bw)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = kernels::sigmoid_val(*o);
        }
        let requires = self.requires(x);
        let (xi, n) = (x.0, out.numel());
        let out_id = self.nodes.len();
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let yd = nodes[out_id].value.data();
                for ((d, &g), &y) in acc_into(grads, xi, n).iter_mut().zip(gout).zip(yd) {
                    *d += g * y * (1.0 - y);
                }
            }) as BackwardFn
        });
        self.push(out, requires, bw)
    }

    /// Softmax along the last extent, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let (rows, cols) = self.value(x).rows_cols();
        let mut out = Tensor::zeros(self.value(x).shape().to_vec());
        kernels::softmax_rows(self.value(x).data(), rows, cols, out.data_mut());
        let requires = self.requires(x);
        let (xi, n) = (x.0, out.numel());
        let out_id = self.nodes.len();
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let y = nodes[out_id].value.data();
                let dx = acc_into(grads, xi, n);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: Real = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr)
                    {
                        *d += yv * (gv - dot);
                    }
                }
            }) as BackwardFn
        });
        self.push(out, requires, bw)
    }

    /// Per-token layer normalization over the last extent.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let cols = *sx.last().unwrap();
        if self.value(gamma).shape() != [cols] {
            return Err(Error::shape("layer_norm", &sx, self.value(gamma).shape()));
        }
        if self.value(beta).shape() != [cols] {
            return Err(Error::shape("layer_norm", &sx, self.value(beta).shape()));
        }
        let rows = self.value(x).numel() / cols;
        let mut out = Tensor::zeros(sx);
        {
            let xd = self.nodes[x.0].value.data();
            let g = self.nodes[gamma.0].value.data();
            let b = self.nodes[beta.0].value.data();
            kernels::layer_norm_rows(xd, g, b, eps, rows, cols, out.data_mut());
        }
        let (xr, gr, br) = (self.requires(x), self.requires(gamma), self.requires(beta));
        let requires = xr || gr || br;
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let n = out.numel();
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                for r in 0..rows {
                    let xrow = &nodes[xi].value.data()[r * cols..(r + 1) * cols];
                    let grow = &gout[r * cols..(r + 1) * cols];
                    let (mean, inv_std) = kernels::row_moments(xrow, eps);
                    let xhat: Vec<Real> = xrow.iter().map(|&v| (v - mean) * inv_std).collect();
                    if gr {
                        let dg = acc_into(grads, gi, cols);
                        for ((d, &g), &xh) in dg.iter_mut().zip(grow).zip(&xhat) {
                            *d += g * xh;
                        }
                    }
                    if br {
                        let db = acc_into(grads, bi, cols);
                        for (d, &g) in db.iter_mut().zip(grow) {
                            *d += g;
                        }
                    }
                    if xr {
                        let gd = nodes[gi].value.data();
                        let dxhat: Vec<Real> =
                            grow.iter().zip(gd).map(|(&g, &gm)| g * gm).collect();
                        let m = cols as Real;
                        let mean_dxhat: Real = dxhat.iter().sum::<Real>() / m;
                        let mean_dxhat_xhat: Real =
                            dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<Real>() / m;
                        let dx = acc_into(grads, xi, n);
                        for ((d, &dxh), &xh) in
                            dx[r * cols..(r + 1) * cols].iter_mut().zip(&dxhat).zip(&xhat)
                        {
                            *d += inv_std * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                        }
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: Real = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total);
        let requires = self.requires(x);
        let (xi, n) = (x.0, self.value(x).numel());
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |_nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let g = gout[0];
                for d in acc_into(grads, xi, n) {
                    *d += g;
                }
            }) as BackwardFn
        });
        self.push(out, requires, bw)
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if labels.len() != b {
            return Err(Error::invalid(format!(
                "cross_entropy: {} labels for batch of {b}",
                labels.len()
            )));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::invalid(format!(
                    "cross_entropy: label {y} at index {i} out of range for {c} classes"
                )));
            }
        }
        let mut total = 0.0;
        {
            let data = self.value(logits).data();
            for (i, &y) in labels.iter().enumerate() {
                let row = &data[i * c..(i + 1) * c];
                total += kernels::logsumexp_row(row) - row[y];
            }
        }
        let out = Tensor::scalar(total / b as Real);
        let requires = self.requires(logits);
        let li = logits.0;
        let labels_owned: Vec<usize> = labels.to_vec();
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let mut soft = vec![0.0; b * c];
                kernels::softmax_rows(nodes[li].value.data(), b, c, &mut soft);
                let g0 = gout[0] / b as Real;
                let dl = acc_into(grads, li, b * c);
                for (i, &y) in labels_owned.iter().enumerate() {
                    for j in 0..c {
                        let ind = if j == y { 1.0 } else { 0.0 };
                        dl[i * c + j] += g0 * (soft[i * c + j] - ind);
                    }
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    /// alpha * cur + (1 - alpha) * prev, with a length-1 gate tensor.
    pub fn lerp(&mut self, cur: Var, prev: Var, alpha: Var) -> Result<Var> {
        if self.value(cur).shape() != self.value(prev).shape() {
            return Err(Error::shape("lerp", self.value(cur).shape(), self.value(prev).shape()));
        }
        if self.value(alpha).numel() != 1 {
            return Err(Error::invalid("lerp: gate must hold exactly one value"));
        }
        let a = self.value(alpha).data()[0];
        let mut out = self.value(cur).clone();
        for (o, &pv) in out.data_mut().iter_mut().zip(self.nodes[prev.0].value.data()) {
            *o = a * *o + (1.0 - a) * pv;
        }
        let (cr, pr, ar) = (self.requires(cur), self.requires(prev), self.requires(alpha));
        let requires = cr || pr || ar;
        let (ci, pi, aid) = (cur.0, prev.0, alpha.0);
        let n = out.numel();
        let bw: Option<BackwardFn> = requires.then(|| {
            Box::new(move |nodes: &[Node], gout: &[Real], grads: &mut GradBuf| {
                let a = nodes[aid].value.data()[0];
                if cr {
                    for (d, &g) in acc_into(grads, ci, n).iter_mut().zip(gout) {
                        *d += a * g;
                    }
                }
                if pr {
                    for (d, &g) in acc_into(grads, pi, n).iter_mut().zip(gout) {
                        *d += (1.0 - a) * g;
                    }
                }
                if ar {
                    let cd = nodes[ci].value.data();
                    let pd = nodes[pi].value.data();
                    let mut da = 0.0;
                    for ((&g, &cv), &pv) in gout.iter().zip(cd).zip(pd) {
                        da += g * (cv - pv);
                    }
                    acc_into(grads, aid, 1)[0] += da;
                }
            }) as BackwardFn
        });
        Ok(self.push(out, requires, bw))
    }

    // ---- backward ----

    /// Propagate gradients from a scalar loss back to every leaf that
    /// requires them. Two calls on an identical tape produce bitwise-identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<GradStore> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: GradBuf = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            let Some(gout) = grads[id].clone() else { continue };
            if let Some(bw) = &self.nodes[id].backward {
                bw(&self.nodes, &gout, &mut grads);
            }
        }
        Ok(GradStore { grads })
    }
}
