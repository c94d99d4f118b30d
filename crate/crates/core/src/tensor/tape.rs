use std::cell::{Ref, RefCell};

use super::kernels::{self, MatmulPlan, NormStats};
use super::{last_extent, Float, Tensor};
use crate::error::{Error, Result};

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so the record is already a
/// topological order and the reverse pass is a single backwards sweep.
pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Float> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

enum Op<T: Float> {
    Leaf,
    MatMul { a: usize, b: usize, plan: MatmulPlan },
    Permute { x: usize, perm: Vec<usize> },
    Reshape { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    AddBias { x: usize, bias: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, stats: NormStats<T> },
    Gelu { x: usize },
    SliceRows { x: usize, start: usize },
    Concat { parts: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    SumLast { x: usize },
    CosineRows { a: usize, b: usize, eps: T },
    HeadBias { slopes: usize, dist: Vec<T> },
    Rope { x: usize, cos: Vec<T>, sin: Vec<T>, tokens: usize },
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Float = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf, differentiable iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a differentiable leaf regardless of the tensor's flag.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        adj[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backward_node(&nodes, id, &g, &mut adj);
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }
}

fn acc<T: Float>(
    nodes: &[Node<T>],
    adj: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let slot = adj[id].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn backward_node<T: Float>(nodes: &[Node<T>], id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, plan } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let mut da = nodes[*a].requires_grad.then(|| vec![T::zero(); av.len()]);
            let mut db = nodes[*b].requires_grad.then(|| vec![T::zero(); bv.len()]);
            plan.backward(av, bv, g, da.as_deref_mut(), db.as_deref_mut());
            if let Some(da) = da {
                acc(nodes, adj, *a, |s| add_into(s, &da));
            }
            if let Some(db) = db {
                acc(nodes, adj, *b, |s| add_into(s, &db));
            }
        }
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            let (_, gx) = kernels::permute(&node.shape, g, &inv).expect("valid permutation");
            acc(nodes, adj, *x, |s| add_into(s, &gx));
        }
        Op::Reshape { x } => acc(nodes, adj, *x, |s| add_into(s, g)),
        Op::Add { a, b } => {
            acc(nodes, adj, *a, |s| add_into(s, g));
            acc(nodes, adj, *b, |s| add_into(s, g));
        }
        Op::Sub { a, b } => {
            acc(nodes, adj, *a, |s| add_into(s, g));
            acc(nodes, adj, *b, |s| s.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
        }
        Op::Mul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc(nodes, adj, *a, |s| {
                for ((d, &gv), &y) in s.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            });
            acc(nodes, adj, *b, |s| {
                for ((d, &gv), &x) in s.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            });
        }
        Op::Scale { x, c } => acc(nodes, adj, *x, |s| {
            s.iter_mut().zip(g).for_each(|(d, &v)| *d += *c * v)
        }),
        Op::AddBias { x, bias } => {
            acc(nodes, adj, *x, |s| add_into(s, g));
            let d = nodes[*bias].value.len();
            acc(nodes, adj, *bias, |s| {
                for row in g.chunks(d) {
                    add_into(s, row);
                }
            });
        }
        Op::Softmax { x } => {
            let n = *node.shape.last().unwrap();
            let y = &node.value;
            acc(nodes, adj, *x, |s| {
                for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let inner = kernels::dot(grow, yrow);
                    for j in 0..n {
                        srow[j] += yrow[j] * (grow[j] - inner);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let d = *node.shape.last().unwrap();
            let xv = &nodes[*x].value;
            let gv = &nodes[*gain].value;
            let inv_d = T::one() / T::from_usize(d).unwrap();
            let rows = xv.len() / d;
            let xhat_row = |r: usize, j: usize| (xv[r * d + j] - stats.mean[r]) * stats.rstd[r];
            acc(nodes, adj, *gain, |s| {
                for r in 0..rows {
                    for j in 0..d {
                        s[j] += g[r * d + j] * xhat_row(r, j);
                    }
                }
            });
            acc(nodes, adj, *bias, |s| {
                for row in g.chunks(d) {
                    add_into(s, row);
                }
            });
            acc(nodes, adj, *x, |s| {
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dxhat[j] = g[r * d + j] * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat_row(r, j);
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    for j in 0..d {
                        s[r * d + j] += stats.rstd[r]
                            * (dxhat[j] - mean_dxhat - xhat_row(r, j) * mean_dxhat_xhat);
                    }
                }
            });
        }
        Op::Gelu { x } => {
            let xv = &nodes[*x].value;
            acc(nodes, adj, *x, |s| {
                for ((d, &gv), &v) in s.iter_mut().zip(g).zip(xv) {
                    *d += gv * kernels::gelu_grad(v);
                }
            });
        }
        Op::SliceRows { x, start } => {
            let inner: usize = node.shape[1..].iter().product();
            acc(nodes, adj, *x, |s| add_into(&mut s[start * inner..start * inner + g.len()], g));
        }
        Op::Concat { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                acc(nodes, adj, p, |s| add_into(s, &g[off..off + len]));
                off += len;
            }
        }
        Op::Sum { x } => acc(nodes, adj, *x, |s| s.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean { x } => {
            let n = T::from_usize(nodes[*x].value.len()).unwrap();
            acc(nodes, adj, *x, |s| s.iter_mut().for_each(|d| *d += g[0] / n))
        }
        Op::SumLast { x } => {
            let d = *nodes[*x].shape.last().unwrap();
            acc(nodes, adj, *x, |s| {
                for (row, &gv) in s.chunks_mut(d).zip(g) {
                    row.iter_mut().for_each(|v| *v += gv);
                }
            });
        }
        Op::CosineRows { a, b, eps } => {
            let d = *nodes[*a].shape.last().unwrap();
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let mut da = vec![T::zero(); av.len()];
            let mut db = vec![T::zero(); bv.len()];
            for (r, &gr) in g.iter().enumerate() {
                let ar = &av[r * d..(r + 1) * d];
                let br = &bv[r * d..(r + 1) * d];
                let na = kernels::dot(ar, ar).sqrt();
                let nb = kernels::dot(br, br).sqrt();
                let dt = kernels::dot(ar, br);
                let den = na * nb + *eps;
                let coef = dt / (den * den);
                for j in 0..d {
                    let mut ga = br[j] / den;
                    let mut gb = ar[j] / den;
                    if na > T::zero() {
                        ga -= coef * nb * ar[j] / na;
                    }
                    if nb > T::zero() {
                        gb -= coef * na * br[j] / nb;
                    }
                    da[r * d + j] = gr * ga;
                    db[r * d + j] = gr * gb;
                }
            }
            acc(nodes, adj, *a, |s| add_into(s, &da));
            acc(nodes, adj, *b, |s| add_into(s, &db));
        }
        Op::HeadBias { slopes, dist } => {
            let nn = dist.len();
            acc(nodes, adj, *slopes, |s| {
                for (h, sh) in s.iter_mut().enumerate() {
                    *sh -= kernels::dot(&g[h * nn..(h + 1) * nn], dist);
                }
            });
        }
        Op::Rope { x, cos, sin, tokens } => {
            let dh = *node.shape.last().unwrap();
            let half = dh / 2;
            acc(nodes, adj, *x, |s| {
                for (row_idx, (srow, grow)) in s.chunks_mut(dh).zip(g.chunks(dh)).enumerate() {
                    let t = row_idx % tokens;
                    for p in 0..half {
                        let (c, sn) = (cos[t * half + p], sin[t * half + p]);
                        let (g0, g1) = (grow[2 * p], grow[2 * p + 1]);
                        srow[2 * p] += g0 * c + g1 * sn;
                        srow[2 * p + 1] += g1 * c - g0 * sn;
                    }
                }
            });
        }
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let n = self.tape.node(self.id);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.tape.node(self.id).value[0]
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        let n = self.tape.node(self.id);
        n.grad
            .as_ref()
            .map(|g| Tensor::new(&n.shape, g.clone()).expect("grad matches node shape"))
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn binary(&self, other: &Var<'t, T>, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let (plan, out) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            let plan = MatmulPlan::new(&a.shape, &b.shape)?;
            let mut out = vec![T::zero(); plan.out_len()];
            plan.forward(&a.value, &b.value, &mut out);
            (plan, out)
        };
        let shape = plan.out_shape.clone();
        Ok(self.binary(other, shape, out, Op::MatMul { a: self.id, b: other.id, plan }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let (shape, out) = {
            let n = self.tape.node(self.id);
            kernels::permute(&n.shape, &n.value, perm)?
        };
        Ok(self.unary(shape, out, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    pub fn transpose_last2(&self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let n = self.tape.node(self.id);
            if shape.iter().product::<usize>() != n.value.len() {
                return Err(Error::dim(format!(
                    "cannot reshape {:?} into {:?}",
                    n.shape, shape
                )));
            }
            n.value.clone()
        };
        Ok(self.unary(shape.to_vec(), value, Op::Reshape { x: self.id }))
    }

    fn zip_same(&self, other: &Var<'t, T>, what: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        self.same_tape(other);
        let a = self.tape.node(self.id);
        let b = self.tape.node(other.id);
        if a.shape != b.shape {
            return Err(Error::dim(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                a.shape, b.shape
            )));
        }
        let v = a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((a.shape.clone(), v))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v) = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.binary(other, s, v, Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v) = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self.binary(other, s, v, Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v) = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.binary(other, s, v, Op::Mul { a: self.id, b: other.id }))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let (s, v) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.iter().map(|&x| x * c).collect())
        };
        self.unary(s, v, Op::Scale { x: self.id, c })
    }

    /// Adds a `[d]` vector to every trailing row.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(bias);
        let (s, v) = {
            let x = self.tape.node(self.id);
            let b = self.tape.node(bias.id);
            let d = last_extent(&x.shape)?;
            if b.value.len() != d {
                return Err(Error::dim(format!(
                    "bias of {} entries for rows of {}",
                    b.value.len(),
                    d
                )));
            }
            let mut v = x.value.clone();
            for row in v.chunks_mut(d) {
                add_into(row, &b.value);
            }
            (x.shape.clone(), v)
        };
        Ok(self.binary(bias, s, v, Op::AddBias { x: self.id, bias: bias.id }))
    }

    pub fn softmax_rows(&self) -> Result<Var<'t, T>> {
        let (s, v) = {
            let x = self.tape.node(self.id);
            let n = last_extent(&x.shape)?;
            let mut out = vec![T::zero(); x.value.len()];
            kernels::softmax_rows(&x.value, &mut out, n)?;
            (x.shape.clone(), out)
        };
        Ok(self.unary(s, v, Op::Softmax { x: self.id }))
    }

    pub fn layernorm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(gain);
        self.same_tape(bias);
        let (s, v, stats) = {
            let x = self.tape.node(self.id);
            let gn = self.tape.node(gain.id);
            let bn = self.tape.node(bias.id);
            let d = last_extent(&x.shape)?;
            if gn.value.len() != d || bn.value.len() != d {
                return Err(Error::dim(format!(
                    "layernorm affine parameters must have {d} entries"
                )));
            }
            let mut out = vec![T::zero(); x.value.len()];
            let mut stats = NormStats::default();
            kernels::layernorm(&x.value, &gn.value, &bn.value, T::of(eps), d, &mut out, Some(&mut stats));
            (x.shape.clone(), out, stats)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            s,
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
            rg,
        ))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let (s, v) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.iter().map(|&x| kernels::gelu(x)).collect())
        };
        self.unary(s, v, Op::Gelu { x: self.id })
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let (s, v) = {
            let n = self.tape.node(self.id);
            if n.shape.is_empty() || start + len > n.shape[0] {
                return Err(Error::dim(format!(
                    "slice {}..{} out of range for shape {:?}",
                    start,
                    start + len,
                    n.shape
                )));
            }
            let inner: usize = n.shape[1..].iter().product();
            let mut s = n.shape.clone();
            s[0] = len;
            (s, n.value[start * inner..(start + len) * inner].to_vec())
        };
        Ok(self.unary(s, v, Op::SliceRows { x: self.id, start }))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let (s, v, rg) = {
            let trailing = first.shape()[1..].to_vec();
            let mut rows = 0;
            let mut v = Vec::new();
            let mut rg = false;
            for p in parts {
                first.same_tape(p);
                let n = tape.node(p.id);
                if n.shape.is_empty() || n.shape[1..] != trailing[..] {
                    return Err(Error::dim(format!(
                        "concat trailing shapes differ: {:?} vs {:?}",
                        n.shape, trailing
                    )));
                }
                rows += n.shape[0];
                v.extend_from_slice(&n.value);
                rg |= n.requires_grad;
            }
            let mut s = vec![rows];
            s.extend(trailing);
            (s, v, rg)
        };
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(s, v, Op::Concat { parts: ids }, rg))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = {
            let n = self.tape.node(self.id);
            let mut acc = T::zero();
            for &v in &n.value {
                acc += v;
            }
            acc
        };
        self.unary(vec![], vec![total], Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let m = {
            let n = self.tape.node(self.id);
            let mut acc = T::zero();
            for &v in &n.value {
                acc += v;
            }
            acc / T::from_usize(n.value.len().max(1)).unwrap()
        };
        self.unary(vec![], vec![m], Op::Mean { x: self.id })
    }

    pub fn sum_last(&self) -> Result<Var<'t, T>> {
        let (s, v) = {
            let n = self.tape.node(self.id);
            let d = last_extent(&n.shape)?;
            let v = n
                .value
                .chunks(d)
                .map(|row| {
                    let mut a = T::zero();
                    for &x in row {
                        a += x;
                    }
                    a
                })
                .collect();
            (n.shape[..n.shape.len() - 1].to_vec(), v)
        };
        Ok(self.unary(s, v, Op::SumLast { x: self.id }))
    }

    /// Row-wise cosine similarity `a·b / (‖a‖‖b‖ + eps)` over the last axis.
    pub fn cosine_rows(&self, other: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(other);
        let eps = T::of(eps);
        let (s, v) = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            if a.shape != b.shape {
                return Err(Error::dim(format!(
                    "cosine needs equal shapes, got {:?} and {:?}",
                    a.shape, b.shape
                )));
            }
            let d = last_extent(&a.shape)?;
            let v = a
                .value
                .chunks(d)
                .zip(b.value.chunks(d))
                .map(|(x, y)| cosine(x, y, eps))
                .collect();
            (a.shape[..a.shape.len() - 1].to_vec(), v)
        };
        Ok(self.binary(other, s, v, Op::CosineRows { a: self.id, b: other.id, eps }))
    }

    /// Per-head additive attention offsets `out[h, i, j] = -slope[h] * dist[i, j]`.
    pub fn head_bias(&self, dist: &[T], n: usize) -> Result<Var<'t, T>> {
        if dist.len() != n * n {
            return Err(Error::dim(format!(
                "distance matrix has {} entries, expected {}x{}",
                dist.len(),
                n,
                n
            )));
        }
        let (s, v) = {
            let sl = self.tape.node(self.id);
            if sl.shape.len() != 1 {
                return Err(Error::dim("slopes must be a vector"));
            }
            let h = sl.value.len();
            let mut v = Vec::with_capacity(h * n * n);
            for &m in &sl.value {
                v.extend(dist.iter().map(|&d| -(m * d)));
            }
            (vec![h, n, n], v)
        };
        Ok(self.unary(s, v, Op::HeadBias { slopes: self.id, dist: dist.to_vec() }))
    }

    /// Rotates adjacent channel pairs of every `[.., tokens, dh]` row by the
    /// per-token angles encoded in `cos`/`sin` (`[tokens, dh/2]`).
    pub fn rope(&self, cos: &[T], sin: &[T]) -> Result<Var<'t, T>> {
        let (s, v, tokens) = {
            let n = self.tape.node(self.id);
            if n.shape.len() < 2 {
                return Err(Error::dim("rope input needs rank >= 2"));
            }
            let dh = n.shape[n.shape.len() - 1];
            let tokens = n.shape[n.shape.len() - 2];
            if dh % 2 != 0 || cos.len() != tokens * dh / 2 || sin.len() != cos.len() {
                return Err(Error::dim(format!(
                    "rope tables do not match input shape {:?}",
                    n.shape
                )));
            }
            let half = dh / 2;
            let mut out = n.value.clone();
            for (row_idx, row) in out.chunks_mut(dh).enumerate() {
                let t = row_idx % tokens;
                for p in 0..half {
                    let (c, sn) = (cos[t * half + p], sin[t * half + p]);
                    let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                    row[2 * p] = x0 * c - x1 * sn;
                    row[2 * p + 1] = x0 * sn + x1 * c;
                }
            }
            (n.shape.clone(), out, tokens)
        };
        Ok(self.unary(
            s,
            v,
            Op::Rope {
                x: self.id,
                cos: cos.to_vec(),
                sin: sin.to_vec(),
                tokens,
            },
        ))
    }
}

pub(crate) fn cosine<T: Float>(x: &[T], y: &[T], eps: T) -> T {
    let na = kernels::dot(x, x).sqrt();
    let nb = kernels::dot(y, y).sqrt();
    kernels::dot(x, y) / (na * nb + eps)
}
